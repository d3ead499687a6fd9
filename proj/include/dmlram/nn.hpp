#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dmlram/rng.hpp"
#include "dmlram/tensor.hpp"

namespace dml {

enum class LayerKind { conv2d, dense, relu, flatten, reshape, sigmoid };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    // conv2d
    std::size_t out_channels = 0;
    std::size_t kernel_h = 0;
    std::size_t kernel_w = 0;
    std::size_t stride = 1;
    std::size_t pad = 0;
    // dense
    std::size_t units = 0;
    // reshape
    Shape target;

    static LayerSpec conv2d(std::size_t out_channels, std::size_t kernel_h, std::size_t kernel_w,
                            std::size_t stride = 1, std::size_t pad = 0);
    static LayerSpec dense(std::size_t units);
    static LayerSpec relu() { return of(LayerKind::relu); }
    static LayerSpec flatten() { return of(LayerKind::flatten); }
    static LayerSpec sigmoid() { return of(LayerKind::sigmoid); }
    static LayerSpec reshape(Shape target);
    static LayerSpec of(LayerKind kind) {
        LayerSpec s;
        s.kind = kind;
        return s;
    }

    bool has_parameters() const { return kind == LayerKind::conv2d || kind == LayerKind::dense; }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Output extent of a strided, zero-padded window; throws ConfigError when the
// window does not tile the padded input.
std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t pad);

// ---- raw kernels ---------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                              const BasicTensor<T>& bias, std::size_t stride, std::size_t pad);

template <typename T>
struct Conv2dGrads {
    BasicTensor<T> input;
    BasicTensor<T> kernel;
    BasicTensor<T> bias;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                               const BasicTensor<T>& upstream, std::size_t stride, std::size_t pad,
                               bool input_gradient = true);

template <typename T>
struct LossResult {
    double loss = 0.0;
    BasicTensor<T> gradient;
};

// Mean of squared differences and its gradient 2(pred - target)/N.
template <typename T>
LossResult<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target);

// ---- networks --------------------------------------------------------------

template <typename T>
struct ForwardCache {
    std::uint64_t network_id = 0;
    std::uint64_t version = 0;
    // activations[i] is the input of layer i; the last entry is the output.
    std::vector<BasicTensor<T>> activations;

    const BasicTensor<T>& output() const { return activations.back(); }
};

template <typename T>
struct NetworkGradients {
    std::vector<BasicTensor<T>> parameters;
    BasicTensor<T> input;
};

// A sequential chain of layers with its parameters. Shapes are resolved at
// construction, so a successfully constructed network is shape-consistent.
template <typename T>
class BasicNetwork {
public:
    BasicNetwork() = default;
    BasicNetwork(Shape input_shape, std::vector<LayerSpec> layers);

    // He-style normal init for conv/dense weights, zero biases.
    void initialize(Rng& rng);

    const Shape& input_shape() const { return input_shape_; }
    const Shape& output_shape() const { return shapes_.back(); }
    const Shape& layer_input_shape(std::size_t layer) const { return shapes_.at(layer); }
    const std::vector<LayerSpec>& layers() const { return layers_; }

    std::span<const BasicTensor<T>> parameters() const { return params_; }
    // Any mutable access invalidates outstanding forward caches.
    std::span<BasicTensor<T>> mutable_parameters() {
        ++version_;
        return params_;
    }
    std::size_t parameter_count() const;

    // First parameter slot of a layer (weight, then bias).
    std::size_t parameter_offset(std::size_t layer) const { return param_offset_.at(layer); }

    std::uint64_t id() const { return id_; }
    std::uint64_t version() const { return version_; }

    BasicTensor<T> forward(const BasicTensor<T>& input) const;
    BasicTensor<T> forward(const BasicTensor<T>& input, ForwardCache<T>& cache) const;

    // With input_gradient false the first layer skips its input gradient and
    // the returned `input` tensor is empty.
    NetworkGradients<T> backward(const ForwardCache<T>& cache, const BasicTensor<T>& upstream,
                                 bool input_gradient = true) const;
    // Adds parameter gradients into `grads` (shaped like parameters()) and
    // returns the input gradient (empty when input_gradient is false).
    BasicTensor<T> backward_add(const ForwardCache<T>& cache, const BasicTensor<T>& upstream,
                                std::vector<BasicTensor<T>>& grads, bool input_gradient = true) const;

    template <typename U>
    BasicNetwork<U> cast() const {
        BasicNetwork<U> out(input_shape_, layers_);
        auto dst = out.mutable_parameters();
        for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = params_[i].template cast<U>();
        return out;
    }

private:
    Shape input_shape_;
    std::vector<LayerSpec> layers_;
    std::vector<Shape> shapes_;  // shapes_[i] = input of layer i, back() = output
    std::vector<BasicTensor<T>> params_;
    std::vector<std::size_t> param_offset_;
    std::uint64_t id_ = 0;
    std::uint64_t version_ = 0;
};

using Network = BasicNetwork<float>;
using NetworkD = BasicNetwork<double>;

// ---- optimisation ----------------------------------------------------------

enum class OptimizerKind { sgd, sgd_momentum };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd_momentum;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 0.0;

    void validate() const;
};

// Plain SGD:   p <- p - lr * (g + wd * p)
// Momentum:    v <- mu * v + (g + wd * p);  p <- p - lr * v
class Optimizer {
public:
    Optimizer() = default;
    explicit Optimizer(OptimizerConfig config);

    const OptimizerConfig& config() const { return config_; }
    std::span<const Tensor> velocity() const { return velocity_; }

    // Throws NumericError, leaving params untouched, if any gradient is non-finite.
    void step(std::span<Tensor> params, std::span<const Tensor> grads);
    void step(Network& network, std::span<const Tensor> grads) { step(network.mutable_parameters(), grads); }

private:
    OptimizerConfig config_;
    std::vector<Tensor> velocity_;
};

// grads += other, element-wise per tensor.
template <typename T>
void accumulate(std::vector<BasicTensor<T>>& into, const std::vector<BasicTensor<T>>& other);
template <typename T>
void scale(std::vector<BasicTensor<T>>& grads, T factor);
template <typename T>
std::vector<BasicTensor<T>> zeros_like(std::span<const BasicTensor<T>> params);

}  // namespace dml
