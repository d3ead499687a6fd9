#include "dmlram/nn.hpp"

#include <atomic>
#include <cmath>

namespace dml {

namespace {

std::atomic<std::uint64_t> next_network_id{1};

template <typename T>
T sigmoid(T x) {
    if (x >= T(0)) {
        T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}

std::string layer_label(std::size_t index, const LayerSpec& spec) {
    return "layer " + std::to_string(index) + " (" + to_string(spec.kind) + ")";
}

}  // namespace

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::dense: return "dense";
        case LayerKind::relu: return "relu";
        case LayerKind::flatten: return "flatten";
        case LayerKind::reshape: return "reshape";
        case LayerKind::sigmoid: return "sigmoid";
    }
    return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
    for (LayerKind k : {LayerKind::conv2d, LayerKind::dense, LayerKind::relu, LayerKind::flatten,
                        LayerKind::reshape, LayerKind::sigmoid})
        if (to_string(k) == name) return k;
    throw ConfigError("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::conv2d(std::size_t out_channels, std::size_t kernel_h, std::size_t kernel_w,
                            std::size_t stride, std::size_t pad) {
    LayerSpec s = of(LayerKind::conv2d);
    s.out_channels = out_channels;
    s.kernel_h = kernel_h;
    s.kernel_w = kernel_w;
    s.stride = stride;
    s.pad = pad;
    return s;
}

LayerSpec LayerSpec::dense(std::size_t units) {
    LayerSpec s = of(LayerKind::dense);
    s.units = units;
    return s;
}

LayerSpec LayerSpec::reshape(Shape target) {
    LayerSpec s = of(LayerKind::reshape);
    s.target = std::move(target);
    return s;
}

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t pad) {
    if (stride == 0) throw ConfigError("conv2d stride must be >= 1");
    if (kernel == 0) throw ConfigError("conv2d kernel extent must be >= 1");
    const std::size_t padded = input + 2 * pad;
    if (kernel > padded)
        throw ConfigError("conv2d kernel extent " + std::to_string(kernel) + " exceeds padded input extent " +
                          std::to_string(padded));
    if ((padded - kernel) % stride != 0)
        throw ConfigError("conv2d output extent (" + std::to_string(padded) + " - " + std::to_string(kernel) +
                          ")/" + std::to_string(stride) + " + 1 is not an integer");
    return (padded - kernel) / stride + 1;
}

// ---- conv2d ------------------------------------------------------------------

namespace {

// Eight independent partial sums let the compiler vectorise the reduction
// while keeping a fixed summation order.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
    T lanes[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t j = 0; j < 8; ++j) lanes[j] += a[i + j] * b[i + j];
    T tail = 0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

struct ConvGeometry {
    std::size_t cin, h, w, cout, kh, kw, oh, ow, stride, pad;
    std::size_t positions() const { return oh * ow; }
    std::size_t taps() const { return cin * kh * kw; }
};

// Unfolds the padded input into a [taps, positions] matrix.
template <typename T>
void im2col(const T* in, const ConvGeometry& g, std::vector<T>& cols) {
    const std::size_t P = g.positions();
    cols.assign(g.taps() * P, T(0));
    std::size_t r = 0;
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx, ++r) {
                T* row = cols.data() + r * P;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    const T* irow = in + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w))
                            row[oy * g.ow + ox] = irow[static_cast<std::size_t>(ix)];
                    }
                }
            }
}

template <typename T>
void col2im_add(const std::vector<T>& cols, const ConvGeometry& g, T* in) {
    const std::size_t P = g.positions();
    std::size_t r = 0;
    for (std::size_t ci = 0; ci < g.cin; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx, ++r) {
                const T* row = cols.data() + r * P;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    T* irow = in + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w))
                            irow[static_cast<std::size_t>(ix)] += row[oy * g.ow + ox];
                    }
                }
            }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                              const BasicTensor<T>& bias, std::size_t stride, std::size_t pad) {
    if (input.rank() != 3) throw DimensionError("conv2d input must be [C,H,W], got " + shape_string(input.shape()));
    if (kernel.rank() != 4)
        throw DimensionError("conv2d kernel must be [Cout,Cin,kH,kW], got " + shape_string(kernel.shape()));
    const std::size_t cin = input.extent(0), h = input.extent(1), w = input.extent(2);
    const std::size_t cout = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
    if (kernel.extent(1) != cin)
        throw DimensionError("conv2d kernel expects " + std::to_string(kernel.extent(1)) +
                             " input channels, input has " + std::to_string(cin));
    if (bias.size() != cout)
        throw DimensionError("conv2d bias has " + std::to_string(bias.size()) + " entries, expected " +
                             std::to_string(cout));
    const ConvGeometry g{cin, h, w, cout, kh, kw, conv_output_extent(h, kh, stride, pad),
                         conv_output_extent(w, kw, stride, pad), stride, pad};
    const std::size_t P = g.positions(), R = g.taps();

    std::vector<T> cols;
    im2col(input.data().data(), g, cols);
    BasicTensor<T> out({cout, g.oh, g.ow});
    const T* k = kernel.data().data();
    T* o = out.data().data();
    for (std::size_t co = 0; co < cout; ++co) {
        T* oplane = o + co * P;
        std::fill(oplane, oplane + P, bias[co]);
        for (std::size_t r = 0; r < R; ++r) axpy(k[co * R + r], cols.data() + r * P, oplane, P);
    }
    return out;
}

namespace {

// Adds the kernel, bias and (when gin is non-null) input gradients of one
// convolution into the given buffers.
template <typename T>
void conv2d_backward_add(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& upstream,
                         std::size_t stride, std::size_t pad, T* gk, T* gb, T* gin) {
    const std::size_t cin = input.extent(0), h = input.extent(1), w = input.extent(2);
    const std::size_t cout = kernel.extent(0), kh = kernel.extent(2), kw = kernel.extent(3);
    const ConvGeometry g{cin, h, w, cout, kh, kw, conv_output_extent(h, kh, stride, pad),
                         conv_output_extent(w, kw, stride, pad), stride, pad};
    if (upstream.shape() != Shape{cout, g.oh, g.ow})
        throw DimensionError("conv2d upstream gradient " + shape_string(upstream.shape()) + " does not match output " +
                             shape_string({cout, g.oh, g.ow}));
    const std::size_t P = g.positions(), R = g.taps();

    std::vector<T> cols;
    im2col(input.data().data(), g, cols);
    const T* k = kernel.data().data();
    const T* up = upstream.data().data();
    for (std::size_t co = 0; co < cout; ++co) {
        const T* uplane = up + co * P;
        T bsum = 0;
        for (std::size_t p = 0; p < P; ++p) bsum += uplane[p];
        gb[co] += bsum;
        for (std::size_t r = 0; r < R; ++r) gk[co * R + r] += dot(uplane, cols.data() + r * P, P);
    }
    if (gin) {
        std::fill(cols.begin(), cols.end(), T(0));
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t r = 0; r < R; ++r) axpy(k[co * R + r], up + co * P, cols.data() + r * P, P);
        col2im_add(cols, g, gin);
    }
}

}  // namespace

template <typename T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                               const BasicTensor<T>& upstream, std::size_t stride, std::size_t pad,
                               bool input_gradient) {
    Conv2dGrads<T> grads{input_gradient ? BasicTensor<T>(input.shape()) : BasicTensor<T>(),
                         BasicTensor<T>(kernel.shape()), BasicTensor<T>({kernel.extent(0)})};
    conv2d_backward_add(input, kernel, upstream, stride, pad, grads.kernel.data().data(), grads.bias.data().data(),
                        input_gradient ? grads.input.data().data() : nullptr);
    return grads;
}

// ---- loss ---------------------------------------------------------------------

template <typename T>
LossResult<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
    if (pred.shape() != target.shape())
        throw DimensionError("mse_loss shape mismatch: prediction " + shape_string(pred.shape()) + " vs target " +
                             shape_string(target.shape()));
    LossResult<T> r{0.0, BasicTensor<T>(pred.shape())};
    const std::size_t n = pred.size();
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
        sum += d * d;
        r.gradient[i] = static_cast<T>(2.0 * d / static_cast<double>(n));
    }
    r.loss = sum / static_cast<double>(n);
    return r;
}

// ---- network -----------------------------------------------------------------

template <typename T>
BasicNetwork<T>::BasicNetwork(Shape input_shape, std::vector<LayerSpec> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), id_(next_network_id++) {
    if (input_shape_.empty()) throw DimensionError("network input shape must have rank >= 1");
    for (std::size_t e : input_shape_)
        if (e == 0) throw DimensionError("network input extents must be positive");
    shapes_.push_back(input_shape_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& L = layers_[i];
        const Shape& in = shapes_.back();
        Shape out;
        param_offset_.push_back(params_.size());
        try {
            switch (L.kind) {
                case LayerKind::conv2d: {
                    if (in.size() != 3)
                        throw DimensionError("expects a [C,H,W] input, got " + shape_string(in));
                    if (L.out_channels == 0) throw ConfigError("conv2d needs out_channels >= 1");
                    const std::size_t oh = conv_output_extent(in[1], L.kernel_h, L.stride, L.pad);
                    const std::size_t ow = conv_output_extent(in[2], L.kernel_w, L.stride, L.pad);
                    out = {L.out_channels, oh, ow};
                    params_.emplace_back(Shape{L.out_channels, in[0], L.kernel_h, L.kernel_w});
                    params_.emplace_back(Shape{L.out_channels});
                    break;
                }
                case LayerKind::dense: {
                    if (in.size() != 1) throw DimensionError("expects a flat input, got " + shape_string(in));
                    if (L.units == 0) throw ConfigError("dense needs units >= 1");
                    out = {L.units};
                    params_.emplace_back(Shape{L.units, in[0]});
                    params_.emplace_back(Shape{L.units});
                    break;
                }
                case LayerKind::relu:
                case LayerKind::sigmoid: out = in; break;
                case LayerKind::flatten: out = {shape_size(in)}; break;
                case LayerKind::reshape:
                    if (L.target.empty() || shape_size(L.target) != shape_size(in))
                        throw DimensionError("cannot reshape " + shape_string(in) + " to " +
                                             shape_string(L.target));
                    out = L.target;
                    break;
            }
        } catch (const ConfigError& e) {
            throw ConfigError(layer_label(i, L) + ": " + e.what());
        } catch (const DimensionError& e) {
            throw DimensionError(layer_label(i, L) + ": " + e.what());
        }
        shapes_.push_back(out);
    }
}

template <typename T>
void BasicNetwork<T>::initialize(Rng& rng) {
    ++version_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (!layers_[i].has_parameters()) continue;
        BasicTensor<T>& wt = params_[param_offset_[i]];
        BasicTensor<T>& b = params_[param_offset_[i] + 1];
        const std::size_t fan_in = wt.size() / wt.extent(0);
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (auto& v : wt.data()) v = static_cast<T>(rng.normal(0.0, sd));
        b.fill(T(0));
    }
}

template <typename T>
std::size_t BasicNetwork<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
}

template <typename T>
BasicTensor<T> BasicNetwork<T>::forward(const BasicTensor<T>& input) const {
    ForwardCache<T> cache;
    forward(input, cache);
    return std::move(cache.activations.back());
}

template <typename T>
BasicTensor<T> BasicNetwork<T>::forward(const BasicTensor<T>& input, ForwardCache<T>& cache) const {
    if (input.shape() != input_shape_)
        throw DimensionError("network input " + shape_string(input.shape()) + " does not match declared " +
                             shape_string(input_shape_));
    cache.network_id = id_;
    cache.version = version_;
    cache.activations.clear();
    cache.activations.reserve(layers_.size() + 1);
    cache.activations.push_back(input);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& L = layers_[i];
        const BasicTensor<T>& x = cache.activations.back();
        BasicTensor<T> y;
        switch (L.kind) {
            case LayerKind::conv2d:
                y = conv2d_forward(x, params_[param_offset_[i]], params_[param_offset_[i] + 1], L.stride, L.pad);
                break;
            case LayerKind::dense: {
                const BasicTensor<T>& W = params_[param_offset_[i]];
                const BasicTensor<T>& b = params_[param_offset_[i] + 1];
                const std::size_t nin = x.size();
                y = BasicTensor<T>({L.units});
                for (std::size_t u = 0; u < L.units; ++u) {
                    y[u] = dot(W.data().data() + u * nin, x.data().data(), nin) + b[u];
                }
                break;
            }
            case LayerKind::relu:
                y = x;
                for (auto& v : y.data()) v = v > T(0) ? v : T(0);
                break;
            case LayerKind::sigmoid:
                y = x;
                for (auto& v : y.data()) v = sigmoid(v);
                break;
            case LayerKind::flatten:
            case LayerKind::reshape: y = x.reshaped(shapes_[i + 1]); break;
        }
        cache.activations.push_back(std::move(y));
    }
    return cache.activations.back();
}

template <typename T>
NetworkGradients<T> BasicNetwork<T>::backward(const ForwardCache<T>& cache, const BasicTensor<T>& upstream,
                                              bool input_gradient) const {
    NetworkGradients<T> g;
    g.parameters = zeros_like<T>(params_);
    g.input = backward_add(cache, upstream, g.parameters, input_gradient);
    return g;
}

template <typename T>
BasicTensor<T> BasicNetwork<T>::backward_add(const ForwardCache<T>& cache, const BasicTensor<T>& upstream,
                                             std::vector<BasicTensor<T>>& grads, bool input_gradient) const {
    if (cache.network_id != id_ || cache.activations.size() != layers_.size() + 1)
        throw Error("backward: forward cache was produced by a different network");
    if (cache.version != version_)
        throw Error("backward: forward cache is stale (parameters changed since forward)");
    if (upstream.shape() != shapes_.back())
        throw DimensionError("backward: upstream gradient " + shape_string(upstream.shape()) +
                             " does not match network output " + shape_string(shapes_.back()));
    if (grads.size() != params_.size())
        throw DimensionError("backward: gradient buffer holds " + std::to_string(grads.size()) + " tensors, expected " +
                             std::to_string(params_.size()));
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (grads[i].shape() != params_[i].shape())
            throw DimensionError("backward: gradient buffer " + std::to_string(i) + " has the wrong shape");

    BasicTensor<T> grad = upstream;
    for (std::size_t ii = layers_.size(); ii-- > 0;) {
        const LayerSpec& L = layers_[ii];
        const BasicTensor<T>& x = cache.activations[ii];
        const bool need_input = input_gradient || ii > 0;
        switch (L.kind) {
            case LayerKind::conv2d: {
                BasicTensor<T> gx = need_input ? BasicTensor<T>(x.shape()) : BasicTensor<T>();
                conv2d_backward_add(x, params_[param_offset_[ii]], grad, L.stride, L.pad,
                                    grads[param_offset_[ii]].data().data(),
                                    grads[param_offset_[ii] + 1].data().data(),
                                    need_input ? gx.data().data() : nullptr);
                grad = std::move(gx);
                break;
            }
            case LayerKind::dense: {
                const BasicTensor<T>& W = params_[param_offset_[ii]];
                const std::size_t nin = x.size();
                T* gW = grads[param_offset_[ii]].data().data();
                T* gb = grads[param_offset_[ii] + 1].data().data();
                BasicTensor<T> gx = need_input ? BasicTensor<T>({nin}) : BasicTensor<T>();
                for (std::size_t u = 0; u < L.units; ++u) {
                    const T gu = grad[u];
                    gb[u] += gu;
                    axpy(gu, x.data().data(), gW + u * nin, nin);
                    if (need_input) axpy(gu, W.data().data() + u * nin, gx.data().data(), nin);
                }
                grad = std::move(gx);
                break;
            }
            case LayerKind::relu:
                for (std::size_t j = 0; j < grad.size(); ++j)
                    if (!(x[j] > T(0))) grad[j] = T(0);
                break;
            case LayerKind::sigmoid: {
                const BasicTensor<T>& y = cache.activations[ii + 1];
                for (std::size_t j = 0; j < grad.size(); ++j) grad[j] *= y[j] * (T(1) - y[j]);
                break;
            }
            case LayerKind::flatten:
            case LayerKind::reshape: grad.reshape(shapes_[ii]); break;
        }
        if (ii == 0 && !need_input) grad = BasicTensor<T>();
    }
    return grad;
}

// ---- optimiser -------------------------------------------------------------------

void OptimizerConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("learning rate must be a finite value >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight decay must be >= 0");
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) { config_.validate(); }

void Optimizer::step(std::span<Tensor> params, std::span<const Tensor> grads) {
    if (params.size() != grads.size())
        throw DimensionError("optimizer: " + std::to_string(params.size()) + " parameters but " +
                             std::to_string(grads.size()) + " gradients");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape())
            throw DimensionError("optimizer: parameter " + std::to_string(i) + " is " +
                                 shape_string(params[i].shape()) + " but gradient is " +
                                 shape_string(grads[i].shape()));
        if (!grads[i].all_finite())
            throw NumericError("optimizer: non-finite gradient in parameter " + std::to_string(i));
    }
    const bool use_momentum = config_.kind == OptimizerKind::sgd_momentum;
    if (use_momentum) {
        if (velocity_.empty()) {
            for (const auto& p : params) velocity_.emplace_back(p.shape());
        } else {
            if (velocity_.size() != params.size())
                throw DimensionError("optimizer: velocity buffers do not match parameter list");
            for (std::size_t i = 0; i < params.size(); ++i)
                if (velocity_[i].shape() != params[i].shape())
                    throw DimensionError("optimizer: velocity buffer " + std::to_string(i) +
                                         " is not shape-congruent with its parameter");
        }
    }
    const float lr = static_cast<float>(config_.learning_rate);
    const float wd = static_cast<float>(config_.weight_decay);
    const float mu = static_cast<float>(config_.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].data();
        auto g = grads[i].data();
        if (use_momentum) {
            auto v = velocity_[i].data();
            for (std::size_t j = 0; j < p.size(); ++j) {
                v[j] = mu * v[j] + (g[j] + wd * p[j]);
                p[j] -= lr * v[j];
            }
        } else {
            for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * (g[j] + wd * p[j]);
        }
    }
}

template <typename T>
void accumulate(std::vector<BasicTensor<T>>& into, const std::vector<BasicTensor<T>>& other) {
    if (into.size() != other.size()) throw DimensionError("accumulate: gradient list length mismatch");
    for (std::size_t i = 0; i < into.size(); ++i) {
        if (into[i].shape() != other[i].shape()) throw DimensionError("accumulate: gradient shape mismatch");
        auto a = into[i].data();
        auto b = other[i].data();
        for (std::size_t j = 0; j < a.size(); ++j) a[j] += b[j];
    }
}

template <typename T>
void scale(std::vector<BasicTensor<T>>& grads, T factor) {
    for (auto& t : grads)
        for (auto& v : t.data()) v *= factor;
}

template <typename T>
std::vector<BasicTensor<T>> zeros_like(std::span<const BasicTensor<T>> params) {
    std::vector<BasicTensor<T>> out;
    out.reserve(params.size());
    for (const auto& p : params) out.emplace_back(p.shape());
    return out;
}

#define DML_INSTANTIATE(T)                                                                                  \
    template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                           std::size_t, std::size_t);                                       \
    template Conv2dGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                            const BasicTensor<T>&, std::size_t, std::size_t, bool);         \
    template LossResult<T> mse_loss(const BasicTensor<T>&, const BasicTensor<T>&);                          \
    template class BasicNetwork<T>;                                                                         \
    template void accumulate(std::vector<BasicTensor<T>>&, const std::vector<BasicTensor<T>>&);             \
    template void scale(std::vector<BasicTensor<T>>&, T);                                                   \
    template std::vector<BasicTensor<T>> zeros_like(std::span<const BasicTensor<T>>);

DML_INSTANTIATE(float)
DML_INSTANTIATE(double)

#undef DML_INSTANTIATE

}  // namespace dml
