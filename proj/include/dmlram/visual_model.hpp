#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dmlram/binary_io.hpp"
#include "dmlram/dataset.hpp"
#include "dmlram/nn.hpp"
#include "dmlram/training.hpp"

namespace dml {

struct VisualConfig {
    std::size_t window_size = kDefaultWindow;
    ImageGeometry geometry{32, 32, 1};
    std::size_t bottleneck = 64;
    std::size_t conv1_channels = 8;
    std::size_t conv2_channels = 16;
    TrainLoopConfig train{12, 10, 32, {OptimizerKind::sgd_momentum, 0.05, 0.9, 1e-5}, 7};

    void validate() const;
};

// Encoder: stacked window [window*c, h, w] -> conv 4x4/2 -> relu -> conv 4x4/2
// -> relu -> flatten -> dense(bottleneck).
std::vector<LayerSpec> visual_encoder_layers(const VisualConfig& config);
// Decoder: bottleneck -> dense(c*h*w) -> relu -> reshape [c,h,w] -> conv 3x3
// -> sigmoid.
std::vector<LayerSpec> visual_decoder_layers(const VisualConfig& config);

// Next-frame MSE of an encoder/decoder pair, adding parameter gradients into
// enc_grads and dec_grads. Shared by training (float) and the gradient checks
// (double).
template <typename T>
double visual_loss_and_grad(const BasicNetwork<T>& enc, const BasicNetwork<T>& dec, const BasicTensor<T>& window,
                            const BasicTensor<T>& next_frame, std::vector<BasicTensor<T>>& enc_grads,
                            std::vector<BasicTensor<T>>& dec_grads) {
    ForwardCache<T> ce, cd;
    BasicTensor<T> z = enc.forward(window, ce);
    BasicTensor<T> y = dec.forward(z, cd);
    auto loss = mse_loss(y, next_frame);
    BasicTensor<T> gz = dec.backward_add(cd, loss.gradient, dec_grads);
    enc.backward_add(ce, gz, enc_grads, false);
    return loss.loss;
}

struct VisualPrediction {
    ImageFrame frame;                // clamped to [0, 1]
    std::vector<float> bottleneck;  // encoder output
};

// Model 1: predicts the next frame of a window and exposes its bottleneck.
class VisualModel {
public:
    VisualModel() = default;
    VisualModel(VisualConfig config, Network encoder, Network decoder);

    // Freshly initialised (untrained) model.
    static VisualModel create(const VisualConfig& config);

    const VisualConfig& config() const { return config_; }
    const Network& encoder() const { return encoder_; }
    const Network& decoder() const { return decoder_; }
    Network& mutable_encoder() { return encoder_; }
    Network& mutable_decoder() { return decoder_; }
    std::size_t bottleneck_dim() const { return config_.bottleneck; }

    VisualPrediction predict(const Tensor& stacked_window) const;
    VisualPrediction predict(std::span<const ImageFrame> past_images) const;
    std::vector<float> encode(const Tensor& stacked_window) const;

    Checkpoint to_checkpoint() const;
    static VisualModel from_checkpoint(const Checkpoint& ckpt);

private:
    void check_window(const Tensor& stacked_window) const;

    VisualConfig config_;
    Network encoder_;
    Network decoder_;
};

// Channel-stacks a window of frames into one [window*c, h, w] tensor.
Tensor stack_frames(std::span<const ImageFrame> frames);

struct VisualTrainResult {
    VisualModel model;
    TrainLoopResult history;
};

// Pixel-MSE training on next-frame targets with early stopping on `val`.
VisualTrainResult train_visual(const VisualConfig& config, std::span<const Sample> train,
                               std::span<const Sample> val);

// Mean per-pixel squared error of the model's next-frame predictions.
double visual_mse(const VisualModel& model, std::span<const Sample> samples);

// Per-pixel mean of the training samples' next frames (the best constant
// predictor under MSE) and its error on `samples`.
Tensor mean_next_frame(std::span<const Sample> train);
double constant_frame_mse(const Tensor& frame, std::span<const Sample> samples);

// ---- feature sources ----------------------------------------------------------

class FeatureSource {
public:
    virtual ~FeatureSource() = default;
    virtual std::size_t dim() const = 0;
    virtual std::vector<float> features(const Sample& sample) const = 0;
    virtual std::string name() const = 0;
};

// Built-in backend: the visual model's bottleneck.
class EncoderFeatureSource final : public FeatureSource {
public:
    explicit EncoderFeatureSource(std::shared_ptr<const VisualModel> model) : model_(std::move(model)) {}
    std::size_t dim() const override { return model_->bottleneck_dim(); }
    std::vector<float> features(const Sample& sample) const override;
    std::string name() const override { return "encoder"; }

private:
    std::shared_ptr<const VisualModel> model_;
};

// Precomputed vectors keyed by Sample::key() ("<trajectory id>:<last step>").
// File layout: "DMLF", u16 version, u32 d, u32 count, then per entry u32 key
// length, key bytes, d float32 values.
class FileFeatureSource final : public FeatureSource {
public:
    FileFeatureSource(std::size_t dim, std::map<std::string, std::vector<float>> entries, std::string origin);
    static FileFeatureSource load(const std::filesystem::path& path);

    std::size_t dim() const override { return dim_; }
    std::vector<float> features(const Sample& sample) const override { return lookup(sample.key()); }
    std::string name() const override { return "file:" + origin_; }
    const std::vector<float>& lookup(const std::string& key) const;
    const std::map<std::string, std::vector<float>>& entries() const { return entries_; }

private:
    std::size_t dim_;
    std::map<std::string, std::vector<float>> entries_;
    std::string origin_;
};

inline constexpr std::uint16_t kFeatureFileVersion = 1;
std::vector<std::uint8_t> encode_feature_file(std::size_t dim, const std::map<std::string, std::vector<float>>& entries);
void write_feature_file(const std::filesystem::path& path, std::size_t dim,
                        const std::map<std::string, std::vector<float>>& entries);

}  // namespace dml
