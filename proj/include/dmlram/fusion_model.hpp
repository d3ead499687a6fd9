#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dmlram/binary_io.hpp"
#include "dmlram/dataset.hpp"
#include "dmlram/nn.hpp"
#include "dmlram/state_model.hpp"
#include "dmlram/training.hpp"
#include "dmlram/visual_model.hpp"

namespace dml {

enum class HeadKind { conv, mlp };
std::string to_string(HeadKind kind);
HeadKind head_kind_from_string(const std::string& name);

// Which upstream outputs reach the head. The single-modality settings are the
// ablation baselines.
enum class Modality { both, visual_only, state_only };
std::string to_string(Modality modality);
Modality modality_from_string(const std::string& name);

struct FusionConfig {
    HeadKind head = HeadKind::conv;
    Modality modality = Modality::both;
    std::size_t conv1_channels = 8;
    std::size_t conv2_channels = 8;
    std::size_t hidden = 64;
    TrainLoopConfig train{30, 10, 32, {OptimizerKind::sgd_momentum, 0.03, 0.9, 1e-5}, 7};

    void validate() const;
};

// Outputs of the frozen upstream models for one sample. `frame` feeds the
// conv head, `features` (bottleneck or file-backed vector) the mlp head, and
// `state` is Model 2's normalised next-state prediction.
struct FusionInput {
    Tensor frame;
    std::vector<float> features;
    std::vector<float> state;
};

// Late-fusion concatenation: visual part first, state part second.
std::vector<float> fuse_vectors(std::span<const float> visual, std::span<const float> state);

// Fused forward pass shared by training (float) and the gradient checks
// (double). With a trunk, the frame goes through it and its flattened output
// is the visual part; otherwise `visual` is used as given. Either part may be
// empty for the single-modality heads.
template <typename T>
BasicTensor<T> fusion_forward(const BasicNetwork<T>* trunk, const BasicNetwork<T>& head, const BasicTensor<T>& frame,
                              std::span<const T> visual, std::span<const T> state,
                              ForwardCache<T>* trunk_cache = nullptr, ForwardCache<T>* head_cache = nullptr) {
    std::vector<T> fused;
    if (trunk) {
        BasicTensor<T> t = trunk_cache ? trunk->forward(frame, *trunk_cache) : trunk->forward(frame);
        fused.assign(t.data().begin(), t.data().end());
    } else {
        fused.assign(visual.begin(), visual.end());
    }
    fused.insert(fused.end(), state.begin(), state.end());
    const std::size_t n = fused.size();
    BasicTensor<T> x({n}, std::move(fused));
    return head_cache ? head.forward(x, *head_cache) : head.forward(x);
}

// MSE against `target`; parameter gradients are added to trunk_grads (when a
// trunk is present) and head_grads. Returns the loss.
template <typename T>
double fusion_loss_and_grad(const BasicNetwork<T>* trunk, const BasicNetwork<T>& head, const BasicTensor<T>& frame,
                            std::span<const T> visual, std::span<const T> state, const BasicTensor<T>& target,
                            std::vector<BasicTensor<T>>* trunk_grads, std::vector<BasicTensor<T>>& head_grads) {
    ForwardCache<T> tc, hc;
    BasicTensor<T> y = fusion_forward(trunk, head, frame, visual, state, trunk ? &tc : nullptr, &hc);
    auto loss = mse_loss(y, target);
    BasicTensor<T> gx = head.backward_add(hc, loss.gradient, head_grads, trunk != nullptr);
    if (trunk) {
        const std::size_t tw = trunk->output_shape()[0];
        BasicTensor<T> gt({tw}, std::vector<T>(gx.data().begin(), gx.data().begin() + static_cast<std::ptrdiff_t>(tw)));
        trunk->backward_add(tc, gt, *trunk_grads, false);
    }
    return loss.loss;
}

// Shapes the head is built for. frame_shape is used by the conv head,
// feature_dim by the mlp head.
struct FusionDims {
    Shape frame_shape;
    std::size_t feature_dim = 0;
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;

    friend bool operator==(const FusionDims&, const FusionDims&) = default;
};

// Model 3. Conv head: frame -> conv 4x4/2 -> relu -> conv 4x4/2 -> relu ->
// flatten, then [trunk ‖ state] -> dense(hidden) -> relu -> dense(A).
// Mlp head: [features ‖ state] -> dense(hidden) -> relu -> dense(A).
class FusionModel {
public:
    FusionModel() = default;
    FusionModel(FusionConfig config, FusionDims dims);  // freshly initialised

    const FusionConfig& config() const { return config_; }
    const FusionDims& dims() const { return dims_; }
    bool uses_visual() const { return config_.modality != Modality::state_only; }
    bool uses_state() const { return config_.modality != Modality::visual_only; }
    bool has_trunk() const { return config_.head == HeadKind::conv && uses_visual(); }

    // Length of the vector entering the dense layers.
    std::size_t fused_width() const;
    // The vector entering the dense layers for this input.
    std::vector<float> fused(const FusionInput& in) const;
    // Normalised action prediction.
    std::vector<float> predict(const FusionInput& in) const;

    // Per-sample MSE against a normalised target; gradients are added to
    // grads[0] (trunk, empty without one) and grads[1] (dense head).
    double loss_and_grad(const FusionInput& in, std::span<const float> target,
                         std::vector<std::vector<Tensor>>& grads) const;

    Network& trunk() { return trunk_; }
    Network& head() { return head_; }
    const Network& trunk() const { return trunk_; }
    const Network& head() const { return head_; }
    // Networks that carry trainable parameters, in checkpoint order.
    std::vector<Network*> networks();

    Checkpoint to_checkpoint() const;
    static FusionModel from_checkpoint(const Checkpoint& ckpt);

private:
    void check_input(const FusionInput& in) const;
    std::span<const float> visual_part(const FusionInput& in) const;
    std::span<const float> state_part(const FusionInput& in) const;

    FusionConfig config_;
    FusionDims dims_;
    Network trunk_;
    Network head_;
};

struct FusionTrainResult {
    FusionModel model;
    TrainLoopResult history;
};

// Trains a head on precomputed upstream outputs and normalised action targets.
FusionTrainResult train_fusion(const FusionConfig& config, const FusionDims& dims,
                               std::span<const FusionInput> train_in, std::span<const std::vector<float>> train_y,
                               std::span<const FusionInput> val_in, std::span<const std::vector<float>> val_y);

// ---- pipeline ------------------------------------------------------------------

// Checksum of a checkpoint's encoded bytes.
std::uint64_t checkpoint_checksum(const Checkpoint& ckpt);

// Frozen Model 1 + Model 2 + fusion head + normaliser. With a file-backed
// feature source the mlp head reads features by sample key instead of from
// the visual encoder.
class Pipeline {
public:
    Pipeline(std::shared_ptr<const VisualModel> visual, std::shared_ptr<const StateModel> state, FusionModel fusion,
             Normalizer normalizer, std::shared_ptr<const FileFeatureSource> features = nullptr);

    const VisualModel& visual() const { return *visual_; }
    const StateModel& state() const { return *state_; }
    const FusionModel& fusion() const { return fusion_; }
    const Normalizer& normalizer() const { return normalizer_; }
    const FileFeatureSource* feature_file() const { return features_.get(); }

    // Upstream outputs for one window. `key` is needed only with a feature file.
    FusionInput upstream(const Tensor& stacked_window, const RobotState& current, const std::string& key = {}) const;
    FusionInput upstream(const Sample& sample) const;

    std::vector<float> predict_normalized(const Sample& sample) const;
    // Denormalised action for a raw window and state.
    ActionVector predict_action(std::span<const ImageFrame> past_images, const RobotState& current) const;

private:
    std::shared_ptr<const VisualModel> visual_;
    std::shared_ptr<const StateModel> state_;
    FusionModel fusion_;
    Normalizer normalizer_;
    std::shared_ptr<const FileFeatureSource> features_;
};

// Computes the upstream outputs for every sample (in parallel, order kept).
std::vector<FusionInput> upstream_inputs(const VisualModel& visual, const StateModel& state,
                                         const Normalizer& normalizer, const FileFeatureSource* features,
                                         HeadKind head, std::span<const Sample> samples);
std::vector<std::vector<float>> normalized_actions(const Normalizer& normalizer, std::span<const Sample> samples);

FusionDims fusion_dims(const VisualModel& visual, const StateModel& state, const Normalizer& normalizer,
                       const FileFeatureSource* features);

// Bundle manifest written next to the three checkpoints:
// {version, visual_id, visual_ckpt, state_id, state_ckpt, fusion_ckpt,
//  normalizer, dataset_hash, head_kind, seeds, features_file?}
struct PipelineBundle {
    int version = 1;
    std::string visual_id;
    std::string visual_ckpt = "visual.dmlw";
    std::string state_id;
    std::string state_ckpt = "state.dmlw";
    std::string fusion_ckpt = "fusion.dmlw";
    std::string normalizer_json;
    std::string dataset_hash;
    std::string head_kind;
    std::string seeds_json;  // JSON object
    std::string features_file;

    std::string to_json() const;
    static PipelineBundle from_json(const std::string& text);
};

// Writes the checkpoints and bundle.json into `dir`; returns the bundle path.
std::filesystem::path save_pipeline(const std::filesystem::path& dir, const Pipeline& pipeline,
                                    const std::string& dataset_hash, const std::string& seeds_json);
Pipeline load_pipeline(const std::filesystem::path& bundle_path, PipelineBundle* bundle_out = nullptr);

}  // namespace dml
