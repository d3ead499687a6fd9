#include "dmlram/fusion_model.hpp"

#include <algorithm>

#include "json.hpp"

#include "dmlram/parallel.hpp"
#include "dmlram/rng.hpp"

namespace dml {

using json = nlohmann::json;

std::string to_string(HeadKind kind) { return kind == HeadKind::conv ? "conv" : "mlp"; }

HeadKind head_kind_from_string(const std::string& name) {
    if (name == "conv") return HeadKind::conv;
    if (name == "mlp") return HeadKind::mlp;
    throw ConfigError("unknown head kind '" + name + "' (expected conv or mlp)");
}

std::string to_string(Modality m) {
    switch (m) {
        case Modality::both: return "both";
        case Modality::visual_only: return "visual_only";
        case Modality::state_only: return "state_only";
    }
    return "both";
}

Modality modality_from_string(const std::string& name) {
    if (name == "both") return Modality::both;
    if (name == "visual_only") return Modality::visual_only;
    if (name == "state_only") return Modality::state_only;
    throw ConfigError("unknown modality '" + name + "' (expected both, visual_only or state_only)");
}

void FusionConfig::validate() const {
    if (hidden == 0) throw ConfigError("fusion: hidden units must be >= 1");
    if (conv1_channels == 0 || conv2_channels == 0) throw ConfigError("fusion: conv channel counts must be >= 1");
    train.validate();
}

std::vector<float> fuse_vectors(std::span<const float> visual, std::span<const float> state) {
    std::vector<float> out;
    out.reserve(visual.size() + state.size());
    out.insert(out.end(), visual.begin(), visual.end());
    out.insert(out.end(), state.begin(), state.end());
    return out;
}

// ---- FusionModel ---------------------------------------------------------------

FusionModel::FusionModel(FusionConfig config, FusionDims dims) : config_(std::move(config)), dims_(std::move(dims)) {
    config_.validate();
    if (dims_.action_dim == 0) throw ConfigError("fusion: action dimension must be >= 1");
    if (uses_state() && dims_.state_dim == 0) throw ConfigError("fusion: state dimension must be >= 1");
    if (uses_visual() && config_.head == HeadKind::mlp && dims_.feature_dim == 0)
        throw ConfigError("fusion: mlp head needs a feature dimension >= 1");
    Rng rng(Rng::derive(config_.train.seed, 3));
    if (has_trunk()) {
        if (dims_.frame_shape.size() != 3)
            throw DimensionError("fusion: conv head needs a [c, h, w] frame shape, got " +
                                 shape_string(dims_.frame_shape));
        trunk_ = Network(dims_.frame_shape,
                         {LayerSpec::conv2d(config_.conv1_channels, 4, 4, 2, 1), LayerSpec::relu(),
                          LayerSpec::conv2d(config_.conv2_channels, 4, 4, 2, 1), LayerSpec::relu(),
                          LayerSpec::flatten()});
        trunk_.initialize(rng);
    }
    head_ = Network({fused_width()}, {LayerSpec::dense(config_.hidden), LayerSpec::relu(),
                                      LayerSpec::dense(dims_.action_dim)});
    head_.initialize(rng);
}

std::size_t FusionModel::fused_width() const {
    std::size_t w = 0;
    if (uses_visual()) w += has_trunk() ? trunk_.output_shape()[0] : dims_.feature_dim;
    if (uses_state()) w += dims_.state_dim;
    return w;
}

void FusionModel::check_input(const FusionInput& in) const {
    if (has_trunk() && in.frame.shape() != dims_.frame_shape)
        throw DimensionError("fusion: predicted frame " + shape_string(in.frame.shape()) +
                             " does not match the head's frame shape " + shape_string(dims_.frame_shape));
    if (uses_visual() && !has_trunk() && in.features.size() != dims_.feature_dim)
        throw DimensionError("fusion: feature vector has " + std::to_string(in.features.size()) +
                             " values, head expects " + std::to_string(dims_.feature_dim));
    if (uses_state() && in.state.size() != dims_.state_dim)
        throw DimensionError("fusion: state vector has " + std::to_string(in.state.size()) +
                             " values, head expects " + std::to_string(dims_.state_dim));
}

std::span<const float> FusionModel::visual_part(const FusionInput& in) const {
    if (!uses_visual() || has_trunk()) return {};
    return in.features;
}

std::span<const float> FusionModel::state_part(const FusionInput& in) const {
    if (!uses_state()) return {};
    return in.state;
}

std::vector<float> FusionModel::fused(const FusionInput& in) const {
    check_input(in);
    std::vector<float> visual;
    if (has_trunk()) {
        Tensor t = trunk_.forward(in.frame);
        visual.assign(t.data().begin(), t.data().end());
    } else {
        auto v = visual_part(in);
        visual.assign(v.begin(), v.end());
    }
    return fuse_vectors(visual, state_part(in));
}

std::vector<float> FusionModel::predict(const FusionInput& in) const {
    check_input(in);
    Tensor y = fusion_forward<float>(has_trunk() ? &trunk_ : nullptr, head_, in.frame, visual_part(in), state_part(in));
    return {y.data().begin(), y.data().end()};
}

double FusionModel::loss_and_grad(const FusionInput& in, std::span<const float> target,
                                  std::vector<std::vector<Tensor>>& grads) const {
    check_input(in);
    if (target.size() != dims_.action_dim)
        throw DimensionError("fusion: target has " + std::to_string(target.size()) + " values, expected " +
                             std::to_string(dims_.action_dim));
    const Tensor t({target.size()}, std::vector<float>(target.begin(), target.end()));
    return fusion_loss_and_grad<float>(has_trunk() ? &trunk_ : nullptr, head_, in.frame, visual_part(in),
                                       state_part(in), t, &grads[0], grads[1]);
}

std::vector<Network*> FusionModel::networks() { return {&trunk_, &head_}; }

Checkpoint FusionModel::to_checkpoint() const {
    Checkpoint ck;
    if (has_trunk())
        for (const auto& p : trunk_.parameters()) ck.tensors.push_back(p);
    for (const auto& p : head_.parameters()) ck.tensors.push_back(p);
    const auto& t = config_.train;
    json cfg = {{"kind", "fusion"},
                {"head", to_string(config_.head)},
                {"modality", to_string(config_.modality)},
                {"conv1_channels", config_.conv1_channels},
                {"conv2_channels", config_.conv2_channels},
                {"hidden", config_.hidden},
                {"seed", t.seed},
                {"frame_shape", dims_.frame_shape},
                {"feature_dim", dims_.feature_dim},
                {"state_dim", dims_.state_dim},
                {"action_dim", dims_.action_dim}};
    ck.set_text_section("config", cfg.dump());
    return ck;
}

FusionModel FusionModel::from_checkpoint(const Checkpoint& ckpt) {
    FusionConfig c;
    FusionDims d;
    try {
        json cfg = json::parse(ckpt.text_section("config"));
        if (cfg.at("kind").get<std::string>() != "fusion") throw IoError("checkpoint is not a fusion head");
        c.head = head_kind_from_string(cfg.at("head").get<std::string>());
        c.modality = modality_from_string(cfg.at("modality").get<std::string>());
        c.conv1_channels = cfg.at("conv1_channels").get<std::size_t>();
        c.conv2_channels = cfg.at("conv2_channels").get<std::size_t>();
        c.hidden = cfg.at("hidden").get<std::size_t>();
        c.train.seed = cfg.at("seed").get<std::uint64_t>();
        d.frame_shape = cfg.at("frame_shape").get<Shape>();
        d.feature_dim = cfg.at("feature_dim").get<std::size_t>();
        d.state_dim = cfg.at("state_dim").get<std::size_t>();
        d.action_dim = cfg.at("action_dim").get<std::size_t>();
    } catch (const json::exception& e) {
        throw IoError(std::string("fusion checkpoint config: ") + e.what());
    }
    FusionModel m(c, d);
    std::size_t idx = 0;
    for (Network* net : m.networks()) {
        if (net == &m.trunk_ && !m.has_trunk()) continue;
        auto dst = net->mutable_parameters();
        for (auto& p : dst) {
            if (idx >= ckpt.tensors.size()) throw IoError("fusion checkpoint has too few tensors");
            if (ckpt.tensors[idx].shape() != p.shape())
                throw IoError("fusion checkpoint tensor " + std::to_string(idx) + " has shape " +
                              shape_string(ckpt.tensors[idx].shape()) + ", expected " + shape_string(p.shape()));
            p = ckpt.tensors[idx++];
        }
    }
    if (idx != ckpt.tensors.size()) throw IoError("fusion checkpoint has extra tensors");
    return m;
}

FusionTrainResult train_fusion(const FusionConfig& config, const FusionDims& dims,
                               std::span<const FusionInput> train_in, std::span<const std::vector<float>> train_y,
                               std::span<const FusionInput> val_in, std::span<const std::vector<float>> val_y) {
    if (train_in.size() != train_y.size() || val_in.size() != val_y.size())
        throw DimensionError("fusion: inputs and targets differ in count");
    FusionModel model(config, dims);
    std::vector<Network*> nets = model.networks();
    auto grad = [&](std::size_t i, std::vector<std::vector<Tensor>>& acc) {
        return model.loss_and_grad(train_in[i], train_y[i], acc);
    };
    auto vloss = [&](std::size_t i) {
        auto p = model.predict(val_in[i]);
        double s = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double d = static_cast<double>(p[k]) - static_cast<double>(val_y[i][k]);
            s += d * d;
        }
        return s / static_cast<double>(p.size());
    };
    auto history = run_train_loop(config.train, nets, train_in.size(), val_in.size(), grad, vloss,
                                  "fusion head (" + to_string(config.head) + ", " + to_string(config.modality) + ")");
    return {std::move(model), std::move(history)};
}

// ---- pipeline --------------------------------------------------------------------

std::uint64_t checkpoint_checksum(const Checkpoint& ckpt) { return fnv1a64(encode_checkpoint(ckpt)); }

Pipeline::Pipeline(std::shared_ptr<const VisualModel> visual, std::shared_ptr<const StateModel> state,
                   FusionModel fusion, Normalizer normalizer, std::shared_ptr<const FileFeatureSource> features)
    : visual_(std::move(visual)), state_(std::move(state)), fusion_(std::move(fusion)),
      normalizer_(std::move(normalizer)), features_(std::move(features)) {
    if (!visual_) throw ConfigError("pipeline: missing visual model");
    if (!state_) throw ConfigError("pipeline: missing state model");
    if (fusion_dims(*visual_, *state_, normalizer_, features_.get()) != fusion_.dims())
        throw DimensionError("pipeline: fusion head dimensions do not match the upstream models");
}

FusionDims fusion_dims(const VisualModel& visual, const StateModel& state, const Normalizer& normalizer,
                       const FileFeatureSource* features) {
    if (state.n_features() != normalizer.state_dim())
        throw DimensionError("state model expects " + std::to_string(state.n_features()) +
                             " features but the normaliser has " + std::to_string(normalizer.state_dim()));
    return {visual.config().geometry.shape(), features ? features->dim() : visual.bottleneck_dim(),
            state.n_targets(), normalizer.action_dim()};
}

FusionInput Pipeline::upstream(const Tensor& stacked_window, const RobotState& current, const std::string& key) const {
    FusionInput in;
    const FusionModel& f = fusion_;
    if (f.uses_visual()) {
        if (f.config().head == HeadKind::conv) {
            in.frame = visual_->predict(stacked_window).frame.pixels;
        } else if (features_) {
            if (key.empty()) throw ConfigError("pipeline: file-backed features need a sample key");
            in.features = features_->lookup(key);
        } else {
            in.features = visual_->encode(stacked_window);
        }
    }
    if (f.uses_state()) in.state = state_->predict(normalizer_.apply_state(current.to_vector()));
    return in;
}

FusionInput Pipeline::upstream(const Sample& sample) const {
    return upstream(sample.stacked_window(), sample.current_state(), sample.key());
}

std::vector<float> Pipeline::predict_normalized(const Sample& sample) const { return fusion_.predict(upstream(sample)); }

ActionVector Pipeline::predict_action(std::span<const ImageFrame> past_images, const RobotState& current) const {
    if (past_images.size() != visual_->config().window_size)
        throw DimensionError("pipeline: expected " + std::to_string(visual_->config().window_size) +
                             " past frames, got " + std::to_string(past_images.size()));
    if (state_dimension(current.joint_count()) != normalizer_.state_dim())
        throw DimensionError("pipeline: state has " + std::to_string(state_dimension(current.joint_count())) +
                             " components, expected " + std::to_string(normalizer_.state_dim()));
    auto y = fusion_.predict(upstream(stack_frames(past_images), current));
    return ActionVector{normalizer_.invert_action(y)};
}

std::vector<FusionInput> upstream_inputs(const VisualModel& visual, const StateModel& state,
                                         const Normalizer& normalizer, const FileFeatureSource* features,
                                         HeadKind head, std::span<const Sample> samples) {
    std::vector<FusionInput> out(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        const Sample& s = samples[i];
        FusionInput& in = out[i];
        if (head == HeadKind::conv) {
            in.frame = visual.predict(s.stacked_window()).frame.pixels;
        } else {
            in.features = features ? features->lookup(s.key()) : visual.encode(s.stacked_window());
        }
        in.state = state.predict(normalizer.apply_state(s.current_state().to_vector()));
    });
    return out;
}

std::vector<std::vector<float>> normalized_actions(const Normalizer& normalizer, std::span<const Sample> samples) {
    std::vector<std::vector<float>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(normalizer.apply_action(s.target_action().values));
    return out;
}

// ---- bundle ------------------------------------------------------------------------

std::string PipelineBundle::to_json() const {
    json j = {{"version", version},
              {"visual_id", visual_id},
              {"visual_ckpt", visual_ckpt},
              {"state_id", state_id},
              {"state_ckpt", state_ckpt},
              {"fusion_ckpt", fusion_ckpt},
              {"normalizer", json::parse(normalizer_json)},
              {"dataset_hash", dataset_hash},
              {"head_kind", head_kind},
              {"seeds", json::parse(seeds_json.empty() ? "{}" : seeds_json)}};
    if (!features_file.empty()) j["features_file"] = features_file;
    return j.dump(2) + "\n";
}

PipelineBundle PipelineBundle::from_json(const std::string& text) {
    PipelineBundle b;
    try {
        json j = json::parse(text);
        b.version = j.at("version").get<int>();
        if (b.version != 1) throw IoError("unsupported bundle version " + std::to_string(b.version));
        b.visual_id = j.at("visual_id").get<std::string>();
        b.visual_ckpt = j.at("visual_ckpt").get<std::string>();
        b.state_id = j.at("state_id").get<std::string>();
        b.state_ckpt = j.at("state_ckpt").get<std::string>();
        b.fusion_ckpt = j.at("fusion_ckpt").get<std::string>();
        b.normalizer_json = j.at("normalizer").dump();
        b.dataset_hash = j.at("dataset_hash").get<std::string>();
        b.head_kind = j.at("head_kind").get<std::string>();
        b.seeds_json = j.at("seeds").dump();
        if (j.contains("features_file")) b.features_file = j.at("features_file").get<std::string>();
    } catch (const json::exception& e) {
        throw IoError(std::string("bundle manifest: ") + e.what());
    }
    return b;
}

std::filesystem::path save_pipeline(const std::filesystem::path& dir, const Pipeline& p,
                                    const std::string& dataset_hash, const std::string& seeds_json) {
    std::filesystem::create_directories(dir);
    PipelineBundle b;
    const auto& vc = p.visual().config();
    b.visual_id = "conv-encoder-d" + std::to_string(vc.bottleneck);
    b.state_id = to_string(p.state().kind());
    b.normalizer_json = p.normalizer().to_json();
    b.dataset_hash = dataset_hash;
    b.head_kind = to_string(p.fusion().config().head);
    b.seeds_json = seeds_json;
    if (p.feature_file()) b.features_file = p.feature_file()->name().substr(5);
    write_checkpoint(dir / b.visual_ckpt, p.visual().to_checkpoint());
    write_checkpoint(dir / b.state_ckpt, p.state().to_checkpoint());
    write_checkpoint(dir / b.fusion_ckpt, p.fusion().to_checkpoint());
    const auto path = dir / "bundle.json";
    const std::string text = b.to_json();
    write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    return path;
}

Pipeline load_pipeline(const std::filesystem::path& bundle_path, PipelineBundle* bundle_out) {
    const auto bytes = read_file_bytes(bundle_path);
    PipelineBundle b = PipelineBundle::from_json(std::string(bytes.begin(), bytes.end()));
    const auto dir = bundle_path.parent_path();
    auto stage = [&](const char* name, auto&& fn) {
        try {
            return fn();
        } catch (const Error& e) {
            throw IoError(std::string("bundle ") + name + " stage: " + e.what());
        }
    };
    auto visual = stage("visual", [&] {
        return std::make_shared<const VisualModel>(VisualModel::from_checkpoint(read_checkpoint(dir / b.visual_ckpt)));
    });
    auto state = stage("state", [&] {
        return std::make_shared<const StateModel>(StateModel::from_checkpoint(read_checkpoint(dir / b.state_ckpt)));
    });
    auto fusion = stage("fusion", [&] { return FusionModel::from_checkpoint(read_checkpoint(dir / b.fusion_ckpt)); });
    auto norm = stage("normalizer", [&] { return Normalizer::from_json(b.normalizer_json); });
    std::shared_ptr<const FileFeatureSource> features;
    if (!b.features_file.empty())
        features = stage("features", [&] {
            return std::make_shared<const FileFeatureSource>(FileFeatureSource::load(b.features_file));
        });
    if (bundle_out) *bundle_out = b;
    return stage("assembly", [&] { return Pipeline(visual, state, std::move(fusion), std::move(norm), features); });
}

}  // namespace dml
