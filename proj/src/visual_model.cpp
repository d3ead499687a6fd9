#include "dmlram/visual_model.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

#include "dmlram/rng.hpp"

namespace dml {

using json = nlohmann::json;

void VisualConfig::validate() const {
    if (window_size < 1) throw ConfigError("visual: window_size must be >= 1");
    if (geometry.channels != 1 && geometry.channels != 3) throw ConfigError("visual: channels must be 1 or 3");
    if (geometry.height < 8 || geometry.width < 8 || geometry.height % 4 != 0 || geometry.width % 4 != 0)
        throw ConfigError("visual: image height and width must be multiples of 4 and >= 8, got " +
                          std::to_string(geometry.height) + "x" + std::to_string(geometry.width));
    if (bottleneck == 0) throw ConfigError("visual: bottleneck must be >= 1");
    if (conv1_channels == 0 || conv2_channels == 0) throw ConfigError("visual: conv channel counts must be >= 1");
    train.validate();
}

std::vector<LayerSpec> visual_encoder_layers(const VisualConfig& c) {
    return {LayerSpec::conv2d(c.conv1_channels, 4, 4, 2, 1), LayerSpec::relu(),
            LayerSpec::conv2d(c.conv2_channels, 4, 4, 2, 1), LayerSpec::relu(),
            LayerSpec::flatten(),                               LayerSpec::dense(c.bottleneck)};
}

std::vector<LayerSpec> visual_decoder_layers(const VisualConfig& c) {
    const auto& g = c.geometry;
    return {LayerSpec::dense(g.pixel_count()), LayerSpec::relu(), LayerSpec::reshape(g.shape()),
            LayerSpec::conv2d(g.channels, 3, 3, 1, 1), LayerSpec::sigmoid()};
}

VisualModel::VisualModel(VisualConfig config, Network encoder, Network decoder)
    : config_(std::move(config)), encoder_(std::move(encoder)), decoder_(std::move(decoder)) {
    const Shape in{config_.window_size * config_.geometry.channels, config_.geometry.height, config_.geometry.width};
    if (encoder_.input_shape() != in || encoder_.output_shape() != Shape{config_.bottleneck})
        throw DimensionError("visual encoder shape " + shape_string(encoder_.input_shape()) + " -> " +
                             shape_string(encoder_.output_shape()) + " does not match the configuration");
    if (decoder_.input_shape() != Shape{config_.bottleneck} || decoder_.output_shape() != config_.geometry.shape())
        throw DimensionError("visual decoder output " + shape_string(decoder_.output_shape()) +
                             " does not match frame geometry " + shape_string(config_.geometry.shape()));
}

VisualModel VisualModel::create(const VisualConfig& config) {
    config.validate();
    const auto& g = config.geometry;
    Network enc({config.window_size * g.channels, g.height, g.width}, visual_encoder_layers(config));
    Network dec({config.bottleneck}, visual_decoder_layers(config));
    Rng rng(Rng::derive(config.train.seed, 1));
    enc.initialize(rng);
    dec.initialize(rng);
    return VisualModel(config, std::move(enc), std::move(dec));
}

void VisualModel::check_window(const Tensor& x) const {
    if (x.shape() != encoder_.input_shape())
        throw DimensionError("visual model expects a stacked window of shape " + shape_string(encoder_.input_shape()) +
                             ", got " + shape_string(x.shape()));
}

std::vector<float> VisualModel::encode(const Tensor& stacked_window) const {
    check_window(stacked_window);
    Tensor z = encoder_.forward(stacked_window);
    return {z.data().begin(), z.data().end()};
}

VisualPrediction VisualModel::predict(const Tensor& stacked_window) const {
    check_window(stacked_window);
    Tensor z = encoder_.forward(stacked_window);
    Tensor y = decoder_.forward(z);
    for (auto& v : y.data()) v = std::clamp(v, 0.0f, 1.0f);
    return {ImageFrame{std::move(y)}, std::vector<float>(z.data().begin(), z.data().end())};
}

VisualPrediction VisualModel::predict(std::span<const ImageFrame> past_images) const {
    if (past_images.size() != config_.window_size)
        throw DimensionError("visual model expects " + std::to_string(config_.window_size) + " past frames, got " +
                             std::to_string(past_images.size()));
    return predict(stack_frames(past_images));
}

Tensor stack_frames(std::span<const ImageFrame> frames) {
    if (frames.empty()) throw DimensionError("cannot stack an empty frame window");
    const Shape s = frames.front().pixels.shape();
    if (s.size() != 3) throw DimensionError("frames must be [c, h, w] tensors");
    std::vector<float> data;
    data.reserve(frames.size() * shape_size(s));
    for (const auto& f : frames) {
        if (f.pixels.shape() != s)
            throw DimensionError("frame window mixes geometries " + shape_string(s) + " and " +
                                 shape_string(f.pixels.shape()));
        data.insert(data.end(), f.pixels.data().begin(), f.pixels.data().end());
    }
    return Tensor({frames.size() * s[0], s[1], s[2]}, std::move(data));
}

namespace {

json train_to_json(const TrainLoopConfig& t) {
    return {{"max_epochs", t.max_epochs},
            {"patience", t.patience},
            {"batch_size", t.batch_size},
            {"optimizer", t.optimizer.kind == OptimizerKind::sgd ? "sgd" : "sgd_momentum"},
            {"learning_rate", t.optimizer.learning_rate},
            {"momentum", t.optimizer.momentum},
            {"weight_decay", t.optimizer.weight_decay},
            {"seed", t.seed}};
}

TrainLoopConfig train_from_json(const json& j) {
    TrainLoopConfig t;
    t.max_epochs = j.at("max_epochs").get<std::size_t>();
    t.patience = j.at("patience").get<std::size_t>();
    t.batch_size = j.at("batch_size").get<std::size_t>();
    t.optimizer.kind = j.at("optimizer").get<std::string>() == "sgd" ? OptimizerKind::sgd : OptimizerKind::sgd_momentum;
    t.optimizer.learning_rate = j.at("learning_rate").get<double>();
    t.optimizer.momentum = j.at("momentum").get<double>();
    t.optimizer.weight_decay = j.at("weight_decay").get<double>();
    t.seed = j.at("seed").get<std::uint64_t>();
    return t;
}

}  // namespace

Checkpoint VisualModel::to_checkpoint() const {
    Checkpoint ck;
    for (const auto& p : encoder_.parameters()) ck.tensors.push_back(p);
    for (const auto& p : decoder_.parameters()) ck.tensors.push_back(p);
    const auto& g = config_.geometry;
    json cfg = {{"kind", "visual"},
                {"window_size", config_.window_size},
                {"image", {{"h", g.height}, {"w", g.width}, {"c", g.channels}}},
                {"bottleneck", config_.bottleneck},
                {"conv1_channels", config_.conv1_channels},
                {"conv2_channels", config_.conv2_channels},
                {"train", train_to_json(config_.train)}};
    ck.set_text_section("config", cfg.dump());
    return ck;
}

VisualModel VisualModel::from_checkpoint(const Checkpoint& ckpt) {
    VisualConfig c;
    try {
        json cfg = json::parse(ckpt.text_section("config"));
        if (cfg.at("kind").get<std::string>() != "visual") throw IoError("checkpoint is not a visual model");
        c.window_size = cfg.at("window_size").get<std::size_t>();
        c.geometry = {cfg.at("image").at("h").get<std::size_t>(), cfg.at("image").at("w").get<std::size_t>(),
                      cfg.at("image").at("c").get<std::size_t>()};
        c.bottleneck = cfg.at("bottleneck").get<std::size_t>();
        c.conv1_channels = cfg.at("conv1_channels").get<std::size_t>();
        c.conv2_channels = cfg.at("conv2_channels").get<std::size_t>();
        c.train = train_from_json(cfg.at("train"));
    } catch (const json::exception& e) {
        throw IoError(std::string("visual checkpoint config: ") + e.what());
    }
    c.validate();
    const auto& g = c.geometry;
    Network enc({c.window_size * g.channels, g.height, g.width}, visual_encoder_layers(c));
    Network dec({c.bottleneck}, visual_decoder_layers(c));
    const std::size_t ne = enc.parameters().size(), nd = dec.parameters().size();
    if (ckpt.tensors.size() != ne + nd)
        throw IoError("visual checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, expected " +
                      std::to_string(ne + nd));
    auto load = [&](Network& net, std::size_t offset) {
        auto dst = net.mutable_parameters();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (ckpt.tensors[offset + i].shape() != dst[i].shape())
                throw IoError("visual checkpoint tensor " + std::to_string(offset + i) + " has shape " +
                              shape_string(ckpt.tensors[offset + i].shape()) + ", expected " +
                              shape_string(dst[i].shape()));
            dst[i] = ckpt.tensors[offset + i];
        }
    };
    load(enc, 0);
    load(dec, ne);
    return VisualModel(c, std::move(enc), std::move(dec));
}

// ---- training -------------------------------------------------------------------

VisualTrainResult train_visual(const VisualConfig& config, std::span<const Sample> train,
                               std::span<const Sample> val) {
    config.validate();
    const Shape frame = config.geometry.shape();
    auto check = [&](std::span<const Sample> samples, const char* which) {
        for (const auto& s : samples) {
            if (s.window_size() != config.window_size)
                throw ConfigError(std::string("visual: ") + which + " sample window " +
                                  std::to_string(s.window_size()) + " differs from configured " +
                                  std::to_string(config.window_size));
            if (s.target_next_image().pixels.shape() != frame)
                throw DimensionError(std::string("visual: ") + which + " sample " + s.key() + " has frame shape " +
                                     shape_string(s.target_next_image().pixels.shape()) + ", expected " +
                                     shape_string(frame));
        }
    };
    check(train, "training");
    check(val, "validation");

    VisualModel model = VisualModel::create(config);
    Network& enc = model.mutable_encoder();
    Network& dec = model.mutable_decoder();

    auto grad = [&](std::size_t i, std::vector<std::vector<Tensor>>& acc) {
        const Sample& s = train[i];
        return visual_loss_and_grad(enc, dec, s.stacked_window(), s.target_next_image().pixels, acc[0], acc[1]);
    };
    auto vloss = [&](std::size_t i) {
        const Sample& s = val[i];
        Tensor y = dec.forward(enc.forward(s.stacked_window()));
        return mse_loss(y, s.target_next_image().pixels).loss;
    };
    auto history = run_train_loop(config.train, {&enc, &dec}, train.size(), val.size(), grad, vloss, "visual model");
    return {std::move(model), std::move(history)};
}

double visual_mse(const VisualModel& model, std::span<const Sample> samples) {
    if (samples.empty()) throw InvariantError("visual_mse: no samples");
    return mean_loss(samples.size(), [&](std::size_t i) {
        auto p = model.predict(samples[i].stacked_window());
        return mse_loss(p.frame.pixels, samples[i].target_next_image().pixels).loss;
    });
}

Tensor mean_next_frame(std::span<const Sample> train) {
    if (train.empty()) throw InvariantError("mean_next_frame: no samples");
    const Shape s = train.front().target_next_image().pixels.shape();
    std::vector<double> sum(shape_size(s), 0.0);
    for (const auto& smp : train) {
        const auto px = smp.target_next_image().pixels.data();
        if (px.size() != sum.size()) throw DimensionError("mean_next_frame: samples mix frame geometries");
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += px[i];
    }
    Tensor mean(s);
    for (std::size_t i = 0; i < sum.size(); ++i) mean[i] = static_cast<float>(sum[i] / static_cast<double>(train.size()));
    return mean;
}

double constant_frame_mse(const Tensor& frame, std::span<const Sample> samples) {
    if (samples.empty()) throw InvariantError("constant_frame_mse: no samples");
    return mean_loss(samples.size(),
                     [&](std::size_t i) { return mse_loss(frame, samples[i].target_next_image().pixels).loss; });
}

// ---- feature sources ---------------------------------------------------------------

std::vector<float> EncoderFeatureSource::features(const Sample& sample) const {
    return model_->encode(sample.stacked_window());
}

FileFeatureSource::FileFeatureSource(std::size_t dim, std::map<std::string, std::vector<float>> entries,
                                     std::string origin)
    : dim_(dim), entries_(std::move(entries)), origin_(std::move(origin)) {
    if (dim_ == 0) throw ConfigError("feature file dimension must be >= 1");
    for (const auto& [key, v] : entries_) {
        if (v.size() != dim_)
            throw DimensionError("feature entry '" + key + "' has " + std::to_string(v.size()) +
                                 " values, expected " + std::to_string(dim_));
        for (float x : v)
            if (!std::isfinite(x)) throw InvariantError("feature entry '" + key + "' is not finite");
    }
}

const std::vector<float>& FileFeatureSource::lookup(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw InvariantError("feature file " + origin_ + " has no entry for sample '" + key + "'");
    return it->second;
}

std::vector<std::uint8_t> encode_feature_file(std::size_t dim, const std::map<std::string, std::vector<float>>& entries) {
    ByteWriter w;
    w.magic("DMLF");
    w.u16(kFeatureFileVersion);
    w.u32(static_cast<std::uint32_t>(dim));
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& [key, v] : entries) {
        if (v.size() != dim) throw DimensionError("feature entry '" + key + "' has the wrong length");
        w.u32(static_cast<std::uint32_t>(key.size()));
        w.bytes(key.data(), key.size());
        w.f32s(v);
    }
    return w.take();
}

void write_feature_file(const std::filesystem::path& path, std::size_t dim,
                        const std::map<std::string, std::vector<float>>& entries) {
    write_file_bytes(path, encode_feature_file(dim, entries));
}

FileFeatureSource FileFeatureSource::load(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    ByteReader r(bytes, path.string());
    r.expect_magic("DMLF");
    const std::uint16_t version = r.u16();
    if (version != kFeatureFileVersion)
        throw IoError(path.string() + ": unsupported feature file version " + std::to_string(version));
    const std::uint32_t dim = r.u32(), count = r.u32();
    std::map<std::string, std::vector<float>> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = r.u32();
        auto kb = r.bytes(len);
        std::string key(kb.begin(), kb.end());
        std::vector<float> v(dim);
        r.f32s(v);
        if (!entries.emplace(std::move(key), std::move(v)).second)
            throw IoError(path.string() + ": duplicate feature key");
    }
    if (!r.at_end()) throw IoError(path.string() + ": trailing bytes after feature entries");
    return FileFeatureSource(dim, std::move(entries), path.string());
}

}  // namespace dml
