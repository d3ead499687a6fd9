#include "dmlram/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "dmlram/binary_io.hpp"
#include "dmlram/rng.hpp"

namespace dml {

using json = nlohmann::json;

std::vector<float> RobotState::to_vector() const {
    std::vector<float> v;
    v.reserve(3 * joint_count() + 1);
    v.insert(v.end(), joint_positions.begin(), joint_positions.end());
    v.insert(v.end(), joint_velocities.begin(), joint_velocities.end());
    v.insert(v.end(), joint_efforts.begin(), joint_efforts.end());
    v.push_back(gripper);
    return v;
}

RobotState RobotState::from_vector(std::span<const float> flat, std::size_t joint_count) {
    if (flat.size() != state_dimension(joint_count))
        throw DimensionError("state vector has " + std::to_string(flat.size()) + " components, expected " +
                             std::to_string(state_dimension(joint_count)) + " for " + std::to_string(joint_count) +
                             " joints");
    RobotState s;
    const std::size_t J = joint_count;
    s.joint_positions.assign(flat.begin(), flat.begin() + J);
    s.joint_velocities.assign(flat.begin() + J, flat.begin() + 2 * J);
    s.joint_efforts.assign(flat.begin() + 2 * J, flat.begin() + 3 * J);
    s.gripper = flat[3 * J];
    return s;
}

namespace {

std::string where(const Trajectory& traj, std::size_t step) {
    return "trajectory '" + traj.id + "' step " + std::to_string(step);
}

bool finite(std::span<const float> v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

}  // namespace

void validate_trajectory(const Trajectory& traj, const DatasetMeta& meta) {
    const Shape image_shape = meta.image.shape();
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
        const Step& s = traj.steps[t];
        if (s.image.pixels.shape() != image_shape)
            throw InvariantError(where(traj, t) + ": image is " + shape_string(s.image.pixels.shape()) +
                                 ", dataset geometry is " + shape_string(image_shape));
        for (float p : s.image.pixels.data())
            if (!(p >= 0.0f && p <= 1.0f))
                throw InvariantError(where(traj, t) + ": pixel value outside [0,1]");
        const RobotState& st = s.state;
        if (st.joint_positions.size() != meta.joint_count || st.joint_velocities.size() != meta.joint_count ||
            st.joint_efforts.size() != meta.joint_count)
            throw InvariantError(where(traj, t) + ": joint vectors have lengths " +
                                 std::to_string(st.joint_positions.size()) + "/" +
                                 std::to_string(st.joint_velocities.size()) + "/" +
                                 std::to_string(st.joint_efforts.size()) + ", expected J = " +
                                 std::to_string(meta.joint_count));
        if (!finite(st.joint_positions) || !finite(st.joint_velocities) || !finite(st.joint_efforts) ||
            !std::isfinite(st.gripper))
            throw InvariantError(where(traj, t) + ": non-finite state component");
        if (s.action.values.size() != meta.action_dim)
            throw InvariantError(where(traj, t) + ": action has " + std::to_string(s.action.values.size()) +
                                 " components, expected A = " + std::to_string(meta.action_dim));
        if (!finite(s.action.values)) throw InvariantError(where(traj, t) + ": non-finite action component");
    }
}

// ---- tensors <-> trajectories -------------------------------------------------------

Tensor images_tensor(const Trajectory& traj) {
    if (traj.steps.empty()) throw InvariantError("trajectory '" + traj.id + "' has no steps");
    const Shape fs = traj.steps.front().image.pixels.shape();
    Shape shape{traj.steps.size()};
    shape.insert(shape.end(), fs.begin(), fs.end());
    std::vector<float> data;
    data.reserve(shape_size(shape));
    for (const auto& s : traj.steps) data.insert(data.end(), s.image.pixels.data().begin(), s.image.pixels.data().end());
    return Tensor(std::move(shape), std::move(data));
}

Tensor states_tensor(const Trajectory& traj) {
    if (traj.steps.empty()) throw InvariantError("trajectory '" + traj.id + "' has no steps");
    const std::size_t d = state_dimension(traj.steps.front().state.joint_count());
    std::vector<float> data;
    data.reserve(traj.steps.size() * d);
    for (const auto& s : traj.steps) {
        auto v = s.state.to_vector();
        data.insert(data.end(), v.begin(), v.end());
    }
    return Tensor({traj.steps.size(), d}, std::move(data));
}

Tensor actions_tensor(const Trajectory& traj) {
    if (traj.steps.empty()) throw InvariantError("trajectory '" + traj.id + "' has no steps");
    const std::size_t a = traj.steps.front().action.values.size();
    std::vector<float> data;
    data.reserve(traj.steps.size() * a);
    for (const auto& s : traj.steps) data.insert(data.end(), s.action.values.begin(), s.action.values.end());
    return Tensor({traj.steps.size(), a}, std::move(data));
}

namespace {

std::string file_stem(const Trajectory& traj, std::size_t index) {
    // ids are free-form; keep file names safe and unique
    std::string safe;
    for (char c : traj.id) safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
    return std::to_string(index) + "_" + safe;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["format_version"] = kManifestVersion;
    manifest["joint_count"] = dataset.meta.joint_count;
    manifest["action_dim"] = dataset.meta.action_dim;
    manifest["image"] = {{"h", dataset.meta.image.height},
                         {"w", dataset.meta.image.width},
                         {"c", dataset.meta.image.channels}};
    json trajs = json::array();
    for (std::size_t i = 0; i < dataset.trajectories.size(); ++i) {
        const Trajectory& t = dataset.trajectories[i];
        validate_trajectory(t, dataset.meta);
        const std::string stem = file_stem(t, i);
        const std::string images = "tensors/" + stem + ".images.dmlt";
        const std::string states = "tensors/" + stem + ".states.dmlt";
        const std::string actions = "tensors/" + stem + ".actions.dmlt";
        write_tensor_file(dir / images, images_tensor(t));
        write_tensor_file(dir / states, states_tensor(t));
        write_tensor_file(dir / actions, actions_tensor(t));
        trajs.push_back({{"id", t.id},
                         {"environment_id", t.environment_id},
                         {"steps", t.steps.size()},
                         {"files", {{"images", images}, {"states", states}, {"actions", actions}}}});
    }
    manifest["trajectories"] = std::move(trajs);
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
    std::filesystem::path path = manifest_path;
    if (std::filesystem::is_directory(path)) path /= "manifest.json";
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    json m;
    try {
        m = json::parse(in);
    } catch (const json::exception& e) {
        throw IoError("manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    const std::filesystem::path base = path.parent_path();

    Dataset ds;
    try {
        const int version = m.at("format_version").get<int>();
        if (version != kManifestVersion)
            throw IoError("manifest " + path.string() + ": unsupported format_version " + std::to_string(version));
        ds.meta.joint_count = m.at("joint_count").get<std::size_t>();
        ds.meta.action_dim = m.at("action_dim").get<std::size_t>();
        const json& img = m.at("image");
        ds.meta.image = {img.at("h").get<std::size_t>(), img.at("w").get<std::size_t>(),
                         img.at("c").get<std::size_t>()};
    } catch (const json::exception& e) {
        throw IoError("manifest " + path.string() + ": " + e.what());
    }
    if (ds.meta.joint_count == 0 || ds.meta.action_dim == 0 || ds.meta.image.pixel_count() == 0)
        throw InvariantError("manifest " + path.string() + ": joint_count, action_dim and image extents must be positive");
    if (ds.meta.image.channels != 1 && ds.meta.image.channels != 3)
        throw InvariantError("manifest " + path.string() + ": image channels must be 1 or 3");

    const std::size_t J = ds.meta.joint_count, A = ds.meta.action_dim;
    const Shape frame = ds.meta.image.shape();
    for (const json& entry : m.at("trajectories")) {
        Trajectory t;
        std::size_t steps = 0;
        std::string fimg, fst, fact;
        try {
            t.id = entry.at("id").get<std::string>();
            t.environment_id = entry.value("environment_id", "");
            steps = entry.at("steps").get<std::size_t>();
            const json& files = entry.at("files");
            fimg = files.at("images").get<std::string>();
            fst = files.at("states").get<std::string>();
            fact = files.at("actions").get<std::string>();
        } catch (const json::exception& e) {
            throw IoError("manifest " + path.string() + ": bad trajectory entry: " + e.what());
        }
        auto read = [&](const std::string& rel, const char* what) {
            const auto p = base / rel;
            if (!std::filesystem::exists(p))
                throw IoError("trajectory '" + t.id + "': missing " + what + " tensor file " + p.string());
            try {
                return read_tensor_file(p);
            } catch (const Error& e) {
                throw IoError("trajectory '" + t.id + "': " + e.what());
            }
        };
        Tensor images = read(fimg, "images");
        Tensor states = read(fst, "states");
        Tensor actions = read(fact, "actions");

        Shape want_images{steps};
        want_images.insert(want_images.end(), frame.begin(), frame.end());
        if (images.shape() != want_images)
            throw InvariantError("trajectory '" + t.id + "': images tensor is " + shape_string(images.shape()) +
                                 ", expected " + shape_string(want_images));
        if (states.rank() != 2 || states.extent(0) != steps)
            throw InvariantError("trajectory '" + t.id + "': states tensor is " + shape_string(states.shape()) +
                                 ", expected [" + std::to_string(steps) + "x" +
                                 std::to_string(state_dimension(J)) + "]");
        if (states.extent(1) != state_dimension(J))
            throw InvariantError("trajectory '" + t.id + "' step 0: state vector has " +
                                 std::to_string(states.extent(1)) + " components, expected 3J+1 = " +
                                 std::to_string(state_dimension(J)));
        if (actions.rank() != 2 || actions.extent(0) != steps || actions.extent(1) != A)
            throw InvariantError("trajectory '" + t.id + "': actions tensor is " + shape_string(actions.shape()) +
                                 ", expected [" + std::to_string(steps) + "x" + std::to_string(A) + "]");

        const std::size_t fsz = shape_size(frame), sd = state_dimension(J);
        t.steps.resize(steps);
        for (std::size_t i = 0; i < steps; ++i) {
            Step& s = t.steps[i];
            s.image.pixels = Tensor(frame, std::vector<float>(images.data().begin() + i * fsz,
                                                              images.data().begin() + (i + 1) * fsz));
            s.state = RobotState::from_vector(states.data().subspan(i * sd, sd), J);
            s.action.values.assign(actions.data().begin() + i * A, actions.data().begin() + (i + 1) * A);
        }
        validate_trajectory(t, ds.meta);
        ds.trajectories.push_back(std::move(t));
    }
    return ds;
}

std::string dataset_fingerprint(const Dataset& dataset) {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(dataset.meta.joint_count));
    w.u32(static_cast<std::uint32_t>(dataset.meta.action_dim));
    w.u32(static_cast<std::uint32_t>(dataset.meta.image.height));
    w.u32(static_cast<std::uint32_t>(dataset.meta.image.width));
    w.u32(static_cast<std::uint32_t>(dataset.meta.image.channels));
    std::uint64_t h = fnv1a64(w.buffer());
    for (const auto& t : dataset.trajectories) {
        h = fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(t.id.data()), t.id.size()), h);
        if (t.steps.empty()) continue;
        h = fnv1a64(encode_tensor_file(images_tensor(t)), h);
        h = fnv1a64(encode_tensor_file(states_tensor(t)), h);
        h = fnv1a64(encode_tensor_file(actions_tensor(t)), h);
    }
    return hex64(h);
}

// ---- windowing ------------------------------------------------------------------------

Tensor Sample::stacked_window() const {
    const Tensor& first = past_image(0).pixels;
    const std::size_t c = first.extent(0), h = first.extent(1), w = first.extent(2);
    std::vector<float> data;
    data.reserve(window_ * c * h * w);
    for (std::size_t k = 0; k < window_; ++k) {
        auto px = past_image(k).pixels.data();
        data.insert(data.end(), px.begin(), px.end());
    }
    return Tensor({window_ * c, h, w}, std::move(data));
}

std::string Sample::key() const { return traj_->id + ":" + std::to_string(last_step()); }

std::vector<Sample> window_samples(const Trajectory& traj, std::size_t window_size) {
    if (window_size < 1) throw ConfigError("window_size must be >= 1");
    std::vector<Sample> out;
    if (traj.steps.size() <= window_size) return out;
    const std::size_t n = traj.steps.size() - window_size;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.emplace_back(traj, i, window_size);
    return out;
}

std::vector<Sample> window_samples(std::span<const Trajectory* const> trajs, std::size_t window_size) {
    std::vector<Sample> out;
    for (const Trajectory* t : trajs) {
        auto s = window_samples(*t, window_size);
        out.insert(out.end(), s.begin(), s.end());
    }
    return out;
}

// ---- normaliser -----------------------------------------------------------------------

Normalizer::Normalizer(std::vector<double> state_mean, std::vector<double> state_std, std::vector<double> action_min,
                       std::vector<double> action_max)
    : state_mean_(std::move(state_mean)),
      state_std_(std::move(state_std)),
      action_min_(std::move(action_min)),
      action_max_(std::move(action_max)) {
    if (state_mean_.size() != state_std_.size() || action_min_.size() != action_max_.size())
        throw DimensionError("normalizer statistics have inconsistent lengths");
    for (double s : state_std_)
        if (!(s > 0.0)) throw InvariantError("normalizer standard deviations must be > 0");
}

Normalizer Normalizer::fit(std::span<const Trajectory* const> train) {
    std::size_t sd = 0, ad = 0, count = 0;
    for (const Trajectory* t : train)
        for (const Step& s : t->steps) {
            const std::size_t d = state_dimension(s.state.joint_count());
            if (count == 0) {
                sd = d;
                ad = s.action.values.size();
            } else if (d != sd || s.action.values.size() != ad) {
                throw DimensionError("normalizer fit: inconsistent state/action dimensions in trajectory '" + t->id +
                                     "'");
            }
            ++count;
        }
    if (count == 0) throw InvariantError("normalizer fit: training split has no steps");

    std::vector<double> mean(sd, 0.0), m2(sd, 0.0);
    std::vector<double> amin(ad, std::numeric_limits<double>::infinity());
    std::vector<double> amax(ad, -std::numeric_limits<double>::infinity());
    std::size_t n = 0;
    // Welford update keeps the variance stable for large offsets.
    for (const Trajectory* t : train)
        for (const Step& s : t->steps) {
            ++n;
            auto v = s.state.to_vector();
            for (std::size_t j = 0; j < sd; ++j) {
                const double x = v[j];
                const double delta = x - mean[j];
                mean[j] += delta / static_cast<double>(n);
                m2[j] += delta * (x - mean[j]);
            }
            for (std::size_t j = 0; j < ad; ++j) {
                amin[j] = std::min(amin[j], static_cast<double>(s.action.values[j]));
                amax[j] = std::max(amax[j], static_cast<double>(s.action.values[j]));
            }
        }
    std::vector<double> sdv(sd);
    for (std::size_t j = 0; j < sd; ++j) {
        const double var = m2[j] / static_cast<double>(n);
        const double s = std::sqrt(var);
        sdv[j] = (s > 1e-12) ? s : 1.0;
    }
    return Normalizer(std::move(mean), std::move(sdv), std::move(amin), std::move(amax));
}

namespace {

void check_len(std::size_t got, std::size_t want, const char* what) {
    if (got != want)
        throw DimensionError(std::string("normalizer: ") + what + " has " + std::to_string(got) +
                             " components, expected " + std::to_string(want));
}

double half_range(double lo, double hi) {
    const double h = 0.5 * (hi - lo);
    return h > 0.0 ? h : 1.0;
}

}  // namespace

std::vector<float> Normalizer::apply_state(std::span<const float> raw) const {
    check_len(raw.size(), state_mean_.size(), "state");
    std::vector<float> out(raw.size());
    for (std::size_t j = 0; j < raw.size(); ++j)
        out[j] = static_cast<float>((static_cast<double>(raw[j]) - state_mean_[j]) / state_std_[j]);
    return out;
}

std::vector<float> Normalizer::invert_state(std::span<const float> normalized) const {
    check_len(normalized.size(), state_mean_.size(), "state");
    std::vector<float> out(normalized.size());
    for (std::size_t j = 0; j < normalized.size(); ++j)
        out[j] = static_cast<float>(static_cast<double>(normalized[j]) * state_std_[j] + state_mean_[j]);
    return out;
}

std::vector<float> Normalizer::apply_action(std::span<const float> raw) const {
    check_len(raw.size(), action_min_.size(), "action");
    std::vector<float> out(raw.size());
    for (std::size_t j = 0; j < raw.size(); ++j) {
        const double mid = 0.5 * (action_min_[j] + action_max_[j]);
        out[j] = static_cast<float>((static_cast<double>(raw[j]) - mid) / half_range(action_min_[j], action_max_[j]));
    }
    return out;
}

std::vector<float> Normalizer::invert_action(std::span<const float> normalized) const {
    check_len(normalized.size(), action_min_.size(), "action");
    std::vector<float> out(normalized.size());
    for (std::size_t j = 0; j < normalized.size(); ++j) {
        const double mid = 0.5 * (action_min_[j] + action_max_[j]);
        out[j] = static_cast<float>(static_cast<double>(normalized[j]) * half_range(action_min_[j], action_max_[j]) +
                                    mid);
    }
    return out;
}

std::string Normalizer::to_json() const {
    json j;
    j["state_mean"] = state_mean_;
    j["state_std"] = state_std_;
    j["action_min"] = action_min_;
    j["action_max"] = action_max_;
    return j.dump();
}

Normalizer Normalizer::from_json(const std::string& text) {
    try {
        json j = json::parse(text);
        return Normalizer(j.at("state_mean").get<std::vector<double>>(), j.at("state_std").get<std::vector<double>>(),
                          j.at("action_min").get<std::vector<double>>(),
                          j.at("action_max").get<std::vector<double>>());
    } catch (const json::exception& e) {
        throw IoError(std::string("bad normalizer JSON: ") + e.what());
    }
}

// ---- splits ----------------------------------------------------------------------------

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios) {
    const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
    for (double x : r)
        if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError("split ratios must be finite and >= 0");
    if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
    const std::size_t nonzero = static_cast<std::size_t>(std::count_if(r.begin(), r.end(), [](double x) { return x > 0; }));
    if (n < nonzero)
        throw InvariantError("cannot split " + std::to_string(n) + " trajectories into " + std::to_string(nonzero) +
                             " non-empty partitions");

    std::array<std::size_t, 3> sizes{};
    std::array<double, 3> rem{};
    std::size_t assigned = 0;
    for (int k = 0; k < 3; ++k) {
        const double exact = static_cast<double>(n) * r[k];
        sizes[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        rem[k] = exact - static_cast<double>(sizes[k]);
        assigned += sizes[k];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (std::abs(rem[a] - rem[b]) > 1e-9) return rem[a] > rem[b];
        return a > b;
    });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++sizes[order[i % 3]];

    // A partition with a positive ratio never ends up empty.
    for (int k = 0; k < 3; ++k) {
        if (r[k] > 0 && sizes[k] == 0) {
            int donor = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
            --sizes[donor];
            ++sizes[k];
        }
    }
    return sizes;
}

SplitIndices split_dataset(std::size_t n, const SplitRatios& ratios, std::uint64_t seed) {
    const auto sizes = split_sizes(n, ratios);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    rng.shuffle(idx);
    SplitIndices s;
    s.train.assign(idx.begin(), idx.begin() + sizes[0]);
    s.val.assign(idx.begin() + sizes[0], idx.begin() + sizes[0] + sizes[1]);
    s.test.assign(idx.begin() + sizes[0] + sizes[1], idx.end());
    // keep dataset order inside each partition
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

SplitName split_from_string(const std::string& name) {
    if (name == "train") return SplitName::train;
    if (name == "val") return SplitName::val;
    if (name == "test") return SplitName::test;
    throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

std::string to_string(SplitName split) {
    switch (split) {
        case SplitName::train: return "train";
        case SplitName::val: return "val";
        case SplitName::test: return "test";
    }
    return "?";
}

const std::vector<const Trajectory*>& SplitView::get(SplitName s) const {
    switch (s) {
        case SplitName::train: return train;
        case SplitName::val: return val;
        case SplitName::test: return test;
    }
    return test;
}

SplitView make_split_view(const Dataset& dataset, const SplitIndices& split) {
    SplitView v;
    for (auto i : split.train) v.train.push_back(&dataset.trajectories.at(i));
    for (auto i : split.val) v.val.push_back(&dataset.trajectories.at(i));
    for (auto i : split.test) v.test.push_back(&dataset.trajectories.at(i));
    return v;
}

}  // namespace dml
