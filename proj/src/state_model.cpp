#include "dmlram/state_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

#include "dmlram/parallel.hpp"

namespace dml {

using json = nlohmann::json;

// ---- params -----------------------------------------------------------------------

void ForestParams::validate() const {
    if (n_trees == 0) throw ConfigError("forest: n_trees must be >= 1");
    if (max_depth == 0) throw ConfigError("forest: max_depth must be >= 1");
    if (min_samples_leaf == 0) throw ConfigError("forest: min_samples_leaf must be >= 1");
}

std::size_t ForestParams::features_per_split(std::size_t n_features) const {
    std::size_t m = feature_subsample == 0 ? (n_features + 2) / 3 : feature_subsample;
    return std::clamp<std::size_t>(m, 1, n_features);
}

bool operator==(const ForestParams& a, const ForestParams& b) {
    return a.n_trees == b.n_trees && a.max_depth == b.max_depth && a.min_samples_leaf == b.min_samples_leaf &&
           a.feature_subsample == b.feature_subsample && a.bootstrap == b.bootstrap;
}

bool operator==(const TreeNode& a, const TreeNode& b) {
    return a.leaf == b.leaf && a.feature == b.feature && a.threshold == b.threshold && a.right == b.right &&
           a.value == b.value;
}

// ---- tree ---------------------------------------------------------------------------

RegressionTree::RegressionTree(std::vector<TreeNode> nodes, std::size_t n_features, std::size_t n_targets)
    : nodes_(std::move(nodes)), n_features_(n_features), n_targets_(n_targets) {
    if (nodes_.empty()) throw InvariantError("regression tree has no nodes");
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const TreeNode& n = nodes_[i];
        if (n.leaf) {
            if (n.value.size() != n_targets_) throw InvariantError("tree leaf has wrong output dimension");
        } else if (n.feature >= n_features_ || n.right <= i + 1 || n.right >= nodes_.size()) {
            throw InvariantError("tree node " + std::to_string(i) + " has invalid feature or child index");
        }
    }
}

std::size_t RegressionTree::leaf_index(std::span<const float> x) const {
    if (x.size() != n_features_)
        throw DimensionError("tree expects " + std::to_string(n_features_) + " features, got " +
                             std::to_string(x.size()));
    std::size_t i = 0;
    while (!nodes_[i].leaf) i = x[nodes_[i].feature] <= nodes_[i].threshold ? i + 1 : nodes_[i].right;
    return i;
}

std::span<const float> RegressionTree::predict(std::span<const float> x) const { return nodes_[leaf_index(x)].value; }

std::size_t RegressionTree::depth() const {
    // pre-order walk with an explicit stack of (node, depth)
    std::size_t best = 0;
    std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 0}};
    while (!stack.empty()) {
        auto [i, d] = stack.back();
        stack.pop_back();
        best = std::max(best, d);
        if (!nodes_[i].leaf) {
            stack.emplace_back(i + 1, d + 1);
            stack.emplace_back(nodes_[i].right, d + 1);
        }
    }
    return best;
}

std::size_t RegressionTree::leaf_count() const {
    return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [](const TreeNode& n) { return n.leaf; }));
}

bool operator==(const RegressionTree& a, const RegressionTree& b) {
    return a.n_features_ == b.n_features_ && a.n_targets_ == b.n_targets_ && a.nodes_ == b.nodes_;
}

namespace {

class TreeBuilder {
public:
    TreeBuilder(const Tensor& X, const Tensor& Y, const ForestParams& params, Rng& rng, TreeFitTrace* trace)
        : X_(X), Y_(Y), params_(params), rng_(rng), trace_(trace), F_(X.extent(1)), T_(Y.extent(1)),
          m_(params.features_per_split(F_)) {}

    std::vector<TreeNode> build(std::vector<std::size_t> rows) {
        grow(rows, 0);
        return std::move(nodes_);
    }

private:
    float x(std::size_t row, std::size_t f) const { return X_[row * F_ + f]; }
    float y(std::size_t row, std::size_t t) const { return Y_[row * T_ + t]; }

    void make_leaf(std::size_t idx, const std::vector<std::size_t>& rows) {
        std::vector<double> sum(T_, 0.0);
        for (std::size_t r : rows)
            for (std::size_t t = 0; t < T_; ++t) sum[t] += y(r, t);
        TreeNode& n = nodes_[idx];
        n.leaf = true;
        n.value.resize(T_);
        for (std::size_t t = 0; t < T_; ++t) n.value[t] = static_cast<float>(sum[t] / static_cast<double>(rows.size()));
        if (trace_) trace_->leaf_rows.emplace_back(idx, rows);
    }

    bool constant_targets(const std::vector<std::size_t>& rows) const {
        for (std::size_t r : rows)
            for (std::size_t t = 0; t < T_; ++t)
                if (y(r, t) != y(rows.front(), t)) return false;
        return true;
    }

    std::vector<std::size_t> candidate_features() {
        std::vector<std::size_t> f(F_);
        std::iota(f.begin(), f.end(), 0);
        if (m_ >= F_) return f;
        for (std::size_t i = 0; i < m_; ++i) std::swap(f[i], f[i + rng_.index(F_ - i)]);
        f.resize(m_);
        std::sort(f.begin(), f.end());
        return f;
    }

    struct Split {
        bool found = false;
        std::size_t feature = 0;
        float threshold = 0.0f;
        double score = -1.0;
    };

    // Maximises sum_t L_t^2/nL + R_t^2/nR, which is the same as minimising
    // the children's summed SSE since the parent's sum of squares is fixed.
    Split best_split(const std::vector<std::size_t>& rows) {
        const std::size_t n = rows.size();
        Split best;
        std::vector<double> total(T_, 0.0), left(T_);
        for (std::size_t r : rows)
            for (std::size_t t = 0; t < T_; ++t) total[t] += y(r, t);
        const std::size_t min_leaf = params_.min_samples_leaf;

        for (std::size_t f : candidate_features()) {
            sorted_.clear();
            for (std::size_t r : rows) sorted_.emplace_back(x(r, f), r);
            std::sort(sorted_.begin(), sorted_.end());
            if (sorted_.front().first == sorted_.back().first) continue;
            std::fill(left.begin(), left.end(), 0.0);
            for (std::size_t i = 0; i + 1 < n; ++i) {
                const std::size_t r = sorted_[i].second;
                for (std::size_t t = 0; t < T_; ++t) left[t] += y(r, t);
                const float lo = sorted_[i].first, hi = sorted_[i + 1].first;
                if (lo == hi) continue;
                const std::size_t nl = i + 1, nr = n - nl;
                if (nl < min_leaf || nr < min_leaf) continue;
                double score = 0.0;
                for (std::size_t t = 0; t < T_; ++t) {
                    const double rt = total[t] - left[t];
                    score += left[t] * left[t] / static_cast<double>(nl) + rt * rt / static_cast<double>(nr);
                }
                if (!best.found || score > best.score + 1e-12 * std::max(1.0, std::abs(best.score))) {
                    float thr = static_cast<float>(0.5 * (static_cast<double>(lo) + static_cast<double>(hi)));
                    if (!(thr >= lo && thr < hi)) thr = lo;
                    best = {true, f, thr, score};
                }
            }
        }
        return best;
    }

    void grow(const std::vector<std::size_t>& rows, std::size_t depth) {
        const std::size_t idx = nodes_.size();
        nodes_.emplace_back();
        if (depth >= params_.max_depth || rows.size() < 2 * params_.min_samples_leaf || constant_targets(rows)) {
            make_leaf(idx, rows);
            return;
        }
        const Split s = best_split(rows);
        if (!s.found) {
            make_leaf(idx, rows);
            return;
        }
        std::vector<std::size_t> left, right;
        for (std::size_t r : rows) (x(r, s.feature) <= s.threshold ? left : right).push_back(r);
        nodes_[idx].leaf = false;
        nodes_[idx].feature = static_cast<std::uint32_t>(s.feature);
        nodes_[idx].threshold = s.threshold;
        grow(left, depth + 1);
        nodes_[idx].right = static_cast<std::uint32_t>(nodes_.size());
        grow(right, depth + 1);
    }

    const Tensor& X_;
    const Tensor& Y_;
    const ForestParams& params_;
    Rng& rng_;
    TreeFitTrace* trace_;
    std::size_t F_, T_, m_;
    std::vector<TreeNode> nodes_;
    std::vector<std::pair<float, std::size_t>> sorted_;
};

void check_xy(const Tensor& X, const Tensor& Y) {
    if (X.rank() != 2 || Y.rank() != 2) throw DimensionError("regression data must be [N, F] and [N, T] matrices");
    if (X.extent(0) != Y.extent(0))
        throw DimensionError("X has " + std::to_string(X.extent(0)) + " rows but Y has " +
                             std::to_string(Y.extent(0)));
    if (X.extent(0) < 2) throw InvariantError("regression needs at least 2 samples");
    if (!X.all_finite() || !Y.all_finite()) throw InvariantError("regression data contains NaN or Inf");
}

}  // namespace

RegressionTree fit_tree(const Tensor& X, const Tensor& Y, std::span<const std::size_t> rows,
                        const ForestParams& params, Rng& rng, TreeFitTrace* trace) {
    check_xy(X, Y);
    params.validate();
    if (rows.empty()) throw InvariantError("fit_tree: no training rows");
    for (std::size_t r : rows)
        if (r >= X.extent(0)) throw DimensionError("fit_tree: row index out of range");
    TreeBuilder b(X, Y, params, rng, trace);
    return RegressionTree(b.build(std::vector<std::size_t>(rows.begin(), rows.end())), X.extent(1), Y.extent(1));
}

RandomForestModel::RandomForestModel(std::vector<RegressionTree> trees, ForestParams params, std::uint64_t seed)
    : trees_(std::move(trees)), params_(params), seed_(seed) {
    if (trees_.empty()) throw InvariantError("random forest has no trees");
    for (const auto& t : trees_)
        if (t.n_features() != trees_.front().n_features() || t.n_targets() != trees_.front().n_targets())
            throw InvariantError("random forest trees disagree on dimensions");
}

std::vector<float> RandomForestModel::predict(std::span<const float> x) const {
    if (trees_.empty()) throw InvariantError("random forest has no trees");
    if (x.size() != n_features())
        throw DimensionError("forest expects " + std::to_string(n_features()) + " features, got " +
                             std::to_string(x.size()));
    std::vector<double> acc(n_targets(), 0.0);
    for (const auto& t : trees_) {
        auto v = t.predict(x);
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += v[j];
    }
    std::vector<float> out(acc.size());
    for (std::size_t j = 0; j < acc.size(); ++j)
        out[j] = static_cast<float>(acc[j] / static_cast<double>(trees_.size()));
    return out;
}

RandomForestModel fit_forest(const Tensor& X, const Tensor& Y, const ForestParams& params, std::uint64_t seed,
                             std::vector<TreeFitTrace>* traces) {
    check_xy(X, Y);
    params.validate();
    const std::size_t n = X.extent(0);
    std::vector<RegressionTree> trees(params.n_trees);
    if (traces) traces->assign(params.n_trees, {});
    parallel_for(params.n_trees, [&](std::size_t t) {
        Rng rng(Rng::derive(seed, t));
        std::vector<std::size_t> rows(n);
        if (params.bootstrap) {
            for (auto& r : rows) r = rng.index(n);
        } else {
            std::iota(rows.begin(), rows.end(), 0);
        }
        trees[t] = fit_tree(X, Y, rows, params, rng, traces ? &(*traces)[t] : nullptr);
    });
    return RandomForestModel(std::move(trees), params, seed);
}

// ---- gradient descent -------------------------------------------------------------

void GDConfig::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("gd: learning rate must be > 0");
    if (epochs == 0) throw ConfigError("gd: epochs must be >= 1");
    if (!(l2 >= 0.0)) throw ConfigError("gd: l2 must be >= 0");
}

GDRegressor::GDRegressor(Tensor weights, Tensor bias, GDConfig config)
    : weights_(std::move(weights)), bias_(std::move(bias)), config_(config) {
    if (weights_.rank() != 2 || bias_.rank() != 1 || bias_.extent(0) != weights_.extent(0))
        throw DimensionError("gd regressor needs weights [T, F] and bias [T]");
}

std::vector<float> GDRegressor::predict(std::span<const float> x) const {
    const std::size_t F = n_features(), T = n_targets();
    if (x.size() != F)
        throw DimensionError("gd regressor expects " + std::to_string(F) + " features, got " +
                             std::to_string(x.size()));
    std::vector<float> out(T);
    for (std::size_t t = 0; t < T; ++t) {
        double acc = bias_[t];
        for (std::size_t f = 0; f < F; ++f) acc += static_cast<double>(weights_.at(t, f)) * x[f];
        out[t] = static_cast<float>(acc);
    }
    return out;
}

GDFit fit_gd(const Tensor& X, const Tensor& Y, const GDConfig& config) {
    check_xy(X, Y);
    config.validate();
    const std::size_t N = X.extent(0), F = X.extent(1), T = Y.extent(1);
    std::vector<double> W(T * F, 0.0), b(T, 0.0), gW(T * F), gb(T), r(T);
    GDFit fit;
    fit.loss_history.reserve(config.epochs);
    const double invN = 1.0 / static_cast<double>(N);

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::fill(gW.begin(), gW.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        double sse = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            const float* xn = X.data().data() + n * F;
            const float* yn = Y.data().data() + n * T;
            for (std::size_t t = 0; t < T; ++t) {
                double acc = b[t];
                const double* wrow = W.data() + t * F;
                for (std::size_t f = 0; f < F; ++f) acc += wrow[f] * xn[f];
                r[t] = acc - yn[t];
                sse += r[t] * r[t];
            }
            for (std::size_t t = 0; t < T; ++t) {
                double* grow = gW.data() + t * F;
                const double rt = r[t];
                for (std::size_t f = 0; f < F; ++f) grow[f] += rt * xn[f];
                gb[t] += rt;
            }
        }
        double w2 = 0.0;
        for (double w : W) w2 += w * w;
        const double loss = sse * invN + config.l2 * w2;
        if (!std::isfinite(loss))
            throw NumericError("gd: non-finite loss at epoch " + std::to_string(epoch) +
                               " (learning rate too large?)");
        fit.loss_history.push_back(loss);
        for (std::size_t i = 0; i < W.size(); ++i)
            W[i] -= config.learning_rate * (2.0 * invN * gW[i] + 2.0 * config.l2 * W[i]);
        for (std::size_t t = 0; t < T; ++t) b[t] -= config.learning_rate * 2.0 * invN * gb[t];
    }
    Tensor wt({T, F}), bt({T});
    for (std::size_t i = 0; i < W.size(); ++i) wt[i] = static_cast<float>(W[i]);
    for (std::size_t t = 0; t < T; ++t) bt[t] = static_cast<float>(b[t]);
    if (!wt.all_finite() || !bt.all_finite()) throw NumericError("gd: parameters became non-finite");
    fit.model = GDRegressor(std::move(wt), std::move(bt), config);
    return fit;
}

// ---- StateModel ------------------------------------------------------------------------

std::string to_string(StateModelKind kind) { return kind == StateModelKind::forest ? "forest" : "gd"; }

StateModelKind state_model_kind_from_string(const std::string& name) {
    if (name == "forest" || name == "rf" || name == "random_forest") return StateModelKind::forest;
    if (name == "gd" || name == "gradient_descent") return StateModelKind::gd;
    throw ConfigError("unknown state model '" + name + "' (expected forest or gd)");
}

std::vector<float> StateModel::predict(std::span<const float> x) const {
    auto delta = std::visit([&](const auto& m) { return m.predict(x); }, model_);
    if (delta.size() != x.size()) throw InvariantError("state model output width differs from its input width");
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += x[i];
    return delta;
}

StateModel StateModel::fit(const Tensor& X, const Tensor& Y, const StateModelConfig& config) {
    check_xy(X, Y);
    if (X.extent(1) != Y.extent(1))
        throw DimensionError("state model needs matching input and output widths, got " +
                             std::to_string(X.extent(1)) + " and " + std::to_string(Y.extent(1)));
    Tensor delta = Y;
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] -= X[i];
    if (config.kind == StateModelKind::forest) return StateModel(fit_forest(X, delta, config.forest, config.seed));
    return StateModel(fit_gd(X, delta, config.gd).model);
}

std::size_t StateModel::n_features() const {
    return std::visit([](const auto& m) { return m.n_features(); }, model_);
}

std::size_t StateModel::n_targets() const {
    return std::visit([](const auto& m) { return m.n_targets(); }, model_);
}

std::vector<std::uint8_t> encode_forest(const RandomForestModel& forest) {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(forest.trees().size()));
    w.u32(static_cast<std::uint32_t>(forest.n_features()));
    w.u32(static_cast<std::uint32_t>(forest.n_targets()));
    for (const auto& tree : forest.trees()) {
        w.u32(static_cast<std::uint32_t>(tree.nodes().size()));
        for (const auto& n : tree.nodes()) {
            w.u8(n.leaf ? 1 : 0);
            if (n.leaf) {
                w.u32(static_cast<std::uint32_t>(n.value.size()));
                w.f32s(n.value);
            } else {
                w.u32(n.feature);
                w.f32(n.threshold);
            }
        }
    }
    return w.take();
}

namespace {

// Rebuilds right-child links from the pre-order sequence.
std::size_t link_subtree(std::vector<TreeNode>& nodes, std::size_t i, const std::string& context) {
    if (i >= nodes.size()) throw IoError(context + ": forest node list ends inside a subtree");
    if (nodes[i].leaf) return i + 1;
    const std::size_t right = link_subtree(nodes, i + 1, context);
    nodes[i].right = static_cast<std::uint32_t>(right);
    return link_subtree(nodes, right, context);
}

}  // namespace

RandomForestModel decode_forest(std::span<const std::uint8_t> bytes, const ForestParams& params, std::uint64_t seed) {
    ByteReader r(bytes, "forest section");
    const std::uint32_t n_trees = r.u32(), F = r.u32(), T = r.u32();
    std::vector<RegressionTree> trees;
    trees.reserve(n_trees);
    for (std::uint32_t t = 0; t < n_trees; ++t) {
        const std::uint32_t count = r.u32();
        std::vector<TreeNode> nodes(count);
        for (auto& n : nodes) {
            const std::uint8_t kind = r.u8();
            if (kind > 1) throw IoError("forest section: unknown node kind " + std::to_string(kind));
            n.leaf = kind == 1;
            if (n.leaf) {
                const std::uint32_t dims = r.u32();
                if (dims != T) throw IoError("forest section: leaf dimension mismatch");
                n.value.resize(dims);
                r.f32s(n.value);
            } else {
                n.feature = r.u32();
                n.threshold = r.f32();
            }
        }
        if (link_subtree(nodes, 0, "forest section") != nodes.size())
            throw IoError("forest section: tree " + std::to_string(t) + " has trailing nodes");
        trees.emplace_back(std::move(nodes), F, T);
    }
    if (!r.at_end()) throw IoError("forest section: trailing bytes");
    return RandomForestModel(std::move(trees), params, seed);
}

Checkpoint StateModel::to_checkpoint() const {
    Checkpoint ck;
    json cfg;
    if (kind() == StateModelKind::forest) {
        const auto& f = forest();
        cfg = {{"kind", "forest"},
               {"n_trees", f.params().n_trees},
               {"max_depth", f.params().max_depth},
               {"min_samples_leaf", f.params().min_samples_leaf},
               {"feature_subsample", f.params().feature_subsample},
               {"bootstrap", f.params().bootstrap},
               {"seed", f.seed()}};
        ck.sections["forest"] = encode_forest(f);
    } else {
        const auto& g = gd();
        cfg = {{"kind", "gd"},
               {"learning_rate", g.config().learning_rate},
               {"epochs", g.config().epochs},
               {"l2", g.config().l2}};
        ck.tensors = {g.weights(), g.bias()};
    }
    ck.set_text_section("config", cfg.dump());
    return ck;
}

StateModel StateModel::from_checkpoint(const Checkpoint& ckpt) {
    json cfg;
    try {
        cfg = json::parse(ckpt.text_section("config"));
        const std::string kind = cfg.at("kind").get<std::string>();
        if (kind == "forest") {
            ForestParams p;
            p.n_trees = cfg.at("n_trees").get<std::size_t>();
            p.max_depth = cfg.at("max_depth").get<std::size_t>();
            p.min_samples_leaf = cfg.at("min_samples_leaf").get<std::size_t>();
            p.feature_subsample = cfg.at("feature_subsample").get<std::size_t>();
            p.bootstrap = cfg.at("bootstrap").get<bool>();
            return StateModel(decode_forest(ckpt.section("forest"), p, cfg.at("seed").get<std::uint64_t>()));
        }
        if (kind == "gd") {
            if (ckpt.tensors.size() != 2) throw IoError("gd checkpoint must hold exactly 2 tensors");
            GDConfig c{cfg.at("learning_rate").get<double>(), cfg.at("epochs").get<std::size_t>(),
                       cfg.at("l2").get<double>()};
            return StateModel(GDRegressor(ckpt.tensors[0], ckpt.tensors[1], c));
        }
        throw IoError("state checkpoint has unknown kind '" + kind + "'");
    } catch (const json::exception& e) {
        throw IoError(std::string("state checkpoint config: ") + e.what());
    }
}

std::pair<Tensor, Tensor> state_regression_data(std::span<const Sample> samples, const Normalizer& normalizer) {
    if (samples.empty()) throw InvariantError("state regression: no samples");
    const std::size_t d = normalizer.state_dim();
    Tensor X({samples.size(), d}), Y({samples.size(), d});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        auto x = normalizer.apply_state(samples[i].current_state().to_vector());
        auto y = normalizer.apply_state(samples[i].target_next_state().to_vector());
        std::copy(x.begin(), x.end(), X.data().begin() + i * d);
        std::copy(y.begin(), y.end(), Y.data().begin() + i * d);
    }
    return {std::move(X), std::move(Y)};
}

}  // namespace dml
