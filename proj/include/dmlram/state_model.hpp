#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dmlram/binary_io.hpp"
#include "dmlram/dataset.hpp"
#include "dmlram/rng.hpp"
#include "dmlram/tensor.hpp"

namespace dml {

// ---- random forest ----------------------------------------------------------

struct ForestParams {
    std::size_t n_trees = 50;
    std::size_t max_depth = 12;
    std::size_t min_samples_leaf = 2;
    // Features considered per split; 0 means ceil(F / 3).
    std::size_t feature_subsample = 0;
    bool bootstrap = true;

    void validate() const;
    std::size_t features_per_split(std::size_t n_features) const;
};

// Flat pre-order node list: an internal node is followed by its left
// subtree, then its right subtree.
struct TreeNode {
    bool leaf = true;
    std::uint32_t feature = 0;
    float threshold = 0.0f;
    std::uint32_t right = 0;  // index of the right child; left child is this + 1
    std::vector<float> value;  // leaf only
};

class RegressionTree {
public:
    RegressionTree() = default;
    RegressionTree(std::vector<TreeNode> nodes, std::size_t n_features, std::size_t n_targets);

    // x[feature] <= threshold goes left.
    std::span<const float> predict(std::span<const float> x) const;
    std::size_t leaf_index(std::span<const float> x) const;

    const std::vector<TreeNode>& nodes() const { return nodes_; }
    std::size_t n_features() const { return n_features_; }
    std::size_t n_targets() const { return n_targets_; }
    std::size_t depth() const;
    std::size_t leaf_count() const;

    friend bool operator==(const RegressionTree&, const RegressionTree&);

private:
    std::vector<TreeNode> nodes_;
    std::size_t n_features_ = 0;
    std::size_t n_targets_ = 0;
};

bool operator==(const TreeNode& a, const TreeNode& b);

// Optional instrumentation: the training rows (with bootstrap repeats) that
// reached each leaf, keyed by node index.
struct TreeFitTrace {
    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> leaf_rows;
};

// Grows one CART regression tree on X[rows], Y[rows]. Split candidates are
// midpoints between consecutive distinct values; the split minimising the
// summed per-output SSE of the two children wins, ties going to the lower
// feature index and then the lower threshold.
RegressionTree fit_tree(const Tensor& X, const Tensor& Y, std::span<const std::size_t> rows,
                        const ForestParams& params, Rng& rng, TreeFitTrace* trace = nullptr);

class RandomForestModel {
public:
    RandomForestModel() = default;
    RandomForestModel(std::vector<RegressionTree> trees, ForestParams params, std::uint64_t seed);

    std::vector<float> predict(std::span<const float> x) const;

    const std::vector<RegressionTree>& trees() const { return trees_; }
    const ForestParams& params() const { return params_; }
    std::uint64_t seed() const { return seed_; }
    std::size_t n_features() const { return trees_.empty() ? 0 : trees_.front().n_features(); }
    std::size_t n_targets() const { return trees_.empty() ? 0 : trees_.front().n_targets(); }

    friend bool operator==(const RandomForestModel&, const RandomForestModel&) = default;

private:
    std::vector<RegressionTree> trees_;
    ForestParams params_;
    std::uint64_t seed_ = 0;
};

bool operator==(const ForestParams& a, const ForestParams& b);

// X is [N, F], Y is [N, T]. Trees are grown in parallel, each from its own
// seed derived from (seed, tree index), and stored in tree-index order.
RandomForestModel fit_forest(const Tensor& X, const Tensor& Y, const ForestParams& params, std::uint64_t seed,
                             std::vector<TreeFitTrace>* traces = nullptr);

// ---- gradient-descent linear regressor ------------------------------------------

struct GDConfig {
    double learning_rate = 0.05;
    std::size_t epochs = 1000;
    double l2 = 0.0;

    void validate() const;
};

// Affine map W x + b trained by full-batch gradient descent on
//     (1/N) sum_n ||W x_n + b - y_n||^2 + l2 * ||W||^2
class GDRegressor {
public:
    GDRegressor() = default;
    GDRegressor(Tensor weights, Tensor bias, GDConfig config);

    std::vector<float> predict(std::span<const float> x) const;

    const Tensor& weights() const { return weights_; }
    const Tensor& bias() const { return bias_; }
    const GDConfig& config() const { return config_; }
    std::size_t n_features() const { return weights_.extent(1); }
    std::size_t n_targets() const { return weights_.extent(0); }

private:
    Tensor weights_;  // [T, F]
    Tensor bias_;     // [T]
    GDConfig config_;
};

struct GDFit {
    GDRegressor model;
    std::vector<double> loss_history;  // objective before each epoch's update
};

GDFit fit_gd(const Tensor& X, const Tensor& Y, const GDConfig& config);

// ---- Model 2 wrapper --------------------------------------------------------------

enum class StateModelKind { forest, gd };
std::string to_string(StateModelKind kind);
StateModelKind state_model_kind_from_string(const std::string& name);

struct StateModelConfig {
    StateModelKind kind = StateModelKind::forest;
    ForestParams forest;
    GDConfig gd;
    std::uint64_t seed = 7;
};

// Model 2. Both regressors are fitted to the increment y - x and prediction
// adds the input back, so predict(x) = x + f(x) estimates the next state.
class StateModel {
public:
    StateModel() = default;
    explicit StateModel(RandomForestModel forest) : model_(std::move(forest)) {}
    explicit StateModel(GDRegressor gd) : model_(std::move(gd)) {}

    StateModelKind kind() const { return model_.index() == 0 ? StateModelKind::forest : StateModelKind::gd; }
    std::vector<float> predict(std::span<const float> x) const;
    std::size_t n_features() const;
    std::size_t n_targets() const;

    static StateModel fit(const Tensor& X, const Tensor& Y, const StateModelConfig& config);

    const RandomForestModel& forest() const { return std::get<RandomForestModel>(model_); }
    const GDRegressor& gd() const { return std::get<GDRegressor>(model_); }

    Checkpoint to_checkpoint() const;
    static StateModel from_checkpoint(const Checkpoint& ckpt);

private:
    std::variant<RandomForestModel, GDRegressor> model_;
};

// Current-state -> next-state regression pairs from windowed samples, both
// sides standardised by the normaliser. Returns ([N, 3J+1], [N, 3J+1]).
std::pair<Tensor, Tensor> state_regression_data(std::span<const Sample> samples, const Normalizer& normalizer);

// Forest section codec inside a DMLW checkpoint.
std::vector<std::uint8_t> encode_forest(const RandomForestModel& forest);
RandomForestModel decode_forest(std::span<const std::uint8_t> bytes, const ForestParams& params, std::uint64_t seed);

}  // namespace dml
