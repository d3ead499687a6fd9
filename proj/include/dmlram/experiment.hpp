#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dmlram/dataset.hpp"
#include "dmlram/fusion_model.hpp"
#include "dmlram/metrics.hpp"
#include "dmlram/state_model.hpp"
#include "dmlram/synthetic.hpp"
#include "dmlram/visual_model.hpp"

namespace dml {

// A visual backend of the comparison grid: "encoder-conv" (conv head on the
// predicted frame), "encoder-mlp" (mlp head on the bottleneck) or
// "file:PATH" (mlp head on precomputed feature vectors).
struct VisualBackend {
    std::string name;
    HeadKind head = HeadKind::conv;
    std::filesystem::path feature_file;  // file backends only

    static VisualBackend parse(const std::string& name, const std::filesystem::path& base_dir);
    bool uses_encoder() const { return feature_file.empty(); }
};

// Experiment document. Every key is optional; unknown keys are rejected.
//
//   {
//     "dataset": "data/manifest.json",            // or
//     "synthetic": {"n_traj": 200, "steps": 50, "image_size": 32, "seed": 7},
//     "seed": 7,                                   // master seed
//     "split": {"train": 0.7, "val": 0.15, "test": 0.15},
//     "visual": {"bottleneck": 64, "conv1": 8, "conv2": 16, "max_epochs": 12, ...},
//     "forest": {"n_trees": 50, "max_depth": 12, "min_samples_leaf": 2, ...},
//     "gd": {"learning_rate": 0.05, "epochs": 1000, "l2": 0},
//     "fusion": {"head": "conv", "hidden": 64, "max_epochs": 30, ...},
//     "state_model": "forest",                     // used by `train`
//     "grid": {"visual_backends": ["encoder-conv", "encoder-mlp"],
//              "state_models": ["forest", "gd"]}
//   }
//
// Training blocks accept max_epochs, patience, batch_size, optimizer,
// learning_rate, momentum and weight_decay. The master seed drives the split
// and every stage.
struct ExperimentConfig {
    std::optional<std::filesystem::path> dataset_path;
    SyntheticConfig synthetic;
    std::uint64_t seed = 7;
    SplitRatios split;
    VisualConfig visual;
    ForestParams forest;
    GDConfig gd;
    FusionConfig fusion;
    StateModelKind state_model = StateModelKind::forest;
    std::vector<std::string> visual_backends{"encoder-conv", "encoder-mlp"};
    std::vector<std::string> state_models{"forest", "gd"};
    // Directory that relative paths in the document are resolved against.
    std::filesystem::path base_dir;

    void validate() const;
    // Copies the master seed into every stage.
    void apply_seed();

    static ExperimentConfig parse(const std::string& text, const std::filesystem::path& base_dir = {});
    static ExperimentConfig load(const std::filesystem::path& path);
    // Canonical JSON of the resolved settings (sorted keys).
    std::string to_json() const;

    StateModelConfig state_config(StateModelKind kind) const;
};

// Dataset, split and normaliser shared by all stages. Samples borrow from
// `dataset`, so the object is pinned behind a unique_ptr.
struct ExperimentData {
    Dataset dataset;
    SplitIndices split;
    SplitView view;
    Normalizer normalizer;
    std::vector<Sample> train, val, test;
    std::string fingerprint;

    ExperimentData() = default;
    ExperimentData(const ExperimentData&) = delete;
    ExperimentData& operator=(const ExperimentData&) = delete;

    const std::vector<Sample>& samples(SplitName split) const;
};

// Windows are built with `window` frames. The normaliser is fitted on the
// training trajectories only.
std::unique_ptr<ExperimentData> prepare_data(Dataset dataset, const SplitRatios& ratios, std::uint64_t split_seed,
                                             std::size_t window);
std::unique_ptr<ExperimentData> prepare_data(const ExperimentConfig& config);

// ---- stages -------------------------------------------------------------------------

VisualTrainResult train_visual_stage(const ExperimentConfig& config, const ExperimentData& data);
StateModel train_state_stage(const ExperimentConfig& config, const ExperimentData& data, StateModelKind kind);
FusionTrainResult train_fusion_stage(const ExperimentConfig& config, const ExperimentData& data,
                                     const VisualModel& visual, const StateModel& state,
                                     const FileFeatureSource* features, HeadKind head,
                                     Modality modality = Modality::both);

// Normalised next-state error of a state model on one split.
MetricsReport evaluate_state_model(const StateModel& model, const ExperimentData& data, SplitName split);
// Per-pixel next-frame error of the visual model on one split.
MetricsReport evaluate_visual_model(const VisualModel& model, const ExperimentData& data, SplitName split);

// JSON object with the seeds and split settings stored in a bundle.
std::string bundle_seeds_json(const ExperimentConfig& config);

// Runs one `train` stage ("visual", "state", "fusion" or "all") and writes
// its checkpoints into out_dir. "fusion" reuses visual.dmlw and state.dmlw
// from out_dir and finishes the bundle. Returns a JSON summary.
std::string run_train_stage(const ExperimentConfig& config, const std::string& stage,
                            const std::filesystem::path& out_dir);

// Evaluates a saved bundle on one split of a dataset, re-deriving the split
// from the seeds stored in the bundle. Returns a JSON report.
std::string evaluate_bundle(const std::filesystem::path& bundle_path, const std::filesystem::path& data_path,
                            SplitName split);

// ---- comparison grid ------------------------------------------------------------------

struct ComparisonRow {
    std::string visual_backend;
    std::string state_model;
    bool ok = false;
    std::string error;
    Evaluation test;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;

    std::string label() const { return visual_backend + " + " + state_model; }
};

struct ComparisonTable {
    std::string dataset_hash;
    std::string config_json;
    std::optional<MetricsReport> visual;           // next-frame pixels, test split
    std::optional<MetricsReport> mean_frame;       // constant-frame baseline
    std::vector<MetricsReport> state_models;       // next state, test split
    std::vector<std::string> upstream_errors;
    std::vector<ComparisonRow> rows;               // backend outer, state model inner

    bool all_ok() const;
};

// Trains Model 1 and each configured Model 2 once, then every grid cell's
// fusion head in parallel. A failing cell is recorded and the others still run.
ComparisonTable run_comparison(const ExperimentConfig& config);

// Machine-readable report; no timings, so equal inputs give equal bytes.
std::string comparison_json(const ComparisonTable& table);
// Aligned text tables, columns MSE, MAE, RMSE at 5 significant digits.
std::string comparison_text(const ComparisonTable& table);

}  // namespace dml
