#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dmlram/dataset.hpp"
#include "dmlram/tensor.hpp"

namespace dml {

class Pipeline;

// Element-wise errors over all N*A residuals. rmse is always sqrt(mse).
struct MetricsReport {
    double mse = 0.0;
    double mae = 0.0;
    double rmse = 0.0;
    std::size_t count = 0;  // number of rows N
    std::string model;
    std::string split;
};

// preds and targets are [N, A] with N >= 1.
MetricsReport compute_metrics(const Tensor& preds, const Tensor& targets);
MetricsReport compute_metrics(std::span<const std::vector<float>> preds, std::span<const std::vector<float>> targets);

// Throws InvariantError unless rmse^2 == mse (1e-9) and mae <= rmse.
void check_report(const MetricsReport& report);

struct Evaluation {
    MetricsReport normalized;    // headline numbers
    MetricsReport denormalized;  // physical action units
};

// Scores normalised action predictions against the samples' actions.
Evaluation evaluate_predictions(const Normalizer& normalizer, std::span<const std::vector<float>> normalized_preds,
                                std::span<const Sample> samples, const std::string& model, const std::string& split);

Evaluation evaluate(const Pipeline& pipeline, std::span<const Sample> samples, const std::string& model,
                    const std::string& split);

// ---- published table audit ----------------------------------------------------------

struct TableRow {
    std::string table;
    std::string model;
    double mse = 0.0;
    double rmse = 0.0;
};

struct ConsistencyResult {
    TableRow row;
    double sqrt_mse = 0.0;
    double deviation = 0.0;  // |sqrt(mse) - rmse| / rmse
    bool flagged = false;
};

inline constexpr double kTableTolerance = 0.05;

// Flags rows whose RMSE is not the square root of their MSE within
// `tolerance`. Negative values are rejected with InvariantError.
std::vector<ConsistencyResult> check_table_consistency(std::span<const TableRow> rows,
                                                       double tolerance = kTableTolerance);

// CSV with a header naming at least the columns mse and rmse; optional
// columns table and model label the rows.
std::vector<TableRow> read_table_csv(const std::filesystem::path& path);
std::vector<TableRow> parse_table_csv(const std::string& text, const std::string& origin);

}  // namespace dml
