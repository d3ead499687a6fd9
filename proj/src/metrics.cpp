#include "dmlram/metrics.hpp"

#include <cctype>
#include <cmath>
#include <sstream>

#include "dmlram/binary_io.hpp"
#include "dmlram/error.hpp"
#include "dmlram/fusion_model.hpp"
#include "dmlram/parallel.hpp"

namespace dml {

namespace {

MetricsReport finish(double sq, double abs, std::size_t rows, std::size_t elements) {
    MetricsReport r;
    r.count = rows;
    r.mse = sq / static_cast<double>(elements);
    r.mae = abs / static_cast<double>(elements);
    r.rmse = std::sqrt(r.mse);
    // Equal-magnitude residuals make mae and rmse mathematically equal; keep
    // rounding from putting mae above rmse.
    if (r.mae > r.rmse) r.mae = r.rmse;
    return r;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (char ch : line) {
        if (ch == '"') {
            quoted = !quoted;
        } else if (ch == ',' && !quoted) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(trim(cur));
    return out;
}

}  // namespace

MetricsReport compute_metrics(const Tensor& preds, const Tensor& targets) {
    if (preds.shape() != targets.shape())
        throw DimensionError("compute_metrics: prediction shape " + shape_string(preds.shape()) +
                             " != target shape " + shape_string(targets.shape()));
    if (preds.rank() != 2) throw DimensionError("compute_metrics: expected [N, A] matrices");
    if (preds.extent(0) == 0 || preds.extent(1) == 0) throw InvariantError("compute_metrics: empty input");
    double sq = 0.0, abs = 0.0;
    const auto p = preds.data();
    const auto t = targets.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double r = static_cast<double>(p[i]) - static_cast<double>(t[i]);
        sq += r * r;
        abs += std::fabs(r);
    }
    return finish(sq, abs, preds.extent(0), p.size());
}

MetricsReport compute_metrics(std::span<const std::vector<float>> preds, std::span<const std::vector<float>> targets) {
    if (preds.size() != targets.size())
        throw DimensionError("compute_metrics: " + std::to_string(preds.size()) + " predictions for " +
                             std::to_string(targets.size()) + " targets");
    if (preds.empty()) throw InvariantError("compute_metrics: empty input");
    const std::size_t a = targets.front().size();
    if (a == 0) throw InvariantError("compute_metrics: zero-width rows");
    double sq = 0.0, abs = 0.0;
    for (std::size_t n = 0; n < preds.size(); ++n) {
        if (preds[n].size() != a || targets[n].size() != a)
            throw DimensionError("compute_metrics: row " + std::to_string(n) + " has width " +
                                 std::to_string(preds[n].size()) + "/" + std::to_string(targets[n].size()) +
                                 ", expected " + std::to_string(a));
        for (std::size_t k = 0; k < a; ++k) {
            const double r = static_cast<double>(preds[n][k]) - static_cast<double>(targets[n][k]);
            sq += r * r;
            abs += std::fabs(r);
        }
    }
    return finish(sq, abs, preds.size(), preds.size() * a);
}

void check_report(const MetricsReport& r) {
    if (!(r.mse >= 0.0 && r.mae >= 0.0 && r.rmse >= 0.0))
        throw InvariantError("metrics report '" + r.model + "' has negative or NaN entries");
    if (std::fabs(r.rmse * r.rmse - r.mse) > 1e-9)
        throw InvariantError("metrics report '" + r.model + "': rmse^2 != mse");
    if (r.mae > r.rmse) throw InvariantError("metrics report '" + r.model + "': mae > rmse");
}

Evaluation evaluate_predictions(const Normalizer& normalizer, std::span<const std::vector<float>> normalized_preds,
                                std::span<const Sample> samples, const std::string& model, const std::string& split) {
    if (samples.empty()) throw InvariantError("evaluate: split '" + split + "' is empty");
    if (normalized_preds.size() != samples.size())
        throw DimensionError("evaluate: " + std::to_string(normalized_preds.size()) + " predictions for " +
                             std::to_string(samples.size()) + " samples");
    std::vector<std::vector<float>> raw_pred, raw_target, norm_target;
    raw_pred.reserve(samples.size());
    raw_target.reserve(samples.size());
    norm_target.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& a = samples[i].target_action().values;
        raw_target.push_back(a);
        norm_target.push_back(normalizer.apply_action(a));
        raw_pred.push_back(normalizer.invert_action(normalized_preds[i]));
    }
    Evaluation e;
    e.normalized = compute_metrics(normalized_preds, norm_target);
    e.denormalized = compute_metrics(raw_pred, raw_target);
    for (MetricsReport* r : {&e.normalized, &e.denormalized}) {
        r->model = model;
        r->split = split;
        check_report(*r);
    }
    return e;
}

Evaluation evaluate(const Pipeline& pipeline, std::span<const Sample> samples, const std::string& model,
                    const std::string& split) {
    if (samples.empty()) throw InvariantError("evaluate: split '" + split + "' is empty");
    std::vector<std::vector<float>> preds(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) { preds[i] = pipeline.predict_normalized(samples[i]); });
    return evaluate_predictions(pipeline.normalizer(), preds, samples, model, split);
}

std::vector<ConsistencyResult> check_table_consistency(std::span<const TableRow> rows, double tolerance) {
    if (!(tolerance >= 0.0)) throw ConfigError("check_table_consistency: tolerance must be >= 0");
    std::vector<ConsistencyResult> out;
    out.reserve(rows.size());
    for (const auto& row : rows) {
        if (!(row.mse >= 0.0) || !(row.rmse >= 0.0) || !std::isfinite(row.mse) || !std::isfinite(row.rmse))
            throw InvariantError("check_table_consistency: row '" + row.table + " / " + row.model +
                                 "' has a negative or non-finite value");
        ConsistencyResult c;
        c.row = row;
        c.sqrt_mse = std::sqrt(row.mse);
        if (row.rmse == 0.0) {
            c.deviation = c.sqrt_mse == 0.0 ? 0.0 : INFINITY;
        } else {
            c.deviation = std::fabs(c.sqrt_mse - row.rmse) / row.rmse;
        }
        c.flagged = c.deviation > tolerance;
        out.push_back(c);
    }
    return out;
}

std::vector<TableRow> parse_table_csv(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> header;
    std::vector<TableRow> rows;
    std::size_t line_no = 0;
    int col_table = -1, col_model = -1, col_mse = -1, col_rmse = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty() || trim(line)[0] == '#') continue;
        auto cells = split_csv_line(line);
        if (header.empty()) {
            header = cells;
            for (std::size_t i = 0; i < header.size(); ++i) {
                std::string h;
                for (char ch : header[i]) h += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
                const int idx = static_cast<int>(i);
                if (h == "table") col_table = idx;
                if (h == "model" || h == "row" || h == "name") col_model = idx;
                if (h == "mse") col_mse = idx;
                if (h == "rmse") col_rmse = idx;
            }
            if (col_mse < 0 || col_rmse < 0)
                throw IoError(origin + ": header must contain 'mse' and 'rmse' columns");
            continue;
        }
        if (cells.size() != header.size())
            throw IoError(origin + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                          " columns, got " + std::to_string(cells.size()));
        auto number = [&](int col) {
            const std::string& s = cells[static_cast<std::size_t>(col)];
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(s, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != s.size())
                throw IoError(origin + ":" + std::to_string(line_no) + ": '" + s + "' is not a number");
            return v;
        };
        TableRow r;
        if (col_table >= 0) r.table = cells[static_cast<std::size_t>(col_table)];
        r.model = col_model >= 0 ? cells[static_cast<std::size_t>(col_model)] : "line " + std::to_string(line_no);
        r.mse = number(col_mse);
        r.rmse = number(col_rmse);
        rows.push_back(std::move(r));
    }
    if (header.empty()) throw IoError(origin + ": no header line");
    return rows;
}

std::vector<TableRow> read_table_csv(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return parse_table_csv(std::string(bytes.begin(), bytes.end()), path.string());
}

}  // namespace dml
