#include "dmlram/c_api.h"

#include <cstdio>
#include <exception>
#include <new>
#include <sstream>
#include <string>

#include "dmlram/error.hpp"
#include "dmlram/experiment.hpp"
#include "dmlram/metrics.hpp"
#include "dmlram/synthetic.hpp"
#include "json.hpp"

struct dml_text {
    std::string value;
};

struct dml_experiment {
    dml::ExperimentConfig config;
};

struct dml_pipeline {
    std::unique_ptr<dml::Pipeline> pipeline;
};

namespace {

using json = nlohmann::json;

thread_local std::string g_last_error;

class ArgumentError : public dml::Error {
public:
    using dml::Error::Error;
};

dml_status fail(dml_status status, const std::string& message) {
    g_last_error = message;
    return status;
}

// Runs fn, mapping library exceptions onto status codes.
template <typename Fn>
dml_status guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return DML_OK;
    } catch (const ArgumentError& e) {
        return fail(DML_ERR_ARGUMENT, e.what());
    } catch (const dml::DimensionError& e) {
        return fail(DML_ERR_DIMENSION, e.what());
    } catch (const dml::ConfigError& e) {
        return fail(DML_ERR_CONFIG, e.what());
    } catch (const dml::NumericError& e) {
        return fail(DML_ERR_NUMERIC, e.what());
    } catch (const dml::IoError& e) {
        return fail(DML_ERR_IO, e.what());
    } catch (const dml::InvariantError& e) {
        return fail(DML_ERR_INVARIANT, e.what());
    } catch (const std::bad_alloc&) {
        return fail(DML_ERR_INTERNAL, "out of memory");
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(DML_ERR_IO, e.what());
    } catch (const std::exception& e) {
        return fail(DML_ERR_INTERNAL, e.what());
    } catch (...) {
        return fail(DML_ERR_INTERNAL, "unknown error");
    }
}

void require(const void* p, const char* name) {
    if (!p) throw ArgumentError(std::string(name) + " must not be NULL");
}

void emit(dml_text** out, std::string value) {
    if (out) *out = new dml_text{std::move(value)};
}

dml::SplitName parse_split(const char* split) {
    require(split, "split");
    try {
        return dml::split_from_string(split);
    } catch (const dml::Error& e) {
        throw ArgumentError(e.what());
    }
}

std::string consistency_text(const std::vector<dml::ConsistencyResult>& results, double tolerance) {
    std::size_t wt = 5, wm = 5;
    for (const auto& r : results) {
        wt = std::max(wt, r.row.table.size());
        wm = std::max(wm, r.row.model.size());
    }
    std::ostringstream out;
    char buf[160];
    auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w - std::min(w, s.size()), ' '); };
    out << pad("Table", wt) << "  " << pad("Model", wm);
    std::snprintf(buf, sizeof buf, "  %10s  %10s  %10s  %9s  %s\n", "MSE", "RMSE", "sqrt(MSE)", "deviation", "status");
    out << buf;
    std::size_t flagged = 0;
    for (const auto& r : results) {
        out << pad(r.row.table, wt) << "  " << pad(r.row.model, wm);
        std::snprintf(buf, sizeof buf, "  %10.5g  %10.5g  %10.5g  %8.2f%%  %s\n", r.row.mse, r.row.rmse, r.sqrt_mse,
                      100.0 * r.deviation, r.flagged ? "FLAGGED" : "ok");
        out << buf;
        flagged += r.flagged ? 1 : 0;
    }
    std::snprintf(buf, sizeof buf, "%zu of %zu rows flagged at %.2f%% tolerance\n", flagged, results.size(),
                  100.0 * tolerance);
    out << buf;
    return out.str();
}

}  // namespace

extern "C" {

const char* dml_version(void) { return "0.1.0"; }

const char* dml_status_name(dml_status status) {
    switch (status) {
        case DML_OK: return "ok";
        case DML_ERR_ARGUMENT: return "argument";
        case DML_ERR_DIMENSION: return "dimension";
        case DML_ERR_CONFIG: return "config";
        case DML_ERR_NUMERIC: return "numeric";
        case DML_ERR_IO: return "io";
        case DML_ERR_INVARIANT: return "invariant";
        case DML_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

const char* dml_last_error(void) { return g_last_error.c_str(); }

const char* dml_text_data(const dml_text* text) { return text ? text->value.c_str() : ""; }
size_t dml_text_size(const dml_text* text) { return text ? text->value.size() : 0; }
void dml_text_free(dml_text* text) { delete text; }

dml_status dml_generate_synthetic(const char* out_dir, size_t n_traj, size_t steps, size_t image_size, uint64_t seed,
                                  dml_text** summary_json) {
    return guarded([&] {
        require(out_dir, "out_dir");
        dml::SyntheticConfig c;
        c.n_traj = n_traj;
        c.steps_per_traj = steps;
        c.image_size = image_size;
        c.seed = seed;
        const dml::Dataset ds = dml::generate_synthetic(c);
        dml::save_dataset(out_dir, ds);
        json j = {{"out", out_dir},
                  {"trajectories", ds.trajectories.size()},
                  {"steps", steps},
                  {"image_size", image_size},
                  {"seed", seed},
                  {"fingerprint", dml::dataset_fingerprint(ds)}};
        emit(summary_json, j.dump(2) + "\n");
    });
}

dml_status dml_compute_metrics(const float* preds, const float* targets, size_t n, size_t a, double* mse, double* mae,
                               double* rmse) {
    return guarded([&] {
        require(preds, "preds");
        require(targets, "targets");
        if (n == 0 || a == 0) throw dml::InvariantError("compute_metrics: empty input");
        dml::Tensor p({n, a}, std::vector<float>(preds, preds + n * a));
        dml::Tensor t({n, a}, std::vector<float>(targets, targets + n * a));
        const dml::MetricsReport r = dml::compute_metrics(p, t);
        if (mse) *mse = r.mse;
        if (mae) *mae = r.mae;
        if (rmse) *rmse = r.rmse;
    });
}

dml_status dml_check_tables(const char* csv_path, double tolerance, size_t* flagged, dml_text** report_json,
                            dml_text** report_text) {
    return guarded([&] {
        require(csv_path, "csv_path");
        const auto rows = dml::read_table_csv(csv_path);
        const auto results = dml::check_table_consistency(rows, tolerance);
        std::size_t n = 0;
        json arr = json::array();
        for (const auto& r : results) {
            n += r.flagged ? 1 : 0;
            arr.push_back({{"table", r.row.table},
                           {"model", r.row.model},
                           {"mse", r.row.mse},
                           {"rmse", r.row.rmse},
                           {"sqrt_mse", r.sqrt_mse},
                           {"deviation", r.deviation},
                           {"flagged", r.flagged}});
        }
        if (flagged) *flagged = n;
        emit(report_json, json{{"tolerance", tolerance}, {"flagged", n}, {"rows", arr}}.dump(2) + "\n");
        emit(report_text, consistency_text(results, tolerance));
    });
}

dml_status dml_experiment_load(const char* config_path, dml_experiment** out) {
    return guarded([&] {
        require(config_path, "config_path");
        require(out, "out");
        *out = new dml_experiment{dml::ExperimentConfig::load(config_path)};
    });
}

dml_status dml_experiment_parse(const char* json_text, const char* base_dir, dml_experiment** out) {
    return guarded([&] {
        require(json_text, "json_text");
        require(out, "out");
        *out = new dml_experiment{dml::ExperimentConfig::parse(json_text, base_dir ? base_dir : "")};
    });
}

void dml_experiment_free(dml_experiment* experiment) { delete experiment; }

dml_status dml_experiment_config_json(const dml_experiment* experiment, dml_text** out) {
    return guarded([&] {
        require(experiment, "experiment");
        require(out, "out");
        emit(out, experiment->config.to_json() + "\n");
    });
}

dml_status dml_experiment_train(const dml_experiment* experiment, const char* stage, const char* out_dir,
                                dml_text** summary_json) {
    return guarded([&] {
        require(experiment, "experiment");
        require(stage, "stage");
        require(out_dir, "out_dir");
        emit(summary_json, dml::run_train_stage(experiment->config, stage, out_dir));
    });
}

dml_status dml_experiment_compare(const dml_experiment* experiment, dml_text** report_json, dml_text** report_text,
                                  int* all_ok) {
    return guarded([&] {
        require(experiment, "experiment");
        const dml::ComparisonTable table = dml::run_comparison(experiment->config);
        if (all_ok) *all_ok = table.all_ok() ? 1 : 0;
        emit(report_json, dml::comparison_json(table));
        emit(report_text, dml::comparison_text(table));
    });
}

dml_status dml_pipeline_load(const char* bundle_path, dml_pipeline** out) {
    return guarded([&] {
        require(bundle_path, "bundle_path");
        require(out, "out");
        *out = new dml_pipeline{std::make_unique<dml::Pipeline>(dml::load_pipeline(bundle_path))};
    });
}

void dml_pipeline_free(dml_pipeline* pipeline) { delete pipeline; }

dml_status dml_pipeline_dims(const dml_pipeline* pipeline, size_t* window, size_t* channels, size_t* height,
                             size_t* width, size_t* state_dim, size_t* action_dim) {
    return guarded([&] {
        require(pipeline, "pipeline");
        const auto& vc = pipeline->pipeline->visual().config();
        if (window) *window = vc.window_size;
        if (channels) *channels = vc.geometry.channels;
        if (height) *height = vc.geometry.height;
        if (width) *width = vc.geometry.width;
        if (state_dim) *state_dim = pipeline->pipeline->normalizer().state_dim();
        if (action_dim) *action_dim = pipeline->pipeline->normalizer().action_dim();
    });
}

dml_status dml_pipeline_predict(const dml_pipeline* pipeline, const float* images, size_t images_len,
                                const float* state, size_t state_len, const char* key, float* action,
                                size_t action_len) {
    return guarded([&] {
        require(pipeline, "pipeline");
        require(images, "images");
        require(state, "state");
        require(action, "action");
        const dml::Pipeline& p = *pipeline->pipeline;
        const auto& vc = p.visual().config();
        const std::size_t frame = vc.geometry.pixel_count();
        if (images_len != vc.window_size * frame)
            throw dml::DimensionError("images: expected " + std::to_string(vc.window_size * frame) +
                                      " values, got " + std::to_string(images_len));
        const std::size_t sd = p.normalizer().state_dim();
        if (state_len != sd || sd < 1 || (sd - 1) % 3 != 0)
            throw dml::DimensionError("state: expected " + std::to_string(sd) + " values, got " +
                                      std::to_string(state_len));
        if (action_len != p.normalizer().action_dim())
            throw dml::DimensionError("action: expected " + std::to_string(p.normalizer().action_dim()) +
                                      " values, got " + std::to_string(action_len));
        const dml::Tensor window({vc.window_size * vc.geometry.channels, vc.geometry.height, vc.geometry.width},
                                 std::vector<float>(images, images + images_len));
        const auto current = dml::RobotState::from_vector(std::span<const float>(state, state_len), (sd - 1) / 3);
        const auto y = p.fusion().predict(p.upstream(window, current, key ? key : ""));
        const auto raw = p.normalizer().invert_action(y);
        std::copy(raw.begin(), raw.end(), action);
    });
}

dml_status dml_evaluate_bundle(const char* bundle_path, const char* data_path, const char* split,
                               dml_text** report_json) {
    return guarded([&] {
        require(bundle_path, "bundle_path");
        require(data_path, "data_path");
        const dml::SplitName s = parse_split(split);
        emit(report_json, dml::evaluate_bundle(bundle_path, data_path, s));
    });
}

}  // extern "C"
