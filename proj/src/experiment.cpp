#include "dmlram/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "dmlram/error.hpp"
#include "dmlram/parallel.hpp"
#include "json.hpp"

namespace dml {

using json = nlohmann::json;

namespace {

// Reads keys from a JSON object and rejects the ones nobody asked for.
class Section {
public:
    Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError("experiment: '" + where_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            throw ConfigError("experiment: '" + where_ + "." + key + "' has the wrong type");
        }
    }

    const json* sub(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("experiment: unknown key '" + where_ + "." + it.key() + "'");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

void read_train(Section& s, TrainLoopConfig& t) {
    s.get("max_epochs", t.max_epochs);
    s.get("patience", t.patience);
    s.get("batch_size", t.batch_size);
    std::string opt = t.optimizer.kind == OptimizerKind::sgd ? "sgd" : "sgd_momentum";
    s.get("optimizer", opt);
    if (opt == "sgd") {
        t.optimizer.kind = OptimizerKind::sgd;
    } else if (opt == "sgd_momentum" || opt == "momentum") {
        t.optimizer.kind = OptimizerKind::sgd_momentum;
    } else {
        throw ConfigError("experiment: unknown optimizer '" + opt + "' (expected sgd or sgd_momentum)");
    }
    s.get("learning_rate", t.optimizer.learning_rate);
    s.get("momentum", t.optimizer.momentum);
    s.get("weight_decay", t.optimizer.weight_decay);
}

json train_json(const TrainLoopConfig& t) {
    return {{"max_epochs", t.max_epochs},
            {"patience", t.patience},
            {"batch_size", t.batch_size},
            {"optimizer", t.optimizer.kind == OptimizerKind::sgd ? "sgd" : "sgd_momentum"},
            {"learning_rate", t.optimizer.learning_rate},
            {"momentum", t.optimizer.momentum},
            {"weight_decay", t.optimizer.weight_decay}};
}

json report_json(const MetricsReport& r) {
    return {{"mse", r.mse}, {"mae", r.mae}, {"rmse", r.rmse}, {"count", r.count}, {"model", r.model},
            {"split", r.split}};
}

std::string fmt5(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.5g", v);
    return buf;
}

// Plain-text table with a left-aligned label column and right-aligned numbers.
std::string text_table(const std::string& title, const std::string& label_header,
                       const std::vector<std::pair<std::string, std::vector<std::string>>>& rows) {
    const std::vector<std::string> headers{"MSE", "MAE", "RMSE"};
    std::size_t w0 = label_header.size();
    std::vector<std::size_t> w(headers.size());
    for (std::size_t k = 0; k < headers.size(); ++k) w[k] = headers[k].size();
    for (const auto& [label, cells] : rows) {
        w0 = std::max(w0, label.size());
        for (std::size_t k = 0; k < cells.size() && k < w.size(); ++k) w[k] = std::max(w[k], cells[k].size());
    }
    std::ostringstream out;
    auto line = [&](const std::string& label, const std::vector<std::string>& cells) {
        out << label << std::string(w0 - label.size(), ' ');
        for (std::size_t k = 0; k < w.size(); ++k) {
            const std::string c = k < cells.size() ? cells[k] : "";
            out << "  " << std::string(w[k] - std::min(w[k], c.size()), ' ') << c;
        }
        out << "\n";
    };
    out << title << "\n";
    line(label_header, headers);
    std::size_t total = w0;
    for (auto x : w) total += 2 + x;
    out << std::string(total, '-') << "\n";
    for (const auto& [label, cells] : rows) line(label, cells);
    return out.str();
}

std::vector<std::string> cells(const MetricsReport& r) { return {fmt5(r.mse), fmt5(r.mae), fmt5(r.rmse)}; }

}  // namespace

// ---- config --------------------------------------------------------------------------

VisualBackend VisualBackend::parse(const std::string& name, const std::filesystem::path& base_dir) {
    VisualBackend b;
    b.name = name;
    if (name == "encoder-conv") {
        b.head = HeadKind::conv;
    } else if (name == "encoder-mlp") {
        b.head = HeadKind::mlp;
    } else if (name.rfind("file:", 0) == 0 && name.size() > 5) {
        b.head = HeadKind::mlp;
        std::filesystem::path p = name.substr(5);
        b.feature_file = p.is_absolute() || base_dir.empty() ? p : base_dir / p;
    } else {
        throw ConfigError("experiment: unknown visual backend '" + name +
                          "' (expected encoder-conv, encoder-mlp or file:PATH)");
    }
    return b;
}

void ExperimentConfig::validate() const {
    if (!dataset_path) synthetic.validate();
    const double sum = split.train + split.val + split.test;
    if (split.train <= 0.0 || split.val < 0.0 || split.test <= 0.0 || std::fabs(sum - 1.0) > 1e-9)
        throw ConfigError("experiment: split ratios must be non-negative with train, test > 0 and sum to 1");
    visual.validate();
    forest.validate();
    gd.validate();
    fusion.validate();
    if (visual_backends.empty() || state_models.empty())
        throw ConfigError("experiment: the grid needs at least one visual backend and one state model");
    std::set<std::string> seen;
    for (const auto& b : visual_backends) {
        VisualBackend::parse(b, base_dir);
        if (!seen.insert(b).second) throw ConfigError("experiment: visual backend '" + b + "' listed twice");
    }
    std::set<StateModelKind> kinds;
    for (const auto& s : state_models)
        if (!kinds.insert(state_model_kind_from_string(s)).second)
            throw ConfigError("experiment: state model '" + s + "' listed twice");
}

void ExperimentConfig::apply_seed() {
    visual.train.seed = seed;
    fusion.train.seed = seed;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::filesystem::path& base_dir) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("experiment: invalid JSON: ") + e.what());
    }
    ExperimentConfig c;
    c.base_dir = base_dir;
    Section top(j, "config");

    std::string dataset;
    top.get("dataset", dataset);
    if (!dataset.empty()) {
        std::filesystem::path p = dataset;
        if (!p.is_absolute() && !base_dir.empty()) p = base_dir / p;
        c.dataset_path = p;
    }
    if (const json* s = top.sub("synthetic")) {
        Section sec(*s, "synthetic");
        sec.get("n_traj", c.synthetic.n_traj);
        sec.get("steps", c.synthetic.steps_per_traj);
        sec.get("image_size", c.synthetic.image_size);
        sec.get("seed", c.synthetic.seed);
        sec.finish();
    }
    top.get("seed", c.seed);
    if (const json* s = top.sub("split")) {
        Section sec(*s, "split");
        sec.get("train", c.split.train);
        sec.get("val", c.split.val);
        sec.get("test", c.split.test);
        sec.finish();
    }
    if (const json* s = top.sub("visual")) {
        Section sec(*s, "visual");
        sec.get("window", c.visual.window_size);
        sec.get("bottleneck", c.visual.bottleneck);
        sec.get("conv1", c.visual.conv1_channels);
        sec.get("conv2", c.visual.conv2_channels);
        read_train(sec, c.visual.train);
        sec.finish();
    }
    if (const json* s = top.sub("forest")) {
        Section sec(*s, "forest");
        sec.get("n_trees", c.forest.n_trees);
        sec.get("max_depth", c.forest.max_depth);
        sec.get("min_samples_leaf", c.forest.min_samples_leaf);
        sec.get("feature_subsample", c.forest.feature_subsample);
        sec.get("bootstrap", c.forest.bootstrap);
        sec.finish();
    }
    if (const json* s = top.sub("gd")) {
        Section sec(*s, "gd");
        sec.get("learning_rate", c.gd.learning_rate);
        sec.get("epochs", c.gd.epochs);
        sec.get("l2", c.gd.l2);
        sec.finish();
    }
    if (const json* s = top.sub("fusion")) {
        Section sec(*s, "fusion");
        std::string head = to_string(c.fusion.head);
        sec.get("head", head);
        c.fusion.head = head_kind_from_string(head);
        sec.get("hidden", c.fusion.hidden);
        sec.get("conv1", c.fusion.conv1_channels);
        sec.get("conv2", c.fusion.conv2_channels);
        read_train(sec, c.fusion.train);
        sec.finish();
    }
    std::string sm = to_string(c.state_model);
    top.get("state_model", sm);
    c.state_model = state_model_kind_from_string(sm);
    if (const json* s = top.sub("grid")) {
        Section sec(*s, "grid");
        sec.get("visual_backends", c.visual_backends);
        sec.get("state_models", c.state_models);
        sec.finish();
    }
    top.finish();

    c.synthetic.window_size = c.visual.window_size;
    c.apply_seed();
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return parse(std::string(bytes.begin(), bytes.end()), path.parent_path());
}

std::string ExperimentConfig::to_json() const {
    json j;
    if (dataset_path) {
        j["dataset"] = dataset_path->generic_string();
    } else {
        j["synthetic"] = {{"n_traj", synthetic.n_traj},
                          {"steps", synthetic.steps_per_traj},
                          {"image_size", synthetic.image_size},
                          {"seed", synthetic.seed}};
    }
    j["seed"] = seed;
    j["split"] = {{"train", split.train}, {"val", split.val}, {"test", split.test}};
    json v = train_json(visual.train);
    v["window"] = visual.window_size;
    v["bottleneck"] = visual.bottleneck;
    v["conv1"] = visual.conv1_channels;
    v["conv2"] = visual.conv2_channels;
    j["visual"] = v;
    j["forest"] = {{"n_trees", forest.n_trees},
                   {"max_depth", forest.max_depth},
                   {"min_samples_leaf", forest.min_samples_leaf},
                   {"feature_subsample", forest.feature_subsample},
                   {"bootstrap", forest.bootstrap}};
    j["gd"] = {{"learning_rate", gd.learning_rate}, {"epochs", gd.epochs}, {"l2", gd.l2}};
    json f = train_json(fusion.train);
    f["head"] = to_string(fusion.head);
    f["hidden"] = fusion.hidden;
    f["conv1"] = fusion.conv1_channels;
    f["conv2"] = fusion.conv2_channels;
    j["fusion"] = f;
    j["state_model"] = to_string(state_model);
    j["grid"] = {{"visual_backends", visual_backends}, {"state_models", state_models}};
    return j.dump(2);
}

StateModelConfig ExperimentConfig::state_config(StateModelKind kind) const {
    StateModelConfig s;
    s.kind = kind;
    s.forest = forest;
    s.gd = gd;
    s.seed = seed;
    return s;
}

// ---- data ------------------------------------------------------------------------------

const std::vector<Sample>& ExperimentData::samples(SplitName split) const {
    switch (split) {
        case SplitName::train: return train;
        case SplitName::val: return val;
        case SplitName::test: return test;
    }
    throw ConfigError("unknown split");
}

std::unique_ptr<ExperimentData> prepare_data(Dataset dataset, const SplitRatios& ratios, std::uint64_t split_seed,
                                             std::size_t window) {
    auto d = std::make_unique<ExperimentData>();
    d->dataset = std::move(dataset);
    d->fingerprint = dataset_fingerprint(d->dataset);
    d->split = split_dataset(d->dataset.trajectories.size(), ratios, split_seed);
    d->view = make_split_view(d->dataset, d->split);
    d->normalizer = Normalizer::fit(d->view.train);
    d->train = window_samples(d->view.train, window);
    d->val = window_samples(d->view.val, window);
    d->test = window_samples(d->view.test, window);
    if (d->train.empty()) throw InvariantError("experiment: the training split has no windows");
    if (d->test.empty()) throw InvariantError("experiment: the test split has no windows");
    return d;
}

std::unique_ptr<ExperimentData> prepare_data(const ExperimentConfig& config) {
    Dataset ds;
    if (config.dataset_path) {
        std::filesystem::path p = *config.dataset_path;
        if (std::filesystem::is_directory(p)) p /= "manifest.json";
        ds = load_dataset(p);
    } else {
        ds = generate_synthetic(config.synthetic);
    }
    return prepare_data(std::move(ds), config.split, config.seed, config.visual.window_size);
}

// ---- stages ------------------------------------------------------------------------------

VisualTrainResult train_visual_stage(const ExperimentConfig& config, const ExperimentData& data) {
    VisualConfig vc = config.visual;
    vc.geometry = data.dataset.meta.image;
    return train_visual(vc, data.train, data.val);
}

StateModel train_state_stage(const ExperimentConfig& config, const ExperimentData& data, StateModelKind kind) {
    auto [X, Y] = state_regression_data(data.train, data.normalizer);
    return StateModel::fit(X, Y, config.state_config(kind));
}

FusionTrainResult train_fusion_stage(const ExperimentConfig& config, const ExperimentData& data,
                                     const VisualModel& visual, const StateModel& state,
                                     const FileFeatureSource* features, HeadKind head, Modality modality) {
    FusionConfig fc = config.fusion;
    fc.head = head;
    fc.modality = modality;
    const FusionDims dims = fusion_dims(visual, state, data.normalizer, features);
    const auto tr_in = upstream_inputs(visual, state, data.normalizer, features, head, data.train);
    const auto va_in = upstream_inputs(visual, state, data.normalizer, features, head, data.val);
    const auto tr_y = normalized_actions(data.normalizer, data.train);
    const auto va_y = normalized_actions(data.normalizer, data.val);
    return train_fusion(fc, dims, tr_in, tr_y, va_in, va_y);
}

MetricsReport evaluate_state_model(const StateModel& model, const ExperimentData& data, SplitName split) {
    const auto& samples = data.samples(split);
    if (samples.empty()) throw InvariantError("evaluate: split '" + to_string(split) + "' is empty");
    std::vector<std::vector<float>> preds(samples.size()), targets(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        preds[i] = model.predict(data.normalizer.apply_state(samples[i].current_state().to_vector()));
        targets[i] = data.normalizer.apply_state(samples[i].target_next_state().to_vector());
    });
    MetricsReport r = compute_metrics(preds, targets);
    r.model = to_string(model.kind());
    r.split = to_string(split);
    check_report(r);
    return r;
}

MetricsReport evaluate_visual_model(const VisualModel& model, const ExperimentData& data, SplitName split) {
    const auto& samples = data.samples(split);
    if (samples.empty()) throw InvariantError("evaluate: split '" + to_string(split) + "' is empty");
    std::vector<std::vector<float>> preds(samples.size()), targets(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        const VisualPrediction pred = model.predict(samples[i].stacked_window());
        const auto p = pred.frame.pixels.data();
        preds[i].assign(p.begin(), p.end());
        const auto t = samples[i].target_next_image().pixels.data();
        targets[i].assign(t.begin(), t.end());
    });
    MetricsReport r = compute_metrics(preds, targets);
    r.model = "visual";
    r.split = to_string(split);
    check_report(r);
    return r;
}

std::string bundle_seeds_json(const ExperimentConfig& config) {
    json j = {{"master", config.seed},
              {"split_seed", config.seed},
              {"split", {{"train", config.split.train}, {"val", config.split.val}, {"test", config.split.test}}},
              {"window", config.visual.window_size}};
    return j.dump();
}

// ---- comparison -----------------------------------------------------------------------------

bool ComparisonTable::all_ok() const {
    if (!upstream_errors.empty()) return false;
    for (const auto& r : rows)
        if (!r.ok) return false;
    return true;
}

ComparisonTable run_comparison(const ExperimentConfig& config) {
    config.validate();
    ComparisonTable table;
    table.config_json = config.to_json();
    const auto data = prepare_data(config);
    table.dataset_hash = data->fingerprint;

    std::vector<VisualBackend> backends;
    for (const auto& b : config.visual_backends) backends.push_back(VisualBackend::parse(b, config.base_dir));
    std::vector<StateModelKind> kinds;
    for (const auto& s : config.state_models) kinds.push_back(state_model_kind_from_string(s));

    // Model 1. The file backends only need its geometry, so an untrained
    // model stands in when no encoder backend is configured.
    std::shared_ptr<const VisualModel> visual;
    std::string visual_error;
    bool need_encoder = false;
    for (const auto& b : backends) need_encoder = need_encoder || b.uses_encoder();
    try {
        if (need_encoder) {
            auto vr = train_visual_stage(config, *data);
            visual = std::make_shared<VisualModel>(std::move(vr.model));
            table.visual = evaluate_visual_model(*visual, *data, SplitName::test);
            const Tensor mean = mean_next_frame(data->train);
            std::vector<std::vector<float>> p(data->test.size()), t(data->test.size());
            for (std::size_t i = 0; i < data->test.size(); ++i) {
                p[i].assign(mean.data().begin(), mean.data().end());
                const auto px = data->test[i].target_next_image().pixels.data();
                t[i].assign(px.begin(), px.end());
            }
            MetricsReport m = compute_metrics(p, t);
            m.model = "mean-frame";
            m.split = "test";
            table.mean_frame = m;
        } else {
            VisualConfig vc = config.visual;
            vc.geometry = data->dataset.meta.image;
            visual = std::make_shared<VisualModel>(VisualModel::create(vc));
        }
    } catch (const Error& e) {
        visual_error = std::string("visual model: ") + e.what();
        table.upstream_errors.push_back(visual_error);
    }

    // Model 2, once per regressor kind.
    std::vector<std::shared_ptr<const StateModel>> states(kinds.size());
    std::vector<std::string> state_errors(kinds.size());
    parallel_for(kinds.size(), [&](std::size_t k) {
        try {
            states[k] = std::make_shared<StateModel>(train_state_stage(config, *data, kinds[k]));
        } catch (const Error& e) {
            state_errors[k] = to_string(kinds[k]) + " state model: " + e.what();
        }
    });
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        if (states[k]) {
            table.state_models.push_back(evaluate_state_model(*states[k], *data, SplitName::test));
        } else {
            table.upstream_errors.push_back(state_errors[k]);
        }
    }

    // Model 3 grid: visual backend outer, state model inner.
    const std::size_t n_cells = backends.size() * kinds.size();
    table.rows.resize(n_cells);
    parallel_for(n_cells, [&](std::size_t cell) {
        const auto& b = backends[cell / kinds.size()];
        const std::size_t k = cell % kinds.size();
        ComparisonRow& row = table.rows[cell];
        row.visual_backend = b.name;
        row.state_model = to_string(kinds[k]);
        try {
            if (!visual) throw Error(visual_error);
            if (!states[k]) throw Error(state_errors[k]);
            std::shared_ptr<const FileFeatureSource> features;
            if (!b.uses_encoder())
                features = std::make_shared<FileFeatureSource>(FileFeatureSource::load(b.feature_file));
            auto fr = train_fusion_stage(config, *data, *visual, *states[k], features.get(), b.head);
            row.best_epoch = fr.history.best_epoch;
            row.epochs_run = fr.history.val_loss.size();
            Pipeline pipe(visual, states[k], std::move(fr.model), data->normalizer, features);
            row.test = evaluate(pipe, data->test, row.label(), "test");
            row.ok = true;
        } catch (const Error& e) {
            row.ok = false;
            row.error = e.what();
        }
    });
    return table;
}

std::string comparison_json(const ComparisonTable& table) {
    json j;
    j["config"] = json::parse(table.config_json);
    j["dataset_hash"] = table.dataset_hash;
    j["metric_definition"] = {
        {"averaging", "element-wise mean over all N x A residuals"},
        {"headline", "normalized"},
        {"columns", {"mse", "mae", "rmse"}},
        {"normalization", "actions min-max scaled to [-1, 1] on the training split; states standardised"}};
    j["model1"] = json::object();
    if (table.visual) j["model1"]["visual"] = report_json(*table.visual);
    if (table.mean_frame) j["model1"]["mean_frame_baseline"] = report_json(*table.mean_frame);
    j["model2"] = json::array();
    for (const auto& r : table.state_models) j["model2"].push_back(report_json(r));
    j["model3"] = json::array();
    for (const auto& row : table.rows) {
        json r = {{"visual_backend", row.visual_backend},
                  {"state_model", row.state_model},
                  {"label", row.label()},
                  {"status", row.ok ? "ok" : "failed"}};
        if (row.ok) {
            r["normalized"] = report_json(row.test.normalized);
            r["denormalized"] = report_json(row.test.denormalized);
            r["best_epoch"] = row.best_epoch;
            r["epochs_run"] = row.epochs_run;
        } else {
            r["error"] = row.error;
        }
        j["model3"].push_back(r);
    }
    j["upstream_errors"] = table.upstream_errors;
    j["status"] = table.all_ok() ? "ok" : "failed";
    return j.dump(2) + "\n";
}

std::string comparison_text(const ComparisonTable& table) {
    std::ostringstream out;
    if (table.visual) {
        std::vector<std::pair<std::string, std::vector<std::string>>> rows{{"visual", cells(*table.visual)}};
        if (table.mean_frame) rows.emplace_back("mean-frame baseline", cells(*table.mean_frame));
        out << text_table("Model 1: next-frame prediction (test, pixels)", "Model", rows) << "\n";
    }
    if (!table.state_models.empty()) {
        std::vector<std::pair<std::string, std::vector<std::string>>> rows;
        for (const auto& r : table.state_models) rows.emplace_back(r.model, cells(r));
        out << text_table("Model 2: next-state prediction (test, normalized)", "Model", rows) << "\n";
    }
    std::vector<std::pair<std::string, std::vector<std::string>>> norm, denorm;
    for (const auto& row : table.rows) {
        if (row.ok) {
            norm.emplace_back(row.label(), cells(row.test.normalized));
            denorm.emplace_back(row.label(), cells(row.test.denormalized));
        } else {
            norm.emplace_back(row.label(), std::vector<std::string>{"FAILED", "-", "-"});
            denorm.emplace_back(row.label(), std::vector<std::string>{"FAILED", "-", "-"});
        }
    }
    out << text_table("Model 3: fusion action prediction (test, normalized)", "Model Combination", norm) << "\n";
    out << text_table("Model 3: fusion action prediction (test, action units)", "Model Combination", denorm);
    for (const auto& e : table.upstream_errors) out << "\nerror: " << e << "\n";
    for (const auto& row : table.rows)
        if (!row.ok) out << "\nerror: " << row.label() << ": " << row.error << "\n";
    return out.str();
}

}  // namespace dml

namespace dml {

namespace {

json visual_summary(const VisualTrainResult& vr, const VisualModel& model, const ExperimentData& data) {
    return {{"best_epoch", vr.history.best_epoch},
            {"epochs_run", vr.history.val_loss.size()},
            {"val_loss", vr.history.val_loss},
            {"test", report_json(evaluate_visual_model(model, data, SplitName::test))}};
}

}  // namespace

std::string run_train_stage(const ExperimentConfig& config, const std::string& stage,
                            const std::filesystem::path& out_dir) {
    if (stage != "visual" && stage != "state" && stage != "fusion" && stage != "all")
        throw ConfigError("train: unknown stage '" + stage + "' (expected visual, state, fusion or all)");
    config.validate();
    std::filesystem::create_directories(out_dir);
    const auto data = prepare_data(config);
    json summary = {{"stage", stage}, {"dataset_hash", data->fingerprint}, {"out", out_dir.generic_string()}};

    std::shared_ptr<const VisualModel> visual;
    std::shared_ptr<const StateModel> state;
    if (stage == "visual" || stage == "all") {
        auto vr = train_visual_stage(config, *data);
        visual = std::make_shared<VisualModel>(vr.model);
        write_checkpoint(out_dir / "visual.dmlw", visual->to_checkpoint());
        summary["visual"] = visual_summary(vr, *visual, *data);
    }
    if (stage == "state" || stage == "all") {
        state = std::make_shared<StateModel>(train_state_stage(config, *data, config.state_model));
        write_checkpoint(out_dir / "state.dmlw", state->to_checkpoint());
        summary["state"] = {{"kind", to_string(state->kind())},
                            {"test", report_json(evaluate_state_model(*state, *data, SplitName::test))}};
    }
    if (stage == "fusion" || stage == "all") {
        if (!visual) {
            const auto p = out_dir / "visual.dmlw";
            if (!std::filesystem::exists(p))
                throw IoError("train: fusion stage needs " + p.string() + " (run --stage visual first)");
            visual = std::make_shared<VisualModel>(VisualModel::from_checkpoint(read_checkpoint(p)));
        }
        if (!state) {
            const auto p = out_dir / "state.dmlw";
            if (!std::filesystem::exists(p))
                throw IoError("train: fusion stage needs " + p.string() + " (run --stage state first)");
            state = std::make_shared<StateModel>(StateModel::from_checkpoint(read_checkpoint(p)));
        }
        auto fr = train_fusion_stage(config, *data, *visual, *state, nullptr, config.fusion.head);
        const std::size_t best = fr.history.best_epoch, run = fr.history.val_loss.size();
        const auto val_loss = fr.history.val_loss;
        Pipeline pipe(visual, state, std::move(fr.model), data->normalizer);
        const auto bundle = save_pipeline(out_dir, pipe, data->fingerprint, bundle_seeds_json(config));
        const Evaluation e = evaluate(pipe, data->test, "fusion", "test");
        summary["fusion"] = {{"head", to_string(config.fusion.head)},
                             {"best_epoch", best},
                             {"epochs_run", run},
                             {"val_loss", val_loss},
                             {"bundle", bundle.generic_string()},
                             {"test", {{"normalized", report_json(e.normalized)},
                                       {"denormalized", report_json(e.denormalized)}}}};
    }
    return summary.dump(2) + "\n";
}

std::string evaluate_bundle(const std::filesystem::path& bundle_path, const std::filesystem::path& data_path,
                            SplitName split) {
    PipelineBundle bundle;
    const Pipeline pipe = load_pipeline(bundle_path, &bundle);
    std::filesystem::path manifest = data_path;
    if (std::filesystem::is_directory(manifest)) manifest /= "manifest.json";
    Dataset ds = load_dataset(manifest);

    SplitRatios ratios;
    std::uint64_t split_seed = 7;
    std::size_t window = pipe.visual().config().window_size;
    try {
        const json s = json::parse(bundle.seeds_json);
        if (s.contains("split_seed")) split_seed = s.at("split_seed").get<std::uint64_t>();
        if (s.contains("split")) {
            ratios.train = s.at("split").at("train").get<double>();
            ratios.val = s.at("split").at("val").get<double>();
            ratios.test = s.at("split").at("test").get<double>();
        }
        if (s.contains("window")) window = s.at("window").get<std::size_t>();
    } catch (const json::exception& e) {
        throw IoError(std::string("bundle seeds: ") + e.what());
    }
    const auto data = prepare_data(std::move(ds), ratios, split_seed, window);
    const Evaluation e = evaluate(pipe, data->samples(split), bundle.visual_id + " + " + bundle.state_id, to_string(split));
    json out = {{"bundle", bundle_path.generic_string()},
                {"dataset_hash", data->fingerprint},
                {"dataset_matches_bundle", data->fingerprint == bundle.dataset_hash},
                {"split", to_string(split)},
                {"normalized", report_json(e.normalized)},
                {"denormalized", report_json(e.denormalized)}};
    return out.dump(2) + "\n";
}

}  // namespace dml
