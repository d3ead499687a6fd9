// Command-line front end. Talks to the library through the C API only.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "dmlram/c_api.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;  // run error, failed grid cell or flagged table row
constexpr int kExitUsage = 2;

// Owns a dml_text for the duration of a scope.
struct Text {
    dml_text* handle = nullptr;
    ~Text() { dml_text_free(handle); }
    std::string str() const { return handle ? std::string(dml_text_data(handle), dml_text_size(handle)) : ""; }
};

struct Experiment {
    dml_experiment* handle = nullptr;
    ~Experiment() { dml_experiment_free(handle); }
};

int report(dml_status status, const char* what) {
    std::cerr << "error (" << dml_status_name(status) << ") in " << what << ": " << dml_last_error() << "\n";
    return status == DML_ERR_ARGUMENT ? kExitUsage : kExitFailure;
}

bool write_text(const std::filesystem::path& path, const std::string& text) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) {
        std::cerr << "error: cannot write " << path.string() << "\n";
        return false;
    }
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Late-fusion action prediction: data generation, training, evaluation and reports"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(dml_version()));

    std::string out_dir, config_path, stage = "all", bundle_path, data_path, split = "test", json_out, csv_path;
    std::size_t n_traj = 200, steps = 50, image_size = 32;
    std::uint64_t seed = 7;
    double tolerance = 0.05;

    auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
    gen->add_option("--out", out_dir, "Output directory")->required();
    gen->add_option("--n-traj", n_traj, "Number of trajectories")->capture_default_str();
    gen->add_option("--steps", steps, "Steps per trajectory")->capture_default_str();
    gen->add_option("--image-size", image_size, "Square image side in pixels")->capture_default_str();
    gen->add_option("--seed", seed, "Generator seed")->capture_default_str();

    auto* train = app.add_subcommand("train", "Train one stage or the full pipeline");
    train->add_option("--config", config_path, "Experiment JSON")->required()->check(CLI::ExistingFile);
    train->add_option("--stage", stage, "Stage to train")
        ->check(CLI::IsMember({"visual", "state", "fusion", "all"}))
        ->capture_default_str();
    train->add_option("--out", out_dir, "Checkpoint directory")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate a trained bundle on a dataset split");
    eval->add_option("--bundle", bundle_path, "bundle.json written by train")->required()->check(CLI::ExistingFile);
    eval->add_option("--data", data_path, "Dataset directory or manifest.json")->required()->check(CLI::ExistingPath);
    eval->add_option("--split", split, "Split")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
    eval->add_option("--json", json_out, "Write the report here");

    auto* compare = app.add_subcommand("compare", "Run the visual backend x state model grid");
    compare->add_option("--config", config_path, "Experiment JSON")->required()->check(CLI::ExistingFile);
    compare->add_option("--out", out_dir, "Report directory")->required();

    auto* check = app.add_subcommand("check-tables", "Check that published RMSE values equal sqrt(MSE)");
    check->add_option("--csv", csv_path, "CSV with mse and rmse columns")->required()->check(CLI::ExistingFile);
    check->add_option("--tolerance", tolerance, "Relative tolerance")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    if (*gen) {
        Text summary;
        dml_status st = dml_generate_synthetic(out_dir.c_str(), n_traj, steps, image_size, seed, &summary.handle);
        if (st != DML_OK) return report(st, "generate");
        std::cout << summary.str();
        return kExitOk;
    }

    if (*train) {
        Experiment exp;
        dml_status st = dml_experiment_load(config_path.c_str(), &exp.handle);
        if (st != DML_OK) return report(st, "loading the config");
        Text summary;
        st = dml_experiment_train(exp.handle, stage.c_str(), out_dir.c_str(), &summary.handle);
        if (st != DML_OK) return report(st, "train");
        std::cout << summary.str();
        return write_text(std::filesystem::path(out_dir) / ("train_" + stage + ".json"), summary.str()) ? kExitOk
                                                                                                        : kExitFailure;
    }

    if (*eval) {
        Text result;
        dml_status st = dml_evaluate_bundle(bundle_path.c_str(), data_path.c_str(), split.c_str(), &result.handle);
        if (st != DML_OK) return report(st, "eval");
        std::cout << result.str();
        if (!json_out.empty() && !write_text(json_out, result.str())) return kExitFailure;
        return kExitOk;
    }

    if (*compare) {
        Experiment exp;
        dml_status st = dml_experiment_load(config_path.c_str(), &exp.handle);
        if (st != DML_OK) return report(st, "loading the config");
        Text js, txt;
        int all_ok = 0;
        st = dml_experiment_compare(exp.handle, &js.handle, &txt.handle, &all_ok);
        if (st != DML_OK) return report(st, "compare");
        const std::filesystem::path dir(out_dir);
        const bool written = write_text(dir / "report.json", js.str()) && write_text(dir / "report.txt", txt.str());
        std::cout << txt.str();
        if (!written) return kExitFailure;
        if (!all_ok) {
            std::cerr << "compare: at least one grid cell failed (see report)\n";
            return kExitFailure;
        }
        return kExitOk;
    }

    if (*check) {
        Text txt;
        std::size_t flagged = 0;
        dml_status st = dml_check_tables(csv_path.c_str(), tolerance, &flagged, nullptr, &txt.handle);
        if (st != DML_OK) return report(st, "check-tables");
        std::cout << txt.str();
        return flagged == 0 ? kExitOk : kExitFailure;
    }
    return kExitUsage;
}
