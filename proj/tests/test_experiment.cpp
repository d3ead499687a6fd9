#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dmlram/binary_io.hpp"
#include "dmlram/error.hpp"
#include "dmlram/experiment.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace dml;
using json = nlohmann::json;

namespace {

const char* kTiny = R"({
  "synthetic": {"n_traj": 12, "steps": 10, "image_size": 16, "seed": 3},
  "seed": 5,
  "visual": {"bottleneck": 8, "conv1": 4, "conv2": 4, "max_epochs": 2},
  "forest": {"n_trees": 5, "max_depth": 6},
  "gd": {"epochs": 100},
  "fusion": {"hidden": 16, "max_epochs": 3}
})";

}  // namespace

TEST(ExperimentConfig, DefaultsAndOverrides) {
    const auto d = ExperimentConfig::parse("{}");
    EXPECT_EQ(d.seed, 7u);
    EXPECT_EQ(d.visual_backends.size(), 2u);
    EXPECT_EQ(d.state_models.size(), 2u);
    EXPECT_FALSE(d.dataset_path.has_value());

    const auto c = ExperimentConfig::parse(kTiny);
    EXPECT_EQ(c.seed, 5u);
    EXPECT_EQ(c.visual.train.seed, 5u);
    EXPECT_EQ(c.fusion.train.seed, 5u);
    EXPECT_EQ(c.synthetic.n_traj, 12u);
    EXPECT_EQ(c.forest.n_trees, 5u);
    EXPECT_EQ(c.visual.train.max_epochs, 2u);

    // The canonical JSON parses back to the same settings.
    const auto again = ExperimentConfig::parse(c.to_json());
    EXPECT_EQ(again.to_json(), c.to_json());

    const auto rel = ExperimentConfig::parse(R"({"dataset": "d/manifest.json"})", "/base");
    ASSERT_TRUE(rel.dataset_path.has_value());
    EXPECT_EQ(*rel.dataset_path, std::filesystem::path("/base/d/manifest.json"));
}

TEST(ExperimentConfig, RejectsBadDocuments) {
    EXPECT_THROW(ExperimentConfig::parse("{"), ConfigError);
    EXPECT_THROW(ExperimentConfig::parse(R"({"sed": 1})"), ConfigError);
    EXPECT_THROW(ExperimentConfig::parse(R"({"visual": {"epochs": 1}})"), ConfigError);
    EXPECT_THROW(ExperimentConfig::parse(R"({"seed": "seven"})"), ConfigError);
    EXPECT_THROW(ExperimentConfig::parse(R"({"split": {"train": 0.5, "val": 0.1, "test": 0.1}})"), ConfigError);
    EXPECT_THROW(ExperimentConfig::parse(R"({"grid": {"visual_backends": ["pixels"]}})"), ConfigError);
    EXPECT_THROW(ExperimentConfig::parse(R"({"grid": {"state_models": ["forest", "forest"]}})"), ConfigError);
    EXPECT_THROW(ExperimentConfig::parse(R"({"fusion": {"head": "transformer"}})"), ConfigError);
    try {
        ExperimentConfig::parse(R"({"forest": {"n_tree": 3}})");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("n_tree"), std::string::npos) << e.what();
    }
}

TEST(ExperimentConfig, VisualBackendNames) {
    EXPECT_EQ(VisualBackend::parse("encoder-conv", {}).head, HeadKind::conv);
    EXPECT_EQ(VisualBackend::parse("encoder-mlp", {}).head, HeadKind::mlp);
    const auto f = VisualBackend::parse("file:feats.dmlf", "/x");
    EXPECT_FALSE(f.uses_encoder());
    EXPECT_EQ(f.feature_file, std::filesystem::path("/x/feats.dmlf"));
    EXPECT_THROW(VisualBackend::parse("file:", {}), ConfigError);
}

TEST(Comparison, GridIsPopulatedAndReproducible) {
    const auto cfg = ExperimentConfig::parse(kTiny);
    const auto t1 = run_comparison(cfg);
    ASSERT_EQ(t1.rows.size(), 4u);
    EXPECT_TRUE(t1.all_ok());
    EXPECT_EQ(t1.rows[0].label(), "encoder-conv + forest");
    EXPECT_EQ(t1.rows[3].label(), "encoder-mlp + gd");
    for (const auto& r : t1.rows) {
        ASSERT_TRUE(r.ok) << r.error;
        EXPECT_TRUE(std::isfinite(r.test.normalized.mse));
        EXPECT_NEAR(r.test.normalized.rmse * r.test.normalized.rmse, r.test.normalized.mse, 1e-9);
        EXPECT_LE(r.test.normalized.mae, r.test.normalized.rmse);
    }
    ASSERT_EQ(t1.state_models.size(), 2u);
    ASSERT_TRUE(t1.visual && t1.mean_frame);

    const auto js = comparison_json(t1);
    EXPECT_EQ(comparison_json(run_comparison(cfg)), js);
    const json j = json::parse(js);
    EXPECT_EQ(j["status"], "ok");
    EXPECT_EQ(j["model3"].size(), 4u);
    const auto text = comparison_text(t1);
    EXPECT_NE(text.find("encoder-mlp + gd"), std::string::npos);
    EXPECT_NE(text.find("MSE"), std::string::npos);
}

TEST(Comparison, FeatureFileBackendAndFailedCell) {
    test::TempDir dir;
    auto cfg = ExperimentConfig::parse(kTiny);
    // Feature vectors for every window of the dataset.
    const auto data = prepare_data(cfg);
    std::map<std::string, std::vector<float>> entries;
    Rng rng(1);
    for (const auto& traj : data->dataset.trajectories)
        for (const auto& s : window_samples(traj, cfg.visual.window_size))
            entries[s.key()] = {static_cast<float>(rng.normal()), static_cast<float>(rng.normal()), 0.5f};
    write_file_bytes(dir.path() / "feats.dmlf", encode_feature_file(3, entries));

    cfg.base_dir = dir.path();
    cfg.visual_backends = {"file:feats.dmlf", "file:missing.dmlf"};
    cfg.state_models = {"gd"};
    const auto t = run_comparison(cfg);
    ASSERT_EQ(t.rows.size(), 2u);
    EXPECT_TRUE(t.rows[0].ok) << t.rows[0].error;
    EXPECT_FALSE(t.rows[1].ok);
    EXPECT_NE(t.rows[1].error.find("missing.dmlf"), std::string::npos) << t.rows[1].error;
    EXPECT_FALSE(t.all_ok());
    EXPECT_FALSE(t.visual.has_value());  // no encoder backend, Model 1 is not trained
    EXPECT_EQ(json::parse(comparison_json(t))["status"], "failed");
    EXPECT_NE(comparison_text(t).find("FAILED"), std::string::npos);
}

TEST(TrainStages, StagedTrainingMatchesBundleEvaluation) {
    test::TempDir dir;
    auto cfg = ExperimentConfig::parse(kTiny);
    const auto data_dir = dir.path() / "data";
    save_dataset(data_dir, generate_synthetic(cfg.synthetic));
    cfg.dataset_path = data_dir / "manifest.json";
    const auto out = dir.path() / "run";

    EXPECT_THROW(run_train_stage(cfg, "fusion", out), IoError);
    EXPECT_THROW(run_train_stage(cfg, "everything", out), ConfigError);
    json v = json::parse(run_train_stage(cfg, "visual", out));
    EXPECT_TRUE(v.contains("visual"));
    json s = json::parse(run_train_stage(cfg, "state", out));
    EXPECT_EQ(s["state"]["kind"], "forest");
    json f = json::parse(run_train_stage(cfg, "fusion", out));
    ASSERT_TRUE(std::filesystem::exists(out / "bundle.json"));

    const json e = json::parse(evaluate_bundle(out / "bundle.json", data_dir, SplitName::test));
    EXPECT_TRUE(e["dataset_matches_bundle"].get<bool>());
    EXPECT_DOUBLE_EQ(e["normalized"]["mse"].get<double>(), f["fusion"]["test"]["normalized"]["mse"].get<double>());

    // Training everything at once gives the same bundle contents.
    const auto out2 = dir.path() / "run_all";
    json all = json::parse(run_train_stage(cfg, "all", out2));
    EXPECT_EQ(all["fusion"]["test"], f["fusion"]["test"]);
    for (const char* name : {"visual.dmlw", "state.dmlw", "fusion.dmlw"})
        EXPECT_EQ(read_file_bytes(out / name), read_file_bytes(out2 / name)) << name;
}
