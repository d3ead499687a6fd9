#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "dmlram/error.hpp"
#include "dmlram/experiment.hpp"
#include "dmlram/fusion_model.hpp"
#include "grad_check.hpp"
#include "test_util.hpp"

using namespace dml;

namespace {

FusionConfig small_head(HeadKind head) {
    FusionConfig c;
    c.head = head;
    c.conv1_channels = 2;
    c.conv2_channels = 2;
    c.hidden = 6;
    c.train.seed = 11;
    return c;
}

FusionDims small_dims() { return {{1, 8, 8}, 5, 4, 2}; }

FusionInput random_input(Rng& rng, const FusionDims& d) {
    FusionInput in;
    in.frame = Tensor(d.frame_shape);
    for (auto& v : in.frame.data()) v = static_cast<float>(rng.uniform());
    in.features.resize(d.feature_dim);
    for (auto& v : in.features) v = static_cast<float>(rng.normal());
    in.state.resize(d.state_dim);
    for (auto& v : in.state) v = static_cast<float>(rng.normal());
    return in;
}

// A tiny end-to-end experiment shared by the pipeline tests.
ExperimentConfig tiny_experiment() {
    ExperimentConfig c;
    c.synthetic.n_traj = 80;
    c.synthetic.steps_per_traj = 30;
    c.synthetic.image_size = 16;
    c.visual.bottleneck = 16;
    c.visual.train.max_epochs = 3;
    c.forest.n_trees = 10;
    c.gd.epochs = 200;
    c.fusion.train.max_epochs = 15;
    c.apply_seed();
    return c;
}

}  // namespace

TEST(Fuse, ConcatenationOrderVisualFirst) {
    EXPECT_EQ(fuse_vectors(std::vector<float>{1, 2}, std::vector<float>{3}), (std::vector<float>{1, 2, 3}));
    const std::vector<float> a{1, 2}, b{3, 4};
    EXPECT_NE(fuse_vectors(a, b), fuse_vectors(b, a));
    EXPECT_EQ(fuse_vectors(a, a), fuse_vectors(a, a));
}

TEST(Fuse, ConvHeadWidthIsTrunkPlusState) {
    FusionDims d{{1, 32, 32}, 64, 19, 2};
    FusionModel m(FusionConfig{}, d);
    // 32 -> 16 -> 8 after two stride-2 convs with 8 channels
    EXPECT_EQ(m.trunk().output_shape(), (Shape{8 * 8 * 8}));
    EXPECT_EQ(m.fused_width(), 8u * 8 * 8 + 19);
    Rng rng(1);
    EXPECT_EQ(m.fused(random_input(rng, d)).size(), m.fused_width());

    FusionConfig mlp;
    mlp.head = HeadKind::mlp;
    FusionModel h(mlp, d);
    FusionInput in = random_input(rng, d);
    const auto f = h.fused(in);
    ASSERT_EQ(f.size(), 64u + 19);
    EXPECT_TRUE(std::equal(in.features.begin(), in.features.end(), f.begin()));
    EXPECT_TRUE(std::equal(in.state.begin(), in.state.end(), f.begin() + 64));
}

TEST(Fuse, DimensionMismatchIsRejected) {
    Rng rng(2);
    FusionModel conv(small_head(HeadKind::conv), small_dims());
    FusionInput in = random_input(rng, small_dims());
    in.state.pop_back();
    EXPECT_THROW(conv.predict(in), DimensionError);
    in = random_input(rng, small_dims());
    in.frame = Tensor({1, 12, 12});
    EXPECT_THROW(conv.predict(in), DimensionError);
    FusionModel mlp(small_head(HeadKind::mlp), small_dims());
    in = random_input(rng, small_dims());
    in.features.push_back(0);
    EXPECT_THROW(mlp.predict(in), DimensionError);
}

TEST(Fuse, AblationsIgnoreTheMissingModality) {
    Rng rng(3);
    auto c = small_head(HeadKind::conv);
    c.modality = Modality::state_only;
    FusionModel s(c, small_dims());
    EXPECT_EQ(s.fused_width(), 4u);
    FusionInput a = random_input(rng, small_dims()), b = a;
    for (auto& v : b.frame.data()) v = 1.0f - v;
    EXPECT_EQ(s.predict(a), s.predict(b));
    c.modality = Modality::visual_only;
    FusionModel v(c, small_dims());
    b = a;
    b.state[0] += 1.0f;
    EXPECT_EQ(v.predict(a), v.predict(b));
    EXPECT_EQ(modality_from_string(to_string(Modality::visual_only)), Modality::visual_only);
    EXPECT_THROW(modality_from_string("audio"), ConfigError);
}

class FusionGradient : public ::testing::TestWithParam<HeadKind> {};

TEST_P(FusionGradient, MatchesFiniteDifferences) {
    FusionModel m(small_head(GetParam()), small_dims());
    const bool trunk = m.has_trunk();
    NetworkD tr = trunk ? m.trunk().cast<double>() : NetworkD{};
    NetworkD hd = m.head().cast<double>();
    Rng rng(4);
    TensorD frame({1, 8, 8});
    for (auto& v : frame.data()) v = rng.uniform();
    std::vector<double> feat(5), state(4);
    for (auto& v : feat) v = rng.normal();
    for (auto& v : state) v = rng.normal();
    TensorD target({2}, {0.3, -0.7});

    auto gt = trunk ? zeros_like<double>(tr.parameters()) : std::vector<TensorD>{};
    auto gh = zeros_like<double>(hd.parameters());
    const NetworkD* tp = trunk ? &tr : nullptr;
    std::span<const double> vis = trunk ? std::span<const double>{} : std::span<const double>(feat);
    fusion_loss_and_grad<double>(tp, hd, frame, vis, state, target, trunk ? &gt : nullptr, gh);

    auto loss = [&] { return mse_loss(fusion_forward<double>(tp, hd, frame, vis, state), target).loss; };
    oracle::GradCheckResult r;
    for (std::size_t i = 0; i < gt.size(); ++i)
        oracle::check_tensor(r, "trunk" + std::to_string(i), tr.mutable_parameters()[i], gt[i], loss);
    for (std::size_t i = 0; i < gh.size(); ++i)
        oracle::check_tensor(r, "head" + std::to_string(i), hd.mutable_parameters()[i], gh[i], loss);
    EXPECT_GT(r.checked, 20u);
    EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
}

INSTANTIATE_TEST_SUITE_P(Heads, FusionGradient, ::testing::Values(HeadKind::conv, HeadKind::mlp),
                         [](const auto& info) { return to_string(info.param); });

TEST(TrainFusion, ConstantActionIsLearned) {
    Rng rng(5);
    std::vector<FusionInput> tr, va;
    std::vector<std::vector<float>> ytr, yva;
    for (int i = 0; i < 120; ++i) {
        (i < 100 ? tr : va).push_back(random_input(rng, small_dims()));
        (i < 100 ? ytr : yva).push_back({0.4f, -0.6f});
    }
    auto c = small_head(HeadKind::conv);
    c.train.max_epochs = 40;
    c.train.batch_size = 10;
    const auto res = train_fusion(c, small_dims(), tr, ytr, va, yva);
    EXPECT_LT(res.history.val_loss[res.history.best_epoch], 1e-3);
    const auto p = res.model.predict(va[0]);
    EXPECT_NEAR(p[0], 0.4f, 0.05);
    EXPECT_NEAR(p[1], -0.6f, 0.05);
}

TEST(TrainFusion, SameSeedSameHistoryAndCheckpointRoundTrip) {
    Rng rng(6);
    std::vector<FusionInput> in;
    std::vector<std::vector<float>> y;
    for (int i = 0; i < 40; ++i) {
        in.push_back(random_input(rng, small_dims()));
        y.push_back({static_cast<float>(in.back().state[0] * 0.3), static_cast<float>(in.back().frame[5])});
    }
    for (HeadKind h : {HeadKind::conv, HeadKind::mlp}) {
        auto c = small_head(h);
        c.train.max_epochs = 4;
        const std::span<const FusionInput> all(in);
        const std::span<const std::vector<float>> ys(y);
        const auto a = train_fusion(c, small_dims(), all.first(30), ys.first(30), all.subspan(30), ys.subspan(30));
        const auto b = train_fusion(c, small_dims(), all.first(30), ys.first(30), all.subspan(30), ys.subspan(30));
        EXPECT_EQ(a.history.train_loss, b.history.train_loss);
        EXPECT_EQ(a.history.val_loss, b.history.val_loss);
        const auto ck = a.model.to_checkpoint();
        EXPECT_EQ(checkpoint_checksum(ck), checkpoint_checksum(b.model.to_checkpoint()));
        const FusionModel back = FusionModel::from_checkpoint(decode_checkpoint(encode_checkpoint(ck), "m"));
        EXPECT_EQ(back.predict(in[0]), a.model.predict(in[0]));
    }
}

TEST(Pipeline, FrozenUpstreamBundleRoundTripAndMeanActionBaseline) {
    const ExperimentConfig cfg = tiny_experiment();
    const auto data = prepare_data(cfg);
    auto visual = std::make_shared<VisualModel>(train_visual_stage(cfg, *data).model);
    auto state = std::make_shared<StateModel>(train_state_stage(cfg, *data, StateModelKind::forest));
    const auto v_before = checkpoint_checksum(visual->to_checkpoint());
    const auto s_before = checkpoint_checksum(state->to_checkpoint());

    auto fr = train_fusion_stage(cfg, *data, *visual, *state, nullptr, HeadKind::conv);
    EXPECT_EQ(checkpoint_checksum(visual->to_checkpoint()), v_before);
    EXPECT_EQ(checkpoint_checksum(state->to_checkpoint()), s_before);

    Pipeline pipe(visual, state, std::move(fr.model), data->normalizer);
    test::TempDir dir;
    const auto bundle = save_pipeline(dir.path(), pipe, data->fingerprint, bundle_seeds_json(cfg));
    PipelineBundle meta;
    const Pipeline back = load_pipeline(bundle, &meta);
    EXPECT_EQ(meta.dataset_hash, data->fingerprint);
    EXPECT_EQ(meta.head_kind, "conv");

    // purity, length and bundle equivalence on held-out windows
    const Sample& s0 = data->test.front();
    std::vector<ImageFrame> window{s0.past_image(0), s0.past_image(1), s0.past_image(2)};
    const auto a1 = pipe.predict_action(window, s0.current_state());
    const auto a2 = pipe.predict_action(window, s0.current_state());
    EXPECT_EQ(a1.values, a2.values);
    EXPECT_EQ(a1.values.size(), data->dataset.meta.action_dim);
    EXPECT_EQ(back.predict_action(window, s0.current_state()).values, a1.values);
    EXPECT_THROW(pipe.predict_action(std::span(window).first(2), s0.current_state()), DimensionError);

    // Held-out episodes: error against the true PD torques stays below their
    // variance, i.e. below the constant mean-action predictor.
    double sq = 0, sum = 0, sum2 = 0;
    std::size_t n = 0;
    for (const Sample& s : data->test) {
        std::vector<ImageFrame> w{s.past_image(0), s.past_image(1), s.past_image(2)};
        const auto p = pipe.predict_action(w, s.current_state());
        for (std::size_t k = 0; k < p.values.size(); ++k) {
            const double t = s.target_action().values[k];
            sq += (p.values[k] - t) * (p.values[k] - t);
            sum += t;
            sum2 += t * t;
            ++n;
        }
    }
    const double mse = sq / n, var = sum2 / n - (sum / n) * (sum / n);
    EXPECT_LT(mse, var) << "pipeline " << mse << " vs action variance " << var;
}

TEST(Pipeline, LoadErrorsNameTheStage) {
    const ExperimentConfig cfg = tiny_experiment();
    const auto data = prepare_data(cfg);
    VisualConfig vc = cfg.visual;
    vc.geometry = data->dataset.meta.image;
    auto visual = std::make_shared<VisualModel>(VisualModel::create(vc));
    StateModelConfig sc = cfg.state_config(StateModelKind::gd);
    sc.gd.epochs = 5;
    auto [X, Y] = state_regression_data(data->train, data->normalizer);
    auto state = std::make_shared<StateModel>(StateModel::fit(X, Y, sc));
    FusionModel head(cfg.fusion, fusion_dims(*visual, *state, data->normalizer, nullptr));
    Pipeline pipe(visual, state, head, data->normalizer);

    test::TempDir dir;
    const auto bundle = save_pipeline(dir.path(), pipe, data->fingerprint, "{}");
    auto expect_stage = [&](const std::string& stage) {
        try {
            load_pipeline(bundle);
            FAIL() << "expected IoError for " << stage;
        } catch (const IoError& e) {
            EXPECT_NE(std::string(e.what()).find(stage), std::string::npos) << e.what();
        }
    };
    std::filesystem::rename(dir.path() / "state.dmlw", dir.path() / "state.bak");
    expect_stage("state");
    std::filesystem::rename(dir.path() / "state.bak", dir.path() / "state.dmlw");

    auto bytes = read_file_bytes(dir.path() / "fusion.dmlw");
    bytes.resize(bytes.size() / 2);
    write_file_bytes(dir.path() / "fusion.dmlw", bytes);
    expect_stage("fusion");

    // A head built for a different frame geometry does not assemble.
    FusionDims other = head.dims();
    other.frame_shape = {1, 32, 32};
    EXPECT_THROW(Pipeline(visual, state, FusionModel(cfg.fusion, other), data->normalizer), DimensionError);
}
