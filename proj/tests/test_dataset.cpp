#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dmlram/dataset.hpp"
#include "dmlram/error.hpp"
#include "dmlram/synthetic.hpp"
#include "test_util.hpp"

using namespace dml;

namespace {

// Small hand-made trajectory whose every value encodes (trajectory, step).
Trajectory tagged_trajectory(const std::string& id, std::size_t steps, float tag, std::size_t J = 2) {
    Trajectory t;
    t.id = id;
    t.environment_id = "env";
    for (std::size_t i = 0; i < steps; ++i) {
        Step s;
        s.image.pixels = Tensor({1, 4, 4});
        s.image.pixels.data()[0] = static_cast<float>(i) / 100.0f;
        s.image.pixels.data()[1] = tag / 100.0f;
        s.state.joint_positions.assign(J, tag);
        s.state.joint_velocities.assign(J, static_cast<float>(i));
        s.state.joint_efforts.assign(J, 0.5f);
        s.state.gripper = 0.25f;
        s.action.values = {static_cast<float>(i), -static_cast<float>(i)};
        t.steps.push_back(std::move(s));
    }
    return t;
}

DatasetMeta small_meta(std::size_t J = 2) { return {J, 2, {4, 4, 1}}; }

bool same_bits(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
    return true;
}

}  // namespace

TEST(RobotState, FlatLayoutRoundTrip) {
    RobotState s{{1, 2}, {3, 4}, {5, 6}, 0.5f};
    const auto v = s.to_vector();
    EXPECT_EQ(v, (std::vector<float>{1, 2, 3, 4, 5, 6, 0.5f}));
    EXPECT_EQ(RobotState::from_vector(v, 2).to_vector(), v);
    EXPECT_THROW(RobotState::from_vector(v, 3), DimensionError);
    EXPECT_EQ(state_dimension(6), 19u);
}

TEST(Codec, EmptyManifestLoadsAsEmptyList) {
    test::TempDir dir;
    Dataset ds;
    ds.meta = small_meta();
    save_dataset(dir.path(), ds);
    const Dataset back = load_dataset(dir.path() / "manifest.json");
    EXPECT_TRUE(back.trajectories.empty());
    EXPECT_EQ(back.meta, ds.meta);
}

TEST(Codec, SyntheticFiveStepTrajectoryRoundTripsBitExactly) {
    SyntheticConfig c;
    c.n_traj = 3;
    c.steps_per_traj = 5;
    c.image_size = 16;
    const Dataset ds = generate_synthetic(c);
    test::TempDir dir;
    save_dataset(dir.path(), ds);
    const Dataset back = load_dataset(dir.path() / "manifest.json");
    ASSERT_EQ(back.trajectories.size(), ds.trajectories.size());
    EXPECT_EQ(back.meta, ds.meta);
    for (std::size_t t = 0; t < ds.trajectories.size(); ++t) {
        const auto& a = ds.trajectories[t];
        const auto& b = back.trajectories[t];
        EXPECT_EQ(a.id, b.id);
        EXPECT_EQ(a.environment_id, b.environment_id);
        ASSERT_EQ(a.size(), b.size());
        EXPECT_TRUE(same_bits(images_tensor(a).data(), images_tensor(b).data()));
        EXPECT_TRUE(same_bits(states_tensor(a).data(), states_tensor(b).data()));
        EXPECT_TRUE(same_bits(actions_tensor(a).data(), actions_tensor(b).data()));
    }
    EXPECT_EQ(dataset_fingerprint(back), dataset_fingerprint(ds));
}

TEST(Codec, MissingTensorFileNamesTheTrajectory) {
    Dataset ds;
    ds.meta = small_meta();
    ds.trajectories.push_back(tagged_trajectory("alpha", 5, 1));
    ds.trajectories.push_back(tagged_trajectory("beta", 5, 2));
    test::TempDir dir;
    save_dataset(dir.path(), ds);
    for (const auto& e : std::filesystem::directory_iterator(dir.path() / "tensors"))
        if (e.path().filename().string().find("beta") != std::string::npos &&
            e.path().filename().string().find("states") != std::string::npos)
            std::filesystem::remove(e.path());
    try {
        load_dataset(dir.path() / "manifest.json");
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("beta"), std::string::npos) << e.what();
    }
}

TEST(Codec, StateWidthMismatchInFileIsRejected) {
    Dataset ds;
    ds.meta = small_meta();
    ds.trajectories.push_back(tagged_trajectory("gamma", 5, 1));
    test::TempDir dir;
    save_dataset(dir.path(), ds);
    // Claim J = 3 in the manifest while the tensors carry J = 2.
    std::ifstream in(dir.path() / "manifest.json");
    std::string text((std::istreambuf_iterator<char>(in)), {});
    in.close();
    const auto pos = text.find("\"joint_count\": 2");
    ASSERT_NE(pos, std::string::npos);
    text.replace(pos, 16, "\"joint_count\": 3");
    std::ofstream(dir.path() / "manifest.json") << text;
    try {
        load_dataset(dir.path() / "manifest.json");
        FAIL() << "expected InvariantError";
    } catch (const InvariantError& e) {
        EXPECT_NE(std::string(e.what()).find("gamma"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
}

TEST(Validation, MismatchedJointCountReportsStepIndex) {
    Trajectory t = tagged_trajectory("delta", 5, 1);
    t.steps[3].state.joint_efforts.push_back(0.0f);
    try {
        validate_trajectory(t, small_meta());
        FAIL() << "expected InvariantError";
    } catch (const InvariantError& e) {
        EXPECT_NE(std::string(e.what()).find("step 3"), std::string::npos) << e.what();
    }
    Trajectory u = tagged_trajectory("eps", 5, 1);
    u.steps[2].image.pixels.data()[5] = 1.5f;
    EXPECT_THROW(validate_trajectory(u, small_meta()), InvariantError);
    Trajectory v = tagged_trajectory("zeta", 5, 1);
    v.steps[4].action.values.push_back(0.0f);
    EXPECT_THROW(validate_trajectory(v, small_meta()), InvariantError);
}

TEST(Windowing, CountsAndBoundaries) {
    EXPECT_EQ(window_samples(tagged_trajectory("a", 50, 0), 3).size(), 47u);
    EXPECT_TRUE(window_samples(tagged_trajectory("a", 3, 0), 3).empty());
    EXPECT_TRUE(window_samples(tagged_trajectory("a", 0, 0), 3).empty());
    const Trajectory four = tagged_trajectory("a", 4, 0);
    const auto s = window_samples(four, 3);
    ASSERT_EQ(s.size(), 1u);
    EXPECT_EQ(s[0].target_step(), 3u);
    EXPECT_EQ(s[0].target_next_state().joint_velocities[0], 3.0f);
    EXPECT_EQ(s[0].target_action().values[0], 2.0f);  // action at the window's last step
    EXPECT_EQ(s[0].key(), "a:2");
    EXPECT_THROW(window_samples(four, 0), ConfigError);
}

TEST(Windowing, NeverCrossesTrajectories) {
    std::vector<Trajectory> trajs;
    for (int k = 0; k < 5; ++k) trajs.push_back(tagged_trajectory("t" + std::to_string(k), 4 + k, static_cast<float>(k)));
    std::vector<const Trajectory*> ptrs;
    for (auto& t : trajs) ptrs.push_back(&t);
    const auto samples = window_samples(ptrs, 3);
    std::size_t expected = 0;
    for (auto& t : trajs) expected += t.size() - 3;
    ASSERT_EQ(samples.size(), expected);
    for (const auto& s : samples) {
        const float tag = s.trajectory().steps[0].state.joint_positions[0];
        for (std::size_t k = 0; k < 3; ++k) {
            EXPECT_FLOAT_EQ(s.past_image(k).pixels.data()[1], tag / 100.0f);
            EXPECT_FLOAT_EQ(s.past_image(k).pixels.data()[0], static_cast<float>(s.first_step() + k) / 100.0f);
        }
        EXPECT_EQ(s.target_next_state().joint_positions[0], tag);
        EXPECT_EQ(s.stacked_window().shape(), (Shape{3, 4, 4}));
    }
}

TEST(Normalizer, HandArithmeticAndDegenerateDimensions) {
    Trajectory t = tagged_trajectory("n", 2, 4);
    t.steps[0].state.joint_velocities = {0, 0};
    t.steps[1].state.joint_velocities = {2, 2};
    t.steps[0].action.values = {-3, 5};
    t.steps[1].action.values = {1, 5};
    const Trajectory* p = &t;
    const Normalizer n = Normalizer::fit(std::span(&p, 1));
    // velocity dims: values {0, 2} -> mean 1, sigma 1
    EXPECT_DOUBLE_EQ(n.state_mean()[2], 1.0);
    EXPECT_DOUBLE_EQ(n.state_std()[2], 1.0);
    const auto z0 = n.apply_state(t.steps[0].state.to_vector());
    const auto z1 = n.apply_state(t.steps[1].state.to_vector());
    EXPECT_FLOAT_EQ(z0[2], -1.0f);
    EXPECT_FLOAT_EQ(z1[2], 1.0f);
    // constant dims (positions, efforts, gripper): sigma 1, value 0
    for (std::size_t j : {0u, 1u, 4u, 5u, 6u}) {
        EXPECT_DOUBLE_EQ(n.state_std()[j], 1.0);
        EXPECT_EQ(z0[j], 0.0f);
    }
    EXPECT_EQ(n.apply_action(std::vector<float>{-3, 5}), (std::vector<float>{-1, 0}));
    EXPECT_EQ(n.apply_action(std::vector<float>{1, 5}), (std::vector<float>{1, 0}));
    EXPECT_THROW(n.apply_state(std::vector<float>{1, 2}), DimensionError);
    EXPECT_THROW(n.apply_action(std::vector<float>{1}), DimensionError);
    EXPECT_EQ(Normalizer::from_json(n.to_json()), n);
}

TEST(Normalizer, RandomRoundTripWithin1e6) {
    SyntheticConfig c;
    c.n_traj = 6;
    c.steps_per_traj = 10;
    c.image_size = 16;
    const Dataset ds = generate_synthetic(c);
    std::vector<const Trajectory*> ptrs;
    for (auto& t : ds.trajectories) ptrs.push_back(&t);
    const Normalizer n = Normalizer::fit(ptrs);
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<float> s(n.state_dim()), a(n.action_dim());
        for (auto& v : s) v = static_cast<float>(rng.uniform(-3, 3));
        for (auto& v : a) v = static_cast<float>(rng.uniform(-3, 3));
        const auto s2 = n.invert_state(n.apply_state(s));
        const auto a2 = n.invert_action(n.apply_action(a));
        for (std::size_t j = 0; j < s.size(); ++j) EXPECT_NEAR(s2[j], s[j], 1e-6 * std::max(1.0f, std::abs(s[j])));
        for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(a2[j], a[j], 1e-6 * std::max(1.0f, std::abs(a[j])));
    }
    // training actions land in [-1, 1]
    for (auto* t : ptrs)
        for (const auto& st : t->steps)
            for (float v : n.apply_action(st.action.values)) {
                EXPECT_GE(v, -1.0f - 1e-6f);
                EXPECT_LE(v, 1.0f + 1e-6f);
            }
}

TEST(Split, LargestRemainderSizes) {
    EXPECT_EQ(split_sizes(10, {0.7, 0.15, 0.15}), (std::array<std::size_t, 3>{7, 1, 2}));
    EXPECT_EQ(split_sizes(200, {0.7, 0.15, 0.15}), (std::array<std::size_t, 3>{140, 30, 30}));
    EXPECT_EQ(split_sizes(5, {1, 0, 0}), (std::array<std::size_t, 3>{5, 0, 0}));
    EXPECT_THROW(split_sizes(10, {0.5, 0.2, 0.2}), ConfigError);
    EXPECT_THROW(split_sizes(10, {1.2, -0.1, -0.1}), ConfigError);
    EXPECT_THROW(split_sizes(2, {0.7, 0.15, 0.15}), InvariantError);
}

TEST(Split, DisjointExhaustiveDeterministic) {
    for (std::size_t n : {3u, 10u, 37u, 200u}) {
        const auto a = split_dataset(n, {}, 42);
        const auto b = split_dataset(n, {}, 42);
        EXPECT_EQ(a.train, b.train);
        EXPECT_EQ(a.val, b.val);
        EXPECT_EQ(a.test, b.test);
        std::multiset<std::size_t> all;
        all.insert(a.train.begin(), a.train.end());
        all.insert(a.val.begin(), a.val.end());
        all.insert(a.test.begin(), a.test.end());
        ASSERT_EQ(all.size(), n);
        std::size_t i = 0;
        for (auto v : all) EXPECT_EQ(v, i++);
    }
    const auto everything = split_dataset(7, {1, 0, 0}, 1);
    EXPECT_EQ(everything.train.size(), 7u);
    EXPECT_TRUE(everything.val.empty() && everything.test.empty());
    EXPECT_NE(split_dataset(50, {}, 1).test, split_dataset(50, {}, 2).test);
}

TEST(Split, NamesRoundTrip) {
    for (auto s : {SplitName::train, SplitName::val, SplitName::test}) EXPECT_EQ(split_from_string(to_string(s)), s);
    EXPECT_THROW(split_from_string("holdout"), ConfigError);
}
