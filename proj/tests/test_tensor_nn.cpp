#include <gtest/gtest.h>

#include <cmath>

#include "dmlram/nn.hpp"
#include "grad_check.hpp"

using namespace dml;

namespace {

// Direct definition of a padded, strided cross-correlation; the reference for
// conv2d_forward.
TensorD naive_conv(const TensorD& in, const TensorD& k, const TensorD& b, std::size_t stride, std::size_t pad) {
    const std::size_t C = in.extent(0), H = in.extent(1), W = in.extent(2);
    const std::size_t O = k.extent(0), KH = k.extent(2), KW = k.extent(3);
    const std::size_t OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
    TensorD out({O, OH, OW});
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t y = 0; y < OH; ++y)
            for (std::size_t x = 0; x < OW; ++x) {
                double acc = b[o];
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < KH; ++i)
                        for (std::size_t j = 0; j < KW; ++j) {
                            long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                            long ix = static_cast<long>(x * stride + j) - static_cast<long>(pad);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W))
                                continue;
                            acc += k[((o * C + c) * KH + i) * KW + j] * in.at(c, iy, ix);
                        }
                out.at(o, y, x) = acc;
            }
    return out;
}

TensorD random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
    TensorD t(std::move(shape));
    for (auto& v : t.data()) v = rng.normal(0.0, sd);
    return t;
}

// Smallest |pre-activation| seen by any relu in the network for this input.
double relu_margin(const NetworkD& net, const TensorD& input) {
    ForwardCache<double> cache;
    net.forward(input, cache);
    double m = 1e300;
    for (std::size_t i = 0; i < net.layers().size(); ++i)
        if (net.layers()[i].kind == LayerKind::relu)
            for (double v : cache.activations[i].data()) m = std::min(m, std::abs(v));
    return m;
}

oracle::GradCheckResult grad_check_network(NetworkD& net, const TensorD& input, const TensorD& target) {
    ForwardCache<double> cache;
    auto out = net.forward(input, cache);
    auto loss = mse_loss(out, target);
    auto grads = net.backward(cache, loss.gradient);

    oracle::GradCheckResult r;
    TensorD in = input;
    auto eval = [&] { return mse_loss(net.forward(in), target).loss; };
    auto params = net.mutable_parameters();
    for (std::size_t p = 0; p < params.size(); ++p)
        oracle::check_tensor(r, "param" + std::to_string(p), params[p], grads.parameters[p], eval);
    oracle::check_tensor(r, "input", in, grads.input, eval);
    return r;
}

// Builds the network, then re-draws inputs until every relu sits at least
// `margin` away from its kink, where central differences are not defined.
struct CheckCase {
    NetworkD net;
    TensorD input;
    TensorD target;
};

CheckCase make_case(Shape in_shape, std::vector<LayerSpec> layers, std::uint64_t seed) {
    Rng rng(seed);
    NetworkD net(in_shape, std::move(layers));
    net.initialize(rng);
    for (auto& p : net.mutable_parameters())
        for (auto& v : p.data()) v += rng.normal(0.0, 0.1);  // non-zero biases too
    TensorD input;
    for (int attempt = 0; attempt < 500; ++attempt) {
        input = random_tensor(in_shape, rng);
        if (relu_margin(net, input) > 1e-2) break;
    }
    TensorD target = random_tensor(net.output_shape(), rng);
    return {std::move(net), std::move(input), std::move(target)};
}

}  // namespace

TEST(Conv2d, ZeroInputGivesZeroOutput) {
    Tensor in({1, 3, 3}, 0.0f);
    Tensor k({2, 1, 2, 2}, 0.7f);
    Tensor b({2}, 0.0f);
    auto out = conv2d_forward(in, k, b, 1, 0);
    EXPECT_EQ(out.shape(), (Shape{2, 2, 2}));
    for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2d, IdentityKernelIsExactIdentity) {
    Rng rng(3);
    Tensor in({1, 5, 4});
    for (auto& v : in.data()) v = static_cast<float>(rng.normal());
    Tensor k({1, 1, 1, 1}, 1.0f);
    Tensor b({1}, 0.0f);
    auto out = conv2d_forward(in, k, b, 1, 0);
    EXPECT_TRUE(bit_identical(out, in));
}

TEST(Conv2d, HandComputedWindowDotProducts) {
    Tensor in({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor k({1, 1, 2, 2}, {1, 0, 0, 1});
    Tensor b({1}, 0.0f);
    auto out = conv2d_forward(in, k, b, 1, 0);
    EXPECT_EQ(out, Tensor({1, 2, 2}, {6, 8, 12, 14}));
}

TEST(Conv2d, MatchesNaiveReferenceAcrossStridesAndPadding) {
    Rng rng(11);
    for (std::size_t stride : {1u, 2u, 3u})
        for (std::size_t pad : {0u, 1u, 2u}) {
            const std::size_t H = 7 + stride * 0, W = 7;
            const std::size_t kh = 3, kw = 3;
            if ((H + 2 * pad - kh) % stride != 0 || (W + 2 * pad - kw) % stride != 0) continue;
            auto in = random_tensor({2, H, W}, rng);
            auto k = random_tensor({3, 2, kh, kw}, rng);
            auto b = random_tensor({3}, rng);
            auto got = conv2d_forward(in, k, b, stride, pad);
            auto want = naive_conv(in, k, b, stride, pad);
            ASSERT_EQ(got.shape(), want.shape());
            for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
        }
}

TEST(Conv2d, ShapeErrors) {
    Tensor in({2, 4, 4});
    Tensor bad_k({1, 3, 2, 2});
    Tensor b({1});
    EXPECT_THROW(conv2d_forward(in, bad_k, b, 1, 0), DimensionError);
    Tensor k({1, 2, 3, 3});
    EXPECT_THROW(conv2d_forward(in, k, b, 2, 0), ConfigError);  // (4-3)/2 not integral
    Tensor big({1, 2, 7, 7});
    EXPECT_THROW(conv2d_forward(in, big, b, 1, 0), ConfigError);
    EXPECT_THROW(conv2d_forward(in, k, Tensor({3}), 1, 0), DimensionError);
}

TEST(Forward, EmptyLayerListIsIdentity) {
    Network net({3}, {});
    auto x = Tensor::vector({1.5f, -2.0f, 0.25f});
    EXPECT_TRUE(bit_identical(net.forward(x), x));
}

TEST(Forward, Relu) {
    Network net({3}, {LayerSpec::relu()});
    EXPECT_EQ(net.forward(Tensor::vector({-1, 2, 0})), Tensor::vector({0, 2, 0}));
}

TEST(Forward, DenseHandArithmetic) {
    Network net({2}, {LayerSpec::dense(1)});
    auto p = net.mutable_parameters();
    p[0] = Tensor({1, 2}, {1, 1});
    p[1] = Tensor::vector({1});
    EXPECT_EQ(net.forward(Tensor::vector({2, 3})), Tensor::vector({6}));
}

TEST(Forward, ShapeInconsistencyNamesTheLayer) {
    try {
        Network net({1, 8, 8}, {LayerSpec::conv2d(2, 3, 3), LayerSpec::dense(4)});
        FAIL() << "expected a dimension error";
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
    }
    try {
        Network net({1, 8, 8}, {LayerSpec::relu(), LayerSpec::conv2d(2, 3, 3, 2, 0)});
        FAIL() << "expected a config error";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
    }
    Network net({4}, {LayerSpec::dense(2)});
    EXPECT_THROW(net.forward(Tensor::vector({1, 2, 3})), DimensionError);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
    Rng rng(5);
    Network net({2, 6, 6}, {LayerSpec::conv2d(3, 3, 3, 1, 1), LayerSpec::relu(), LayerSpec::flatten(),
                            LayerSpec::dense(4)});
    net.initialize(rng);
    Tensor x({2, 6, 6});
    for (auto& v : x.data()) v = static_cast<float>(rng.normal());
    ForwardCache<float> cache;
    net.forward(x, cache);
    auto g = net.backward(cache, Tensor({4}, 0.0f));
    for (const auto& t : g.parameters)
        for (float v : t.data()) EXPECT_EQ(v, 0.0f);
    for (float v : g.input.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Backward, DenseChainRuleByHand) {
    Network net({1}, {LayerSpec::dense(1)});
    auto p = net.mutable_parameters();
    p[0] = Tensor({1, 1}, {3});
    p[1] = Tensor::vector({0});
    ForwardCache<float> cache;
    auto out = net.forward(Tensor::vector({2}), cache);
    auto loss = mse_loss(out, Tensor::vector({0}));
    auto g = net.backward(cache, loss.gradient);
    EXPECT_FLOAT_EQ(g.parameters[0][0], 24.0f);
}

TEST(Backward, StaleOrForeignCacheIsRejected) {
    Rng rng(1);
    Network a({3}, {LayerSpec::dense(2)});
    Network b({3}, {LayerSpec::dense(2)});
    a.initialize(rng);
    b.initialize(rng);
    ForwardCache<float> cache;
    a.forward(Tensor::vector({1, 2, 3}), cache);
    EXPECT_THROW(b.backward(cache, Tensor({2})), Error);
    a.mutable_parameters()[0][0] += 1.0f;
    EXPECT_THROW(a.backward(cache, Tensor({2})), Error);
}

class GradientCheck : public ::testing::TestWithParam<int> {};

TEST_P(GradientCheck, EveryLayerKindMatchesCentralDifferences) {
    const std::uint64_t seed = 100 + static_cast<std::uint64_t>(GetParam());
    std::vector<CheckCase> cases;
    cases.push_back(make_case({5}, {LayerSpec::dense(4)}, seed));
    cases.push_back(make_case({6}, {LayerSpec::dense(5), LayerSpec::relu(), LayerSpec::dense(3)}, seed));
    cases.push_back(make_case({6}, {LayerSpec::dense(4), LayerSpec::sigmoid()}, seed));
    cases.push_back(make_case({2, 5, 5}, {LayerSpec::conv2d(3, 3, 3, 1, 1)}, seed));
    cases.push_back(make_case({2, 7, 7}, {LayerSpec::conv2d(2, 3, 3, 2, 0), LayerSpec::relu()}, seed));
    cases.push_back(make_case({1, 7, 7}, {LayerSpec::conv2d(3, 3, 3, 2, 1), LayerSpec::relu(),
                                          LayerSpec::conv2d(2, 2, 2, 2, 0), LayerSpec::flatten(),
                                          LayerSpec::dense(5), LayerSpec::relu(), LayerSpec::dense(2)},
                              seed));
    cases.push_back(make_case({12}, {LayerSpec::dense(18), LayerSpec::reshape({2, 3, 3}),
                                     LayerSpec::conv2d(1, 3, 3, 1, 1), LayerSpec::sigmoid()},
                              seed));
    for (auto& c : cases) {
        ASSERT_LE(c.net.parameter_count(), 500u);
        auto r = grad_check_network(c.net, c.input, c.target);
        EXPECT_GT(r.checked, 0u);
        EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, GradientCheck, ::testing::Range(0, 5));

TEST(Determinism, ForwardBackwardBitIdentical) {
    auto run = [] {
        Rng rng(77);
        Network net({1, 8, 8}, {LayerSpec::conv2d(2, 3, 3, 1, 1), LayerSpec::relu(), LayerSpec::flatten(),
                                LayerSpec::dense(3)});
        net.initialize(rng);
        Tensor x({1, 8, 8});
        for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
        ForwardCache<float> cache;
        auto out = net.forward(x, cache);
        auto g = net.backward(cache, mse_loss(out, Tensor({3}, 0.5f)).gradient);
        return std::make_pair(out, g.parameters);
    };
    auto a = run();
    auto b = run();
    EXPECT_TRUE(bit_identical(a.first, b.first));
    for (std::size_t i = 0; i < a.second.size(); ++i) EXPECT_TRUE(bit_identical(a.second[i], b.second[i]));
}

TEST(MseLoss, Examples) {
    auto same = mse_loss(Tensor::vector({1, 2}), Tensor::vector({1, 2}));
    EXPECT_EQ(same.loss, 0.0);
    for (float g : same.gradient.data()) EXPECT_EQ(g, 0.0f);
    EXPECT_DOUBLE_EQ(mse_loss(Tensor::vector({1, 2}), Tensor::vector({0, 0})).loss, 2.5);
    EXPECT_EQ(mse_loss(Tensor::vector({0}), Tensor::vector({3})).gradient[0], -6.0f);
    EXPECT_THROW(mse_loss(Tensor::vector({0}), Tensor::vector({3, 1})), DimensionError);
}

TEST(Optimizer, UpdateRules) {
    {
        Optimizer opt({OptimizerKind::sgd, 0.0, 0.0, 0.0});
        std::vector<Tensor> p{Tensor::vector({1, -2})};
        std::vector<Tensor> g{Tensor::vector({5, 5})};
        opt.step(p, g);
        EXPECT_EQ(p[0], Tensor::vector({1, -2}));
    }
    {
        Optimizer opt({OptimizerKind::sgd, 0.1, 0.0, 0.0});
        std::vector<Tensor> p{Tensor::vector({1})};
        opt.step(p, std::vector<Tensor>{Tensor::vector({2})});
        EXPECT_FLOAT_EQ(p[0][0], 0.8f);
    }
    {
        Optimizer opt({OptimizerKind::sgd, 0.1, 0.0, 0.5});
        std::vector<Tensor> p{Tensor::vector({1})};
        opt.step(p, std::vector<Tensor>{Tensor::vector({0})});
        EXPECT_FLOAT_EQ(p[0][0], 0.95f);
    }
}

TEST(Optimizer, MomentumAccumulatesVelocity) {
    Optimizer opt({OptimizerKind::sgd_momentum, 0.1, 0.9, 0.0});
    std::vector<Tensor> p{Tensor::vector({1})};
    std::vector<Tensor> g{Tensor::vector({1})};
    opt.step(p, g);  // v = 1, p = 0.9
    opt.step(p, g);  // v = 1.9, p = 0.71
    EXPECT_FLOAT_EQ(p[0][0], 0.71f);
    ASSERT_EQ(opt.velocity().size(), 1u);
    EXPECT_EQ(opt.velocity()[0].shape(), p[0].shape());
}

TEST(Optimizer, NonFiniteGradientAbortsWithoutTouchingParams) {
    Optimizer opt({OptimizerKind::sgd, 0.1, 0.0, 0.0});
    std::vector<Tensor> p{Tensor::vector({1, 2})};
    std::vector<Tensor> g{Tensor::vector({0.5f, std::nanf("")})};
    EXPECT_THROW(opt.step(p, g), NumericError);
    EXPECT_EQ(p[0], Tensor::vector({1, 2}));
    EXPECT_THROW(OptimizerConfig({OptimizerKind::sgd_momentum, 0.1, 1.0, 0.0}).validate(), ConfigError);
}

TEST(Optimizer, FullBatchSgdOnConvexQuadraticIsMonotone) {
    // least squares on a fixed random design: convex, L-smooth
    Rng rng(9);
    const std::size_t n = 40;
    std::vector<Tensor> xs, ys;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor x({3});
        for (auto& v : x.data()) v = static_cast<float>(rng.normal());
        xs.push_back(x);
        ys.push_back(Tensor::vector({static_cast<float>(x[0] - 2 * x[1] + 0.5 * x[2] + rng.normal(0, 0.1))}));
    }
    Network net({3}, {LayerSpec::dense(1)});
    net.initialize(rng);
    Optimizer opt({OptimizerKind::sgd, 0.05, 0.0, 0.0});
    double prev = 1e300;
    for (int epoch = 0; epoch < 60; ++epoch) {
        auto grads = zeros_like(net.parameters());
        double loss = 0;
        for (std::size_t i = 0; i < n; ++i) {
            ForwardCache<float> cache;
            auto out = net.forward(xs[i], cache);
            auto l = mse_loss(out, ys[i]);
            loss += l.loss;
            accumulate(grads, net.backward(cache, l.gradient).parameters);
        }
        loss /= n;
        scale(grads, 1.0f / n);
        EXPECT_LE(loss, prev * (1 + 1e-6)) << "epoch " << epoch;
        prev = loss;
        opt.step(net, grads);
    }
}
