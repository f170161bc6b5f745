#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mipr/error.hpp"
#include "mipr/nn/layers.hpp"
#include "mipr/nncore.hpp"
#include "test_util.hpp"

using namespace mipr;
using namespace mipr::nn;
using mipr::testing::random_tensor;

namespace {

// Weights the output with a fixed random probe so that sum() does not
// collapse gradients (softmax rows sum to one, for instance).
std::function<Var()> probed(std::function<Var()> f, const Shape& out_shape, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Tensor probe = random_tensor(out_shape, rng);
    return [f, probe] { return mul(f(), constant(probe)); };
}

void expect_gradients(const std::function<Var()>& f, const std::vector<std::pair<std::string, Var>>& inputs,
                      double tolerance = 1e-6) {
    const Shape out = f().shape();
    GradCheckOptions options;
    options.tolerance = tolerance;
    const GradCheckReport report = gradient_check(probed(f, out, 99), inputs, options);
    EXPECT_TRUE(report.passed) << report.to_text();
}

Var leaf(const Shape& s, std::mt19937_64& rng, double scale = 1.0) { return Var(random_tensor(s, rng, scale), true); }

}  // namespace

TEST(AutogradOps, ElementwiseGradients) {
    std::mt19937_64 rng(1);
    const Shape s{2, 3, 4, 5};
    Var a = leaf(s, rng), b = leaf(s, rng);
    expect_gradients([&] { return add(a, b); }, {{"a", a}, {"b", b}});
    expect_gradients([&] { return sub(a, b); }, {{"a", a}, {"b", b}});
    expect_gradients([&] { return mul(a, b); }, {{"a", a}, {"b", b}});
    expect_gradients([&] { return add_scalar(mul_scalar(a, -2.5), 0.7); }, {{"a", a}});
    expect_gradients([&] { return sigmoid(a); }, {{"a", a}});
    expect_gradients([&] { return tanh(a); }, {{"a", a}});
    expect_gradients([&] { return elu(a); }, {{"a", a}});
}

TEST(AutogradOps, PiecewiseLinearGradientsAwayFromKinks) {
    std::mt19937_64 rng(2);
    Tensor t = random_tensor({2, 3, 4, 4}, rng);
    // Keep every value at least 0.1 from zero.
    for (double& v : t.values()) v = v >= 0 ? v + 0.1 : v - 0.1;
    Var a(t, true);
    expect_gradients([&] { return relu(a); }, {{"a", a}});
    expect_gradients([&] { return leaky_relu(a, 0.2); }, {{"a", a}});
    expect_gradients([&] { return max_pool(a, 2); }, {{"a", a}});
}

TEST(AutogradOps, SpatialGradients) {
    std::mt19937_64 rng(3);
    Var x = leaf({2, 3, 6, 6}, rng), y = leaf({2, 2, 6, 6}, rng);
    Var w = leaf({4, 3, 3, 3}, rng, 0.3), bias = leaf({1, 4, 1, 1}, rng);
    for (int stride : {1, 2})
        for (int padding : {0, 1})
            expect_gradients([&] { return conv2d(x, w, bias, stride, padding); },
                             {{"x", x}, {"w", w}, {"bias", bias}});
    expect_gradients([&] { return conv2d(x, w, Var(), 1, 1); }, {{"x", x}, {"w", w}});
    expect_gradients([&] { return upsample_nearest(x, 2); }, {{"x", x}});
    expect_gradients([&] { return avg_pool(x, 2); }, {{"x", x}});
    expect_gradients([&] { return concat_channels(x, y); }, {{"x", x}, {"y", y}});
    Var gate = leaf({2, 1, 6, 6}, rng);
    expect_gradients([&] { return mul_gate(x, gate); }, {{"x", x}, {"gate", gate}});
}

TEST(AutogradOps, NormalizationGradients) {
    std::mt19937_64 rng(4);
    Var x = leaf({3, 2, 4, 4}, rng);
    Var gamma = leaf({1, 2, 1, 1}, rng), beta = leaf({1, 2, 1, 1}, rng);
    Tensor rm({1, 2, 1, 1}), rv({1, 2, 1, 1}, 1.0);
    expect_gradients([&] { return batch_norm(x, gamma, beta, rm, rv, true, 0.0, 1e-5); },
                     {{"x", x}, {"gamma", gamma}, {"beta", beta}}, 1e-5);
    expect_gradients([&] { return param_free_normalize(x); }, {{"x", x}}, 1e-5);
    expect_gradients([&] { return softmax_channels(x); }, {{"x", x}});
}

TEST(AutogradOps, LossGradients) {
    std::mt19937_64 rng(5);
    Var logits = leaf({2, 2, 5, 5}, rng);
    Var other = leaf({2, 2, 5, 5}, rng);
    std::vector<int> labels(2 * 25);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>((i * 7) % 3 == 0);
    expect_gradients([&] { return cross_entropy(logits, labels); }, {{"logits", logits}});
    expect_gradients([&] { return soft_dice_loss(softmax_channels(logits), labels); }, {{"logits", logits}});
    expect_gradients([&] { return mean(logits); }, {{"logits", logits}});
    // Keep |a - b| away from zero for the L1 kink.
    Tensor shifted = logits.value();
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += (i % 2 ? 0.5 : -0.5);
    Var b(shifted, false);
    expect_gradients([&] { return l1_loss(logits, b); }, {{"logits", logits}});
}

TEST(AutogradForward, ConvolutionMatchesDirectSum) {
    std::mt19937_64 rng(6);
    const Tensor x = random_tensor({2, 3, 7, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng),
                 b = random_tensor({1, 4, 1, 1}, rng);
    for (int stride : {1, 2})
        for (int pad : {0, 1}) {
            const Tensor out = conv2d(constant(x), constant(w), constant(b), stride, pad).value();
            const int oh = (7 + 2 * pad - 3) / stride + 1, ow = (6 + 2 * pad - 3) / stride + 1;
            ASSERT_EQ(out.shape(), (Shape{2, 4, oh, ow}));
            for (int n = 0; n < 2; ++n)
                for (int o = 0; o < 4; ++o)
                    for (int i = 0; i < oh; ++i)
                        for (int j = 0; j < ow; ++j) {
                            double acc = b[static_cast<std::size_t>(o)];
                            for (int c = 0; c < 3; ++c)
                                for (int ky = 0; ky < 3; ++ky)
                                    for (int kx = 0; kx < 3; ++kx) {
                                        const int y = i * stride + ky - pad, xx = j * stride + kx - pad;
                                        if (y < 0 || y >= 7 || xx < 0 || xx >= 6) continue;
                                        acc += w.at(o, c, ky, kx) * x.at(n, c, y, xx);
                                    }
                            ASSERT_NEAR(out.at(n, o, i, j), acc, 1e-12);
                        }
        }
}

TEST(AutogradForward, CrossEntropyAndDiceMatchFormulas) {
    std::mt19937_64 rng(7);
    const Tensor logits = random_tensor({1, 2, 3, 3}, rng);
    const std::vector<int> labels{0, 1, 1, 0, 0, 1, 1, 1, 0};
    double ce = 0, inter = 0, psum = 0, lsum = 0;
    for (int p = 0; p < 9; ++p) {
        const double z0 = logits.at(0, 0, p / 3, p % 3), z1 = logits.at(0, 1, p / 3, p % 3);
        const double lse = std::log(std::exp(z0) + std::exp(z1));
        ce += lse - (labels[p] ? z1 : z0);
        const double p1 = std::exp(z1 - lse);
        inter += p1 * labels[p];
        psum += p1;
        lsum += labels[p];
    }
    EXPECT_NEAR(cross_entropy(constant(logits), labels).item(), ce / 9, 1e-12);
    const double dice = 1 - (2 * inter + 1) / (psum + lsum + 1);
    EXPECT_NEAR(soft_dice_loss(softmax_channels(constant(logits)), labels).item(), dice, 1e-12);
}

TEST(AutogradForward, BatchNormUsesBatchThenRunningStatistics) {
    Tensor x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 6});
    Tensor rm({1, 1, 1, 1}), rv({1, 1, 1, 1}, 1.0);
    Var g(Tensor({1, 1, 1, 1}, 1.0)), b(Tensor({1, 1, 1, 1}, 0.0));
    const Tensor out = batch_norm(constant(x), g, b, rm, rv, true, 0.5, 0.0).value();
    // mean 3, biased var 3.5
    EXPECT_NEAR(out[0], (1 - 3) / std::sqrt(3.5), 1e-12);
    EXPECT_NEAR(out[3], (6 - 3) / std::sqrt(3.5), 1e-12);
    EXPECT_NEAR(rm[0], 1.5, 1e-12);
    const double unbiased = 14.0 / 3.0;
    EXPECT_NEAR(rv[0], 0.5 * 1.0 + 0.5 * unbiased, 1e-12);
    const Tensor eval = batch_norm(constant(x), g, b, rm, rv, false, 0.5, 0.0).value();
    EXPECT_NEAR(eval[0], (1 - rm[0]) / std::sqrt(rv[0]), 1e-12);
}

TEST(AutogradTape, GradientsAccumulateAcrossUses) {
    Var a(Tensor::scalar(3.0), true);
    const Var y = add(mul(a, a), a);  // dy/da = 2a + 1
    backward(y);
    EXPECT_DOUBLE_EQ(a.grad()[0], 7.0);
}

TEST(AutogradTape, NoGradGuardRecordsNothing) {
    Var a(Tensor::scalar(2.0), true);
    {
        NoGradGuard guard;
        EXPECT_FALSE(grad_enabled());
        const Var y = mul(a, a);
        EXPECT_FALSE(y.requires_grad());
    }
    EXPECT_TRUE(grad_enabled());
    const Var d = detach(mul(a, a));
    EXPECT_FALSE(d.requires_grad());
}

TEST(Optimizer, AdamMatchesHandComputedSteps) {
    Var p(Tensor({1, 1, 1, 2}, std::vector<double>{1.0, -2.0}), true);
    Adam::Options o;
    o.lr = 0.1;
    Adam adam({p}, o);
    double ref[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
    for (int t = 1; t <= 5; ++t) {
        adam.zero_grad();
        // loss = sum(p^3) so the gradient changes with p.
        backward(sum(mul(mul(p, p), p)));
        adam.step();
        for (int i = 0; i < 2; ++i) {
            const double g = 3 * ref[i] * ref[i];
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        }
        EXPECT_NEAR(p.value()[0], ref[0], 1e-12) << "step " << t;
        EXPECT_NEAR(p.value()[1], ref[1], 1e-12) << "step " << t;
    }
    EXPECT_EQ(adam.steps(), 5);
}

TEST(Optimizer, CosineAnnealingSchedule) {
    EXPECT_DOUBLE_EQ(cosine_annealing(1e-3, 0, 100), 1e-3);
    EXPECT_NEAR(cosine_annealing(1e-3, 50, 100), 5e-4, 1e-15);
    EXPECT_NEAR(cosine_annealing(1e-3, 25, 100), 1e-3 * (1 + std::cos(M_PI / 4)) / 2, 1e-15);
    double prev = 1.0;
    for (int e = 0; e < 100; ++e) {
        const double lr = cosine_annealing(1.0, e, 100);
        EXPECT_LT(lr, prev + 1e-15);
        EXPECT_GT(lr, 0.0);
        prev = lr;
    }
}

TEST(StateIo, BlobRoundTripAndCorruption) {
    std::mt19937_64 rng(8);
    StateDict state{{"a.weight", random_tensor({2, 3, 3, 3}, rng)}, {"b", random_tensor({1, 4, 1, 1}, rng)}};
    std::stringstream ss;
    write_state(ss, state);
    const std::string blob = ss.str();
    std::stringstream in(blob);
    const StateDict back = read_state(in);
    ASSERT_EQ(back.size(), 2u);
    for (const auto& [k, t] : state) {
        ASSERT_EQ(back.at(k).shape(), t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) ASSERT_EQ(back.at(k)[i], t[i]);
    }
    std::stringstream truncated(blob.substr(0, blob.size() / 2));
    EXPECT_THROW(read_state(truncated), Error);
    std::stringstream garbage("not a tensor blob");
    EXPECT_THROW(read_state(garbage), Error);
}

TEST(StateIo, LoadStateDictIsStrict) {
    Rng rng(9);
    Conv2d conv(3, 4, 3, 1, 1, rng);
    StateDict s = conv.state_dict();
    EXPECT_NO_THROW(conv.load_state_dict(s));
    StateDict bad = s;
    bad.begin()->second = Tensor({1, 1, 1, 1});
    EXPECT_THROW(conv.load_state_dict(bad), Error);
    StateDict missing = s;
    missing.erase(missing.begin());
    EXPECT_THROW(conv.load_state_dict(missing), Error);
}
