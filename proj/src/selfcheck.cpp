#include "mipr/selfcheck.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "mipr/augment.hpp"
#include "mipr/evalkit.hpp"
#include "mipr/generator.hpp"

namespace mipr {

using nn::Shape;
using nn::Tensor;
using nn::Var;

std::string CheckResult::to_text() const {
    std::ostringstream out;
    out << "check=" << name << " status=" << (passed ? "pass" : "fail") << ' ' << detail << " seconds=" << seconds;
    return out.str();
}

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> normal(0.0, scale);
    Tensor t(shape);
    for (double& v : t.values()) v = normal(rng);
    return t;
}

Tensor random_onehot(int n, int classes, int h, int w, Rng& rng) {
    std::uniform_int_distribution<int> pick(0, classes - 1);
    Tensor t(Shape{n, classes, h, w});
    for (int b = 0; b < n; ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) t.at(b, pick(rng), y, x) = 1.0;
    return t;
}

Tensor random_edges(int n, int h, int w, Rng& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Tensor t(Shape{n, 1, h, w});
    for (double& v : t.values()) v = unit(rng);
    return t;
}

LabelMask random_mask(int h, int w, Rng& rng) {
    std::bernoulli_distribution coin(std::uniform_real_distribution<double>(0.05, 0.95)(rng));
    LabelMask m(h, w);
    for (auto& v : m.data()) v = coin(rng) ? 1 : 0;
    return m;
}

ImageTensor random_image(int h, int w, int c, Rng& rng) {
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    ImageTensor im(h, w, c);
    for (float& v : im.data()) v = unit(rng);
    return im;
}

Eigen::MatrixXd unrolled(const Tensor& weight) {
    const Shape& s = weight.shape();
    const int cols = s.c * s.h * s.w;
    Eigen::MatrixXd m(s.n, cols);
    for (int o = 0; o < s.n; ++o)
        for (int j = 0; j < cols; ++j) m(o, j) = weight[static_cast<std::size_t>(o) * cols + j];
    return m;
}

double largest_singular_value(const Tensor& weight) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(unrolled(weight));
    return svd.singularValues()(0);
}

template <typename Fn>
CheckResult timed(const std::string& name, Fn&& fn) {
    const auto start = std::chrono::steady_clock::now();
    CheckResult r;
    r.name = name;
    try {
        fn(r);
    } catch (const std::exception& e) {
        r.passed = false;
        r.detail = std::string("exception=\"") + e.what() + "\"";
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

CheckResult metric_oracle(std::uint64_t seed) {
    return timed("metric_oracle", [&](CheckResult& r) {
        Rng rng = make_rng(seed, "selfcheck.metrics");
        std::size_t mismatches = 0;
        for (int trial = 0; trial < 1000; ++trial) {
            const LabelMask a = random_mask(16, 16, rng);
            const LabelMask b = random_mask(16, 16, rng);
            long tp = 0, fp = 0, fn = 0, tn = 0;
            for (int y = 0; y < 16; ++y)
                for (int x = 0; x < 16; ++x) {
                    const bool p = a.at(y, x) == 1, g = b.at(y, x) == 1;
                    tp += p && g;
                    fp += p && !g;
                    fn += !p && g;
                    tn += !p && !g;
                }
            const double want_dsc = (tp + fp + fn) == 0 ? 1.0 : 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
            const double want_acc = static_cast<double>(tp + tn) / static_cast<double>(tp + fp + fn + tn);
            if (dsc(a, b) != want_dsc || acc(a, b) != want_acc) ++mismatches;
        }
        r.passed = mismatches == 0;
        r.detail = "pairs=1000 mismatches=" + std::to_string(mismatches);
    });
}

CheckResult patch_shuffle_counts(std::uint64_t seed) {
    return timed("patch_shuffle", [&](CheckResult& r) {
        Rng rng = make_rng(seed, "selfcheck.patches");
        bool ok = true;
        std::ostringstream detail;
        for (int k = 1; k <= 4; ++k) {
            const ImageTensor image = random_image(24, 24, 3, rng);
            const auto variants = patch_shuffle_variants(image, PatchGrid(k));
            const std::size_t want = static_cast<std::size_t>(k * k) * (k * k - 1) / 2;
            std::vector<float> base(image.data().begin(), image.data().end());
            std::sort(base.begin(), base.end());
            for (const auto& v : variants) {
                std::vector<float> got(v.data().begin(), v.data().end());
                std::sort(got.begin(), got.end());
                ok = ok && got == base;
            }
            ok = ok && variants.size() == want;
            detail << "k" << k << "=" << variants.size() << ' ';
        }
        r.passed = ok;
        r.detail = detail.str() + "multiset=" + (ok ? "equal" : "differs");
    });
}

CheckResult sobel_oracle(std::uint64_t seed) {
    return timed("sobel_oracle", [&](CheckResult& r) {
        static const double kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
        static const double ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
        Rng rng = make_rng(seed, "selfcheck.sobel");
        double worst = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            const ImageTensor image = random_image(32, 32, 3, rng);
            const std::vector<double> lum = image.luminance();
            const EdgeMap e = sobel_edges(image);
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x) {
                    double gx = 0.0, gy = 0.0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int yy = std::clamp(y + dy, 0, 31), xx = std::clamp(x + dx, 0, 31);
                            gx += kx[dy + 1][dx + 1] * lum[yy * 32 + xx];
                            gy += ky[dy + 1][dx + 1] * lum[yy * 32 + xx];
                        }
                    const double want = std::min(1.0, std::hypot(gx, gy) / kSobelMaxResponse);
                    worst = std::max(worst, std::abs(want - e.at(y, x)));
                }
        }
        double constant_max = 0.0;
        for (float level : {0.0f, 0.37f, 1.0f}) {
            const EdgeMap e = sobel_edges(ImageTensor(32, 32, 3, level));
            for (double v : e.data) constant_max = std::max(constant_max, std::abs(v));
        }
        r.passed = worst <= 1e-6 && constant_max == 0.0;
        std::ostringstream d;
        d << "images=100 max_abs_error=" << worst << " constant_max=" << constant_max;
        r.detail = d.str();
    });
}

CheckResult grad_check_result(const std::string& name, const nn::GradCheckReport& report, bool expect_pass) {
    CheckResult r;
    r.name = name;
    r.passed = report.passed == expect_pass;
    double worst = 0.0;
    for (const auto& g : report.groups) worst = std::max(worst, g.max_rel_error);
    std::ostringstream d;
    std::size_t kinks = 0, refined = 0;
    for (const auto& g : report.groups) {
        kinks += g.kinks;
        refined += g.refined;
    }
    d << "expect=" << (expect_pass ? "pass" : "fail") << " max_rel_error=" << worst << " refined=" << refined
      << " kinks=" << kinks
      << " tolerance=" << report.tolerance << " groups=" << report.groups.size();
    r.detail = d.str();
    return r;
}

CheckResult linear_gradient_check(std::uint64_t seed) {
    return timed("gradcheck_conv", [&](CheckResult& r) {
        Rng rng = make_rng(seed, "selfcheck.conv");
        Var x(random_tensor(Shape{2, 3, 5, 5}, rng), true);
        Var w(random_tensor(Shape{4, 3, 3, 3}, rng, 0.3), true);
        Var b(random_tensor(Shape{1, 4, 1, 1}, rng), true);
        const Tensor probe = random_tensor(Shape{2, 4, 3, 3}, rng);
        auto block = [&] { return nn::mul(nn::conv2d(x, w, b, 2, 1), nn::constant(probe)); };
        nn::GradCheckOptions opts;
        opts.tolerance = 1e-6;
        const auto report = nn::gradient_check(block, {{"x", x}, {"weight", w}, {"bias", b}}, opts);
        r = grad_check_result("gradcheck_conv", report, true);
    });
}

CheckResult spectral_bounds(std::uint64_t seed) {
    return timed("spectral_bound", [&](CheckResult& r) {
        Rng rng = make_rng(seed, "selfcheck.spectral");
        std::ostringstream d;
        bool ok = true;

        Tensor diag(Shape{2, 2, 1, 1}, std::vector<double>{2.0, 0.0, 0.0, 1.0});
        auto state = nn::SpectralNormState::random(diag.shape(), rng, 50);
        const Var normalized = nn::spectral_normalize(nn::constant(diag), state, true);
        const double diag_sigma = largest_singular_value(normalized.value());
        ok = ok && std::abs(diag_sigma - 1.0) <= 1e-6;
        d << "diag_sigma=" << diag_sigma;

        double worst = 0.0;
        for (int trial = 0; trial < 5; ++trial) {
            nn::SpectralConv2d conv(3 + trial, 4 + 2 * trial, 3, 1, 1, rng, 1);
            // Mimic training: a few updating forward passes.
            const Var x(random_tensor(Shape{1, 3 + trial, 6, 6}, rng));
            for (int step = 0; step < 10; ++step) conv.forward(x, true);
            conv.settle();
            worst = std::max(worst, largest_singular_value(conv.effective_weight()));
        }
        ok = ok && worst <= 1.0 + 1e-3;
        d << " conv_sigma_max=" << worst;
        r.passed = ok;
        r.detail = d.str();
    });
}

CheckResult rearrangement_contract(std::uint64_t seed) {
    return timed("pixel_rearrangement", [&](CheckResult& r) {
        GanModelConfig cfg;
        cfg.height = cfg.width = 32;
        cfg.depth = 2;
        cfg.base_width = 8;
        cfg.max_width = 16;
        cfg.spade_hidden = 8;
        GanBundle gan(cfg, derive_seed(seed, "selfcheck.gan"));
        Rng rng = make_rng(seed, "selfcheck.rearrange");
        bool ok = true;
        for (int trial = 0; trial < 3; ++trial) {
            const ImageTensor image = random_image(32, 32, 3, rng);
            const LabelMask mask = random_mask(32, 32, rng);
            const LabeledPair a = pixel_rearrange(gan, image, mask, 1, "a");
            const LabeledPair b = pixel_rearrange(gan, image, mask, 1, "a");
            ok = ok && a.mask == mask && dsc(a.mask, mask) == 1.0 && a.image == b.image;
        }
        r.passed = ok;
        r.detail = std::string("mask_equal_and_deterministic=") + (ok ? "true" : "false");
    });
}

}  // namespace

nn::GradCheckReport spade_plus_gradient_check(std::uint64_t seed, const nn::GradCheckOptions& options,
                                              nn::Activation activation) {
    Rng rng = make_rng(seed, "selfcheck.spade");
    nn::SpadePlusOptions so;
    so.channels = 4;
    so.label_classes = 2;
    so.hidden = 8;
    so.activation = activation;
    nn::SpadePlus spade(so, rng);
    Var x(random_tensor(Shape{2, 4, 8, 8}, rng), true);
    const Tensor semantic = random_onehot(2, 2, 8, 8, rng);
    const Tensor edges = random_edges(2, 8, 8, rng);
    // A random projection keeps the summed output from hiding gradient errors.
    const Tensor probe = random_tensor(Shape{2, 4, 8, 8}, rng);
    auto block = [&] { return nn::mul(spade.forward(x, semantic, edges), nn::constant(probe)); };
    std::vector<std::pair<std::string, Var>> inputs{{"x", x}};
    nn::GradCheckOptions opts = options;
    opts.kink_guard = opts.kink_guard || activation == nn::Activation::Relu;
    for (const auto& p : spade.named_parameters()) inputs.push_back(p);
    return nn::gradient_check(block, inputs, opts);
}

double spade_plus_zero_alpha_gap(std::uint64_t seed) {
    Rng rng = make_rng(seed, "selfcheck.spade_alpha");
    nn::SpadePlusOptions so;
    so.channels = 4;
    so.hidden = 8;
    nn::SpadePlus spade(so, rng);
    spade.zero_detail_path();
    const Var x(random_tensor(Shape{2, 4, 8, 8}, rng));
    const Tensor semantic = random_onehot(2, 2, 8, 8, rng);
    const Tensor edges = random_edges(2, 8, 8, rng);
    nn::NoGradGuard guard;
    const Tensor a = spade.forward(x, semantic, edges).value();
    const Tensor b = spade.forward_spade(x, semantic).value();
    double gap = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) gap = std::max(gap, std::abs(a[i] - b[i]));
    return gap;
}

std::vector<CheckResult> run_selfcheck(std::uint64_t seed) {
    std::vector<CheckResult> results;
    results.push_back(metric_oracle(seed));
    results.push_back(patch_shuffle_counts(seed));
    results.push_back(sobel_oracle(seed));
    results.push_back(linear_gradient_check(seed));
    results.push_back(timed("gradcheck_spade_plus", [&](CheckResult& r) {
        r = grad_check_result("gradcheck_spade_plus", spade_plus_gradient_check(seed), true);
    }));
    results.push_back(timed("gradcheck_negative_control", [&](CheckResult& r) {
        nn::GradCheckOptions opts;
        opts.tamper = [](std::vector<Tensor>& grads) { grads.front()[0] += 1e-2; };
        r = grad_check_result("gradcheck_negative_control", spade_plus_gradient_check(seed, opts), false);
    }));
    results.push_back(timed("spade_zero_alpha", [&](CheckResult& r) {
        const double gap = spade_plus_zero_alpha_gap(seed);
        r.passed = gap <= 1e-6;
        r.detail = "max_abs_gap=" + std::to_string(gap);
    }));
    results.push_back(spectral_bounds(seed));
    results.push_back(rearrangement_contract(seed));
    return results;
}

}  // namespace mipr
