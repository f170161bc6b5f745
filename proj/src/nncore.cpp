#include "mipr/nncore.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mipr/error.hpp"

namespace mipr::nn {

Var param_free_normalize(const Var& x, double eps) {
    const Shape s = x.shape();
    const double count = static_cast<double>(s.n) * s.plane();
    std::vector<double> inv_std(s.c);
    Tensor out(s);
    for (int c = 0; c < s.c; ++c) {
        double m = 0.0;
        for (int n = 0; n < s.n; ++n) {
            const double* p = x.value().plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) m += p[i];
        }
        m /= count;
        double v = 0.0;
        for (int n = 0; n < s.n; ++n) {
            const double* p = x.value().plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) v += (p[i] - m) * (p[i] - m);
        }
        v /= count;
        inv_std[c] = 1.0 / std::sqrt(v + eps);
        for (int n = 0; n < s.n; ++n) {
            const double* p = x.value().plane(n, c);
            double* o = out.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) o[i] = (p[i] - m) * inv_std[c];
        }
    }
    return make_op(out, {x}, [s, count, inv_std, xhat = out](detail::Node& self) {
        Tensor& gx = self.parents[0]->grad_buffer();
        for (int c = 0; c < s.c; ++c) {
            double sum_g = 0.0, sum_gh = 0.0;
            for (int n = 0; n < s.n; ++n) {
                const double* g = self.grad.plane(n, c);
                const double* h = xhat.plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    sum_g += g[i];
                    sum_gh += g[i] * h[i];
                }
            }
            for (int n = 0; n < s.n; ++n) {
                const double* g = self.grad.plane(n, c);
                const double* h = xhat.plane(n, c);
                double* dst = gx.plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i)
                    dst[i] += inv_std[c] * (g[i] - sum_g / count - h[i] * sum_gh / count);
            }
        }
    });
}

Var activate(const Var& x, Activation kind) {
    switch (kind) {
        case Activation::Relu: return relu(x);
        case Activation::Elu: return elu(x);
    }
    fail(ErrorKind::Invalid, "unknown activation");
}

SpadePlus::SpadePlus(const SpadePlusOptions& options, Rng& rng)
    : options_(options),
      semantic_trunk_(options.label_classes, options.hidden, options.kernel, 1, options.kernel / 2, rng),
      gamma_conv_(options.hidden, options.channels, options.kernel, 1, options.kernel / 2, rng),
      beta_conv_(options.hidden, options.channels, options.kernel, 1, options.kernel / 2, rng),
      edge_trunk_(1, options.hidden, options.kernel, 1, options.kernel / 2, rng),
      alpha_conv_(options.hidden, options.channels, options.kernel, 1, options.kernel / 2, rng) {
    require(options.channels > 0 && options.label_classes > 0 && options.hidden > 0 && options.kernel % 2 == 1,
            ErrorKind::Config, "invalid SPADE+ options");
    register_module("shared", semantic_trunk_);
    register_module("gamma", gamma_conv_);
    register_module("beta", beta_conv_);
    register_module("edge_shared", edge_trunk_);
    register_module("alpha", alpha_conv_);
}

std::pair<Var, Var> SpadePlus::gamma_beta(const Tensor& semantic, int height, int width) const {
    require(semantic.shape().c == options_.label_classes, ErrorKind::Invalid,
            "semantic map has " + std::to_string(semantic.shape().c) + " channels, expected " +
                std::to_string(options_.label_classes));
    Tensor resized = semantic.shape().h == height && semantic.shape().w == width
                         ? semantic
                         : resize_nearest(semantic, height, width);
    Var hidden = activate(semantic_trunk_.forward(constant(std::move(resized))), options_.activation);
    return {gamma_conv_.forward(hidden), beta_conv_.forward(hidden)};
}

Var SpadePlus::alpha(const Tensor& edges, int height, int width) const {
    require(edges.shape().c == 1, ErrorKind::Invalid, "edge map must have one channel");
    Tensor resized = edges.shape().h == height && edges.shape().w == width
                         ? edges
                         : resize_bilinear(edges, height, width);
    Var hidden = activate(edge_trunk_.forward(constant(std::move(resized))), options_.activation);
    return alpha_conv_.forward(hidden);
}

namespace {

void check_conditioning(const Var& x, const Tensor& map, const char* what) {
    require(x.shape().c > 0, ErrorKind::Invalid, "empty activation");
    require(map.shape().n == x.shape().n, ErrorKind::Invalid,
            std::string(what) + " batch " + std::to_string(map.shape().n) + " does not match activation batch " +
                std::to_string(x.shape().n));
}

}  // namespace

Var SpadePlus::forward_spade(const Var& x, const Tensor& semantic) const {
    require(x.shape().c == options_.channels, ErrorKind::Invalid,
            "activation has " + std::to_string(x.shape().c) + " channels, expected " +
                std::to_string(options_.channels));
    check_conditioning(x, semantic, "semantic");
    auto [gamma, beta] = gamma_beta(semantic, x.shape().h, x.shape().w);
    require(gamma.shape() == x.shape(), ErrorKind::Invalid, "modulation size mismatch");
    return gamma * param_free_normalize(x, options_.eps) + beta;
}

Var SpadePlus::forward(const Var& x, const Tensor& semantic, const Tensor& edges) const {
    check_conditioning(x, edges, "edge map");
    Var base = forward_spade(x, semantic);
    Var detail = alpha(edges, x.shape().h, x.shape().w);
    require(detail.shape() == x.shape(), ErrorKind::Invalid, "detail size mismatch");
    return base + detail;
}

void SpadePlus::zero_detail_path() {
    alpha_conv_.weight().mutable_value().fill(0.0);
    if (alpha_conv_.bias().defined()) alpha_conv_.bias().mutable_value().fill(0.0);
}

namespace {

double normalize_in_place(Tensor& t, double eps) {
    double norm = 0.0;
    for (double v : t.values()) norm += v * v;
    norm = std::sqrt(norm);
    const double scale = 1.0 / std::max(norm, eps);
    for (double& v : t.values()) v *= scale;
    return norm;
}

// Weight viewed as a row-major (rows x cols) matrix.
std::pair<std::size_t, std::size_t> matrix_dims(const Tensor& w) {
    const std::size_t rows = static_cast<std::size_t>(w.shape().n);
    return {rows, rows == 0 ? 0 : w.size() / rows};
}

}  // namespace

SpectralNormState SpectralNormState::random(const Shape& weight_shape, Rng& rng, int power_iterations) {
    require(power_iterations >= 1, ErrorKind::Config, "power iterations must be positive");
    std::normal_distribution<double> dist(0.0, 1.0);
    SpectralNormState state;
    state.u = Tensor(Shape{1, weight_shape.n, 1, 1});
    state.v = Tensor(Shape{1, weight_shape.c * weight_shape.h * weight_shape.w, 1, 1});
    for (double& x : state.u.values()) x = dist(rng);
    for (double& x : state.v.values()) x = dist(rng);
    normalize_in_place(state.u, 1e-12);
    normalize_in_place(state.v, 1e-12);
    state.power_iterations = power_iterations;
    return state;
}

double spectral_sigma(const Tensor& weight, const Tensor& u, const Tensor& v) {
    auto [rows, cols] = matrix_dims(weight);
    require(u.size() == rows && v.size() == cols, ErrorKind::Invalid, "power vectors do not match weight");
    double sigma = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        const double* row = weight.data() + r * cols;
        for (std::size_t k = 0; k < cols; ++k) dot += row[k] * v[k];
        sigma += u[r] * dot;
    }
    return sigma;
}

Var spectral_normalize(const Var& weight, Tensor& u, Tensor& v, int power_iterations, bool update, double eps) {
    const Tensor& w = weight.value();
    auto [rows, cols] = matrix_dims(w);
    require(u.size() == rows && v.size() == cols, ErrorKind::Invalid, "power vectors do not match weight");
    if (update) {
        for (int it = 0; it < power_iterations; ++it) {
            for (std::size_t k = 0; k < cols; ++k) v[k] = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* row = w.data() + r * cols;
                for (std::size_t k = 0; k < cols; ++k) v[k] += row[k] * u[r];
            }
            normalize_in_place(v, eps);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* row = w.data() + r * cols;
                double dot = 0.0;
                for (std::size_t k = 0; k < cols; ++k) dot += row[k] * v[k];
                u[r] = dot;
            }
            normalize_in_place(u, eps);
        }
    }
    const double sigma = std::max(spectral_sigma(w, u, v), eps);
    Tensor out = w;
    out *= 1.0 / sigma;
    // d(W/s)/dW with s = u^T W v: G/s - <G, W> u v^T / s^2.
    return make_op(std::move(out), {weight}, [sigma, rows, cols, u, v](detail::Node& self) {
        auto& p = self.parents[0];
        double inner = 0.0;
        for (std::size_t i = 0; i < p->value.size(); ++i) inner += self.grad[i] * p->value[i];
        Tensor& g = p->grad_buffer();
        const double coef = inner / (sigma * sigma);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = 0; k < cols; ++k) {
                const std::size_t i = r * cols + k;
                g[i] += self.grad[i] / sigma - coef * u[r] * v[k];
            }
    });
}

namespace {

// Converged starting vectors, so the first training steps already see a
// tight estimate.
constexpr int kWarmupIterations = 50;

}  // namespace

SpectralConv2d::SpectralConv2d(int in_channels, int out_channels, int kernel, int stride, int padding, Rng& rng,
                               int power_iterations)
    : conv_(in_channels, out_channels, kernel, stride, padding, rng),
      u_(register_buffer("u", Tensor(Shape{1, out_channels, 1, 1}))),
      v_(register_buffer("v", Tensor(Shape{1, in_channels * kernel * kernel, 1, 1}))),
      power_iterations_(power_iterations) {
    require(power_iterations >= 1, ErrorKind::Config, "power iterations must be positive");
    register_module("conv", conv_);
    SpectralNormState init = SpectralNormState::random(conv_.weight().shape(), rng);
    u_ = init.u;
    v_ = init.v;
    NoGradGuard guard;
    spectral_normalize(conv_.weight(), u_, v_, kWarmupIterations, true);
}

Var SpectralConv2d::forward(const Var& x, bool update) const {
    Var w = spectral_normalize(conv_.weight(), u_, v_, power_iterations_, update);
    return conv2d(x, w, conv_.bias(), conv_.stride(), conv_.padding());
}

Tensor SpectralConv2d::effective_weight() const {
    const double sigma = std::max(spectral_sigma(conv_.weight().value(), u_, v_), 1e-12);
    Tensor w = conv_.weight().value();
    w *= 1.0 / sigma;
    return w;
}

int SpectralConv2d::settle(int max_iterations, double tolerance) {
    NoGradGuard guard;
    double previous = spectral_sigma(conv_.weight().value(), u_, v_);
    for (int it = 1; it <= max_iterations; ++it) {
        spectral_normalize(conv_.weight(), u_, v_, 1, true);
        const double sigma = spectral_sigma(conv_.weight().value(), u_, v_);
        if (std::abs(sigma - previous) <= tolerance * std::abs(sigma)) return it;
        previous = sigma;
    }
    return max_iterations;
}

std::string GradCheckReport::to_text() const {
    std::ostringstream out;
    out << "gradient check " << (passed ? "PASS" : "FAIL") << " tolerance=" << tolerance << "\n";
    for (const auto& g : groups)
        out << "  " << g.name << " max_rel_error=" << g.max_rel_error << " worst_index=" << g.worst_index
            << " refined=" << g.refined << " kinks=" << g.kinks << (g.finite ? "" : " non-finite") << "\n";
    if (!failure.empty()) out << "  failure: " << failure << "\n";
    return out.str();
}

GradCheckReport gradient_check(const std::function<Var()>& block,
                               const std::vector<std::pair<std::string, Var>>& inputs,
                               const GradCheckOptions& options) {
    GradCheckReport report;
    report.tolerance = options.tolerance;

    std::vector<Var> vars;
    for (const auto& [name, var] : inputs) {
        require(var.defined() && var.requires_grad(), ErrorKind::Invalid,
                "gradient check input " + name + " must require grad");
        vars.push_back(var);
        vars.back().zero_grad();
    }
    Var out = block();
    if (!out.value().all_finite()) {
        report.failure = "non-finite block output";
        return report;
    }
    backward(sum(out));

    std::vector<Tensor> analytic;
    for (Var& v : vars) analytic.push_back(v.grad().empty() ? Tensor(v.shape()) : v.grad());
    if (options.tamper) options.tamper(analytic);

    auto evaluate = [&]() {
        NoGradGuard guard;
        return block().value().sum();
    };

    const double base = evaluate();
    std::size_t total = 0;
    std::size_t kinks = 0;
    report.passed = true;
    for (std::size_t k = 0; k < vars.size(); ++k) {
        GradCheckGroup group;
        group.name = inputs[k].first;
        group.coordinates = vars[k].value().size();
        Tensor& value = vars[k].mutable_value();
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double original = value[i];
            const double a = analytic[k][i];
            auto probe = [&](double step) {
                value[i] = original + step;
                const double plus = evaluate();
                value[i] = original - step;
                const double minus = evaluate();
                value[i] = original;
                return std::pair{plus, minus};
            };
            auto rel_error = [&](double numeric) {
                return std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
            };
            const auto [plus, minus] = probe(options.step);
            const double numeric = (plus - minus) / (2.0 * options.step);
            if (!std::isfinite(numeric) || !std::isfinite(a)) {
                group.finite = false;
                group.worst_index = i;
                report.passed = false;
                if (report.failure.empty())
                    report.failure = "non-finite gradient in " + group.name + " at index " + std::to_string(i);
                break;
            }
            double rel = rel_error(numeric);
            if (rel >= options.tolerance && options.kink_guard) {
                for (double step : {options.step / 4.0, options.step / 16.0}) {
                    const auto [p, m] = probe(step);
                    const double refined = rel_error((p - m) / (2.0 * step));
                    if (refined < options.tolerance) {
                        rel = refined;
                        ++group.refined;
                        break;
                    }
                    if (step == options.step / 16.0) {
                        const double right = (p - base) / step;
                        const double left = (base - m) / step;
                        const double scale = std::max({std::abs(right), std::abs(left), options.floor});
                        if (std::abs(right - left) / scale >= options.tolerance) {
                            ++group.kinks;
                            rel = 0.0;
                        }
                    }
                }
            }
            if (rel > group.max_rel_error) {
                group.max_rel_error = rel;
                group.worst_index = i;
            }
        }
        total += group.coordinates;
        kinks += group.kinks;
        if (group.max_rel_error >= options.tolerance) {
            report.passed = false;
            if (report.failure.empty())
                report.failure = group.name + " exceeds tolerance at index " + std::to_string(group.worst_index);
        }
        report.groups.push_back(group);
    }
    if (total > 0 && static_cast<double>(kinks) > options.max_kink_fraction * static_cast<double>(total)) {
        report.passed = false;
        if (report.failure.empty()) report.failure = "too many kinked coordinates: " + std::to_string(kinks);
    }
    for (Var& v : vars) v.zero_grad();
    return report;
}

}  // namespace mipr::nn
