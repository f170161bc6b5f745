#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mipr/nn/layers.hpp"

namespace mipr::nn {

/// Per-channel normalization over (batch, height, width) without a learned
/// affine: (x - mean) / sqrt(var + eps).
Var param_free_normalize(const Var& x, double eps = 1e-5);

enum class Activation { Relu, Elu };

Var activate(const Var& x, Activation kind);

struct SpadePlusOptions {
    int channels = 16;     // channels of the modulated activation
    int label_classes = 2;
    int hidden = 32;       // width of the shared modulation convolutions
    int kernel = 3;
    double eps = 1e-5;
    Activation activation = Activation::Relu;
};

/// Spatially-adaptive normalization with an edge-driven detail path:
///
///   out = gamma(semantic) * norm(x) + beta(semantic) + alpha(edges)
///
/// gamma and beta share one conv+ReLU trunk over the one-hot semantic map;
/// alpha has its own trunk over the edge map. Conditioning maps are resized
/// to the activation (nearest for semantics, bilinear for edges).
class SpadePlus : public Module {
public:
    SpadePlus(const SpadePlusOptions& options, Rng& rng);

    /// semantic: (N, classes, h, w) one-hot; edges: (N, 1, h', w').
    Var forward(const Var& x, const Tensor& semantic, const Tensor& edges) const;
    /// Classic SPADE path (no alpha term).
    Var forward_spade(const Var& x, const Tensor& semantic) const;

    /// Modulation maps at the activation's resolution.
    std::pair<Var, Var> gamma_beta(const Tensor& semantic, int height, int width) const;
    Var alpha(const Tensor& edges, int height, int width) const;

    /// Zeroes the alpha output convolution, which disables the detail path.
    void zero_detail_path();

    Conv2d& semantic_trunk() { return semantic_trunk_; }
    Conv2d& gamma_conv() { return gamma_conv_; }
    Conv2d& beta_conv() { return beta_conv_; }
    Conv2d& edge_trunk() { return edge_trunk_; }
    Conv2d& alpha_conv() { return alpha_conv_; }
    const SpadePlusOptions& options() const { return options_; }

private:
    SpadePlusOptions options_;
    Conv2d semantic_trunk_;
    Conv2d gamma_conv_;
    Conv2d beta_conv_;
    Conv2d edge_trunk_;
    Conv2d alpha_conv_;
};

/// Power-iteration vectors for one weight viewed as (out, in*kh*kw).
struct SpectralNormState {
    Tensor u;  // (1, out, 1, 1), unit norm
    Tensor v;  // (1, in*kh*kw, 1, 1), unit norm
    int power_iterations = 1;

    static SpectralNormState random(const Shape& weight_shape, Rng& rng, int power_iterations = 1);
};

/// Returns W / sigma with sigma = u^T W v. When `update` is set, runs the
/// configured power iterations on (u, v) first. The gradient flows through
/// sigma with u and v held fixed. A zero weight gives a zero result (sigma is
/// clamped at eps).
Var spectral_normalize(const Var& weight, Tensor& u, Tensor& v, int power_iterations, bool update,
                       double eps = 1e-12);
inline Var spectral_normalize(const Var& weight, SpectralNormState& state, bool update = true) {
    return spectral_normalize(weight, state.u, state.v, state.power_iterations, update);
}
/// u^T W v for the current vectors.
double spectral_sigma(const Tensor& weight, const Tensor& u, const Tensor& v);

/// Convolution whose weight is spectrally normalized on every forward pass.
class SpectralConv2d : public Module {
public:
    SpectralConv2d(int in_channels, int out_channels, int kernel, int stride, int padding, Rng& rng,
                   int power_iterations = 1);

    /// `update` runs the power iteration (training); inference leaves u, v as is.
    Var forward(const Var& x, bool update) const;
    /// Weight as used by the next non-updating forward pass.
    Tensor effective_weight() const;
    /// Runs power iterations on the current weight until the sigma estimate
    /// stops moving (relative change below `tolerance`). Returns the count.
    int settle(int max_iterations = 2000, double tolerance = 1e-12);
    const Var& raw_weight() const { return conv_.weight(); }

private:
    Conv2d conv_;
    Tensor& u_;
    Tensor& v_;
    int power_iterations_;
};

struct GradCheckGroup {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    bool finite = true;
    std::size_t coordinates = 0;
    /// Coordinates that only matched at a smaller step.
    std::size_t refined = 0;
    /// Coordinates sitting on a kink (skipped).
    std::size_t kinks = 0;
};

struct GradCheckReport {
    bool passed = false;
    double tolerance = 0.0;
    std::vector<GradCheckGroup> groups;
    std::string failure;  // empty on success

    std::string to_text() const;
};

struct GradCheckOptions {
    double tolerance = 1e-4;
    double step = 1e-5;
    /// Relative error is |a - n| / max(|a|, |n|, floor).
    double floor = 1e-3;
    /// Applied to the analytic gradients before comparison (negative controls).
    std::function<void(std::vector<Tensor>&)> tamper;
    /// Piecewise-linear blocks (ReLU): a mismatching coordinate is retried at
    /// step/4 and step/16; if it still mismatches while the one-sided slopes
    /// disagree, the function has a kink there and the coordinate is skipped.
    bool kink_guard = false;
    /// Largest tolerated fraction of skipped coordinates.
    double max_kink_fraction = 0.01;
};

/// Compares analytic gradients of sum(block()) with respect to every named
/// input against central finite differences. `block` must read the current
/// values of the inputs and be free of side effects.
GradCheckReport gradient_check(const std::function<Var()>& block,
                               const std::vector<std::pair<std::string, Var>>& inputs,
                               const GradCheckOptions& options = {});

}  // namespace mipr::nn
