#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mipr/nncore.hpp"

namespace mipr {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;  // key=value pairs
    double seconds = 0.0;

    std::string to_text() const;
};

/// Gradient check of SPADE+ on a (2, 4, 8, 8) activation, with respect to the
/// activation and every modulation parameter.
nn::GradCheckReport spade_plus_gradient_check(std::uint64_t seed, const nn::GradCheckOptions& options = {},
                                              nn::Activation activation = nn::Activation::Relu);

/// Largest |SPADE+ with zeroed alpha - plain SPADE| over a random instance.
double spade_plus_zero_alpha_gap(std::uint64_t seed);

/// Metric oracles, gradient checks (with a tampered negative control),
/// spectral-norm bounds, Sobel oracle and patch-shuffle counts.
std::vector<CheckResult> run_selfcheck(std::uint64_t seed = 0);

}  // namespace mipr
