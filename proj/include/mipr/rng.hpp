#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mipr {

using Rng = std::mt19937_64;

/// Derives an independent child seed from a root seed and a component label.
/// All randomness in a run flows from one root seed through this function.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index);

inline Rng make_rng(std::uint64_t root, std::string_view label) {
    return Rng(derive_seed(root, label));
}

}  // namespace mipr
