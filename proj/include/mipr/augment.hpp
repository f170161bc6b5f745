#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "mipr/datakit.hpp"

namespace mipr {

/// k x k grid of equal patches over an image.
class PatchGrid {
public:
    explicit PatchGrid(int k);
    int k() const { return k_; }
    int patches() const { return k_ * k_; }
    /// C(k^2, 2): number of distinct single-pair swaps.
    std::size_t swap_count() const;
    /// Throws unless k <= min(height, width) and k divides both.
    void check(int height, int width) const;
    bool operator==(const PatchGrid&) const = default;

private:
    int k_;
};

/// Exchange of two patches (row-major patch indices). first == second is the
/// identity.
struct PatchSwap {
    int first = 0;
    int second = 0;
    bool identity() const { return first == second; }
    bool operator==(const PatchSwap&) const = default;
};

/// All single-pair swaps in lexicographic (first < second) order.
std::vector<PatchSwap> enumerate_patch_swaps(const PatchGrid& grid);
/// Uniform over the C(k^2, 2) swaps; the identity when k = 1.
PatchSwap draw_patch_swap(const PatchGrid& grid, Rng& rng);

ImageTensor apply_patch_swap(const ImageTensor& image, const PatchGrid& grid, PatchSwap swap);
LabelMask apply_patch_swap(const LabelMask& mask, const PatchGrid& grid, PatchSwap swap);

/// Replicate-pads bottom and right so k divides both dimensions.
ImageTensor pad_to_multiple(const ImageTensor& image, int k);

/// Every image reachable by swapping one unordered pair of distinct patches,
/// identity excluded: k^2 (k^2 - 1) / 2 variants.
std::vector<ImageTensor> patch_shuffle_variants(const ImageTensor& image, const PatchGrid& grid);

/// One random variant per call. Equal grids share a single swap so the pair
/// stays aligned; different grids are drawn independently.
std::pair<ImageTensor, LabelMask> sample_patch_shuffle(const ImageTensor& image, const LabelMask& mask,
                                                       const PatchGrid& grid_image,
                                                       const PatchGrid& grid_label, std::uint64_t seed);

/// Gradient magnitude in [0, 1].
struct EdgeMap {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

/// Raw (unnormalized) Sobel responses of the luminance channel.
struct SobelGradients {
    int height = 0;
    int width = 0;
    std::vector<double> gx;
    std::vector<double> gy;

    double magnitude(std::size_t i) const { return std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]); }
};

/// Largest magnitude the 3x3 Sobel pair can produce on [0,1] input: sqrt(20).
inline const double kSobelMaxResponse = std::sqrt(20.0);

SobelGradients sobel_gradients(const ImageTensor& image);
/// Magnitude with replicate padding, divided by kSobelMaxResponse.
EdgeMap sobel_edges(const ImageTensor& image);

struct AugmentSettings {
    bool rotate90 = false;
    bool hflip = false;
    bool vflip = false;
    bool crop = false;
    int crop_height = 0;  // 0: use crop_fraction
    int crop_width = 0;
    double crop_fraction = 0.85;
    bool color_jitter = false;
    double brightness = 0.1;
    double contrast = 0.1;
    double saturation = 0.1;

    bool any() const { return rotate90 || hflip || vflip || crop || color_jitter; }
};

/// Geometric transforms hit image and mask alike, photometric ones only the
/// image. Output keeps the input dimensions.
LabeledPair standard_augment(const LabeledPair& pair, const AugmentSettings& settings, std::uint64_t seed);

// Geometric primitives shared with tests.
ImageTensor flip_horizontal(const ImageTensor& image);
LabelMask flip_horizontal(const LabelMask& mask);
ImageTensor flip_vertical(const ImageTensor& image);
LabelMask flip_vertical(const LabelMask& mask);
/// Counter-clockwise quarter turns.
ImageTensor rotate90(const ImageTensor& image, int turns);
LabelMask rotate90(const LabelMask& mask, int turns);
ImageTensor transpose(const ImageTensor& image);

}  // namespace mipr
