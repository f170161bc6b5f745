#include "mipr/augment.hpp"

#include <algorithm>

#include "mipr/error.hpp"

namespace mipr {

PatchGrid::PatchGrid(int k) : k_(k) {
    require(k >= 1, ErrorKind::Invalid, "patch grid order must be >= 1, got " + std::to_string(k));
}

std::size_t PatchGrid::swap_count() const {
    const std::size_t p = static_cast<std::size_t>(patches());
    return p * (p - 1) / 2;
}

void PatchGrid::check(int height, int width) const {
    require(k_ <= std::min(height, width), ErrorKind::Invalid,
            "patch grid order " + std::to_string(k_) + " exceeds image size " + std::to_string(height) + "x" +
                std::to_string(width));
    require(height % k_ == 0 && width % k_ == 0, ErrorKind::Invalid,
            "image " + std::to_string(height) + "x" + std::to_string(width) + " not divisible by grid order " +
                std::to_string(k_) + "; pad first");
}

std::vector<PatchSwap> enumerate_patch_swaps(const PatchGrid& grid) {
    std::vector<PatchSwap> swaps;
    swaps.reserve(grid.swap_count());
    for (int a = 0; a < grid.patches(); ++a)
        for (int b = a + 1; b < grid.patches(); ++b) swaps.push_back({a, b});
    return swaps;
}

PatchSwap draw_patch_swap(const PatchGrid& grid, Rng& rng) {
    if (grid.k() == 1) return {};
    std::uniform_int_distribution<std::size_t> pick(0, grid.swap_count() - 1);
    std::size_t index = pick(rng);
    // Unrank the index into the lexicographic (a, b) pair.
    const int p = grid.patches();
    for (int a = 0; a < p; ++a) {
        const std::size_t row = static_cast<std::size_t>(p - 1 - a);
        if (index < row) return {a, a + 1 + static_cast<int>(index)};
        index -= row;
    }
    return {};
}

namespace {

// Swaps two patches of an interleaved raster in place.
template <typename T>
void swap_patches(std::vector<T>& data, int height, int width, int channels, const PatchGrid& grid,
                  PatchSwap swap) {
    if (swap.identity()) return;
    const int ph = height / grid.k();
    const int pw = width / grid.k();
    const int ay = (swap.first / grid.k()) * ph, ax = (swap.first % grid.k()) * pw;
    const int by = (swap.second / grid.k()) * ph, bx = (swap.second % grid.k()) * pw;
    const std::size_t row = static_cast<std::size_t>(pw) * channels;
    for (int y = 0; y < ph; ++y) {
        auto a = data.begin() + ((static_cast<std::size_t>(ay + y) * width + ax) * channels);
        auto b = data.begin() + ((static_cast<std::size_t>(by + y) * width + bx) * channels);
        std::swap_ranges(a, a + static_cast<std::ptrdiff_t>(row), b);
    }
}

}  // namespace

ImageTensor apply_patch_swap(const ImageTensor& image, const PatchGrid& grid, PatchSwap swap) {
    grid.check(image.height(), image.width());
    std::vector<float> data(image.data().begin(), image.data().end());
    swap_patches(data, image.height(), image.width(), image.channels(), grid, swap);
    return ImageTensor(image.height(), image.width(), image.channels(), std::move(data));
}

LabelMask apply_patch_swap(const LabelMask& mask, const PatchGrid& grid, PatchSwap swap) {
    grid.check(mask.height(), mask.width());
    std::vector<std::uint8_t> data(mask.data().begin(), mask.data().end());
    swap_patches(data, mask.height(), mask.width(), 1, grid, swap);
    return LabelMask(mask.height(), mask.width(), std::move(data));
}

ImageTensor pad_to_multiple(const ImageTensor& image, int k) {
    require(k >= 1, ErrorKind::Invalid, "pad multiple must be >= 1");
    const int h = (image.height() + k - 1) / k * k;
    const int w = (image.width() + k - 1) / k * k;
    if (h == image.height() && w == image.width()) return image;
    ImageTensor out(h, w, image.channels());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < image.channels(); ++c)
                out.at(y, x, c) = image.at(std::min(y, image.height() - 1), std::min(x, image.width() - 1), c);
    return out;
}

std::vector<ImageTensor> patch_shuffle_variants(const ImageTensor& image, const PatchGrid& grid) {
    grid.check(image.height(), image.width());
    std::vector<ImageTensor> variants;
    variants.reserve(grid.swap_count());
    for (const PatchSwap& swap : enumerate_patch_swaps(grid)) variants.push_back(apply_patch_swap(image, grid, swap));
    return variants;
}

std::pair<ImageTensor, LabelMask> sample_patch_shuffle(const ImageTensor& image, const LabelMask& mask,
                                                       const PatchGrid& grid_image,
                                                       const PatchGrid& grid_label, std::uint64_t seed) {
    require(image.height() == mask.height() && image.width() == mask.width(), ErrorKind::Invalid,
            "image and mask dimensions differ");
    grid_image.check(image.height(), image.width());
    grid_label.check(mask.height(), mask.width());
    Rng rng(seed);
    const PatchSwap image_swap = draw_patch_swap(grid_image, rng);
    const PatchSwap label_swap = grid_image == grid_label ? image_swap : draw_patch_swap(grid_label, rng);
    return {apply_patch_swap(image, grid_image, image_swap), apply_patch_swap(mask, grid_label, label_swap)};
}

SobelGradients sobel_gradients(const ImageTensor& image) {
    const int h = image.height();
    const int w = image.width();
    const std::vector<double> lum = image.luminance();
    auto px = [&](int y, int x) {
        return lum[static_cast<std::size_t>(std::clamp(y, 0, h - 1)) * w + std::clamp(x, 0, w - 1)];
    };
    SobelGradients g{h, w, std::vector<double>(lum.size()), std::vector<double>(lum.size())};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double tl = px(y - 1, x - 1), t = px(y - 1, x), tr = px(y - 1, x + 1);
            const double l = px(y, x - 1), r = px(y, x + 1);
            const double bl = px(y + 1, x - 1), b = px(y + 1, x), br = px(y + 1, x + 1);
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            g.gx[i] = (tr + 2 * r + br) - (tl + 2 * l + bl);
            g.gy[i] = (bl + 2 * b + br) - (tl + 2 * t + tr);
        }
    return g;
}

EdgeMap sobel_edges(const ImageTensor& image) {
    const SobelGradients g = sobel_gradients(image);
    EdgeMap edges{g.height, g.width, std::vector<double>(g.gx.size())};
    for (std::size_t i = 0; i < edges.data.size(); ++i)
        edges.data[i] = std::min(1.0, g.magnitude(i) / kSobelMaxResponse);
    return edges;
}

// ---------------------------------------------------------------------------
// Geometric primitives

namespace {

template <typename Get, typename Out>
void remap(Out& out, int out_h, int out_w, Get&& source) {
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) source(out, y, x);
}

}  // namespace

ImageTensor flip_horizontal(const ImageTensor& image) {
    ImageTensor out(image.height(), image.width(), image.channels());
    remap(out, image.height(), image.width(), [&](ImageTensor& o, int y, int x) {
        for (int c = 0; c < image.channels(); ++c) o.at(y, x, c) = image.at(y, image.width() - 1 - x, c);
    });
    return out;
}

LabelMask flip_horizontal(const LabelMask& mask) {
    LabelMask out(mask.height(), mask.width());
    remap(out, mask.height(), mask.width(),
          [&](LabelMask& o, int y, int x) { o.at(y, x) = mask.at(y, mask.width() - 1 - x); });
    return out;
}

ImageTensor flip_vertical(const ImageTensor& image) {
    ImageTensor out(image.height(), image.width(), image.channels());
    remap(out, image.height(), image.width(), [&](ImageTensor& o, int y, int x) {
        for (int c = 0; c < image.channels(); ++c) o.at(y, x, c) = image.at(image.height() - 1 - y, x, c);
    });
    return out;
}

LabelMask flip_vertical(const LabelMask& mask) {
    LabelMask out(mask.height(), mask.width());
    remap(out, mask.height(), mask.width(),
          [&](LabelMask& o, int y, int x) { o.at(y, x) = mask.at(mask.height() - 1 - y, x); });
    return out;
}

ImageTensor transpose(const ImageTensor& image) {
    ImageTensor out(image.width(), image.height(), image.channels());
    remap(out, image.width(), image.height(), [&](ImageTensor& o, int y, int x) {
        for (int c = 0; c < image.channels(); ++c) o.at(y, x, c) = image.at(x, y, c);
    });
    return out;
}

ImageTensor rotate90(const ImageTensor& image, int turns) {
    turns = ((turns % 4) + 4) % 4;
    ImageTensor out = image;
    for (int t = 0; t < turns; ++t) {
        ImageTensor next(out.width(), out.height(), out.channels());
        // Counter-clockwise: new(y, x) = old(x, W - 1 - y).
        remap(next, out.width(), out.height(), [&](ImageTensor& o, int y, int x) {
            for (int c = 0; c < out.channels(); ++c) o.at(y, x, c) = out.at(x, out.width() - 1 - y, c);
        });
        out = std::move(next);
    }
    return out;
}

LabelMask rotate90(const LabelMask& mask, int turns) {
    turns = ((turns % 4) + 4) % 4;
    LabelMask out = mask;
    for (int t = 0; t < turns; ++t) {
        LabelMask next(out.width(), out.height());
        remap(next, out.width(), out.height(),
              [&](LabelMask& o, int y, int x) { o.at(y, x) = out.at(x, out.width() - 1 - y); });
        out = std::move(next);
    }
    return out;
}

LabeledPair standard_augment(const LabeledPair& pair, const AugmentSettings& settings, std::uint64_t seed) {
    LabeledPair out = pair;
    if (!settings.any()) return out;
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const bool square = pair.image.height() == pair.image.width();

    if (settings.rotate90) {
        std::uniform_int_distribution<int> pick(0, 3);
        int turns = pick(rng);
        if (!square) turns = (turns / 2) * 2;
        out.image = rotate90(out.image, turns);
        out.mask = rotate90(out.mask, turns);
    }
    if (settings.hflip && unit(rng) < 0.5) {
        out.image = flip_horizontal(out.image);
        out.mask = flip_horizontal(out.mask);
    }
    if (settings.vflip && unit(rng) < 0.5) {
        out.image = flip_vertical(out.image);
        out.mask = flip_vertical(out.mask);
    }
    if (settings.crop) {
        const int h = out.image.height();
        const int w = out.image.width();
        const int ch = settings.crop_height > 0 ? settings.crop_height
                                                : std::max(8, static_cast<int>(std::lround(h * settings.crop_fraction)));
        const int cw = settings.crop_width > 0 ? settings.crop_width
                                               : std::max(8, static_cast<int>(std::lround(w * settings.crop_fraction)));
        require(ch <= h && cw <= w, ErrorKind::Invalid,
                "crop " + std::to_string(ch) + "x" + std::to_string(cw) + " larger than image " + std::to_string(h) +
                    "x" + std::to_string(w));
        std::uniform_int_distribution<int> oy(0, h - ch), ox(0, w - cw);
        const int y0 = oy(rng), x0 = ox(rng);
        ImageTensor crop_img(ch, cw, out.image.channels());
        LabelMask crop_mask(ch, cw);
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x) {
                for (int c = 0; c < out.image.channels(); ++c) crop_img.at(y, x, c) = out.image.at(y0 + y, x0 + x, c);
                crop_mask.at(y, x) = out.mask.at(y0 + y, x0 + x);
            }
        out.image = resize_image(crop_img, h, w);
        out.mask = resize_mask(crop_mask, h, w);
    }
    if (settings.color_jitter) {
        const double b = 1.0 + (2 * unit(rng) - 1) * settings.brightness;
        const double c = 1.0 + (2 * unit(rng) - 1) * settings.contrast;
        const double s = 1.0 + (2 * unit(rng) - 1) * settings.saturation;
        const std::vector<double> lum = out.image.luminance();
        double mean_lum = 0.0;
        for (double v : lum) mean_lum += v;
        mean_lum /= static_cast<double>(lum.size());
        const int channels = out.image.channels();
        auto data = out.image.data();
        for (std::size_t i = 0; i < lum.size(); ++i) {
            for (int k = 0; k < channels; ++k) {
                double v = data[i * channels + k];
                if (channels == 3) v = lum[i] + (v - lum[i]) * s;
                v = (v - mean_lum) * c + mean_lum;
                v *= b;
                data[i * channels + k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return out;
}

}  // namespace mipr
