#include <gtest/gtest.h>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <set>

#include "mipr/augment.hpp"
#include "mipr/error.hpp"
#include "test_util.hpp"

using namespace mipr;
using mipr::testing::random_image;
using mipr::testing::random_mask;

namespace {

cv::Mat luminance_mat(const ImageTensor& im) {
    cv::Mat m(im.height(), im.width(), CV_64F);
    const auto lum = im.luminance();
    std::copy(lum.begin(), lum.end(), m.ptr<double>());
    return m;
}

std::vector<float> sorted_values(const ImageTensor& im) {
    std::vector<float> v(im.data().begin(), im.data().end());
    std::sort(v.begin(), v.end());
    return v;
}

// Image whose every pixel is unique, so patch moves are traceable.
ImageTensor coordinate_image(int h, int w) {
    ImageTensor im(h, w, 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) im.at(y, x) = static_cast<float>(y * w + x) / static_cast<float>(h * w);
    return im;
}

}  // namespace

TEST(PatchShuffle, VariantCountIsPairsOfPatches) {
    std::mt19937_64 rng(1);
    const ImageTensor image = random_image(24, 24, 3, rng);
    for (int k = 1; k <= 4; ++k) {
        const std::size_t patches = static_cast<std::size_t>(k) * k;
        EXPECT_EQ(patch_shuffle_variants(image, PatchGrid(k)).size(), patches * (patches - 1) / 2) << "k=" << k;
        EXPECT_EQ(PatchGrid(k).swap_count(), patches * (patches - 1) / 2);
    }
}

TEST(PatchShuffle, TwoByTwoGridGivesSixImages) {
    std::mt19937_64 rng(2);
    const auto variants = patch_shuffle_variants(random_image(16, 16, 3, rng), PatchGrid(2));
    EXPECT_EQ(variants.size(), 6u);
}

TEST(PatchShuffle, VariantsAreDistinctPermutationsOfThePixels) {
    const ImageTensor image = coordinate_image(12, 12);
    for (int k = 2; k <= 4; ++k) {
        const auto variants = patch_shuffle_variants(image, PatchGrid(k));
        std::set<std::vector<float>> seen;
        for (const auto& v : variants) {
            EXPECT_EQ(sorted_values(v), sorted_values(image));
            EXPECT_NE(v, image);
            seen.insert(std::vector<float>(v.data().begin(), v.data().end()));
        }
        EXPECT_EQ(seen.size(), variants.size());
    }
}

TEST(PatchShuffle, SwapMovesExactlyTwoPatches) {
    const ImageTensor image = coordinate_image(8, 12);
    const PatchGrid grid(2);
    // Patch 0 is the top-left 4x6 block, patch 3 the bottom-right one.
    const ImageTensor out = apply_patch_swap(image, grid, {0, 3});
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 12; ++x) {
            const bool in0 = y < 4 && x < 6, in3 = y >= 4 && x >= 6;
            const int sy = in0 ? y + 4 : in3 ? y - 4 : y;
            const int sx = in0 ? x + 6 : in3 ? x - 6 : x;
            EXPECT_EQ(out.at(y, x), image.at(sy, sx));
        }
    EXPECT_EQ(apply_patch_swap(out, grid, {0, 3}), image);
}

TEST(PatchShuffle, EnumerationIsLexicographic) {
    const auto swaps = enumerate_patch_swaps(PatchGrid(2));
    const std::vector<PatchSwap> want{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}};
    EXPECT_EQ(swaps, want);
}

TEST(PatchShuffle, SampledPairStaysAlignedOnEqualGrids) {
    std::mt19937_64 rng(3);
    const ImageTensor image = coordinate_image(16, 16);
    LabelMask mask(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) mask.at(y, x) = image.at(y, x) > 0.5f;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto [img, m] = sample_patch_shuffle(image, mask, PatchGrid(4), PatchGrid(4), seed);
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) ASSERT_EQ(m.at(y, x), img.at(y, x) > 0.5f);
        const auto again = sample_patch_shuffle(image, mask, PatchGrid(4), PatchGrid(4), seed);
        EXPECT_EQ(again.first, img);
        EXPECT_EQ(again.second, m);
    }
}

TEST(PatchShuffle, SamplingIsUniformOverVariants) {
    const ImageTensor image = coordinate_image(8, 8);
    const LabelMask mask(8, 8);
    const auto variants = patch_shuffle_variants(image, PatchGrid(2));
    std::vector<int> hits(variants.size(), 0);
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const ImageTensor drawn = sample_patch_shuffle(image, mask, PatchGrid(2), PatchGrid(2), seed).first;
        const auto it = std::find(variants.begin(), variants.end(), drawn);
        ASSERT_NE(it, variants.end()) << "seed " << seed << " drew a non-variant";
        ++hits[static_cast<std::size_t>(it - variants.begin())];
    }
    for (int h : hits) EXPECT_NEAR(h / 1000.0, 1.0 / 6.0, 0.05);
}

TEST(PatchShuffle, GridMustDivideTheImage) {
    EXPECT_THROW(PatchGrid(3).check(16, 16), Error);
    EXPECT_THROW(PatchGrid(0), Error);
    EXPECT_NO_THROW(PatchGrid(4).check(16, 16));
    std::mt19937_64 rng(4);
    const ImageTensor padded = pad_to_multiple(random_image(10, 11, 3, rng), 3);
    EXPECT_EQ(padded.height(), 12);
    EXPECT_EQ(padded.width(), 12);
}

TEST(Sobel, MatchesOpenCvFilterWithReplicatedBorder) {
    std::mt19937_64 rng(5);
    const cv::Mat kx = (cv::Mat_<double>(3, 3) << -1, 0, 1, -2, 0, 2, -1, 0, 1);
    const cv::Mat ky = kx.t();
    for (int trial = 0; trial < 100; ++trial) {
        const ImageTensor image = random_image(32, 32, 3, rng);
        cv::Mat gx, gy;
        cv::filter2D(luminance_mat(image), gx, CV_64F, kx, cv::Point(-1, -1), 0, cv::BORDER_REPLICATE);
        cv::filter2D(luminance_mat(image), gy, CV_64F, ky, cv::Point(-1, -1), 0, cv::BORDER_REPLICATE);
        const EdgeMap e = sobel_edges(image);
        double worst = 0;
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                const double want =
                    std::min(1.0, std::hypot(gx.at<double>(y, x), gy.at<double>(y, x)) / std::sqrt(20.0));
                worst = std::max(worst, std::abs(want - e.at(y, x)));
            }
        ASSERT_LE(worst, 1e-6) << "trial " << trial;
    }
}

TEST(Sobel, ConstantImagesGiveExactZero) {
    for (float level : {0.0f, 0.2f, 0.5f, 1.0f}) {
        const EdgeMap e = sobel_edges(ImageTensor(16, 16, 3, level));
        for (double v : e.data) ASSERT_EQ(v, 0.0);
    }
}

TEST(Sobel, StepEdgeResponseIsScaled) {
    ImageTensor im(16, 16, 1);
    for (int y = 0; y < 16; ++y)
        for (int x = 8; x < 16; ++x) im.at(y, x) = 1.0f;
    const EdgeMap e = sobel_edges(im);
    // |gx| = 4 at the step, scaled by 1/sqrt(20).
    EXPECT_NEAR(e.at(5, 7), 4.0 / std::sqrt(20.0), 1e-12);
    EXPECT_EQ(e.at(5, 2), 0.0);
}

TEST(Geometry, FlipsAndRotationMatchOpenCv) {
    std::mt19937_64 rng(6);
    const ImageTensor image = random_image(10, 14, 1, rng);
    cv::Mat m(10, 14, CV_32F);
    std::copy(image.data().begin(), image.data().end(), m.ptr<float>());
    auto same = [](const ImageTensor& ours, const cv::Mat& ref) {
        if (ours.height() != ref.rows || ours.width() != ref.cols) return false;
        for (int y = 0; y < ref.rows; ++y)
            for (int x = 0; x < ref.cols; ++x)
                if (ours.at(y, x) != ref.at<float>(y, x)) return false;
        return true;
    };
    cv::Mat ref;
    cv::flip(m, ref, 1);
    EXPECT_TRUE(same(flip_horizontal(image), ref));
    cv::flip(m, ref, 0);
    EXPECT_TRUE(same(flip_vertical(image), ref));
    cv::transpose(m, ref);
    EXPECT_TRUE(same(transpose(image), ref));
    // One quarter turn either way; four return the original.
    cv::rotate(m, ref, cv::ROTATE_90_COUNTERCLOCKWISE);
    cv::Mat ref_cw;
    cv::rotate(m, ref_cw, cv::ROTATE_90_CLOCKWISE);
    const ImageTensor r1 = rotate90(image, 1);
    EXPECT_TRUE(same(r1, ref) || same(r1, ref_cw));
    EXPECT_EQ(rotate90(image, 4), image);
}

TEST(Geometry, StandardAugmentKeepsMaskAligned) {
    // Mask equals the thresholded image, so any lossless geometric transform
    // applied to both keeps the relation.
    const ImageTensor image = coordinate_image(16, 16);
    LabelMask mask(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) mask.at(y, x) = image.at(y, x) > 0.3f;
    AugmentSettings s;
    s.rotate90 = s.hflip = s.vflip = true;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const LabeledPair out = standard_augment({"a", image, mask, Provenance::manual(), ""}, s, seed);
        ASSERT_EQ(out.image.height(), 16);
        EXPECT_EQ(sorted_values(out.image), sorted_values(image));
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                ASSERT_EQ(out.mask.at(y, x), out.image.at(y, x) > 0.3f) << "seed " << seed;
    }
}

TEST(Geometry, CropTakesTheSameWindowFromImageAndMask) {
    std::mt19937_64 rng(8);
    const ImageTensor image = random_image(16, 16, 3, rng);
    const LabelMask mask = random_mask(16, 16, rng);
    AugmentSettings s;
    s.crop = true;
    s.crop_height = s.crop_width = 10;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const LabeledPair out = standard_augment({"a", image, mask, Provenance::manual(), ""}, s, seed);
        int matches = 0;
        for (int y0 = 0; y0 <= 6; ++y0)
            for (int x0 = 0; x0 <= 6; ++x0) {
                ImageTensor wi(10, 10, 3);
                LabelMask wm(10, 10);
                for (int y = 0; y < 10; ++y)
                    for (int x = 0; x < 10; ++x) {
                        for (int c = 0; c < 3; ++c) wi.at(y, x, c) = image.at(y0 + y, x0 + x, c);
                        wm.at(y, x) = mask.at(y0 + y, x0 + x);
                    }
                if (resize_image(wi, 16, 16) == out.image && resize_mask(wm, 16, 16) == out.mask) ++matches;
            }
        EXPECT_EQ(matches, 1) << "seed " << seed;
    }
}

TEST(Geometry, ColorJitterLeavesMaskUntouched) {
    std::mt19937_64 rng(7);
    const ImageTensor image = random_image(16, 16, 3, rng);
    const LabelMask mask = random_mask(16, 16, rng);
    AugmentSettings s;
    s.color_jitter = true;
    const LabeledPair out = standard_augment({"a", image, mask, Provenance::manual(), ""}, s, 3);
    EXPECT_EQ(out.mask, mask);
    EXPECT_NE(out.image, image);
    for (float v : out.image.data()) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
    }
}
