#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mipr/rng.hpp"

namespace mipr {

/// H x W x C raster with values in [0, 1], stored interleaved (HWC).
class ImageTensor {
public:
    ImageTensor() = default;
    ImageTensor(int height, int width, int channels, float fill = 0.0f);
    /// Validates shape and range.
    ImageTensor(int height, int width, int channels, std::vector<float> data);

    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return channels_; }
    bool empty() const { return data_.empty(); }

    float at(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }
    float& at(int y, int x, int c = 0) { return data_[index(y, x, c)]; }
    std::span<const float> data() const { return data_; }
    std::span<float> data() { return data_; }

    /// Rounds every value to the nearest multiple of 1/255 (the stored form).
    ImageTensor quantized() const;
    /// Luminance (0.299, 0.587, 0.114) for 3 channels, identity for 1.
    std::vector<double> luminance() const;

    bool operator==(const ImageTensor&) const = default;

private:
    std::size_t index(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<float> data_;
};

enum class LabelClass : std::uint8_t { Background = 0, Lesion = 1 };
inline constexpr int kNumClasses = 2;

/// Per-pixel class map, row-major, values in {0, 1}.
class LabelMask {
public:
    LabelMask() = default;
    LabelMask(int height, int width, std::uint8_t fill = 0);
    LabelMask(int height, int width, std::vector<std::uint8_t> data);

    int height() const { return height_; }
    int width() const { return width_; }
    bool empty() const { return data_.empty(); }

    std::uint8_t at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    std::uint8_t& at(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    std::span<const std::uint8_t> data() const { return data_; }
    std::span<std::uint8_t> data() { return data_; }

    std::size_t foreground_count() const;
    bool operator==(const LabelMask&) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> data_;
};

/// Origin of a pair: iteration 0 is a manual annotation, k >= 1 came from
/// annotation iteration k.
struct Provenance {
    int iteration = 0;

    static Provenance manual() { return {0}; }
    static Provenance mipr(int iteration);
    bool is_manual() const { return iteration == 0; }
    std::string str() const;
    static Provenance parse(const std::string& text);
    bool operator==(const Provenance&) const = default;
};

struct LabeledPair {
    std::string id;
    ImageTensor image;
    LabelMask mask;
    Provenance provenance;
    std::string original_filename;
};

struct UnlabeledImage {
    std::string id;
    ImageTensor image;
    std::string original_filename;
};

/// labeled (X1), unlabeled (X2) and test sets. `hidden_truth` carries ground
/// truth for unlabeled images when it exists (synthetic data only); the
/// annotation loop never reads it.
struct DatasetSplit {
    std::vector<LabeledPair> labeled;
    std::vector<UnlabeledImage> unlabeled;
    std::vector<LabeledPair> test;
    std::map<std::string, LabelMask> hidden_truth;

    std::size_t total() const { return labeled.size() + unlabeled.size() + test.size(); }
    /// Throws on overlapping ids, mismatched pair dimensions or invalid values.
    void validate() const;
};

struct SplitSizes {
    std::size_t labeled = 0;
    std::size_t unlabeled = 0;
    std::size_t test = 0;

    std::size_t total() const { return labeled + unlabeled + test; }
    /// 200 / 1800 / 594 proportions scaled to `total`, each part at least 1.
    static SplitSizes scaled(std::size_t total);
};

struct IngestOptions {
    int height = 256;
    int width = 256;
    std::optional<SplitSizes> sizes;  // default: SplitSizes::scaled(count)
    std::uint64_t seed = 0;
};

/// Reads `<source>/images/<name>.{png,jpg,jpeg,bmp}` with masks at
/// `<source>/masks/<name>.png` or `<source>/masks/<name>_segmentation.png`.
DatasetSplit ingest_isic(const std::filesystem::path& source, const IngestOptions& options);

struct Ellipse {
    double center_y = 0, center_x = 0;
    double axis_a = 1, axis_b = 1;
    double angle = 0;

    /// Pixel-center containment test used for rasterization.
    bool contains(int y, int x) const;
};

struct SyntheticOptions {
    double lesion_contrast = 0.3;
    double texture_amplitude = 0.05;
    int min_hairs = 1;
    int max_hairs = 3;
    std::optional<SplitSizes> sizes;
};

struct SyntheticSample {
    ImageTensor image;
    LabelMask mask;
    LabelMask hair;  // pixels covered by streaks
    Ellipse lesion;
};

/// One sample, quantized to 8-bit levels; a pure function of (size, rng state).
SyntheticSample synthesize_sample(int height, int width, Rng& rng, const SyntheticOptions& options);

DatasetSplit make_synthetic_dataset(int count, int height, int width, std::uint64_t seed,
                                    const SyntheticOptions& options = {});

struct CorpusSummary {
    std::size_t labeled = 0;
    std::size_t unlabeled = 0;
    std::size_t test = 0;
    std::size_t hidden = 0;
};

/// Writes images/, masks/, hidden/ and manifest.json under `directory`.
CorpusSummary save_corpus(const DatasetSplit& split, const std::filesystem::path& directory);
DatasetSplit load_corpus(const std::filesystem::path& directory);

// Image IO and resampling.
ImageTensor read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const ImageTensor& image);
/// Any non-zero pixel is lesion.
LabelMask read_mask(const std::filesystem::path& path);
/// Written single channel, background 0, lesion 255.
void write_mask(const std::filesystem::path& path, const LabelMask& mask);
void write_gray(const std::filesystem::path& path, std::span<const double> values, int height, int width);

/// Bilinear resize, result quantized.
ImageTensor resize_image(const ImageTensor& image, int height, int width);
/// Bilinear resize of the {0,1} mask, binarized at >= 0.5.
LabelMask resize_mask(const LabelMask& mask, int height, int width);

}  // namespace mipr
