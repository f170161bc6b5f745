#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mipr/datakit.hpp"

namespace mipr {

/// Pixel counts with lesion (class 1) as the positive class.
struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t tn = 0;
    std::uint64_t fn = 0;

    std::uint64_t total() const { return tp + fp + tn + fn; }
    bool operator==(const ConfusionCounts&) const = default;
};

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& gt);

/// 2TP / (FP + 2TP + FN). `empty_value` is returned when both masks are empty.
double dsc(const ConfusionCounts& counts, double empty_value = 1.0);
double dsc(const LabelMask& pred, const LabelMask& gt, double empty_value = 1.0);
/// (TP + TN) / total.
double acc(const ConfusionCounts& counts);
double acc(const LabelMask& pred, const LabelMask& gt);

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double c1 = 0.01 * 0.01;
    double c2 = 0.03 * 0.03;
};

/// Mean SSIM of the luminance planes over all valid (fully inside) Gaussian
/// window positions. Images smaller than the window use the largest odd
/// window that fits.
double ssim(const ImageTensor& a, const ImageTensor& b, const SsimOptions& options = {});

struct MetricsReport {
    std::vector<std::string> ids;
    std::vector<double> dsc;
    std::vector<double> acc;
    double dsc_mean = 0.0;
    double dsc_std = 0.0;  // sample standard deviation over images
    double acc_mean = 0.0;
    double acc_std = 0.0;
};

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};
/// Sample standard deviation (n - 1); zero for fewer than two values.
MeanStd mean_std(const std::vector<double>& values);

MetricsReport summarize(const std::vector<std::string>& ids, const std::vector<LabelMask>& preds,
                        const std::vector<LabelMask>& gts, double empty_dsc = 1.0);

/// Columns: id,dsc,acc, followed by mean and std rows.
void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report);

/// Per-channel mean and variance on a grid x grid partition, concatenated
/// (channel-major, then cell row-major, mean before variance).
std::vector<double> pooled_patch_features(const ImageTensor& image, int grid = 4);

using PointSet = std::vector<std::vector<double>>;

struct TsneOptions {
    double perplexity = 30.0;
    int iterations = 1000;
    /// <= 0 picks max(n / early_exaggeration / 4, 50).
    double learning_rate = 0.0;
    double early_exaggeration = 12.0;
    int exaggeration_iterations = 250;
};

/// Exact t-SNE. Perplexity is capped at (n - 1) / 3.
std::vector<std::array<double, 2>> tsne_2d(const PointSet& points, std::uint64_t seed, const TsneOptions& options = {});
/// Projection onto the two leading principal components (centered).
std::vector<std::array<double, 2>> pca_2d(const PointSet& points);

/// Below this many points the projection falls back to PCA.
inline constexpr std::size_t kTsneMinPoints = 8;

struct ProjectedPoint {
    double x = 0.0;
    double y = 0.0;
    std::string group;  // "real" or "generated"
    std::string id;
};

struct Projection {
    std::vector<ProjectedPoint> points;
    std::string method;   // "tsne" or "pca"
    std::string warning;  // set when falling back
};

Projection export_embedding_projection(const std::vector<std::pair<std::string, ImageTensor>>& real,
                                       const std::vector<std::pair<std::string, ImageTensor>>& generated,
                                       std::uint64_t seed, const TsneOptions& options = {});

/// Columns: x,y,group,id.
void write_projection_csv(const std::filesystem::path& path, const Projection& projection);

}  // namespace mipr
