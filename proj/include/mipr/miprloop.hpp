#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mipr/datakit.hpp"
#include "mipr/generator.hpp"
#include "mipr/segmenter.hpp"

namespace mipr {

enum class AcceptMetric { Ssim, L1, Off };
enum class RetrainPolicy { RetrainEachIteration, Freeze };

std::string to_string(AcceptMetric metric);
AcceptMetric parse_accept_metric(const std::string& text);
std::string to_string(RetrainPolicy policy);
RetrainPolicy parse_retrain_policy(const std::string& text);

struct LoopConfig {
    int max_iterations = 1;
    AcceptMetric metric = AcceptMetric::Ssim;
    double tau = 0.5;
    RetrainPolicy retrain = RetrainPolicy::RetrainEachIteration;
    bool retrain_generator = false;
    bool remove_accepted = true;
    PostprocessSettings postprocess;
    /// Used when S (or G) is retrained between iterations.
    SegModelConfig seg_model;
    SegTrainConfig seg_train;
    GanModelConfig gan_model;
    GanTrainConfig gan_train;
    std::uint64_t seed = 0;
    int batch_size = 8;
    int workers = 1;
    /// When set, the corpus, reports and current S are written here after
    /// every iteration, and an existing state is resumed.
    std::optional<std::filesystem::path> state_dir;
};

/// Outcome for one unlabeled image in one iteration.
struct ImageScore {
    std::string source_id;
    std::string pair_id;
    int iteration = 0;
    double score = 0.0;
    bool accepted = false;
    bool empty_mask = false;
    LabelMask pseudo_mask;
};

struct IterationReport {
    int iteration = 0;
    std::size_t candidates = 0;
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    double score_min = 0.0;
    double score_mean = 0.0;
    double score_max = 0.0;
    std::size_t corpus_size = 0;
    double wall_seconds = 0.0;
    bool early_stop = false;
    std::vector<ImageScore> scores;

    /// Single line of key=value fields.
    std::string to_text() const;
};

/// Maps a batch of images to pseudo labels; lets tests substitute an oracle.
using PseudoLabeler = std::function<std::vector<PseudoLabel>(const std::vector<const ImageTensor*>&)>;
PseudoLabeler model_labeler(const SegModel& model, int batch_size = 8);

/// Similarity of x' to x under the metric, in [0, 1], higher is better: SSIM
/// clamped at zero, 1 - mean absolute difference, or 1 when filtering is off.
double acceptance_score(AcceptMetric metric, const ImageTensor& generated, const ImageTensor& original);

struct Candidate {
    std::string source_id;
    LabeledPair pair;
    double score = 0.0;
    bool empty_mask = false;
};

/// pseudo-label -> postprocess -> pixel rearrangement -> score, for every image.
std::vector<Candidate> annotate_candidates(const std::vector<const UnlabeledImage*>& pool, const PseudoLabeler& labeler,
                                           const GanBundle& gan, const LoopConfig& config, int iteration);

struct LoopResult {
    DatasetSplit split;
    std::vector<IterationReport> reports;
    /// S after the last retraining (null when S was never retrained).
    std::unique_ptr<SegModel> segmenter;
};

LoopResult run_mipr(const DatasetSplit& split, const SegModel& seg, const GanBundle& gan, const LoopConfig& config);
/// Frozen-labeler variant (no S retraining is possible).
LoopResult run_mipr(const DatasetSplit& split, const PseudoLabeler& labeler, const GanBundle& gan,
                    const LoopConfig& config);

/// Scores the labeled pairs the way unlabeled images would be scored.
std::vector<double> validation_scores(const std::vector<LabeledPair>& pairs, const PseudoLabeler& labeler,
                                      const GanBundle& gan, const LoopConfig& config);
/// Threshold that accepts `accept_fraction` of the given scores (linear
/// interpolation between order statistics).
double calibrate_tau(std::vector<double> scores, double accept_fraction);

struct RoundTripReport {
    std::vector<double> accepted_dsc;
    std::vector<double> rejected_dsc;
    std::vector<double> scores;
    double accepted_mean_dsc = 0.0;
    double rejected_mean_dsc = 0.0;
    double coverage = 0.0;  // accepted fraction of the pool
};

/// One annotation pass over the unlabeled pool, joined with the hidden
/// ground truth. Throws when the split has none.
RoundTripReport evaluate_round_trip(const DatasetSplit& split, const PseudoLabeler& labeler, const GanBundle& gan,
                                    const LoopConfig& config);
/// The same join over recorded loop reports.
RoundTripReport round_trip_from_reports(const DatasetSplit& split, const std::vector<IterationReport>& reports);

/// Columns: source_id,pair_id,iteration,score,accepted,empty_mask.
void write_scores_csv(const std::filesystem::path& path, const std::vector<IterationReport>& reports);

}  // namespace mipr
