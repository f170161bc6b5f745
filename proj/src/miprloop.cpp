#include "mipr/miprloop.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <sstream>

#include "json.hpp"
#include "mipr/error.hpp"
#include "mipr/evalkit.hpp"

namespace mipr {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(AcceptMetric metric) {
    switch (metric) {
        case AcceptMetric::Ssim: return "ssim";
        case AcceptMetric::L1: return "l1";
        case AcceptMetric::Off: return "off";
    }
    return "?";
}

AcceptMetric parse_accept_metric(const std::string& text) {
    if (text == "ssim") return AcceptMetric::Ssim;
    if (text == "l1") return AcceptMetric::L1;
    if (text == "off") return AcceptMetric::Off;
    fail(ErrorKind::Config, "unknown acceptance metric: " + text);
}

std::string to_string(RetrainPolicy policy) {
    return policy == RetrainPolicy::RetrainEachIteration ? "retrain-S-each-iteration" : "freeze-S";
}

RetrainPolicy parse_retrain_policy(const std::string& text) {
    if (text == "retrain-S-each-iteration" || text == "retrain") return RetrainPolicy::RetrainEachIteration;
    if (text == "freeze-S" || text == "freeze") return RetrainPolicy::Freeze;
    fail(ErrorKind::Config, "unknown retrain policy: " + text);
}

std::string IterationReport::to_text() const {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "iteration=%d candidates=%zu accepted=%zu rejected=%zu score_min=%.6f score_mean=%.6f "
                  "score_max=%.6f corpus_size=%zu wall_seconds=%.3f early_stop=%d",
                  iteration, candidates, accepted, rejected, score_min, score_mean, score_max, corpus_size,
                  wall_seconds, early_stop ? 1 : 0);
    return buf;
}

PseudoLabeler model_labeler(const SegModel& model, int batch_size) {
    return [&model, batch_size](const std::vector<const ImageTensor*>& images) {
        return predict_pseudo_labels(model, images, batch_size);
    };
}

double acceptance_score(AcceptMetric metric, const ImageTensor& generated, const ImageTensor& original) {
    switch (metric) {
        // SSIM dips below zero for anti-correlated images; tau lives in [0, 1].
        case AcceptMetric::Ssim: return std::max(0.0, ssim(generated, original));
        case AcceptMetric::L1: {
            require(generated.data().size() == original.data().size(), ErrorKind::Invalid,
                    "score inputs differ in size");
            double total = 0.0;
            for (std::size_t i = 0; i < generated.data().size(); ++i)
                total += std::abs(generated.data()[i] - original.data()[i]);
            return 1.0 - total / static_cast<double>(generated.data().size());
        }
        case AcceptMetric::Off: return 1.0;
    }
    return 0.0;
}

namespace {

std::vector<Candidate> annotate_chunk(const std::vector<const UnlabeledImage*>& pool, const PseudoLabeler& labeler,
                                      const GanBundle& gan, const LoopConfig& config, int iteration) {
    std::vector<Candidate> out;
    if (pool.empty()) return out;
    std::vector<const ImageTensor*> images;
    for (const auto* u : pool) images.push_back(&u->image);
    const std::vector<PseudoLabel> labels = labeler(images);
    require(labels.size() == pool.size(), ErrorKind::Invalid, "labeler returned the wrong number of masks");

    std::vector<LabelMask> masks;
    std::vector<bool> empty;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        PostprocessResult r = postprocess_pseudo_label(labels[i].mask, labels[i].confidence, config.postprocess);
        masks.push_back(std::move(r.mask));
        empty.push_back(r.empty);
    }
    std::vector<const LabelMask*> mask_ptrs;
    for (const auto& m : masks) mask_ptrs.push_back(&m);
    const std::vector<ImageTensor> generated = generator_forward(gan, images, mask_ptrs, config.batch_size);

    for (std::size_t i = 0; i < pool.size(); ++i) {
        Candidate c;
        c.source_id = pool[i]->id;
        c.pair.id = pool[i]->id + "_it" + std::to_string(iteration);
        c.pair.image = generated[i].quantized();
        c.pair.mask = std::move(masks[i]);
        c.pair.provenance = Provenance::mipr(iteration);
        c.pair.original_filename = pool[i]->original_filename;
        c.score = acceptance_score(config.metric, c.pair.image, pool[i]->image);
        c.empty_mask = empty[i];
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace

std::vector<Candidate> annotate_candidates(const std::vector<const UnlabeledImage*>& pool, const PseudoLabeler& labeler,
                                           const GanBundle& gan, const LoopConfig& config, int iteration) {
    const std::size_t workers = static_cast<std::size_t>(std::max(1, config.workers));
    if (workers == 1 || pool.size() < 2) return annotate_chunk(pool, labeler, gan, config, iteration);
    // Models are read-only here; chunks are joined in pool order.
    const std::size_t chunk = (pool.size() + workers - 1) / workers;
    std::vector<std::future<std::vector<Candidate>>> jobs;
    for (std::size_t start = 0; start < pool.size(); start += chunk) {
        std::vector<const UnlabeledImage*> part(pool.begin() + start,
                                                pool.begin() + std::min(pool.size(), start + chunk));
        jobs.push_back(std::async(std::launch::async, [&, part] {
            return annotate_chunk(part, labeler, gan, config, iteration);
        }));
    }
    std::vector<Candidate> out;
    for (auto& job : jobs)
        for (auto& c : job.get()) out.push_back(std::move(c));
    return out;
}

namespace {

json report_to_json(const IterationReport& r) {
    json scores = json::array();
    for (const auto& s : r.scores)
        scores.push_back({{"source_id", s.source_id},
                          {"pair_id", s.pair_id},
                          {"iteration", s.iteration},
                          {"score", s.score},
                          {"accepted", s.accepted},
                          {"empty_mask", s.empty_mask}});
    return {{"iteration", r.iteration},     {"candidates", r.candidates}, {"accepted", r.accepted},
            {"rejected", r.rejected},       {"score_min", r.score_min},   {"score_mean", r.score_mean},
            {"score_max", r.score_max},     {"corpus_size", r.corpus_size}, {"wall_seconds", r.wall_seconds},
            {"early_stop", r.early_stop},   {"scores", scores}};
}

IterationReport report_from_json(const json& j) {
    IterationReport r;
    r.iteration = j.at("iteration").get<int>();
    r.candidates = j.at("candidates").get<std::size_t>();
    r.accepted = j.at("accepted").get<std::size_t>();
    r.rejected = j.at("rejected").get<std::size_t>();
    r.score_min = j.at("score_min").get<double>();
    r.score_mean = j.at("score_mean").get<double>();
    r.score_max = j.at("score_max").get<double>();
    r.corpus_size = j.at("corpus_size").get<std::size_t>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.early_stop = j.at("early_stop").get<bool>();
    for (const auto& s : j.at("scores")) {
        ImageScore score;
        score.source_id = s.at("source_id").get<std::string>();
        score.pair_id = s.at("pair_id").get<std::string>();
        score.iteration = s.at("iteration").get<int>();
        score.score = s.at("score").get<double>();
        score.accepted = s.at("accepted").get<bool>();
        score.empty_mask = s.at("empty_mask").get<bool>();
        r.scores.push_back(std::move(score));
    }
    return r;
}

fs::path iteration_dir(const fs::path& root, int iteration) {
    char name[32];
    std::snprintf(name, sizeof(name), "iteration_%03d", iteration);
    return root / name;
}

void save_state(const fs::path& root, const LoopResult& result, const SegModel* seg, const GanBundle* gan) {
    const IterationReport& last = result.reports.back();
    const fs::path dir = iteration_dir(root, last.iteration);
    fs::create_directories(dir);
    save_corpus(result.split, dir / "corpus");
    json reports = json::array();
    for (const auto& r : result.reports) reports.push_back(report_to_json(r));
    std::ofstream(dir / "reports.json") << reports.dump(2) << '\n';
    if (seg) write_checkpoint(dir / "segmenter.ckpt", seg->to_checkpoint());
    if (gan) write_checkpoint(dir / "generator.ckpt", gan->to_checkpoint());
    // Written last: its presence marks the iteration as complete.
    std::ofstream(dir / "COMPLETE") << last.iteration << '\n';
}

// Latest completed iteration under root, if any.
std::optional<int> latest_iteration(const fs::path& root) {
    std::optional<int> latest;
    if (!fs::exists(root)) return latest;
    for (int k = 1;; ++k) {
        if (!fs::exists(iteration_dir(root, k) / "COMPLETE")) break;
        latest = k;
    }
    return latest;
}

LoopResult run_loop(const DatasetSplit& split, const PseudoLabeler& initial_labeler, const SegModel* initial_seg,
                    const GanBundle& initial_gan, const LoopConfig& config) {
    require(config.max_iterations >= 1, ErrorKind::Config, "max iterations must be at least 1");
    require(config.tau >= 0.0, ErrorKind::Config, "tau must be non-negative");
    split.validate();

    LoopResult result;
    result.split = split;
    std::unique_ptr<GanBundle> owned_gan;
    const GanBundle* gan = &initial_gan;
    PseudoLabeler labeler = initial_labeler;
    int start = 1;

    if (config.state_dir) {
        if (auto latest = latest_iteration(*config.state_dir)) {
            const fs::path dir = iteration_dir(*config.state_dir, *latest);
            result.split = load_corpus(dir / "corpus");
            std::ifstream in(dir / "reports.json");
            try {
                for (const auto& r : json::parse(in)) result.reports.push_back(report_from_json(r));
            } catch (const json::exception& e) {
                fail(ErrorKind::Data, "cannot resume from " + dir.string() + ": " + e.what());
            }
            if (fs::exists(dir / "segmenter.ckpt")) {
                result.segmenter = SegModel::from_checkpoint(read_checkpoint(dir / "segmenter.ckpt", "segmenter"));
                labeler = model_labeler(*result.segmenter, config.batch_size);
            }
            if (fs::exists(dir / "generator.ckpt")) {
                owned_gan = GanBundle::from_checkpoint(read_checkpoint(dir / "generator.ckpt", "generator"));
                gan = owned_gan.get();
            }
            start = *latest + 1;
            if (!result.reports.empty() && result.reports.back().early_stop) return result;
        }
    }

    for (int iteration = start; iteration <= config.max_iterations; ++iteration) {
        const auto t0 = std::chrono::steady_clock::now();
        IterationReport report;
        report.iteration = iteration;
        if (result.split.unlabeled.empty()) {
            report.early_stop = true;
            report.corpus_size = result.split.labeled.size();
            result.reports.push_back(std::move(report));
            if (config.state_dir) save_state(*config.state_dir, result, nullptr, nullptr);
            break;
        }

        std::vector<const UnlabeledImage*> pool;
        for (const auto& u : result.split.unlabeled) pool.push_back(&u);
        std::vector<Candidate> candidates = annotate_candidates(pool, labeler, *gan, config, iteration);

        // Sequential commit.
        std::vector<bool> accepted_flags(candidates.size(), false);
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            Candidate& c = candidates[i];
            const bool accept = c.score >= config.tau;
            accepted_flags[i] = accept;
            report.scores.push_back({c.source_id, c.pair.id, iteration, c.score, accept, c.empty_mask, c.pair.mask});
            if (accept) result.split.labeled.push_back(std::move(c.pair));
        }
        if (config.remove_accepted) {
            std::vector<UnlabeledImage> remaining;
            for (std::size_t i = 0; i < result.split.unlabeled.size(); ++i)
                if (!accepted_flags[i]) remaining.push_back(std::move(result.split.unlabeled[i]));
            result.split.unlabeled = std::move(remaining);
        }

        report.candidates = candidates.size();
        report.accepted = static_cast<std::size_t>(std::count(accepted_flags.begin(), accepted_flags.end(), true));
        report.rejected = report.candidates - report.accepted;
        report.score_min = report.score_max = report.scores.front().score;
        double total = 0.0;
        for (const auto& s : report.scores) {
            report.score_min = std::min(report.score_min, s.score);
            report.score_max = std::max(report.score_max, s.score);
            total += s.score;
        }
        report.score_mean = total / static_cast<double>(report.scores.size());
        report.corpus_size = result.split.labeled.size();

        const bool more = iteration < config.max_iterations;
        if (more && config.retrain == RetrainPolicy::RetrainEachIteration && report.accepted > 0) {
            require(initial_seg != nullptr || result.segmenter != nullptr, ErrorKind::Config,
                    "retraining S needs a segmenter model, not a fixed labeler");
            SegTrainConfig tc = config.seg_train;
            tc.seed = derive_seed(config.seed, "retrain-segmenter-" + std::to_string(iteration));
            const SegModelConfig& mc = result.segmenter ? result.segmenter->config() : initial_seg->config();
            result.segmenter = train_segmenter(result.split.labeled, mc, tc).model;
            labeler = model_labeler(*result.segmenter, config.batch_size);
        }
        if (more && config.retrain_generator && report.accepted > 0) {
            GanTrainConfig gc = config.gan_train;
            gc.seed = derive_seed(config.seed, "retrain-generator-" + std::to_string(iteration));
            owned_gan = train_generator(result.split.labeled, gan->config(), gc).bundle;
            gan = owned_gan.get();
        }
        report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.reports.push_back(std::move(report));
        if (config.state_dir)
            save_state(*config.state_dir, result, result.segmenter.get(), owned_gan.get());
    }
    return result;
}

}  // namespace

LoopResult run_mipr(const DatasetSplit& split, const SegModel& seg, const GanBundle& gan, const LoopConfig& config) {
    return run_loop(split, model_labeler(seg, config.batch_size), &seg, gan, config);
}

LoopResult run_mipr(const DatasetSplit& split, const PseudoLabeler& labeler, const GanBundle& gan,
                    const LoopConfig& config) {
    LoopConfig frozen = config;
    frozen.retrain = RetrainPolicy::Freeze;
    return run_loop(split, labeler, nullptr, gan, frozen);
}

std::vector<double> validation_scores(const std::vector<LabeledPair>& pairs, const PseudoLabeler& labeler,
                                      const GanBundle& gan, const LoopConfig& config) {
    std::vector<UnlabeledImage> images;
    for (const auto& p : pairs) images.push_back({p.id, p.image, p.original_filename});
    std::vector<const UnlabeledImage*> pool;
    for (const auto& u : images) pool.push_back(&u);
    std::vector<double> scores;
    for (const auto& c : annotate_candidates(pool, labeler, gan, config, 1)) scores.push_back(c.score);
    return scores;
}

double calibrate_tau(std::vector<double> scores, double accept_fraction) {
    require(!scores.empty(), ErrorKind::Invalid, "cannot calibrate tau without scores");
    require(accept_fraction >= 0.0 && accept_fraction <= 1.0, ErrorKind::Config,
            "accept fraction must lie in [0, 1]");
    std::sort(scores.begin(), scores.end());
    const double pos = (1.0 - accept_fraction) * static_cast<double>(scores.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(scores.size() - 1, lo + 1);
    const double frac = pos - static_cast<double>(lo);
    return std::clamp(scores[lo] + frac * (scores[hi] - scores[lo]), 0.0, 1.0);
}

namespace {

void finish(RoundTripReport& r, std::size_t pool) {
    r.accepted_mean_dsc = mean_std(r.accepted_dsc).mean;
    r.rejected_mean_dsc = mean_std(r.rejected_dsc).mean;
    r.coverage = pool == 0 ? 0.0 : static_cast<double>(r.accepted_dsc.size()) / static_cast<double>(pool);
}

}  // namespace

RoundTripReport evaluate_round_trip(const DatasetSplit& split, const PseudoLabeler& labeler, const GanBundle& gan,
                                    const LoopConfig& config) {
    require(!split.hidden_truth.empty(), ErrorKind::Data, "round-trip evaluation needs hidden ground truth");
    std::vector<const UnlabeledImage*> pool;
    for (const auto& u : split.unlabeled) {
        require(split.hidden_truth.count(u.id) > 0, ErrorKind::Data, "no hidden ground truth for " + u.id);
        pool.push_back(&u);
    }
    RoundTripReport report;
    for (const auto& c : annotate_candidates(pool, labeler, gan, config, 1)) {
        const double d = dsc(c.pair.mask, split.hidden_truth.at(c.source_id));
        (c.score >= config.tau ? report.accepted_dsc : report.rejected_dsc).push_back(d);
        report.scores.push_back(c.score);
    }
    finish(report, pool.size());
    return report;
}

RoundTripReport round_trip_from_reports(const DatasetSplit& split, const std::vector<IterationReport>& reports) {
    require(!split.hidden_truth.empty(), ErrorKind::Data, "round-trip evaluation needs hidden ground truth");
    RoundTripReport report;
    std::size_t pool = 0;
    for (const auto& r : reports)
        for (const auto& s : r.scores) {
            auto it = split.hidden_truth.find(s.source_id);
            require(it != split.hidden_truth.end(), ErrorKind::Data, "no hidden ground truth for " + s.source_id);
            require(!s.pseudo_mask.empty(), ErrorKind::Data, "report for " + s.source_id + " carries no mask");
            const double d = dsc(s.pseudo_mask, it->second);
            (s.accepted ? report.accepted_dsc : report.rejected_dsc).push_back(d);
            report.scores.push_back(s.score);
            ++pool;
        }
    finish(report, pool);
    return report;
}

void write_scores_csv(const fs::path& path, const std::vector<IterationReport>& reports) {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
    out << "source_id,pair_id,iteration,score,accepted,empty_mask\n";
    char buf[96];
    for (const auto& r : reports)
        for (const auto& s : r.scores) {
            std::snprintf(buf, sizeof(buf), ",%d,%.8f,%d,%d\n", s.iteration, s.score, s.accepted ? 1 : 0,
                          s.empty_mask ? 1 : 0);
            out << s.source_id << ',' << s.pair_id << buf;
        }
    require(static_cast<bool>(out), ErrorKind::Io, "failed writing " + path.string());
}

}  // namespace mipr
