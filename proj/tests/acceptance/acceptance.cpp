// Desk-scale acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails. Pass criterion numbers as
// arguments to run a subset.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "mipr/augment.hpp"
#include "mipr/checkpoint.hpp"
#include "mipr/config.hpp"
#include "mipr/evalkit.hpp"
#include "mipr/generator.hpp"
#include "mipr/miprloop.hpp"
#include "mipr/segmenter.hpp"
#include "mipr/selfcheck.hpp"

using namespace mipr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int number;
    std::string name;
    double budget_seconds;  // 0: no runtime bound
    std::function<Outcome()> run;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

ImageTensor random_image(int h, int w, int c, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    ImageTensor im(h, w, c);
    for (float& v : im.data()) v = u(rng);
    return im;
}

LabelMask random_mask(int h, int w, std::mt19937_64& rng, double p) {
    std::bernoulli_distribution coin(p);
    LabelMask m(h, w);
    for (auto& v : m.data()) v = coin(rng) ? 1 : 0;
    return m;
}

double top_singular_value(const nn::Tensor& w) {
    const int rows = w.shape().n;
    const int cols = static_cast<int>(w.size() / static_cast<std::size_t>(rows));
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = w[static_cast<std::size_t>(r) * cols + c];
    return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

RunConfig desk_config() { return RunConfig::load(fs::path(MIPR_CONFIG_DIR) / "desk.json"); }

DatasetSplit desk_data(const RunConfig& cfg) {
    SyntheticOptions so = cfg.data.synthetic;
    so.sizes = cfg.data.split();
    return make_synthetic_dataset(cfg.data.count, cfg.data.height, cfg.data.width, cfg.component_seed("synthetic"),
                                  so);
}

// ---------------------------------------------------------------------------

Outcome metric_oracle() {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> density(0.0, 1.0);
    int mismatches = 0, empty_pairs = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        // Vary density so empty and full masks show up.
        const LabelMask pred = random_mask(16, 16, rng, trial % 50 == 0 ? 0.0 : density(rng));
        const LabelMask gt = random_mask(16, 16, rng, trial % 50 == 0 ? 0.0 : density(rng));
        std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                const bool p = pred.at(y, x) != 0, g = gt.at(y, x) != 0;
                tp += p && g;
                fp += p && !g;
                fn += !p && g;
                tn += !p && !g;
            }
        const ConfusionCounts c = confusion(pred, gt);
        if (c.tp != tp || c.fp != fp || c.fn != fn || c.tn != tn) ++mismatches;
        const std::uint64_t den = 2 * tp + fp + fn;
        empty_pairs += den == 0;
        const double want_dsc = den == 0 ? 1.0 : static_cast<double>(2 * tp) / static_cast<double>(den);
        const double want_acc = static_cast<double>(tp + tn) / 256.0;
        if (dsc(pred, gt) != want_dsc || acc(pred, gt) != want_acc) ++mismatches;
    }
    return {mismatches == 0,
            "pairs=1000 mismatches=" + std::to_string(mismatches) + " empty_pairs=" + std::to_string(empty_pairs)};
}

Outcome patch_shuffle_counts() {
    std::mt19937_64 rng(2);
    const ImageTensor image = random_image(24, 24, 3, rng);
    auto histogram = [](const ImageTensor& im) {
        std::multiset<float> s(im.data().begin(), im.data().end());
        return s;
    };
    const auto want_hist = histogram(image);
    std::ostringstream d;
    bool pass = true;
    for (int k = 1; k <= 4; ++k) {
        const auto variants = patch_shuffle_variants(image, PatchGrid(k));
        const std::size_t expected = static_cast<std::size_t>(k * k) * (k * k - 1) / 2;
        bool multiset_ok = true;
        for (const auto& v : variants) multiset_ok &= histogram(v) == want_hist;
        pass &= variants.size() == expected && multiset_ok;
        d << "k" << k << "=" << variants.size() << "/" << expected << (multiset_ok ? "" : "(multiset!)") << " ";
    }
    const bool six = patch_shuffle_variants(image, PatchGrid(2)).size() == 6;
    d << "k2_is_6=" << (six ? "yes" : "no");
    return {pass && six, d.str()};
}

Outcome spade_gradient() {
    double worst = 0.0;
    std::size_t kinks = 0, coordinates = 0;
    bool pass = true;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const nn::GradCheckReport r = spade_plus_gradient_check(seed);
        pass &= r.passed;
        for (const auto& g : r.groups) {
            worst = std::max(worst, g.max_rel_error);
            kinks += g.kinks;
            coordinates += g.coordinates;
        }
    }
    const nn::GradCheckReport elu = spade_plus_gradient_check(0, {}, nn::Activation::Elu);
    double worst_elu = 0.0;
    for (const auto& g : elu.groups) worst_elu = std::max(worst_elu, g.max_rel_error);
    pass &= elu.passed && worst < 1e-4 && worst_elu < 1e-4;
    const double gap = spade_plus_zero_alpha_gap(0);
    pass &= gap <= 1e-6;
    return {pass, "relu_max_rel_err=" + fmt("%.2e", worst) + " relu_kinks=" + std::to_string(kinks) + "/" +
                      std::to_string(coordinates) + " elu_max_rel_err=" + fmt("%.2e", worst_elu) +
                      " zero_alpha_gap=" + fmt("%.1e", gap)};
}

Outcome spectral_bound() {
    const RunConfig cfg = desk_config();
    const DatasetSplit split = desk_data(cfg);
    GanTrainConfig t = cfg.generator_training();
    t.max_steps = 200;
    t.epochs = 1000;
    double worst_step = 0.0;
    int steps = 0;
    t.on_step = [&](const GanBundle& b, int step) {
        steps = step;
        for (const auto& w : b.discriminator_effective_weights()) worst_step = std::max(worst_step, top_singular_value(w));
    };
    const GanTrainResult r = train_generator(split.labeled, cfg.gan_model, t);
    double worst_final = 0.0;
    std::size_t layers = 0;
    for (const auto& w : r.bundle->discriminator_effective_weights()) {
        worst_final = std::max(worst_final, top_singular_value(w));
        ++layers;
    }
    const bool pass = steps == 200 && worst_final <= 1.0 + 1e-3 && worst_step <= 1.0 + 1e-3;
    return {pass, "steps=" + std::to_string(steps) + " layers=" + std::to_string(layers) +
                      " sigma_max_final=" + fmt("%.6f", worst_final) + " sigma_max_any_step=" + fmt("%.6f", worst_step)};
}

Outcome sobel_oracle() {
    std::mt19937_64 rng(5);
    const int gx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
    const int gy[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const ImageTensor im = random_image(32, 32, 3, rng);
        auto lum = [&](int y, int x) {
            y = std::clamp(y, 0, 31);
            x = std::clamp(x, 0, 31);
            return 0.299 * im.at(y, x, 0) + 0.587 * im.at(y, x, 1) + 0.114 * im.at(y, x, 2);
        };
        const EdgeMap e = sobel_edges(im);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                double sx = 0, sy = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        sx += gx[dy + 1][dx + 1] * lum(y + dy, x + dx);
                        sy += gy[dy + 1][dx + 1] * lum(y + dy, x + dx);
                    }
                const double want = std::min(1.0, std::sqrt(sx * sx + sy * sy) / std::sqrt(20.0));
                worst = std::max(worst, std::abs(want - e.at(y, x)));
            }
    }
    bool constant_zero = true;
    for (float level : {0.0f, 0.37f, 1.0f})
        for (double v : sobel_edges(ImageTensor(32, 32, 3, level)).data) constant_zero &= v == 0.0;
    return {worst <= 1e-6 && constant_zero,
            "images=100 max_abs_err=" + fmt("%.2e", worst) + " constant_exact_zero=" + (constant_zero ? "yes" : "no")};
}

Outcome rearrangement_contract() {
    const RunConfig cfg = desk_config();
    const GanBundle bundle(cfg.gan_model, cfg.component_seed("generator"));
    std::mt19937_64 rng(6);
    int mask_mismatch = 0, nondeterministic = 0, trials = 0;
    for (int trial = 0; trial < 10; ++trial, ++trials) {
        const ImageTensor im = random_image(cfg.data.height, cfg.data.width, 3, rng);
        const LabelMask m = random_mask(cfg.data.height, cfg.data.width, rng, trial / 10.0);
        const LabeledPair a = pixel_rearrange(bundle, im, m, 1);
        const LabeledPair b = pixel_rearrange(bundle, im, m, 1);
        mask_mismatch += !(a.mask == m) || dsc(a.mask, m) != 1.0;
        nondeterministic += !(a.image == b.image) || !(a.mask == b.mask);
    }
    return {mask_mismatch == 0 && nondeterministic == 0,
            "trials=" + std::to_string(trials) + " mask_mismatch=" + std::to_string(mask_mismatch) +
                " nondeterministic=" + std::to_string(nondeterministic)};
}

Outcome overfit_pilots() {
    const RunConfig cfg = desk_config();
    const DatasetSplit split = desk_data(cfg);
    const std::vector<LabeledPair> single{split.labeled[0], split.labeled[0]};

    SegTrainConfig st = cfg.segmenter_training();
    st.epochs = 200;
    st.augment = {};
    const SegTrainResult seg = train_segmenter(single, cfg.seg_model, st);
    const double seg_dsc = evaluate_dsc(*seg.model, {split.labeled[0]});

    GanTrainConfig gt = cfg.generator_training();
    gt.epochs = 300;
    gt.batch_size = 2;
    gt.patch_shuffle_probability = 0.0;
    gt.augment = {};
    const GanTrainResult gan = train_generator(single, cfg.gan_model, gt);
    const ImageTensor out = generator_forward(*gan.bundle, split.labeled[0].image, split.labeled[0].mask);
    const double s = ssim(out, split.labeled[0].image);
    return {seg_dsc >= 0.99 && s >= 0.8,
            "segmenter_dsc=" + fmt("%.4f", seg_dsc) + " (>=0.99, 200 epochs) generator_ssim=" + fmt("%.4f", s) +
                " (>=0.8, 300 steps)"};
}

Outcome end_to_end() {
    const RunConfig cfg = desk_config();
    const DatasetSplit split = desk_data(cfg);
    std::ostringstream d;
    const SegTrainResult s0 = train_segmenter(split.labeled, cfg.seg_model, cfg.segmenter_training());
    const double baseline = evaluate_dsc(*s0.model, split.test);
    const GanTrainResult g = train_generator(split.labeled, cfg.gan_model, cfg.generator_training());

    LoopConfig lc = cfg.loop_config();
    const PseudoLabeler labeler = model_labeler(*s0.model, lc.batch_size);
    const double fraction = cfg.tau_accept_fraction.value_or(0.8);
    lc.tau = calibrate_tau(validation_scores(split.labeled, labeler, *g.bundle, lc), fraction);
    d << "tau=" << fmt("%.4f", lc.tau) << " ";
    const LoopResult r = run_mipr(split, *s0.model, *g.bundle, lc);

    // (a) growth and provenance
    bool growth = r.reports.size() == 2;
    std::size_t previous = split.labeled.size();
    for (const auto& rep : r.reports) {
        growth &= rep.corpus_size >= previous && rep.accepted + rep.rejected == rep.candidates;
        d << "it" << rep.iteration << "=" << rep.accepted << "/" << rep.candidates << "->" << rep.corpus_size << " ";
        previous = rep.corpus_size;
    }
    std::map<std::string, int> accepted_at;
    for (const auto& rep : r.reports)
        for (const auto& s : rep.scores)
            if (s.accepted) accepted_at[s.pair_id] = rep.iteration;
    for (std::size_t i = 0; i < r.split.labeled.size(); ++i) {
        const LabeledPair& p = r.split.labeled[i];
        if (i < split.labeled.size()) {
            growth &= p.provenance.is_manual() && p.id == split.labeled[i].id && p.mask == split.labeled[i].mask;
        } else {
            const auto it = accepted_at.find(p.id);
            growth &= it != accepted_at.end() && p.provenance == Provenance::mipr(it->second);
        }
    }
    // (b) filter informativeness on hidden ground truth
    const RoundTripReport rt = round_trip_from_reports(split, r.reports);
    const bool informative = !rt.accepted_dsc.empty() && !rt.rejected_dsc.empty() &&
                             rt.accepted_mean_dsc >= rt.rejected_mean_dsc;
    d << "accepted_dsc=" << fmt("%.4f", rt.accepted_mean_dsc) << "(" << rt.accepted_dsc.size() << ") "
      << "rejected_dsc=" << fmt("%.4f", rt.rejected_mean_dsc) << "(" << rt.rejected_dsc.size() << ") ";
    // (c) non-degradation after retraining on manual + accepted pairs
    const SegTrainResult s1 = train_segmenter(r.split.labeled, cfg.seg_model, cfg.segmenter_training());
    const double final_dsc = evaluate_dsc(*s1.model, split.test);
    const bool holds = final_dsc >= baseline - 0.02;
    d << "test_dsc=" << fmt("%.4f", final_dsc) << " baseline=" << fmt("%.4f", baseline) << " "
      << "a=" << (growth ? "ok" : "FAIL") << " b=" << (informative ? "ok" : "FAIL")
      << " c=" << (holds ? "ok" : "FAIL");
    return {growth && informative && holds, d.str()};
}

Outcome persistence() {
    const fs::path root = fs::temp_directory_path() / "mipr_acceptance_persistence";
    fs::remove_all(root);
    RunConfig cfg = desk_config();
    cfg.data.count = 20;
    cfg.data.labeled = 5;
    cfg.data.unlabeled = 10;
    cfg.data.test = 5;
    DatasetSplit split = desk_data(cfg);
    split.labeled.push_back(split.test.back());
    split.test.pop_back();
    split.labeled.back().provenance = Provenance::mipr(2);
    save_corpus(split, root / "corpus");
    const DatasetSplit back = load_corpus(root / "corpus");
    bool corpus_ok = back.labeled.size() == split.labeled.size() && back.unlabeled.size() == split.unlabeled.size() &&
                     back.test.size() == split.test.size() && back.hidden_truth == split.hidden_truth;
    for (std::size_t i = 0; corpus_ok && i < split.labeled.size(); ++i)
        corpus_ok = back.labeled[i].id == split.labeled[i].id && back.labeled[i].image == split.labeled[i].image &&
                    back.labeled[i].mask == split.labeled[i].mask &&
                    back.labeled[i].provenance == split.labeled[i].provenance;
    for (std::size_t i = 0; corpus_ok && i < split.unlabeled.size(); ++i)
        corpus_ok = back.unlabeled[i].id == split.unlabeled[i].id && back.unlabeled[i].image == split.unlabeled[i].image;

    const std::string fingerprint = cfg.fingerprint();
    const bool config_ok = RunConfig::from_json(cfg.to_json()).fingerprint() == fingerprint;

    SegModel seg(cfg.seg_model, 1);
    seg.fingerprint = fingerprint;
    write_checkpoint(root / "seg.ckpt", seg.to_checkpoint());
    const auto seg_back = SegModel::from_checkpoint(read_checkpoint(root / "seg.ckpt", "segmenter"));
    GanBundle gan(cfg.gan_model, 2);
    gan.fingerprint = fingerprint;
    write_checkpoint(root / "gen.ckpt", gan.to_checkpoint());
    const auto gan_back = GanBundle::from_checkpoint(read_checkpoint(root / "gen.ckpt", "generator"));
    const bool ckpt_ok = seg_back->to_checkpoint() == seg.to_checkpoint() && seg_back->fingerprint == fingerprint &&
                         gan_back->to_checkpoint() == gan.to_checkpoint() && gan_back->fingerprint == fingerprint;
    fs::remove_all(root);
    return {corpus_ok && config_ok && ckpt_ok, std::string("corpus=") + (corpus_ok ? "exact" : "MISMATCH") +
                                                   " checkpoints=" + (ckpt_ok ? "exact" : "MISMATCH") +
                                                   " config_fingerprint=" + (config_ok ? "exact" : "MISMATCH")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria{
        {1, "metric oracle", 10, metric_oracle},
        {2, "patch-shuffle combinatorics", 5, patch_shuffle_counts},
        {3, "SPADE+ gradient check", 30, spade_gradient},
        {4, "spectral bound", 0, spectral_bound},
        {5, "Sobel oracle", 0, sobel_oracle},
        {6, "pixel-rearrangement contracts", 5, rearrangement_contract},
        {7, "single-sample overfit pilots", 600, overfit_pilots},
        {8, "end-to-end desk run", 1200, end_to_end},
        {9, "round-trip persistence", 0, persistence},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failures = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.count(c.number)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = c.budget_seconds <= 0 || secs < c.budget_seconds;
        const bool pass = o.pass && in_time;
        failures += !pass;
        std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.number << " (" << c.name << "): " << o.detail
                  << " seconds=" << fmt("%.1f", secs);
        if (c.budget_seconds > 0) std::cout << " budget=" << c.budget_seconds << (in_time ? "" : " OVER-BUDGET");
        std::cout << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
