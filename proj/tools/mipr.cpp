// mipr: command-line front end for the annotation pipeline.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "mipr/augment.hpp"
#include "mipr/checkpoint.hpp"
#include "mipr/config.hpp"
#include "mipr/datakit.hpp"
#include "mipr/error.hpp"
#include "mipr/evalkit.hpp"
#include "mipr/generator.hpp"
#include "mipr/miprloop.hpp"
#include "mipr/segmenter.hpp"
#include "mipr/selfcheck.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mipr;

namespace {

using Clock = std::chrono::steady_clock;

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::string out;
    // Flag values translated into config overrides.
    std::vector<std::string> flag_overrides;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--set", c.sets, "Override a config value, e.g. --set segmenter.epochs=5");
}

/// Registers a flag that writes `key=<value>` into the overrides.
template <typename T>
void add_override(CLI::App* sub, Common& c, const std::string& flag, const std::string& key,
                  const std::string& help) {
    sub->add_option_function<T>(
        flag,
        [&c, key](const T& value) {
            std::ostringstream v;
            if constexpr (std::is_same_v<T, std::string>)
                v << json(value).dump();
            else
                v << value;
            c.flag_overrides.push_back(key + "=" + v.str());
        },
        help);
}

RunConfig resolve_config(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
    std::vector<std::string> all = c.sets;
    all.insert(all.end(), c.flag_overrides.begin(), c.flag_overrides.end());
    cfg.apply_overrides(all);
    return cfg;
}

fs::path artifact_root() {
    const char* home = std::getenv("MIPR_HOME");
    return home && *home ? fs::path(home) : fs::path("mipr-runs");
}

/// Explicit --out, or <MIPR_HOME>/<command>/<fingerprint prefix>/<name>.
fs::path output_path(const Common& c, const std::string& command, const RunConfig& cfg, const std::string& name) {
    if (!c.out.empty()) return c.out;
    return artifact_root() / command / cfg.fingerprint().substr(0, 12) / name;
}

fs::path manifest_path(const fs::path& out) { return fs::path(out.string() + ".run.json"); }

void require_dir(const fs::path& p, const std::string& what) {
    require(fs::is_directory(p), ErrorKind::Io, what + " not found: " + p.string());
}
void require_file(const fs::path& p, const std::string& what) {
    require(fs::is_regular_file(p), ErrorKind::Io, what + " not found: " + p.string());
}
void require_corpus(const fs::path& p) {
    require_dir(p, "data directory");
    require_file(p / "manifest.json", "corpus manifest");
}

void prepare_output_dir(const fs::path& out, bool force) {
    if (fs::exists(out)) {
        require(fs::is_directory(out), ErrorKind::Io, "output exists and is not a directory: " + out.string());
        if (!fs::is_empty(out)) {
            require(force, ErrorKind::Io, "output directory is not empty: " + out.string() + " (use --force)");
            fs::remove_all(out);
        }
    }
    fs::create_directories(out);
}

void prepare_output_file(const fs::path& out) {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
}

class Run {
public:
    Run(std::string command, const RunConfig& cfg) : start_(Clock::now()) {
        manifest_.command = std::move(command);
        manifest_.config_json = cfg.to_json();
        manifest_.fingerprint = cfg.fingerprint();
        manifest_.seeds.emplace_back("root", cfg.seed);
    }
    void input_file(const fs::path& p) { manifest_.inputs.emplace_back(p.string(), sha256_file(p)); }
    void input_tree(const fs::path& p) { manifest_.inputs.emplace_back(p.string(), sha256_tree(p)); }
    void seed(const std::string& name, std::uint64_t value) { manifest_.seeds.emplace_back(name, value); }
    json details = json::object();

    void finish(const fs::path& out) {
        manifest_.wall_seconds = std::chrono::duration<double>(Clock::now() - start_).count();
        manifest_.extra_json = details.dump();
        write_run_manifest(manifest_path(out), manifest_);
        std::cout << "manifest=" << manifest_path(out).string() << " seconds=" << manifest_.wall_seconds << '\n';
    }

private:
    Clock::time_point start_;
    RunManifest manifest_;
};

std::vector<fs::path> image_files(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::string ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
        if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

// ---------------------------------------------------------------------------

int cmd_ingest(const Common& c, const std::string& source, bool force) {
    require_dir(source, "source directory");
    const RunConfig cfg = resolve_config(c);
    const fs::path out = output_path(c, "ingest", cfg, "data");
    Run run("ingest", cfg);
    run.input_tree(source);

    IngestOptions opts;
    opts.height = cfg.data.height;
    opts.width = cfg.data.width;
    opts.sizes = cfg.data.split();
    opts.seed = cfg.seed;
    const DatasetSplit split = ingest_isic(source, opts);
    prepare_output_dir(out, force);
    const CorpusSummary s = save_corpus(split, out);
    std::cout << "labeled=" << s.labeled << " unlabeled=" << s.unlabeled << " test=" << s.test
              << " hidden=" << s.hidden << " out=" << out.string() << '\n';
    run.details = {{"labeled", s.labeled}, {"unlabeled", s.unlabeled}, {"test", s.test}, {"hidden", s.hidden}};
    run.finish(out);
    return 0;
}

int cmd_synth(const Common& c, bool force) {
    const RunConfig cfg = resolve_config(c);
    const fs::path out = output_path(c, "synth-data", cfg, "data");
    Run run("synth-data", cfg);
    const std::uint64_t seed = cfg.component_seed("synthetic");
    run.seed("synthetic", seed);

    SyntheticOptions opts = cfg.data.synthetic;
    opts.sizes = cfg.data.split();
    const DatasetSplit split = make_synthetic_dataset(cfg.data.count, cfg.data.height, cfg.data.width, seed, opts);
    prepare_output_dir(out, force);
    const CorpusSummary s = save_corpus(split, out);
    std::cout << "labeled=" << s.labeled << " unlabeled=" << s.unlabeled << " test=" << s.test
              << " hidden=" << s.hidden << " out=" << out.string() << '\n';
    run.details = {{"labeled", s.labeled}, {"unlabeled", s.unlabeled}, {"test", s.test}, {"hidden", s.hidden}};
    run.finish(out);
    return 0;
}

int cmd_train_seg(const Common& c, const std::string& data) {
    require_corpus(data);
    const RunConfig cfg = resolve_config(c);
    const fs::path out = output_path(c, "train-seg", cfg, "segmenter.ckpt");
    Run run("train-seg", cfg);
    run.input_tree(data);

    const DatasetSplit split = load_corpus(data);
    require(!split.labeled.empty(), ErrorKind::Data, "corpus has no labeled pairs: " + data);
    const SegTrainConfig tc = cfg.segmenter_training();
    run.seed("segmenter", tc.seed);
    SegTrainResult r = train_segmenter(split.labeled, cfg.seg_model, tc);
    for (const auto& e : r.log)
        std::cout << "epoch=" << e.epoch << " lr=" << e.learning_rate << " loss=" << e.loss << '\n';
    r.model->fingerprint = cfg.fingerprint();

    const double train_dsc = evaluate_dsc(*r.model, split.labeled);
    std::cout << "train_dsc=" << train_dsc;
    run.details["train_dsc"] = train_dsc;
    if (!split.test.empty()) {
        const double test_dsc = evaluate_dsc(*r.model, split.test);
        std::cout << " test_dsc=" << test_dsc;
        run.details["test_dsc"] = test_dsc;
    }
    std::cout << " pairs=" << split.labeled.size() << " out=" << out.string() << '\n';
    run.details["final_loss"] = r.log.empty() ? 0.0 : r.log.back().loss;
    prepare_output_file(out);
    write_checkpoint(out, r.model->to_checkpoint());
    run.finish(out);
    return 0;
}

int cmd_train_gen(const Common& c, const std::string& data) {
    require_corpus(data);
    const RunConfig cfg = resolve_config(c);
    const fs::path out = output_path(c, "train-gen", cfg, "generator.ckpt");
    Run run("train-gen", cfg);
    run.input_tree(data);

    const DatasetSplit split = load_corpus(data);
    require(!split.labeled.empty(), ErrorKind::Data, "corpus has no labeled pairs: " + data);
    const GanTrainConfig tc = cfg.generator_training();
    run.seed("generator", tc.seed);
    GanTrainResult r = train_generator(split.labeled, cfg.gan_model, tc);
    for (const auto& e : r.log)
        std::cout << "epoch=" << e.epoch << " steps=" << e.steps << " d_loss=" << e.discriminator_loss
                  << " adv=" << e.adversarial_loss << " fm=" << e.feature_matching_loss
                  << " l1=" << e.reconstruction_l1 << '\n';
    r.bundle->fingerprint = cfg.fingerprint();

    double total = 0.0;
    for (const auto& p : split.labeled) total += ssim(generator_forward(*r.bundle, p.image, p.mask), p.image);
    const double mean_ssim = total / static_cast<double>(split.labeled.size());
    std::cout << "train_ssim=" << mean_ssim << " pairs=" << split.labeled.size() << " out=" << out.string() << '\n';
    run.details["train_ssim"] = mean_ssim;
    prepare_output_file(out);
    write_checkpoint(out, r.bundle->to_checkpoint());
    run.finish(out);
    return 0;
}

int cmd_annotate(const Common& c, const std::string& seg_path, const std::string& gen_path, const std::string& data,
                 bool force) {
    // Every referenced path is checked before any model work starts.
    require_file(seg_path, "segmenter checkpoint");
    require_file(gen_path, "generator checkpoint");
    require_corpus(data);
    const RunConfig cfg = resolve_config(c);
    const fs::path out = output_path(c, "annotate", cfg, "annotate");
    Run run("annotate", cfg);
    run.input_file(seg_path);
    run.input_file(gen_path);
    run.input_tree(data);

    const auto seg = SegModel::from_checkpoint(read_checkpoint(seg_path, "segmenter"));
    const auto gan = GanBundle::from_checkpoint(read_checkpoint(gen_path, "generator"));
    const DatasetSplit split = load_corpus(data);

    LoopConfig lc = cfg.loop_config();
    lc.seg_model = seg->config();
    lc.gan_model = gan->config();
    run.seed("loop", lc.seed);
    run.seed("segmenter", lc.seg_train.seed);

    if (cfg.tau_accept_fraction) {
        const auto scores = validation_scores(split.labeled, model_labeler(*seg, lc.batch_size), *gan, lc);
        lc.tau = calibrate_tau(scores, *cfg.tau_accept_fraction);
        std::cout << "tau=" << lc.tau << " calibrated_on=labeled accept_fraction=" << *cfg.tau_accept_fraction
                  << " validation_pairs=" << scores.size() << '\n';
        run.details["tau_validation_scores"] = scores;
    } else {
        std::cout << "tau=" << lc.tau << '\n';
    }
    run.details["tau"] = lc.tau;

    const bool resuming = fs::exists(out / "state");
    if (!resuming) prepare_output_dir(out, force);
    lc.state_dir = out / "state";

    const LoopResult result = run_mipr(split, *seg, *gan, lc);
    json reports = json::array();
    std::ofstream text(out / "reports.txt");
    for (const auto& r : result.reports) {
        std::cout << r.to_text() << '\n';
        text << r.to_text() << '\n';
        reports.push_back({{"iteration", r.iteration},
                           {"candidates", r.candidates},
                           {"accepted", r.accepted},
                           {"rejected", r.rejected},
                           {"corpus_size", r.corpus_size},
                           {"early_stop", r.early_stop}});
    }
    run.details["iterations"] = reports;

    const fs::path corpus = out / "corpus";
    if (fs::exists(corpus)) fs::remove_all(corpus);
    save_corpus(result.split, corpus);
    write_scores_csv(out / "scores.csv", result.reports);
    if (result.segmenter) {
        result.segmenter->fingerprint = cfg.fingerprint();
        write_checkpoint(out / "segmenter.ckpt", result.segmenter->to_checkpoint());
    }
    if (!split.hidden_truth.empty()) {
        const RoundTripReport rt = round_trip_from_reports(split, result.reports);
        std::cout << "roundtrip accepted=" << rt.accepted_dsc.size() << " accepted_mean_dsc=" << rt.accepted_mean_dsc
                  << " rejected=" << rt.rejected_dsc.size() << " rejected_mean_dsc=" << rt.rejected_mean_dsc
                  << " coverage=" << rt.coverage << '\n';
        const json rt_doc{{"accepted", rt.accepted_dsc.size()},  {"accepted_mean_dsc", rt.accepted_mean_dsc},
                          {"rejected", rt.rejected_dsc.size()},  {"rejected_mean_dsc", rt.rejected_mean_dsc},
                          {"coverage", rt.coverage}};
        std::ofstream(out / "roundtrip.json") << rt_doc.dump(2) << '\n';
        run.details["roundtrip"] = rt_doc;
    }
    std::cout << "corpus=" << corpus.string() << " labeled=" << result.split.labeled.size()
              << " unlabeled=" << result.split.unlabeled.size() << '\n';
    run.finish(out);
    return 0;
}

int cmd_eval(const Common& c, const std::string& pred, const std::string& gt, const std::string& seg_path,
             const std::string& data, const std::string& which) {
    const bool from_dirs = !pred.empty() || !gt.empty();
    const bool from_model = !seg_path.empty() || !data.empty();
    require(from_dirs != from_model, ErrorKind::Config, "eval needs either --pred/--gt or --seg/--data");
    if (from_dirs) {
        require_dir(pred, "prediction directory");
        require_dir(gt, "ground-truth directory");
    } else {
        require_file(seg_path, "segmenter checkpoint");
        require_corpus(data);
    }
    const RunConfig cfg = resolve_config(c);
    const fs::path out = output_path(c, "eval", cfg, "report.csv");
    Run run("eval", cfg);

    std::vector<std::string> ids;
    std::vector<LabelMask> preds, gts;
    if (from_dirs) {
        run.input_tree(pred);
        run.input_tree(gt);
        for (const auto& f : image_files(pred)) {
            const fs::path g = fs::path(gt) / f.filename();
            require_file(g, "ground-truth mask for " + f.filename().string());
            ids.push_back(f.stem().string());
            preds.push_back(read_mask(f));
            gts.push_back(read_mask(g));
        }
        require(!ids.empty(), ErrorKind::Data, "no masks found in " + pred);
    } else {
        run.input_file(seg_path);
        run.input_tree(data);
        const auto seg = SegModel::from_checkpoint(read_checkpoint(seg_path, "segmenter"));
        const DatasetSplit split = load_corpus(data);
        require(which == "test" || which == "labeled", ErrorKind::Config, "--split must be test or labeled");
        const auto& pairs = which == "test" ? split.test : split.labeled;
        require(!pairs.empty(), ErrorKind::Data, "corpus has no " + which + " pairs");
        std::vector<const ImageTensor*> images;
        for (const auto& p : pairs) images.push_back(&p.image);
        const auto labels = predict_pseudo_labels(*seg, images);
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            ids.push_back(pairs[i].id);
            preds.push_back(labels[i].mask);
            gts.push_back(pairs[i].mask);
        }
    }
    const MetricsReport report = summarize(ids, preds, gts, cfg.eval.empty_dsc);
    prepare_output_file(out);
    write_metrics_csv(out, report);
    std::cout << "images=" << ids.size() << " dsc_mean=" << report.dsc_mean << " dsc_std=" << report.dsc_std
              << " acc_mean=" << report.acc_mean << " acc_std=" << report.acc_std << " out=" << out.string() << '\n';
    run.details = {{"images", ids.size()},          {"dsc_mean", report.dsc_mean}, {"dsc_std", report.dsc_std},
                   {"acc_mean", report.acc_mean},   {"acc_std", report.acc_std},   {"std_kind", "per-image sample"}};
    run.finish(out);
    return 0;
}

/// A corpus directory contributes original images (real) or MIPR pairs
/// (generated); any other directory contributes its image files.
std::vector<std::pair<std::string, ImageTensor>> gather_images(const fs::path& dir, bool generated) {
    std::vector<std::pair<std::string, ImageTensor>> images;
    if (fs::exists(dir / "manifest.json")) {
        const DatasetSplit split = load_corpus(dir);
        for (const auto& p : split.labeled)
            if (p.provenance.is_manual() != generated) images.emplace_back(p.id, p.image);
        if (!generated) {
            for (const auto& u : split.unlabeled) images.emplace_back(u.id, u.image);
            for (const auto& p : split.test) images.emplace_back(p.id, p.image);
        }
    } else {
        for (const auto& f : image_files(dir)) images.emplace_back(f.stem().string(), read_image(f));
    }
    return images;
}

int cmd_export_tsne(const Common& c, const std::string& real_dir, const std::string& gen_dir) {
    require_dir(real_dir, "real image directory");
    require_dir(gen_dir, "generated image directory");
    const RunConfig cfg = resolve_config(c);
    const fs::path out = output_path(c, "export-tsne", cfg, "points.csv");
    Run run("export-tsne", cfg);
    run.input_tree(real_dir);
    run.input_tree(gen_dir);
    const std::uint64_t seed = cfg.component_seed("tsne");
    run.seed("tsne", seed);

    const auto real = gather_images(real_dir, false);
    const auto generated = gather_images(gen_dir, true);
    const Projection projection = export_embedding_projection(real, generated, seed, cfg.eval.tsne);
    prepare_output_file(out);
    write_projection_csv(out, projection);
    if (!projection.warning.empty()) std::cerr << "warning: " << projection.warning << '\n';
    std::cout << "real=" << real.size() << " generated=" << generated.size() << " method=" << projection.method
              << " out=" << out.string() << '\n';
    run.details = {{"real", real.size()}, {"generated", generated.size()}, {"method", projection.method}};
    run.finish(out);
    return 0;
}

int cmd_augment_preview(const Common& c, const std::string& input, int k, bool force) {
    require_file(input, "input image");
    const RunConfig cfg = resolve_config(c);
    const fs::path out = output_path(c, "augment-preview", cfg, "preview");
    Run run("augment-preview", cfg);
    run.input_file(input);

    const ImageTensor image = read_image(input);
    const PatchGrid grid(k);
    grid.check(image.height(), image.width());
    prepare_output_dir(out, force);
    const auto variants = patch_shuffle_variants(image, grid);
    char name[32];
    for (std::size_t i = 0; i < variants.size(); ++i) {
        std::snprintf(name, sizeof name, "variant_%03zu.png", i);
        write_image(out / name, variants[i]);
    }
    const EdgeMap edges = sobel_edges(image);
    write_gray(out / "sobel.png", edges.data, edges.height, edges.width);
    std::cout << "k=" << k << " variants=" << variants.size() << " out=" << out.string() << '\n';
    run.details = {{"k", k}, {"variants", variants.size()}};
    run.finish(out);
    return 0;
}

int cmd_selfcheck(std::uint64_t seed) {
    bool ok = true;
    std::string failed;
    for (const auto& r : run_selfcheck(seed)) {
        std::cout << r.to_text() << '\n';
        if (!r.passed) {
            ok = false;
            failed += (failed.empty() ? "" : ",") + r.name;
        }
    }
    require(ok, ErrorKind::Numeric, "selfcheck failed: " + failed);
    std::cout << "selfcheck=pass\n";
    return 0;
}

void print_error(const std::string& command, const std::string& kind, const std::string& message) {
    const json line{{"command", command}, {"kind", kind}, {"message", message}};
    std::cerr << "mipr-error " << line.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mipr: automatic annotation by pixel rearrangement"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kMiprVersion));

    Common ingest_c, synth_c, seg_c, gen_c, ann_c, eval_c, tsne_c, prev_c, self_c;
    std::string source, data_seg, data_gen, data_ann, seg_ckpt, gen_ckpt, pred, gt, eval_seg, eval_data,
        eval_split = "test", real_dir, gen_dir, preview_input;
    bool force = false;
    int k = 2;
    std::uint64_t selfcheck_seed = 0;

    auto* ingest = app.add_subcommand("ingest", "Import an ISIC-layout image/mask folder as a corpus");
    add_common(ingest, ingest_c);
    ingest->add_option("--source", source, "Folder with images/ and masks/")->required();
    ingest->add_option("--out", ingest_c.out, "Corpus directory");
    add_override<int>(ingest, ingest_c, "--height", "data.height", "Target height");
    add_override<int>(ingest, ingest_c, "--width", "data.width", "Target width");
    add_override<std::uint64_t>(ingest, ingest_c, "--seed", "seed", "Root seed");
    ingest->add_flag("--force", force, "Replace a non-empty output directory");

    auto* synth = app.add_subcommand("synth-data", "Generate a deterministic synthetic corpus");
    add_common(synth, synth_c);
    synth->add_option("--out", synth_c.out, "Corpus directory");
    add_override<int>(synth, synth_c, "--count", "data.count", "Number of images");
    add_override<std::uint64_t>(synth, synth_c, "--seed", "seed", "Root seed");
    add_override<int>(synth, synth_c, "--height", "data.height", "Image height");
    add_override<int>(synth, synth_c, "--width", "data.width", "Image width");
    synth->add_flag("--force", force, "Replace a non-empty output directory");

    auto* train_seg = app.add_subcommand("train-seg", "Train the segmentation network S");
    add_common(train_seg, seg_c);
    train_seg->add_option("--data", data_seg, "Corpus directory")->required();
    train_seg->add_option("--out", seg_c.out, "Checkpoint file");
    add_override<int>(train_seg, seg_c, "--epochs", "segmenter.epochs", "Training epochs");
    add_override<std::string>(train_seg, seg_c, "--arch", "segmenter.arch", "unet-small or attention-unet-small");
    add_override<std::uint64_t>(train_seg, seg_c, "--seed", "seed", "Root seed");

    auto* train_gen = app.add_subcommand("train-gen", "Train the pixel-rearrangement generator G");
    add_common(train_gen, gen_c);
    train_gen->add_option("--data", data_gen, "Corpus directory")->required();
    train_gen->add_option("--out", gen_c.out, "Checkpoint file");
    add_override<int>(train_gen, gen_c, "--epochs", "generator.epochs", "Training epochs");
    add_override<int>(train_gen, gen_c, "--max-steps", "generator.max_steps", "Stop after this many steps");
    add_override<std::uint64_t>(train_gen, gen_c, "--seed", "seed", "Root seed");

    auto* annotate = app.add_subcommand("annotate", "Run MIPR annotation iterations");
    add_common(annotate, ann_c);
    annotate->add_option("--seg", seg_ckpt, "Segmenter checkpoint")->required();
    annotate->add_option("--gen", gen_ckpt, "Generator checkpoint")->required();
    annotate->add_option("--data", data_ann, "Corpus directory")->required();
    annotate->add_option("--out", ann_c.out, "Output directory");
    add_override<int>(annotate, ann_c, "--iters", "loop.max_iterations", "Annotation iterations");
    add_override<double>(annotate, ann_c, "--tau", "loop.tau", "Acceptance threshold");
    add_override<double>(annotate, ann_c, "--tau-accept-fraction", "loop.tau_accept_fraction",
                         "Calibrate tau to accept this fraction of labeled pairs");
    add_override<std::string>(annotate, ann_c, "--metric", "loop.metric", "ssim, l1 or off");
    add_override<std::string>(annotate, ann_c, "--retrain", "loop.retrain", "retrain-S-each-iteration or freeze-S");
    add_override<int>(annotate, ann_c, "--workers", "loop.workers", "Scoring workers");
    add_override<std::uint64_t>(annotate, ann_c, "--seed", "seed", "Root seed");
    annotate->add_flag("--force", force, "Replace a non-empty output directory");

    auto* eval = app.add_subcommand("eval", "DSC/ACC report");
    add_common(eval, eval_c);
    eval->add_option("--pred", pred, "Predicted masks");
    eval->add_option("--gt", gt, "Ground-truth masks with matching file names");
    eval->add_option("--seg", eval_seg, "Segmenter checkpoint (instead of --pred)");
    eval->add_option("--data", eval_data, "Corpus directory (with --seg)");
    eval->add_option("--split", eval_split, "test or labeled (with --seg)");
    eval->add_option("--out", eval_c.out, "CSV report");

    auto* tsne = app.add_subcommand("export-tsne", "2-D embedding of real and generated images");
    add_common(tsne, tsne_c);
    tsne->add_option("--real", real_dir, "Real images or corpus")->required();
    tsne->add_option("--generated", gen_dir, "Generated images or annotated corpus")->required();
    tsne->add_option("--out", tsne_c.out, "Points CSV");
    add_override<std::uint64_t>(tsne, tsne_c, "--seed", "seed", "Root seed");

    auto* preview = app.add_subcommand("augment-preview", "Write all patch-shuffle variants and the Sobel map");
    add_common(preview, prev_c);
    preview->add_option("--input", preview_input, "Input image")->required();
    preview->add_option("--k", k, "Grid size")->check(CLI::Range(1, 64));
    preview->add_option("--out", prev_c.out, "Output directory");
    preview->add_flag("--force", force, "Replace a non-empty output directory");

    auto* selfcheck = app.add_subcommand("selfcheck", "Metric oracles, gradient checks, spectral bounds");
    selfcheck->add_option("--seed", selfcheck_seed, "Seed for the random instances");

    std::string command = argc > 1 ? argv[1] : "";
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error(command, "usage", e.what());
        return 2;
    } catch (const Error& e) {
        print_error(command, to_string(e.kind()), e.what());
        return 2;
    }

    try {
        if (*ingest) return cmd_ingest(ingest_c, source, force);
        if (*synth) return cmd_synth(synth_c, force);
        if (*train_seg) return cmd_train_seg(seg_c, data_seg);
        if (*train_gen) return cmd_train_gen(gen_c, data_gen);
        if (*annotate) return cmd_annotate(ann_c, seg_ckpt, gen_ckpt, data_ann, force);
        if (*eval) return cmd_eval(eval_c, pred, gt, eval_seg, eval_data, eval_split);
        if (*tsne) return cmd_export_tsne(tsne_c, real_dir, gen_dir);
        if (*preview) return cmd_augment_preview(prev_c, preview_input, k, force);
        if (*selfcheck) return cmd_selfcheck(selfcheck_seed);
    } catch (const Error& e) {
        print_error(command, to_string(e.kind()), e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error(command, "internal", e.what());
        return 1;
    }
    return 0;
}
