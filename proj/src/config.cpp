#include "mipr/config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mipr/error.hpp"

namespace mipr {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::stringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    return parts;
}

class Writer {
public:
    json root = json::object();

    template <typename T>
    void field(const std::string& path, const T& value) {
        slot(path) = value;
    }
    template <typename T>
    void field(const std::string& path, const std::optional<T>& value) {
        slot(path) = value ? json(*value) : json(nullptr);
    }
    template <typename T>
    void mapped(const std::string& path, const std::function<T()>& get, const std::function<void(const T&)>&) {
        slot(path) = get();
    }

private:
    json& slot(const std::string& path) {
        json* node = &root;
        for (const auto& part : split_path(path)) node = &(*node)[part];
        return *node;
    }
};

class Reader {
public:
    explicit Reader(const json& root) : root_(root) {}

    template <typename T>
    void field(const std::string& path, T& value) {
        const json* node = find(path);
        if (!node) return;
        if constexpr (std::is_same_v<T, bool>) {
            require(node->is_boolean(), ErrorKind::Config, "config key '" + path + "' must be a boolean");
        } else if constexpr (std::is_integral_v<T>) {
            require(node->is_number_integer(), ErrorKind::Config, "config key '" + path + "' must be an integer");
            if constexpr (std::is_unsigned_v<T>)
                require(node->is_number_unsigned() || node->get<std::int64_t>() >= 0, ErrorKind::Config,
                        "config key '" + path + "' must be non-negative");
        } else if constexpr (std::is_floating_point_v<T>) {
            require(node->is_number(), ErrorKind::Config, "config key '" + path + "' must be a number");
        } else {
            require(node->is_string(), ErrorKind::Config, "config key '" + path + "' must be a string");
        }
        value = node->get<T>();
    }
    template <typename T>
    void field(const std::string& path, std::optional<T>& value) {
        const json* node = find(path);
        if (!node) return;
        if (node->is_null()) {
            value.reset();
            return;
        }
        T inner{};
        field(path, inner);
        value = inner;
    }
    template <typename T>
    void mapped(const std::string& path, const std::function<T()>&, const std::function<void(const T&)>& set) {
        T raw{};
        field(path, raw);
        if (find(path)) set(raw);
    }

    /// Throws on the first key that no field consumed.
    void check_unknown() const { walk(root_, ""); }

private:
    const json* find(const std::string& path) {
        const json* node = &root_;
        std::string prefix;
        for (const auto& part : split_path(path)) {
            if (!node->is_object()) return nullptr;
            auto it = node->find(part);
            if (it == node->end()) return nullptr;
            node = &*it;
        }
        known_.insert(path);
        return node;
    }

    void walk(const json& node, const std::string& prefix) const {
        for (auto it = node.begin(); it != node.end(); ++it) {
            const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
            if (known_.count(path)) continue;
            if (it->is_object() && has_known_below(path)) {
                walk(*it, path);
                continue;
            }
            fail(ErrorKind::Config, "unknown config key '" + path + "'");
        }
    }

    bool has_known_below(const std::string& path) const {
        const std::string p = path + ".";
        return std::any_of(all_paths_.begin(), all_paths_.end(),
                           [&](const std::string& k) { return k.rfind(p, 0) == 0; });
    }

    const json& root_;
    std::set<std::string> known_;

public:
    std::set<std::string> all_paths_;
};

// Records every path the visitor touches, so unknown-key checks can tell a
// known section from a typo.
class PathCollector {
public:
    std::set<std::string> paths;
    template <typename T>
    void field(const std::string& path, const T&) {
        paths.insert(path);
    }
    template <typename T>
    void mapped(const std::string& path, const std::function<T()>&, const std::function<void(const T&)>&) {
        paths.insert(path);
    }
};

void visit_augment(const std::string& prefix, AugmentSettings& a, auto& v) {
    v.field(prefix + ".rotate90", a.rotate90);
    v.field(prefix + ".hflip", a.hflip);
    v.field(prefix + ".vflip", a.vflip);
    v.field(prefix + ".crop", a.crop);
    v.field(prefix + ".crop_height", a.crop_height);
    v.field(prefix + ".crop_width", a.crop_width);
    v.field(prefix + ".crop_fraction", a.crop_fraction);
    v.field(prefix + ".color_jitter", a.color_jitter);
    v.field(prefix + ".brightness", a.brightness);
    v.field(prefix + ".contrast", a.contrast);
    v.field(prefix + ".saturation", a.saturation);
}

void visit(RunConfig& c, auto& v) {
    v.field("seed", c.seed);

    v.field("data.height", c.data.height);
    v.field("data.width", c.data.width);
    v.field("data.count", c.data.count);
    v.field("data.labeled", c.data.labeled);
    v.field("data.unlabeled", c.data.unlabeled);
    v.field("data.test", c.data.test);
    v.field("data.lesion_contrast", c.data.synthetic.lesion_contrast);
    v.field("data.texture_amplitude", c.data.synthetic.texture_amplitude);
    v.field("data.min_hairs", c.data.synthetic.min_hairs);
    v.field("data.max_hairs", c.data.synthetic.max_hairs);

    v.template mapped<std::string>(
        "segmenter.arch", [&] { return to_string(c.seg_model.arch); },
        [&](const std::string& s) { c.seg_model.arch = parse_seg_arch(s); });
    v.field("segmenter.base_width", c.seg_model.base_width);
    v.field("segmenter.depth", c.seg_model.depth);
    v.field("segmenter.epochs", c.seg_train.epochs);
    v.field("segmenter.learning_rate", c.seg_train.learning_rate);
    v.field("segmenter.batch_size", c.seg_train.batch_size);
    v.field("segmenter.ce_weight", c.seg_train.ce_weight);
    v.field("segmenter.dice_weight", c.seg_train.dice_weight);
    visit_augment("segmenter.augment", c.seg_train.augment, v);

    v.field("generator.depth", c.gan_model.depth);
    v.field("generator.base_width", c.gan_model.base_width);
    v.field("generator.max_width", c.gan_model.max_width);
    v.field("generator.spade_hidden", c.gan_model.spade_hidden);
    v.template mapped<std::string>(
        "generator.spade_activation",
        [&] { return std::string(c.gan_model.spade_activation == nn::Activation::Relu ? "relu" : "elu"); },
        [&](const std::string& s) {
            require(s == "relu" || s == "elu", ErrorKind::Config, "generator.spade_activation must be relu or elu");
            c.gan_model.spade_activation = s == "relu" ? nn::Activation::Relu : nn::Activation::Elu;
        });
    v.field("generator.skip_connections", c.gan_model.skip_connections);
    v.field("generator.discriminator_scales", c.gan_model.discriminator_scales);
    v.field("generator.discriminator_width", c.gan_model.discriminator_width);
    v.field("generator.power_iterations", c.gan_model.power_iterations);
    v.field("generator.epochs", c.gan_train.epochs);
    v.field("generator.batch_size", c.gan_train.batch_size);
    v.field("generator.generator_lr", c.gan_train.generator_lr);
    v.field("generator.discriminator_lr", c.gan_train.discriminator_lr);
    v.field("generator.beta1", c.gan_train.beta1);
    v.field("generator.beta2", c.gan_train.beta2);
    v.field("generator.adversarial_weight", c.gan_train.adversarial_weight);
    v.field("generator.feature_matching_weight", c.gan_train.feature_matching_weight);
    v.field("generator.reconstruction_weight", c.gan_train.reconstruction_weight);
    v.template mapped<int>(
        "generator.grid_image", [&] { return c.gan_train.grid_image.k(); },
        [&](const int& k) { c.gan_train.grid_image = PatchGrid(k); });
    v.template mapped<int>(
        "generator.grid_label", [&] { return c.gan_train.grid_label.k(); },
        [&](const int& k) { c.gan_train.grid_label = PatchGrid(k); });
    v.field("generator.patch_shuffle_probability", c.gan_train.patch_shuffle_probability);
    v.field("generator.max_steps", c.gan_train.max_steps);
    visit_augment("generator.augment", c.gan_train.augment, v);

    v.field("loop.max_iterations", c.loop.max_iterations);
    v.template mapped<std::string>(
        "loop.metric", [&] { return to_string(c.loop.metric); },
        [&](const std::string& s) { c.loop.metric = parse_accept_metric(s); });
    v.field("loop.tau", c.loop.tau);
    v.field("loop.tau_accept_fraction", c.tau_accept_fraction);
    v.template mapped<std::string>(
        "loop.retrain", [&] { return to_string(c.loop.retrain); },
        [&](const std::string& s) { c.loop.retrain = parse_retrain_policy(s); });
    v.field("loop.retrain_generator", c.loop.retrain_generator);
    v.field("loop.remove_accepted", c.loop.remove_accepted);
    v.field("loop.keep_largest_component", c.loop.postprocess.keep_largest_component);
    v.field("loop.fill_holes", c.loop.postprocess.fill_holes);
    v.field("loop.confidence_threshold", c.loop.postprocess.confidence_threshold);
    v.field("loop.batch_size", c.loop.batch_size);
    v.field("loop.workers", c.loop.workers);

    v.field("eval.empty_dsc", c.eval.empty_dsc);
    v.field("eval.perplexity", c.eval.tsne.perplexity);
    v.field("eval.tsne_iterations", c.eval.tsne.iterations);
}

void validate(const RunConfig& c) {
    auto check = [](bool ok, const std::string& message) { require(ok, ErrorKind::Config, message); };
    check(c.data.height >= 8 && c.data.width >= 8, "data.height and data.width must be at least 8");
    check(c.data.count >= 3, "data.count must be at least 3");
    const int given = c.data.labeled.has_value() + c.data.unlabeled.has_value() + c.data.test.has_value();
    check(given == 0 || given == 3, "data.labeled, data.unlabeled and data.test must be set together");
    if (const auto split = c.data.split()) {
        check(split->total() == static_cast<std::size_t>(c.data.count),
              "data.labeled + data.unlabeled + data.test must equal data.count");
        check(split->labeled >= 1 && split->test >= 1, "data.labeled and data.test must be positive");
    }
    check(c.data.synthetic.min_hairs >= 0 && c.data.synthetic.max_hairs >= c.data.synthetic.min_hairs,
          "data.min_hairs/max_hairs must satisfy 0 <= min <= max");
    check(c.seg_train.epochs >= 1, "segmenter.epochs must be at least 1");
    check(c.seg_train.learning_rate > 0, "segmenter.learning_rate must be positive");
    check(c.seg_train.batch_size >= 1, "segmenter.batch_size must be at least 1");
    check(c.seg_model.base_width >= 1 && c.seg_model.depth >= 1, "segmenter.base_width and depth must be positive");
    check(c.gan_train.epochs >= 1, "generator.epochs must be at least 1");
    check(c.gan_train.batch_size >= 1, "generator.batch_size must be at least 1");
    check(c.gan_train.adversarial_weight >= 0 && c.gan_train.feature_matching_weight >= 0 &&
              c.gan_train.reconstruction_weight >= 0,
          "generator loss weights must be non-negative");
    check(c.gan_train.adversarial_weight > 0 || c.gan_train.reconstruction_weight > 0,
          "generator.adversarial_weight or generator.reconstruction_weight must be positive");
    check(c.gan_train.patch_shuffle_probability >= 0 && c.gan_train.patch_shuffle_probability <= 1,
          "generator.patch_shuffle_probability must lie in [0, 1]");
    check(c.loop.max_iterations >= 1, "loop.max_iterations must be at least 1");
    check(c.loop.tau >= 0, "loop.tau must be non-negative");
    check(!c.tau_accept_fraction || (*c.tau_accept_fraction >= 0 && *c.tau_accept_fraction <= 1),
          "loop.tau_accept_fraction must lie in [0, 1]");
    check(c.loop.batch_size >= 1 && c.loop.workers >= 1, "loop.batch_size and loop.workers must be positive");
    check(c.eval.tsne.iterations >= 1 && c.eval.tsne.perplexity > 0, "eval t-SNE settings must be positive");
}

json parse_text(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, "cannot parse " + what + ": " + e.what());
    }
}

void read_into(RunConfig& c, const json& doc) {
    require(doc.is_object(), ErrorKind::Config, "config must be a JSON object");
    PathCollector collector;
    visit(c, collector);
    Reader reader(doc);
    reader.all_paths_ = collector.paths;
    visit(c, reader);
    reader.check_unknown();
    validate(c);
}

}  // namespace

std::optional<SplitSizes> DataSection::split() const {
    if (!labeled || !unlabeled || !test) return std::nullopt;
    return SplitSizes{*labeled, *unlabeled, *test};
}

std::string RunConfig::to_json() const {
    Writer w;
    visit(const_cast<RunConfig&>(*this), w);
    return w.root.dump();
}

RunConfig RunConfig::from_json(const std::string& text) {
    RunConfig c;
    read_into(c, parse_text(text, "config"));
    return c;
}

RunConfig RunConfig::load(const fs::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::Io, "config file not found: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig c;
    read_into(c, parse_text(ss.str(), path.string()));
    return c;
}

void RunConfig::apply_overrides(const std::vector<std::string>& assignments) {
    json doc = json::object();
    for (const auto& a : assignments) {
        const auto eq = a.find('=');
        require(eq != std::string::npos && eq > 0, ErrorKind::Config,
                "override '" + a + "' must look like section.key=value");
        const std::string path = a.substr(0, eq);
        const std::string raw = a.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::exception&) {
            value = raw;
        }
        json* node = &doc;
        for (const auto& part : split_path(path)) {
            require(node->is_null() || node->is_object(), ErrorKind::Config, "unknown config key '" + path + "'");
            node = &(*node)[part];
        }
        *node = value;
    }
    if (!doc.empty()) read_into(*this, doc);
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    require(EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) == 1, ErrorKind::Numeric,
            "SHA-256 failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

std::string RunConfig::fingerprint() const { return sha256_hex(to_json()); }

std::uint64_t RunConfig::component_seed(const std::string& component) const { return derive_seed(seed, component); }

SegTrainConfig RunConfig::segmenter_training() const {
    SegTrainConfig t = seg_train;
    t.seed = component_seed("segmenter");
    return t;
}

GanTrainConfig RunConfig::generator_training() const {
    GanTrainConfig t = gan_train;
    t.seed = component_seed("generator");
    return t;
}

LoopConfig RunConfig::loop_config() const {
    LoopConfig l = loop;
    l.seed = component_seed("loop");
    l.seg_model = seg_model;
    l.seg_train = segmenter_training();
    l.gan_model = gan_model;
    l.gan_train = generator_training();
    return l;
}

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return sha256_hex(ss.str());
}

std::string sha256_tree(const fs::path& directory) {
    require(fs::is_directory(directory), ErrorKind::Io, "not a directory: " + directory.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(directory))
        if (entry.is_regular_file()) files.push_back(fs::relative(entry.path(), directory));
    std::sort(files.begin(), files.end());
    std::string combined;
    for (const auto& f : files) combined += f.generic_string() + '\0' + sha256_file(directory / f) + '\n';
    return sha256_hex(combined);
}

void write_run_manifest(const fs::path& path, const RunManifest& m) {
    json inputs = json::array();
    for (const auto& [p, sum] : m.inputs) inputs.push_back({{"path", p}, {"sha256", sum}});
    json seeds = json::object();
    for (const auto& [name, value] : m.seeds) seeds[name] = value;
    const json doc{{"tool", "mipr"},
                   {"version", kMiprVersion},
                   {"command", m.command},
                   {"config", json::parse(m.config_json)},
                   {"config_fingerprint", m.fingerprint},
                   {"inputs", inputs},
                   {"seeds", seeds},
                   {"wall_seconds", m.wall_seconds},
                   {"details", json::parse(m.extra_json)}};
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

}  // namespace mipr
