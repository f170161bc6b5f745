#include "mipr/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"
#include "mipr/error.hpp"
#include "mipr/evalkit.hpp"

namespace mipr {

using nn::Var;

std::string to_string(SegArch arch) {
    return arch == SegArch::UNet ? "unet-small" : "attention-unet-small";
}

SegArch parse_seg_arch(const std::string& text) {
    if (text == "unet-small" || text == "unet") return SegArch::UNet;
    if (text == "attention-unet-small" || text == "attention-unet" || text == "att-unet")
        return SegArch::AttentionUNet;
    fail(ErrorKind::Config, "unknown segmenter architecture: " + text);
}

namespace {

class ConvBlock : public nn::Module {
public:
    ConvBlock(int in, int out, Rng& rng)
        : c1_(in, out, 3, 1, 1, rng, false), b1_(out), c2_(out, out, 3, 1, 1, rng, false), b2_(out) {
        register_module("conv1", c1_);
        register_module("bn1", b1_);
        register_module("conv2", c2_);
        register_module("bn2", b2_);
    }

    Var forward(const Var& x, bool training) const {
        Var h = nn::relu(b1_.forward(c1_.forward(x), training));
        return nn::relu(b2_.forward(c2_.forward(h), training));
    }

private:
    nn::Conv2d c1_;
    nn::BatchNorm2d b1_;
    nn::Conv2d c2_;
    nn::BatchNorm2d b2_;
};

// Additive attention: the decoder signal g gates the skip features x.
class AttentionGate : public nn::Module {
public:
    AttentionGate(int channels, int inter, Rng& rng)
        : wx_(channels, inter, 1, 1, 0, rng, false), wg_(channels, inter, 1, 1, 0, rng), psi_(inter, 1, 1, 1, 0, rng) {
        register_module("wx", wx_);
        register_module("wg", wg_);
        register_module("psi", psi_);
    }

    Var forward(const Var& x, const Var& g) const {
        Var a = nn::relu(wx_.forward(x) + wg_.forward(g));
        return nn::mul_gate(x, nn::sigmoid(psi_.forward(a)));
    }

private:
    nn::Conv2d wx_;
    nn::Conv2d wg_;
    nn::Conv2d psi_;
};

class UpStage : public nn::Module {
public:
    UpStage(int in, int out, bool attention, Rng& rng) : up_(in, out, 3, 1, 1, rng), block_(2 * out, out, rng) {
        register_module("up", up_);
        if (attention) {
            gate_ = std::make_unique<AttentionGate>(out, std::max(1, out / 2), rng);
            register_module("gate", *gate_);
        }
        register_module("block", block_);
    }

    Var forward(const Var& x, const Var& skip, bool training) const {
        Var u = nn::relu(up_.forward(nn::upsample_nearest(x, 2)));
        Var s = gate_ ? gate_->forward(skip, u) : skip;
        return block_.forward(nn::concat_channels(s, u), training);
    }

private:
    nn::Conv2d up_;
    std::unique_ptr<AttentionGate> gate_;
    ConvBlock block_;
};

}  // namespace

struct SegModel::Net : nn::Module {
    std::vector<std::unique_ptr<ConvBlock>> down;
    std::unique_ptr<ConvBlock> bottleneck;
    std::vector<std::unique_ptr<UpStage>> up;
    std::unique_ptr<nn::Conv2d> head;

    Net(const SegModelConfig& c, Rng& rng) {
        auto width = [&](int level) { return c.base_width << level; };
        int in = c.in_channels;
        for (int level = 0; level < c.depth; ++level) {
            down.push_back(std::make_unique<ConvBlock>(in, width(level), rng));
            register_module("down" + std::to_string(level), *down.back());
            in = width(level);
        }
        bottleneck = std::make_unique<ConvBlock>(in, width(c.depth), rng);
        register_module("bottleneck", *bottleneck);
        for (int level = c.depth - 1; level >= 0; --level) {
            up.push_back(std::make_unique<UpStage>(width(level + 1), width(level),
                                                   c.arch == SegArch::AttentionUNet, rng));
            register_module("up" + std::to_string(level), *up.back());
        }
        head = std::make_unique<nn::Conv2d>(width(0), c.classes, 1, 1, 0, rng);
        register_module("head", *head);
    }

    Var forward(const Var& x, bool training) const {
        std::vector<Var> skips;
        Var h = x;
        for (const auto& block : down) {
            h = block->forward(h, training);
            skips.push_back(h);
            h = nn::max_pool(h, 2);
        }
        h = bottleneck->forward(h, training);
        for (std::size_t k = 0; k < up.size(); ++k) h = up[k]->forward(h, skips[skips.size() - 1 - k], training);
        return head->forward(h);
    }
};

SegModel::SegModel(const SegModelConfig& config, std::uint64_t seed) : config_(config) {
    require(config.in_channels == 1 || config.in_channels == 3, ErrorKind::Config, "segmenter input channels must be 1 or 3");
    require(config.classes >= 2 && config.base_width >= 1 && config.depth >= 1, ErrorKind::Config,
            "invalid segmenter configuration");
    const int unit = 1 << config.depth;
    require(config.input_height % unit == 0 && config.input_width % unit == 0, ErrorKind::Config,
            "segmenter input " + std::to_string(config.input_height) + "x" + std::to_string(config.input_width) +
                " is not divisible by 2^depth = " + std::to_string(unit));
    Rng rng(derive_seed(seed, "segmenter-init"));
    net_ = std::make_unique<Net>(config, rng);
}

SegModel::~SegModel() = default;

nn::Module& SegModel::network() { return *net_; }
const nn::Module& SegModel::network() const { return *net_; }

Var SegModel::forward(const Var& x, bool training) const {
    require(x.shape().c == config_.in_channels, ErrorKind::Invalid,
            "segmenter expects " + std::to_string(config_.in_channels) + " channels, got " +
                std::to_string(x.shape().c));
    const int unit = 1 << config_.depth;
    require(x.shape().h % unit == 0 && x.shape().w % unit == 0, ErrorKind::Invalid,
            "segmenter input size must be divisible by " + std::to_string(unit));
    return net_->forward(x, training);
}

nn::Tensor SegModel::predict_probabilities(const std::vector<const ImageTensor*>& images) const {
    nn::NoGradGuard guard;
    return nn::softmax_channels(forward(nn::constant(images_to_tensor(images)), false)).value();
}

Checkpoint SegModel::to_checkpoint() const {
    nlohmann::json meta = {{"arch", to_string(config_.arch)},
                           {"in_channels", config_.in_channels},
                           {"classes", config_.classes},
                           {"base_width", config_.base_width},
                           {"depth", config_.depth},
                           {"input_height", config_.input_height},
                           {"input_width", config_.input_width}};
    Checkpoint ckpt;
    ckpt.kind = "segmenter";
    ckpt.fingerprint = fingerprint;
    ckpt.meta_json = meta.dump();
    ckpt.parts["network"] = net_->state_dict();
    return ckpt;
}

std::unique_ptr<SegModel> SegModel::from_checkpoint(const Checkpoint& checkpoint) {
    require(checkpoint.kind == "segmenter", ErrorKind::Data,
            "expected a segmenter checkpoint, got " + checkpoint.kind);
    SegModelConfig c;
    try {
        const auto meta = nlohmann::json::parse(checkpoint.meta_json);
        c.arch = parse_seg_arch(meta.at("arch").get<std::string>());
        c.in_channels = meta.at("in_channels").get<int>();
        c.classes = meta.at("classes").get<int>();
        c.base_width = meta.at("base_width").get<int>();
        c.depth = meta.at("depth").get<int>();
        c.input_height = meta.at("input_height").get<int>();
        c.input_width = meta.at("input_width").get<int>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Data, std::string("segmenter checkpoint metadata: ") + e.what());
    }
    auto it = checkpoint.parts.find("network");
    require(it != checkpoint.parts.end(), ErrorKind::Data, "segmenter checkpoint has no network part");
    auto model = std::make_unique<SegModel>(c, 0);
    model->network().load_state_dict(it->second);
    model->fingerprint = checkpoint.fingerprint;
    return model;
}

nn::Tensor images_to_tensor(const std::vector<const ImageTensor*>& images) {
    require(!images.empty(), ErrorKind::Invalid, "empty image batch");
    const ImageTensor& first = *images.front();
    const int c = first.channels(), h = first.height(), w = first.width();
    nn::Tensor t(nn::Shape{static_cast<int>(images.size()), c, h, w});
    for (std::size_t n = 0; n < images.size(); ++n) {
        const ImageTensor& img = *images[n];
        require(img.channels() == c && img.height() == h && img.width() == w, ErrorKind::Invalid,
                "images in a batch must share dimensions");
        for (int ch = 0; ch < c; ++ch) {
            double* plane = t.plane(static_cast<int>(n), ch);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) plane[y * w + x] = img.at(y, x, ch);
        }
    }
    return t;
}

ImageTensor tensor_to_image(const nn::Tensor& tensor, int index) {
    const nn::Shape& s = tensor.shape();
    std::vector<float> data(static_cast<std::size_t>(s.h) * s.w * s.c);
    for (int ch = 0; ch < s.c; ++ch) {
        const double* plane = tensor.plane(index, ch);
        for (std::size_t i = 0; i < s.plane(); ++i)
            data[i * s.c + ch] = static_cast<float>(std::clamp(plane[i], 0.0, 1.0));
    }
    return ImageTensor(s.h, s.w, s.c, std::move(data));
}

namespace {

std::vector<int> masks_to_labels(const std::vector<const LabelMask*>& masks) {
    std::vector<int> labels;
    for (const LabelMask* m : masks)
        for (std::uint8_t v : m->data()) labels.push_back(v);
    return labels;
}

}  // namespace

double evaluate_dsc(const SegModel& model, const std::vector<LabeledPair>& pairs) {
    if (pairs.empty()) return 0.0;
    std::vector<const ImageTensor*> images;
    for (const auto& p : pairs) images.push_back(&p.image);
    const auto labels = predict_pseudo_labels(model, images);
    double total = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) total += dsc(labels[i].mask, pairs[i].mask);
    return total / static_cast<double>(pairs.size());
}

SegTrainResult train_segmenter(const std::vector<LabeledPair>& labeled, const SegModelConfig& model_config,
                               const SegTrainConfig& config, const std::vector<LabeledPair>& validation) {
    require(!labeled.empty(), ErrorKind::Data, "segmenter training set is empty");
    require(config.epochs >= 1 && config.learning_rate > 0 && config.batch_size >= 1, ErrorKind::Config,
            "segmenter training needs epochs >= 1, learning rate > 0 and batch size >= 1");
    const ImageTensor& first = labeled.front().image;
    for (const auto& p : labeled)
        require(p.image.height() == first.height() && p.image.width() == first.width() &&
                    p.image.channels() == first.channels(),
                ErrorKind::Data, "training pair " + p.id + " differs in size from " + labeled.front().id);

    SegModelConfig mc = model_config;
    mc.in_channels = first.channels();
    mc.input_height = first.height();
    mc.input_width = first.width();

    SegTrainResult result;
    result.model = std::make_unique<SegModel>(mc, config.seed);
    SegModel& model = *result.model;
    nn::Adam optimizer(model.network().parameters(), {.lr = config.learning_rate});
    Rng order_rng(derive_seed(config.seed, "segmenter-order"));
    const std::uint64_t augment_root = derive_seed(config.seed, "segmenter-augment");

    std::vector<std::size_t> order(labeled.size());
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = nn::cosine_annealing(config.learning_rate, epoch, config.epochs);
        optimizer.set_lr(lr);
        std::shuffle(order.begin(), order.end(), order_rng);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<LabeledPair> batch;
            for (std::size_t i = start; i < end; ++i) {
                const LabeledPair& p = labeled[order[i]];
                if (config.augment.any()) {
                    const std::uint64_t s = derive_seed(augment_root, static_cast<std::uint64_t>(epoch) * labeled.size() + i);
                    batch.push_back(standard_augment(p, config.augment, s));
                } else {
                    batch.push_back(p);
                }
            }
            std::vector<const ImageTensor*> images;
            std::vector<const LabelMask*> masks;
            for (const auto& p : batch) {
                images.push_back(&p.image);
                masks.push_back(&p.mask);
            }
            const std::vector<int> labels = masks_to_labels(masks);
            Var logits = model.forward(nn::constant(images_to_tensor(images)), true);
            Var loss = config.ce_weight * nn::cross_entropy(logits, labels) +
                       config.dice_weight * nn::soft_dice_loss(nn::softmax_channels(logits), labels);
            require(std::isfinite(loss.item()), ErrorKind::Numeric,
                    "segmenter loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                        std::to_string(batches));
            optimizer.zero_grad();
            nn::backward(loss);
            optimizer.step();
            loss_sum += loss.item();
            ++batches;
        }
        SegEpochLog entry{epoch, lr, loss_sum / batches, std::nullopt};
        if (!validation.empty()) entry.validation_dsc = evaluate_dsc(model, validation);
        result.log.push_back(entry);
    }
    return result;
}

std::vector<PseudoLabel> predict_pseudo_labels(const SegModel& model, const std::vector<const ImageTensor*>& images,
                                               int batch_size) {
    const SegModelConfig& c = model.config();
    std::vector<PseudoLabel> out(images.size());
    std::vector<ImageTensor> resized(images.size());
    std::vector<const ImageTensor*> inputs(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        const ImageTensor& img = *images[i];
        require(img.channels() == c.in_channels, ErrorKind::Invalid,
                "image has " + std::to_string(img.channels()) + " channels, segmenter expects " +
                    std::to_string(c.in_channels));
        if (img.height() == c.input_height && img.width() == c.input_width) {
            inputs[i] = &img;
        } else {
            resized[i] = resize_image(img, c.input_height, c.input_width);
            inputs[i] = &resized[i];
        }
    }
    const std::size_t step = static_cast<std::size_t>(std::max(1, batch_size));
    for (std::size_t start = 0; start < images.size(); start += step) {
        const std::size_t end = std::min(images.size(), start + step);
        std::vector<const ImageTensor*> batch(inputs.begin() + start, inputs.begin() + end);
        const nn::Tensor probs = model.predict_probabilities(batch);
        const int h = c.input_height, w = c.input_width;
        for (std::size_t k = 0; k < batch.size(); ++k) {
            const int n = static_cast<int>(k);
            LabelMask mask(h, w);
            nn::Tensor conf(nn::Shape{1, 1, h, w});
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    int best = 0;
                    double best_p = probs.at(n, 0, y, x);
                    for (int cls = 1; cls < c.classes; ++cls)
                        if (probs.at(n, cls, y, x) > best_p) {
                            best = cls;
                            best_p = probs.at(n, cls, y, x);
                        }
                    mask.at(y, x) = static_cast<std::uint8_t>(best != 0);
                    conf.at(0, 0, y, x) = best_p;
                }
            const ImageTensor& original = *images[start + k];
            PseudoLabel& label = out[start + k];
            if (original.height() != h || original.width() != w) {
                label.mask = resize_mask(mask, original.height(), original.width());
                conf = nn::resize_bilinear(conf, original.height(), original.width());
            } else {
                label.mask = std::move(mask);
            }
            label.confidence.assign(conf.values().begin(), conf.values().end());
        }
    }
    return out;
}

PseudoLabel predict_pseudo_label(const SegModel& model, const ImageTensor& image) {
    return predict_pseudo_labels(model, {&image}, 1).front();
}

namespace {

cv::Mat to_mat(const LabelMask& mask) {
    cv::Mat m(mask.height(), mask.width(), CV_8U);
    std::copy(mask.data().begin(), mask.data().end(), m.data);
    return m;
}

LabelMask from_mat(const cv::Mat& m) {
    std::vector<std::uint8_t> data(m.data, m.data + m.total());
    for (auto& v : data) v = v != 0;
    return LabelMask(m.rows, m.cols, std::move(data));
}

LabelMask largest_component(const LabelMask& mask) {
    cv::Mat labels, stats, centroids;
    const int n = cv::connectedComponentsWithStats(to_mat(mask), labels, stats, centroids, 8, CV_32S);
    if (n <= 2) return mask;
    int best = 1;
    for (int k = 2; k < n; ++k)
        if (stats.at<int>(k, cv::CC_STAT_AREA) > stats.at<int>(best, cv::CC_STAT_AREA)) best = k;
    cv::Mat keep = labels == best;
    return from_mat(keep);
}

LabelMask fill_holes(const LabelMask& mask) {
    cv::Mat background = to_mat(mask) == 0;
    cv::Mat labels;
    const int n = cv::connectedComponents(background, labels, 4, CV_32S);
    std::vector<bool> touches(n, false);
    const int h = labels.rows, w = labels.cols;
    for (int x = 0; x < w; ++x) touches[labels.at<int>(0, x)] = touches[labels.at<int>(h - 1, x)] = true;
    for (int y = 0; y < h; ++y) touches[labels.at<int>(y, 0)] = touches[labels.at<int>(y, w - 1)] = true;
    LabelMask out = mask;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int l = labels.at<int>(y, x);
            if (l != 0 && !touches[l]) out.at(y, x) = 1;
        }
    return out;
}

}  // namespace

int count_components(const LabelMask& mask) {
    cv::Mat labels;
    return cv::connectedComponents(to_mat(mask), labels, 8, CV_32S) - 1;
}

PostprocessResult postprocess_pseudo_label(const LabelMask& mask, const std::vector<double>& confidence,
                                           const PostprocessSettings& settings) {
    const std::size_t pixels = static_cast<std::size_t>(mask.height()) * mask.width();
    require(confidence.empty() || confidence.size() == pixels, ErrorKind::Invalid,
            "confidence map does not match the mask");
    PostprocessResult result{mask, mask.foreground_count() == 0};
    if (result.empty) return result;

    auto pass = [&](const LabelMask& in) {
        LabelMask m = in;
        if (!confidence.empty())
            for (std::size_t i = 0; i < pixels; ++i)
                if (confidence[i] < settings.confidence_threshold) m.data()[i] = 0;
        if (settings.keep_largest_component && m.foreground_count() > 0) m = largest_component(m);
        if (settings.fill_holes) m = fill_holes(m);
        return m;
    };
    LabelMask current = pass(mask);
    for (int guard = 0; guard < 32; ++guard) {
        LabelMask next = pass(current);
        if (next == current) break;
        current = std::move(next);
    }
    result.mask = std::move(current);
    result.empty = result.mask.foreground_count() == 0;
    return result;
}

}  // namespace mipr
