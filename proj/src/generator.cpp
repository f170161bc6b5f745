#include "mipr/generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "mipr/error.hpp"
#include "mipr/segmenter.hpp"

namespace mipr {

using nn::Tensor;
using nn::Var;

namespace {

constexpr double kSlope = 0.2;

int level_width(const GanModelConfig& c, int level) {
    return std::min(c.max_width, c.base_width << level);
}

}  // namespace

class Encoder : public nn::Module {
public:
    Encoder(const GanModelConfig& c, Rng& rng) {
        convs_.push_back(std::make_unique<nn::Conv2d>(c.image_channels, level_width(c, 0), 3, 1, 1, rng));
        for (int level = 1; level <= c.depth; ++level)
            convs_.push_back(
                std::make_unique<nn::Conv2d>(level_width(c, level - 1), level_width(c, level), 3, 2, 1, rng));
        for (std::size_t i = 0; i < convs_.size(); ++i) register_module("conv" + std::to_string(i), *convs_[i]);
    }

    /// Feature map at every level, full resolution first.
    std::vector<Var> forward(const Var& x) const {
        std::vector<Var> features;
        Var h = x;
        for (const auto& conv : convs_) {
            h = nn::leaky_relu(conv->forward(h), kSlope);
            features.push_back(h);
        }
        return features;
    }

private:
    std::vector<std::unique_ptr<nn::Conv2d>> convs_;
};

namespace {

// Residual block whose normalizations are SPADE+ layers.
class SpadeResBlock : public nn::Module {
public:
    SpadeResBlock(int in, int out, const GanModelConfig& c, Rng& rng)
        : middle_(std::min(in, out)),
          norm0_(options(in, c), rng),
          conv0_(in, middle_, 3, 1, 1, rng),
          norm1_(options(middle_, c), rng),
          conv1_(middle_, out, 3, 1, 1, rng) {
        register_module("norm0", norm0_);
        register_module("conv0", conv0_);
        register_module("norm1", norm1_);
        register_module("conv1", conv1_);
        if (in != out) {
            norm_s_ = std::make_unique<nn::SpadePlus>(options(in, c), rng);
            conv_s_ = std::make_unique<nn::Conv2d>(in, out, 1, 1, 0, rng, false);
            register_module("norm_s", *norm_s_);
            register_module("conv_s", *conv_s_);
        }
    }

    Var forward(const Var& x, const Tensor& semantic, const Tensor& edges) const {
        Var dx = conv0_.forward(nn::leaky_relu(norm0_.forward(x, semantic, edges), kSlope));
        dx = conv1_.forward(nn::leaky_relu(norm1_.forward(dx, semantic, edges), kSlope));
        Var shortcut = norm_s_ ? conv_s_->forward(norm_s_->forward(x, semantic, edges)) : x;
        return shortcut + dx;
    }

private:
    static nn::SpadePlusOptions options(int channels, const GanModelConfig& c) {
        nn::SpadePlusOptions o;
        o.channels = channels;
        o.label_classes = c.label_classes;
        o.hidden = c.spade_hidden;
        o.activation = c.spade_activation;
        return o;
    }

    int middle_;
    nn::SpadePlus norm0_;
    nn::Conv2d conv0_;
    nn::SpadePlus norm1_;
    nn::Conv2d conv1_;
    std::unique_ptr<nn::SpadePlus> norm_s_;
    std::unique_ptr<nn::Conv2d> conv_s_;
};

}  // namespace

class Decoder : public nn::Module {
public:
    Decoder(const GanModelConfig& c, Rng& rng) : skip_(c.skip_connections) {
        for (int level = c.depth; level >= 1; --level) {
            int in = level_width(c, level);
            if (skip_ && level < c.depth) in += level_width(c, level);
            blocks_.push_back(std::make_unique<SpadeResBlock>(in, level_width(c, level - 1), c, rng));
            register_module("block" + std::to_string(level), *blocks_.back());
        }
        const int w0 = level_width(c, 0);
        final_ = std::make_unique<SpadeResBlock>(skip_ ? 2 * w0 : w0, w0, c, rng);
        register_module("block0", *final_);
        out_ = std::make_unique<nn::Conv2d>(w0, c.image_channels, 3, 1, 1, rng);
        register_module("to_image", *out_);
    }

    Var forward(const std::vector<Var>& features, const Tensor& semantic, const Tensor& edges) const {
        const std::size_t depth = features.size() - 1;
        Var x = features.back();
        for (std::size_t k = 0; k < blocks_.size(); ++k) {
            x = nn::upsample_nearest(blocks_[k]->forward(x, semantic, edges), 2);
            if (skip_) x = nn::concat_channels(x, features[depth - 1 - k]);
        }
        x = final_->forward(x, semantic, edges);
        return nn::sigmoid(out_->forward(nn::leaky_relu(x, kSlope)));
    }

private:
    bool skip_;
    std::vector<std::unique_ptr<SpadeResBlock>> blocks_;
    std::unique_ptr<SpadeResBlock> final_;
    std::unique_ptr<nn::Conv2d> out_;
};

namespace {

class PatchDiscriminator : public nn::Module {
public:
    PatchDiscriminator(int in, int width, int power_iterations, Rng& rng) {
        const int widths[] = {width, 2 * width, 4 * width};
        const int strides[] = {2, 2, 1};
        int c = in;
        for (int i = 0; i < 3; ++i) {
            convs_.push_back(std::make_unique<nn::SpectralConv2d>(c, widths[i], 3, strides[i], 1, rng, power_iterations));
            c = widths[i];
        }
        convs_.push_back(std::make_unique<nn::SpectralConv2d>(c, 1, 3, 1, 1, rng, power_iterations));
        for (std::size_t i = 0; i < convs_.size(); ++i) register_module("conv" + std::to_string(i), *convs_[i]);
    }

    std::vector<Var> forward(const Var& x, bool update) const {
        std::vector<Var> outputs;
        Var h = x;
        for (std::size_t i = 0; i + 1 < convs_.size(); ++i) {
            h = nn::leaky_relu(convs_[i]->forward(h, update), kSlope);
            outputs.push_back(h);
        }
        outputs.push_back(convs_.back()->forward(h, update));
        return outputs;
    }

    void effective_weights(std::vector<Tensor>& out) const {
        for (const auto& conv : convs_) out.push_back(conv->effective_weight());
    }
    void settle() {
        for (auto& conv : convs_) conv->settle();
    }

private:
    std::vector<std::unique_ptr<nn::SpectralConv2d>> convs_;
};

}  // namespace

class MultiScaleDiscriminator : public nn::Module {
public:
    MultiScaleDiscriminator(const GanModelConfig& c, Rng& rng) {
        for (int s = 0; s < c.discriminator_scales; ++s) {
            scales_.push_back(std::make_unique<PatchDiscriminator>(c.image_channels + c.label_classes,
                                                                   c.discriminator_width, c.power_iterations, rng));
            register_module("scale" + std::to_string(s), *scales_.back());
        }
    }

    std::vector<std::vector<Var>> forward(const Var& images, const Tensor& semantic, bool update) const {
        std::vector<std::vector<Var>> out;
        Var input = nn::concat_channels(images, nn::constant(semantic));
        for (std::size_t s = 0; s < scales_.size(); ++s) {
            if (s > 0) input = nn::avg_pool(input, 2);
            out.push_back(scales_[s]->forward(input, update));
        }
        return out;
    }

    std::vector<Tensor> effective_weights() const {
        std::vector<Tensor> out;
        for (const auto& d : scales_) d->effective_weights(out);
        return out;
    }
    void settle() {
        for (auto& d : scales_) d->settle();
    }

private:
    std::vector<std::unique_ptr<PatchDiscriminator>> scales_;
};

GanBundle::GanBundle(const GanModelConfig& config, std::uint64_t seed) : config_(config) {
    require(config.image_channels == 1 || config.image_channels == 3, ErrorKind::Config,
            "generator image channels must be 1 or 3");
    require(config.depth >= 1 && config.base_width >= 1 && config.spade_hidden >= 1 &&
                config.discriminator_scales >= 1 && config.discriminator_width >= 1 && config.power_iterations >= 1,
            ErrorKind::Config, "invalid generator configuration");
    const int unit = 1 << config.depth;
    require(config.height % unit == 0 && config.width % unit == 0, ErrorKind::Config,
            "generator size " + std::to_string(config.height) + "x" + std::to_string(config.width) +
                " is not divisible by 2^depth = " + std::to_string(unit));
    require((config.height >> (config.discriminator_scales - 1)) >= 8 &&
                (config.width >> (config.discriminator_scales - 1)) >= 8,
            ErrorKind::Config, "too many discriminator scales for the image size");
    Rng enc_rng(derive_seed(seed, "encoder-init"));
    Rng dec_rng(derive_seed(seed, "decoder-init"));
    Rng dis_rng(derive_seed(seed, "discriminator-init"));
    encoder_ = std::make_unique<Encoder>(config, enc_rng);
    decoder_ = std::make_unique<Decoder>(config, dec_rng);
    discriminator_ = std::make_unique<MultiScaleDiscriminator>(config, dis_rng);
}

GanBundle::~GanBundle() = default;

nn::Module& GanBundle::encoder() { return *encoder_; }
nn::Module& GanBundle::decoder() { return *decoder_; }
nn::Module& GanBundle::discriminator() { return *discriminator_; }
const nn::Module& GanBundle::discriminator() const { return *discriminator_; }

std::vector<Var> GanBundle::generator_parameters() const {
    std::vector<Var> params = encoder_->parameters();
    for (const Var& p : decoder_->parameters()) params.push_back(p);
    return params;
}

std::vector<Tensor> GanBundle::discriminator_effective_weights() const {
    return discriminator_->effective_weights();
}

void GanBundle::settle_spectral_norm() { discriminator_->settle(); }

Var GanBundle::generate(const Tensor& images, const Tensor& semantic, const Tensor& edges) const {
    const nn::Shape& s = images.shape();
    require(s.c == config_.image_channels && s.h == config_.height && s.w == config_.width, ErrorKind::Invalid,
            "generator expects " + std::to_string(config_.image_channels) + "x" + std::to_string(config_.height) +
                "x" + std::to_string(config_.width) + " input, got " + s.str());
    require(semantic.shape() == nn::Shape{s.n, config_.label_classes, s.h, s.w}, ErrorKind::Invalid,
            "mask size " + semantic.shape().str() + " does not match the image");
    require(edges.shape() == nn::Shape{s.n, 1, s.h, s.w}, ErrorKind::Invalid, "edge map does not match the image");
    return decoder_->forward(encoder_->forward(nn::constant(images)), semantic, edges);
}

std::vector<std::vector<Var>> GanBundle::discriminate(const Var& images, const Tensor& semantic, bool update) const {
    return discriminator_->forward(images, semantic, update);
}

Checkpoint GanBundle::to_checkpoint() const {
    const auto& c = config_;
    nlohmann::json meta = {{"image_channels", c.image_channels},
                           {"label_classes", c.label_classes},
                           {"height", c.height},
                           {"width", c.width},
                           {"depth", c.depth},
                           {"base_width", c.base_width},
                           {"max_width", c.max_width},
                           {"spade_hidden", c.spade_hidden},
                           {"spade_activation", c.spade_activation == nn::Activation::Relu ? "relu" : "elu"},
                           {"skip_connections", c.skip_connections},
                           {"discriminator_scales", c.discriminator_scales},
                           {"discriminator_width", c.discriminator_width},
                           {"power_iterations", c.power_iterations},
                           {"epochs_trained", epochs_trained}};
    Checkpoint ckpt;
    ckpt.kind = "generator";
    ckpt.fingerprint = fingerprint;
    ckpt.meta_json = meta.dump();
    ckpt.parts["encoder"] = encoder_->state_dict();
    ckpt.parts["decoder"] = decoder_->state_dict();
    ckpt.parts["discriminator"] = discriminator_->state_dict();
    return ckpt;
}

std::unique_ptr<GanBundle> GanBundle::from_checkpoint(const Checkpoint& checkpoint) {
    require(checkpoint.kind == "generator", ErrorKind::Data,
            "expected a generator checkpoint, got " + checkpoint.kind);
    GanModelConfig c;
    int epochs = 0;
    try {
        const auto m = nlohmann::json::parse(checkpoint.meta_json);
        c.image_channels = m.at("image_channels").get<int>();
        c.label_classes = m.at("label_classes").get<int>();
        c.height = m.at("height").get<int>();
        c.width = m.at("width").get<int>();
        c.depth = m.at("depth").get<int>();
        c.base_width = m.at("base_width").get<int>();
        c.max_width = m.at("max_width").get<int>();
        c.spade_hidden = m.at("spade_hidden").get<int>();
        c.spade_activation = m.at("spade_activation").get<std::string>() == "elu" ? nn::Activation::Elu
                                                                                    : nn::Activation::Relu;
        c.skip_connections = m.at("skip_connections").get<bool>();
        c.discriminator_scales = m.at("discriminator_scales").get<int>();
        c.discriminator_width = m.at("discriminator_width").get<int>();
        c.power_iterations = m.at("power_iterations").get<int>();
        epochs = m.at("epochs_trained").get<int>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Data, std::string("generator checkpoint metadata: ") + e.what());
    }
    auto bundle = std::make_unique<GanBundle>(c, 0);
    for (const char* part : {"encoder", "decoder", "discriminator"}) {
        auto it = checkpoint.parts.find(part);
        require(it != checkpoint.parts.end(), ErrorKind::Data, std::string("generator checkpoint has no ") + part);
    }
    bundle->encoder().load_state_dict(checkpoint.parts.at("encoder"));
    bundle->decoder().load_state_dict(checkpoint.parts.at("decoder"));
    bundle->discriminator().load_state_dict(checkpoint.parts.at("discriminator"));
    bundle->epochs_trained = epochs;
    bundle->fingerprint = checkpoint.fingerprint;
    return bundle;
}

Tensor masks_to_onehot(const std::vector<const LabelMask*>& masks, int classes) {
    require(!masks.empty(), ErrorKind::Invalid, "empty mask batch");
    const int h = masks.front()->height(), w = masks.front()->width();
    Tensor t(nn::Shape{static_cast<int>(masks.size()), classes, h, w});
    for (std::size_t n = 0; n < masks.size(); ++n) {
        require(masks[n]->height() == h && masks[n]->width() == w, ErrorKind::Invalid,
                "masks in a batch must share dimensions");
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int cls = masks[n]->at(y, x);
                require(cls < classes, ErrorKind::Invalid, "mask class out of range");
                t.at(static_cast<int>(n), cls, y, x) = 1.0;
            }
    }
    return t;
}

Tensor edges_tensor(const std::vector<const ImageTensor*>& images) {
    require(!images.empty(), ErrorKind::Invalid, "empty image batch");
    const int h = images.front()->height(), w = images.front()->width();
    Tensor t(nn::Shape{static_cast<int>(images.size()), 1, h, w});
    for (std::size_t n = 0; n < images.size(); ++n) {
        const EdgeMap e = sobel_edges(*images[n]);
        require(e.height == h && e.width == w, ErrorKind::Invalid, "images in a batch must share dimensions");
        std::copy(e.data.begin(), e.data.end(), t.plane(static_cast<int>(n), 0));
    }
    return t;
}

std::vector<ImageTensor> generator_forward(const GanBundle& bundle, const std::vector<const ImageTensor*>& images,
                                           const std::vector<const LabelMask*>& masks, int batch_size) {
    require(images.size() == masks.size(), ErrorKind::Invalid, "images and masks differ in count");
    for (std::size_t i = 0; i < images.size(); ++i)
        require(images[i]->height() == masks[i]->height() && images[i]->width() == masks[i]->width(),
                ErrorKind::Invalid,
                "mask " + std::to_string(masks[i]->height()) + "x" + std::to_string(masks[i]->width()) +
                    " does not match image " + std::to_string(images[i]->height()) + "x" +
                    std::to_string(images[i]->width()));
    std::vector<ImageTensor> out;
    nn::NoGradGuard guard;
    const std::size_t step = static_cast<std::size_t>(std::max(1, batch_size));
    for (std::size_t start = 0; start < images.size(); start += step) {
        const std::size_t end = std::min(images.size(), start + step);
        std::vector<const ImageTensor*> bi(images.begin() + start, images.begin() + end);
        std::vector<const LabelMask*> bm(masks.begin() + start, masks.begin() + end);
        const Tensor generated = bundle
                                     .generate(images_to_tensor(bi), masks_to_onehot(bm, bundle.config().label_classes),
                                               edges_tensor(bi))
                                     .value();
        for (std::size_t k = 0; k < bi.size(); ++k) out.push_back(tensor_to_image(generated, static_cast<int>(k)));
    }
    return out;
}

ImageTensor generator_forward(const GanBundle& bundle, const ImageTensor& image, const LabelMask& mask) {
    return generator_forward(bundle, {&image}, {&mask}, 1).front();
}

LabeledPair pixel_rearrange(const GanBundle& bundle, const ImageTensor& image, const LabelMask& pseudo_mask,
                            int iteration, const std::string& id) {
    LabeledPair pair;
    pair.id = id;
    pair.image = generator_forward(bundle, image, pseudo_mask).quantized();
    pair.mask = pseudo_mask;
    pair.provenance = Provenance::mipr(iteration);
    return pair;
}

namespace {

Var hinge_real(const Var& logits) { return nn::mean(nn::relu(nn::add_scalar(nn::mul_scalar(logits, -1.0), 1.0))); }
Var hinge_fake(const Var& logits) { return nn::mean(nn::relu(nn::add_scalar(logits, 1.0))); }

void check_finite(double value, const char* what, int epoch, int step) {
    require(std::isfinite(value), ErrorKind::Numeric,
            std::string(what) + " became non-finite at epoch " + std::to_string(epoch) + ", step " +
                std::to_string(step));
}

}  // namespace

GanTrainResult train_generator(const std::vector<LabeledPair>& labeled, const GanModelConfig& model_config,
                               const GanTrainConfig& config) {
    require(!labeled.empty(), ErrorKind::Data, "generator training set is empty");
    require(config.epochs >= 1 && config.batch_size >= 1, ErrorKind::Config,
            "generator training needs epochs >= 1 and batch size >= 1");
    require(config.adversarial_weight >= 0 && config.feature_matching_weight >= 0 &&
                config.reconstruction_weight >= 0,
            ErrorKind::Config, "generator loss weights must be non-negative");
    require(config.adversarial_weight > 0 || config.reconstruction_weight > 0, ErrorKind::Config,
            "generator needs a positive adversarial or reconstruction weight");
    const ImageTensor& first = labeled.front().image;
    for (const auto& p : labeled)
        require(p.image.height() == first.height() && p.image.width() == first.width() &&
                    p.image.channels() == first.channels(),
                ErrorKind::Data, "training pair " + p.id + " differs in size from " + labeled.front().id);
    config.grid_image.check(first.height(), first.width());
    config.grid_label.check(first.height(), first.width());

    GanModelConfig mc = model_config;
    mc.image_channels = first.channels();
    mc.height = first.height();
    mc.width = first.width();

    GanTrainResult result;
    result.bundle = std::make_unique<GanBundle>(mc, config.seed);
    GanBundle& bundle = *result.bundle;
    const bool adversarial = config.adversarial_weight > 0;
    nn::Adam g_opt(bundle.generator_parameters(),
                   {.lr = config.generator_lr, .beta1 = config.beta1, .beta2 = config.beta2});
    nn::Adam d_opt(bundle.discriminator().parameters(),
                   {.lr = config.discriminator_lr, .beta1 = config.beta1, .beta2 = config.beta2});

    Rng order_rng(derive_seed(config.seed, "generator-order"));
    const std::uint64_t aug_root = derive_seed(config.seed, "generator-augment");
    std::vector<std::size_t> order(labeled.size());
    std::iota(order.begin(), order.end(), 0);
    int step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        if (config.max_steps > 0 && step >= config.max_steps) break;
        std::shuffle(order.begin(), order.end(), order_rng);
        GanEpochLog entry;
        entry.epoch = epoch;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            if (config.max_steps > 0 && step >= config.max_steps) break;
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<ImageTensor> images;
            std::vector<LabelMask> masks;
            for (std::size_t i = start; i < end; ++i) {
                LabeledPair p = labeled[order[i]];
                Rng rng(derive_seed(aug_root, static_cast<std::uint64_t>(epoch) * labeled.size() + i));
                if (config.augment.any()) p = standard_augment(p, config.augment, rng());
                std::uniform_real_distribution<double> coin(0.0, 1.0);
                const std::uint64_t shuffle_seed = rng();
                if (coin(rng) < config.patch_shuffle_probability) {
                    auto [img, mask] =
                        sample_patch_shuffle(p.image, p.mask, config.grid_image, config.grid_label, shuffle_seed);
                    p.image = std::move(img);
                    p.mask = std::move(mask);
                }
                images.push_back(std::move(p.image));
                masks.push_back(std::move(p.mask));
            }
            std::vector<const ImageTensor*> ip;
            std::vector<const LabelMask*> mp;
            for (std::size_t k = 0; k < images.size(); ++k) {
                ip.push_back(&images[k]);
                mp.push_back(&masks[k]);
            }
            const Tensor real_t = images_to_tensor(ip);
            const Tensor semantic = masks_to_onehot(mp, mc.label_classes);
            const Var real = nn::constant(real_t);
            Var fake = bundle.generate(real_t, semantic, edges_tensor(ip));

            // Generator update against the current discriminator.
            Var l1 = nn::l1_loss(fake, real);
            Var g_loss = config.reconstruction_weight * l1;
            double adv_value = 0.0, fm_value = 0.0;
            if (adversarial) {
                auto fake_out = bundle.discriminate(fake, semantic, true);
                std::vector<std::vector<Var>> real_out;
                {
                    nn::NoGradGuard guard;
                    real_out = bundle.discriminate(real, semantic, false);
                }
                Var adv = nn::constant(Tensor::scalar(0.0));
                Var fm = nn::constant(Tensor::scalar(0.0));
                for (std::size_t s = 0; s < fake_out.size(); ++s) {
                    adv = adv - nn::mean(fake_out[s].back());
                    for (std::size_t k = 0; k + 1 < fake_out[s].size(); ++k)
                        fm = fm + nn::mul_scalar(nn::l1_loss(fake_out[s][k], nn::detach(real_out[s][k])),
                                                 1.0 / fake_out.size());
                }
                adv_value = adv.item();
                fm_value = fm.item();
                g_loss = g_loss + config.adversarial_weight * adv + config.feature_matching_weight * fm;
            }
            check_finite(g_loss.item(), "generator loss", epoch, step);
            g_opt.zero_grad();
            nn::backward(g_loss);
            g_opt.step();

            double d_value = 0.0;
            if (adversarial) {
                const Var fake_detached = nn::detach(fake);
                auto real_out = bundle.discriminate(real, semantic, true);
                auto fake_out = bundle.discriminate(fake_detached, semantic, true);
                Var d_loss = nn::constant(Tensor::scalar(0.0));
                for (std::size_t s = 0; s < real_out.size(); ++s)
                    d_loss = d_loss + hinge_real(real_out[s].back()) + hinge_fake(fake_out[s].back());
                d_value = d_loss.item();
                check_finite(d_value, "discriminator loss", epoch, step);
                d_opt.zero_grad();
                nn::backward(d_loss);
                d_opt.step();
                // One power iteration per step trails the optimizer; converge
                // u, v so the spectral bound holds after every step.
                bundle.settle_spectral_norm();
            }

            ++step;
            ++entry.steps;
            entry.discriminator_loss += d_value;
            entry.adversarial_loss += adv_value;
            entry.feature_matching_loss += fm_value;
            entry.reconstruction_l1 += l1.item();
            if (config.on_step) config.on_step(bundle, step);
        }
        if (entry.steps == 0) break;
        entry.discriminator_loss /= entry.steps;
        entry.adversarial_loss /= entry.steps;
        entry.feature_matching_loss /= entry.steps;
        entry.reconstruction_l1 /= entry.steps;
        result.log.push_back(entry);
        bundle.epochs_trained = epoch + 1;
    }
    // The last optimizer step moved D past its power vectors.
    bundle.settle_spectral_norm();
    return result;
}

}  // namespace mipr
