#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mipr/augment.hpp"
#include "mipr/checkpoint.hpp"
#include "mipr/datakit.hpp"
#include "mipr/nncore.hpp"

namespace mipr {

struct GanModelConfig {
    int image_channels = 3;
    int label_classes = kNumClasses;
    int height = 64;
    int width = 64;
    int depth = 3;  // encoder downsamplings, matched by decoder upsamplings
    int base_width = 16;
    int max_width = 64;
    int spade_hidden = 16;
    nn::Activation spade_activation = nn::Activation::Relu;
    bool skip_connections = false;
    int discriminator_scales = 2;
    int discriminator_width = 16;
    int power_iterations = 1;
};

struct GanTrainConfig {
    int epochs = 50;
    int batch_size = 4;
    double generator_lr = 1e-4;
    double discriminator_lr = 4e-4;
    double beta1 = 0.0;
    double beta2 = 0.9;
    double adversarial_weight = 1.0;
    double feature_matching_weight = 10.0;
    double reconstruction_weight = 10.0;
    PatchGrid grid_image{2};
    PatchGrid grid_label{2};
    /// Chance that a training pair is patch-shuffled before it reaches the encoder.
    double patch_shuffle_probability = 0.5;
    AugmentSettings augment;
    std::uint64_t seed = 0;
    /// Stop after this many optimizer steps (0: run all epochs).
    int max_steps = 0;
    /// Called after every optimizer step with the step count so far.
    std::function<void(const class GanBundle&, int)> on_step;
};

struct GanEpochLog {
    int epoch = 0;
    int steps = 0;
    double discriminator_loss = 0.0;
    double adversarial_loss = 0.0;
    double feature_matching_loss = 0.0;
    double reconstruction_l1 = 0.0;
};

class Encoder;
class Decoder;
class MultiScaleDiscriminator;

/// Label-to-image model: convolutional encoder, SPADE+ decoder and a
/// multi-scale spectrally normalized patch discriminator. The decoder reads
/// the encoder's feature map directly; nothing is sampled.
class GanBundle {
public:
    GanBundle(const GanModelConfig& config, std::uint64_t seed);
    ~GanBundle();
    GanBundle(const GanBundle&) = delete;
    GanBundle& operator=(const GanBundle&) = delete;

    const GanModelConfig& config() const { return config_; }

    /// Generated images (N, C, H, W) in [0, 1].
    nn::Var generate(const nn::Tensor& images, const nn::Tensor& semantic, const nn::Tensor& edges) const;
    /// Per scale: intermediate features followed by the patch logits.
    std::vector<std::vector<nn::Var>> discriminate(const nn::Var& images, const nn::Tensor& semantic,
                                                   bool update) const;

    nn::Module& encoder();
    nn::Module& decoder();
    nn::Module& discriminator();
    const nn::Module& discriminator() const;
    std::vector<nn::Var> generator_parameters() const;
    /// Effective (normalized) weights of every discriminator convolution.
    std::vector<nn::Tensor> discriminator_effective_weights() const;
    /// Converges every discriminator power iteration on the current weights.
    void settle_spectral_norm();

    int epochs_trained = 0;
    std::string fingerprint;

    Checkpoint to_checkpoint() const;
    static std::unique_ptr<GanBundle> from_checkpoint(const Checkpoint& checkpoint);

private:
    GanModelConfig config_;
    std::unique_ptr<Encoder> encoder_;
    std::unique_ptr<Decoder> decoder_;
    std::unique_ptr<MultiScaleDiscriminator> discriminator_;
};

/// One-hot (N, classes, H, W) encoding of masks.
nn::Tensor masks_to_onehot(const std::vector<const LabelMask*>& masks, int classes);
/// Sobel edge maps stacked as (N, 1, H, W).
nn::Tensor edges_tensor(const std::vector<const ImageTensor*>& images);

/// decoder(encoder(image), mask, sobel_edges(image)); deterministic.
ImageTensor generator_forward(const GanBundle& bundle, const ImageTensor& image, const LabelMask& mask);
std::vector<ImageTensor> generator_forward(const GanBundle& bundle, const std::vector<const ImageTensor*>& images,
                                           const std::vector<const LabelMask*>& masks, int batch_size = 8);

/// (x', t') with x' generated under the pseudo mask (stored 8-bit form) and
/// t' a copy of that mask.
LabeledPair pixel_rearrange(const GanBundle& bundle, const ImageTensor& image, const LabelMask& pseudo_mask,
                            int iteration, const std::string& id = "");

struct GanTrainResult {
    std::unique_ptr<GanBundle> bundle;
    std::vector<GanEpochLog> log;
};

/// Alternating hinge-loss updates. With adversarial_weight = 0 the
/// discriminator is never used and G trains as a plain autoencoder on the
/// reconstruction term.
GanTrainResult train_generator(const std::vector<LabeledPair>& labeled, const GanModelConfig& model_config,
                               const GanTrainConfig& config);

}  // namespace mipr
