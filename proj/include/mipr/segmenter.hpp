#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mipr/augment.hpp"
#include "mipr/checkpoint.hpp"
#include "mipr/datakit.hpp"
#include "mipr/nn/layers.hpp"

namespace mipr {

enum class SegArch { UNet, AttentionUNet };

std::string to_string(SegArch arch);
SegArch parse_seg_arch(const std::string& text);

struct SegModelConfig {
    SegArch arch = SegArch::UNet;
    int in_channels = 3;
    int classes = kNumClasses;
    int base_width = 16;
    int depth = 3;  // number of 2x downsamplings
    int input_height = 64;
    int input_width = 64;
};

/// Encoder-decoder segmentation network. Inference never updates batch-norm
/// statistics, so a trained model can be shared between threads.
class SegModel {
public:
    SegModel(const SegModelConfig& config, std::uint64_t seed);
    ~SegModel();
    SegModel(const SegModel&) = delete;
    SegModel& operator=(const SegModel&) = delete;

    const SegModelConfig& config() const { return config_; }
    nn::Module& network();
    const nn::Module& network() const;

    /// Logits (N, classes, H, W) for an NCHW batch.
    nn::Var forward(const nn::Var& x, bool training) const;
    /// Softmax probabilities for a batch of model-sized images.
    nn::Tensor predict_probabilities(const std::vector<const ImageTensor*>& images) const;

    std::string fingerprint;  // config hash of the training run

    Checkpoint to_checkpoint() const;
    static std::unique_ptr<SegModel> from_checkpoint(const Checkpoint& checkpoint);

private:
    struct Net;
    SegModelConfig config_;
    std::unique_ptr<Net> net_;
};

/// Stacks images into an NCHW tensor.
nn::Tensor images_to_tensor(const std::vector<const ImageTensor*>& images);
ImageTensor tensor_to_image(const nn::Tensor& tensor, int index);

struct SegTrainConfig {
    int epochs = 100;
    double learning_rate = 1e-3;
    int batch_size = 4;
    AugmentSettings augment;
    std::uint64_t seed = 0;
    double ce_weight = 1.0;
    double dice_weight = 1.0;
};

struct SegEpochLog {
    int epoch = 0;
    double learning_rate = 0.0;
    double loss = 0.0;
    std::optional<double> validation_dsc;
};

struct SegTrainResult {
    std::unique_ptr<SegModel> model;
    std::vector<SegEpochLog> log;
};

/// Cross-entropy plus soft Dice, Adam, cosine-annealed learning rate.
SegTrainResult train_segmenter(const std::vector<LabeledPair>& labeled, const SegModelConfig& model_config,
                               const SegTrainConfig& config,
                               const std::vector<LabeledPair>& validation = {});

struct PseudoLabel {
    LabelMask mask;
    std::vector<double> confidence;  // max class probability per pixel, row-major
};

/// Argmax mask and confidence map at the image's own size (resized through
/// the model input size when they differ).
PseudoLabel predict_pseudo_label(const SegModel& model, const ImageTensor& image);
std::vector<PseudoLabel> predict_pseudo_labels(const SegModel& model, const std::vector<const ImageTensor*>& images,
                                               int batch_size = 8);

struct PostprocessSettings {
    bool keep_largest_component = true;
    bool fill_holes = true;
    double confidence_threshold = 0.5;  // foreground below this becomes background
};

struct PostprocessResult {
    LabelMask mask;
    bool empty = false;
};

/// Repeats the confidence gate, largest-component filter and hole filling
/// until the mask stops changing, so the result is a fixed point.
PostprocessResult postprocess_pseudo_label(const LabelMask& mask, const std::vector<double>& confidence,
                                           const PostprocessSettings& settings = {});

/// 8-connected foreground components.
int count_components(const LabelMask& mask);

/// Mean DSC of the model's predictions against the pairs' masks.
double evaluate_dsc(const SegModel& model, const std::vector<LabeledPair>& pairs);

}  // namespace mipr
