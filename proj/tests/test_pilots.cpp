// Slow training pilots at desk scale (minutes, not seconds).

#include <gtest/gtest.h>

#include <filesystem>

#include "mipr/augment.hpp"
#include "mipr/config.hpp"
#include "mipr/evalkit.hpp"
#include "mipr/generator.hpp"
#include "mipr/segmenter.hpp"

using namespace mipr;

namespace {

const RunConfig& desk() {
    static const RunConfig cfg = RunConfig::load(std::filesystem::path(MIPR_CONFIG_DIR) / "desk.json");
    return cfg;
}

const DatasetSplit& desk_split() {
    static const DatasetSplit split = [] {
        SyntheticOptions so = desk().data.synthetic;
        so.sizes = desk().data.split();
        return make_synthetic_dataset(desk().data.count, desk().data.height, desk().data.width,
                                      desk().component_seed("synthetic"), so);
    }();
    return split;
}

GanModelConfig narrow_gan() {
    GanModelConfig c = desk().gan_model;
    c.base_width = 8;
    c.max_width = 32;
    c.spade_hidden = 8;
    c.discriminator_width = 8;
    return c;
}

double mean_ssim(const GanBundle& bundle, const std::vector<LabeledPair>& pairs) {
    double s = 0.0;
    for (const auto& p : pairs) s += ssim(generator_forward(bundle, p.image, p.mask), p.image);
    return s / static_cast<double>(pairs.size());
}

}  // namespace

TEST(SegmenterPilot, FitsTwentyPairsAndIsRoughlyFlipEquivariant) {
    const auto& split = desk_split();
    ASSERT_EQ(split.labeled.size(), 20u);
    const SegTrainResult r = train_segmenter(split.labeled, desk().seg_model, desk().segmenter_training());
    ASSERT_EQ(r.log.size(), 30u);
    EXPECT_GE(evaluate_dsc(*r.model, split.labeled), 0.9);

    ASSERT_TRUE(desk().seg_train.augment.hflip);
    std::vector<LabeledPair> flipped;
    for (const auto& p : split.test)
        flipped.push_back({p.id, flip_horizontal(p.image), flip_horizontal(p.mask), p.provenance, p.original_filename});
    const double plain = evaluate_dsc(*r.model, split.test);
    const double mirrored = evaluate_dsc(*r.model, flipped);
    EXPECT_NEAR(mirrored, plain, 0.1);
}

TEST(GeneratorPilot, ReconstructionImprovesAndAblationBehaves) {
    const auto& split = desk_split();
    GanTrainConfig t = desk().generator_training();
    ASSERT_EQ(t.epochs, 50);
    const GanBundle init(narrow_gan(), t.seed);
    const GanTrainResult on = train_generator(split.labeled, narrow_gan(), t);
    ASSERT_EQ(on.log.size(), 50u);

    // Three-epoch moving average of L1 over the first ten epochs.
    std::vector<double> avg;
    for (int e = 2; e < 10; ++e)
        avg.push_back((on.log[e - 2].reconstruction_l1 + on.log[e - 1].reconstruction_l1 + on.log[e].reconstruction_l1) /
                      3.0);
    for (std::size_t i = 1; i < avg.size(); ++i) EXPECT_LT(avg[i], avg[i - 1]) << "window ending at epoch " << i + 2;

    EXPECT_GE(mean_ssim(*on.bundle, split.test), mean_ssim(init, split.test));

    t.adversarial_weight = 0.0;
    const GanTrainResult off = train_generator(split.labeled, narrow_gan(), t);
    EXPECT_LT(off.log.back().reconstruction_l1, on.log[4].reconstruction_l1);
}

TEST(GeneratorPilot, FirstEpochLossesRepeat) {
    GanTrainConfig t = desk().generator_training();
    t.epochs = 1;
    const GanTrainResult a = train_generator(desk_split().labeled, narrow_gan(), t);
    const GanTrainResult b = train_generator(desk_split().labeled, narrow_gan(), t);
    EXPECT_NEAR(a.log[0].reconstruction_l1, b.log[0].reconstruction_l1, 1e-6);
    EXPECT_NEAR(a.log[0].discriminator_loss, b.log[0].discriminator_loss, 1e-6);
    EXPECT_NEAR(a.log[0].adversarial_loss, b.log[0].adversarial_loss, 1e-6);
}
