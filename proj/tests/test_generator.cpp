#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <filesystem>

#include "mipr/checkpoint.hpp"
#include "mipr/error.hpp"
#include "mipr/evalkit.hpp"
#include "mipr/generator.hpp"
#include "mipr/segmenter.hpp"
#include "test_util.hpp"

using namespace mipr;
using mipr::testing::disc_mask;
using mipr::testing::random_image;
using mipr::testing::random_mask;
namespace fs = std::filesystem;

namespace {

GanModelConfig tiny_gan(int size = 16) {
    GanModelConfig c;
    c.height = c.width = size;
    c.depth = 2;
    c.base_width = 4;
    c.max_width = 8;
    c.spade_hidden = 4;
    c.discriminator_width = 4;
    return c;
}

double top_singular_value(const nn::Tensor& w) {
    const int rows = w.shape().n;
    const int cols = static_cast<int>(w.size() / static_cast<std::size_t>(rows));
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = w[static_cast<std::size_t>(r) * cols + c];
    return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

std::vector<LabeledPair> pairs(int n, int size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<LabeledPair> out;
    for (int i = 0; i < n; ++i) {
        const LabelMask m = disc_mask(size, size, size / 2.0 + i % 3, size / 2.0 - i % 2, size / 4.0);
        ImageTensor im = random_image(size, size, 3, rng);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                for (int c = 0; c < 3; ++c) im.at(y, x, c) = (m.at(y, x) ? 0.3f : 0.7f) + 0.1f * im.at(y, x, c);
        out.push_back({"g" + std::to_string(i), im.quantized(), m, Provenance::manual(), ""});
    }
    return out;
}

}  // namespace

TEST(GanBundle, OutputShapeAndRange) {
    std::mt19937_64 rng(1);
    for (bool skips : {false, true}) {
        GanModelConfig c = tiny_gan();
        c.skip_connections = skips;
        GanBundle bundle(c, 2);
        const ImageTensor im = random_image(16, 16, 3, rng);
        const ImageTensor out = generator_forward(bundle, im, random_mask(16, 16, rng));
        EXPECT_EQ(out.height(), 16);
        EXPECT_EQ(out.width(), 16);
        EXPECT_EQ(out.channels(), 3);
        for (float v : out.data()) {
            ASSERT_GE(v, 0.0f);
            ASSERT_LE(v, 1.0f);
        }
    }
}

TEST(GanBundle, SpatialAlgebraForEveryDepth) {
    std::mt19937_64 rng(2);
    for (int depth = 1; depth <= 3; ++depth) {
        GanModelConfig c = tiny_gan(32);
        c.depth = depth;
        GanBundle bundle(c, 0);
        const ImageTensor out = generator_forward(bundle, random_image(32, 32, 3, rng), random_mask(32, 32, rng));
        EXPECT_EQ(out.height(), 32) << "depth " << depth;
    }
}

TEST(GanBundle, EdgesAreComputedFromTheInputImage) {
    std::mt19937_64 rng(3);
    GanBundle bundle(tiny_gan(), 4);
    const ImageTensor im = random_image(16, 16, 3, rng);
    const LabelMask m = random_mask(16, 16, rng);
    const ImageTensor direct = generator_forward(bundle, im, m);
    const nn::Tensor out = bundle
                               .generate(images_to_tensor({&im}), masks_to_onehot({&m}, 2), edges_tensor({&im}))
                               .value();
    const ImageTensor via = tensor_to_image(out, 0);
    for (std::size_t i = 0; i < direct.data().size(); ++i) ASSERT_EQ(direct.data()[i], via.data()[i]);
}

TEST(GanBundle, OneHotAndEdgeTensors) {
    std::mt19937_64 rng(5);
    const LabelMask m = random_mask(8, 8, rng);
    const nn::Tensor t = masks_to_onehot({&m}, 2);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            ASSERT_EQ(t.at(0, 1, y, x), m.at(y, x) ? 1.0 : 0.0);
            ASSERT_EQ(t.at(0, 0, y, x) + t.at(0, 1, y, x), 1.0);
        }
    const ImageTensor im = random_image(8, 8, 3, rng);
    const nn::Tensor e = edges_tensor({&im});
    const EdgeMap ref = sobel_edges(im);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) ASSERT_EQ(e.at(0, 0, y, x), ref.at(y, x));
}

TEST(GanBundle, SizeMismatchIsAnError) {
    std::mt19937_64 rng(6);
    GanBundle bundle(tiny_gan(), 0);
    EXPECT_THROW(generator_forward(bundle, random_image(16, 16, 3, rng), random_mask(8, 8, rng)), Error);
}

TEST(PixelRearrange, MaskIsTheConditioningMaskAndCallsRepeat) {
    std::mt19937_64 rng(7);
    GanBundle bundle(tiny_gan(), 8);
    for (int trial = 0; trial < 10; ++trial) {
        const ImageTensor im = random_image(16, 16, 3, rng);
        const LabelMask m = random_mask(16, 16, rng, 0.3);
        const LabeledPair a = pixel_rearrange(bundle, im, m, 2, "x");
        const LabeledPair b = pixel_rearrange(bundle, im, m, 2, "x");
        EXPECT_EQ(a.mask, m);
        EXPECT_EQ(dsc(a.mask, m), 1.0);
        EXPECT_EQ(a.image, b.image);
        EXPECT_EQ(a.provenance, Provenance::mipr(2));
        EXPECT_EQ(a.id, "x");
        EXPECT_EQ(a.image, a.image.quantized());
    }
}

TEST(PixelRearrange, TheMaskSteersTheOutput) {
    std::mt19937_64 rng(9);
    GanBundle bundle(tiny_gan(), 10);
    const ImageTensor im = random_image(16, 16, 3, rng);
    const LabelMask a(16, 16, 0), b(16, 16, 1);
    EXPECT_NE(pixel_rearrange(bundle, im, a, 1).image, pixel_rearrange(bundle, im, b, 1).image);
}

TEST(GanCheckpoint, RoundTripKeepsEveryPart) {
    const fs::path path = fs::temp_directory_path() / "mipr_test_gan.ckpt";
    std::mt19937_64 rng(11);
    GanModelConfig c = tiny_gan();
    c.spade_activation = nn::Activation::Elu;
    GanBundle bundle(c, 12);
    bundle.fingerprint = "feed";
    bundle.epochs_trained = 3;
    write_checkpoint(path, bundle.to_checkpoint());
    const auto back = GanBundle::from_checkpoint(read_checkpoint(path, "generator"));
    EXPECT_EQ(back->fingerprint, "feed");
    EXPECT_EQ(back->epochs_trained, 3);
    EXPECT_EQ(back->config().spade_activation, nn::Activation::Elu);
    EXPECT_EQ(back->to_checkpoint(), bundle.to_checkpoint());
    const ImageTensor im = random_image(16, 16, 3, rng);
    const LabelMask m = random_mask(16, 16, rng);
    EXPECT_EQ(generator_forward(*back, im, m), generator_forward(bundle, im, m));
    EXPECT_THROW(read_checkpoint(path, "segmenter"), Error);
    fs::remove(path);
}

TEST(GanTraining, SpectralBoundHoldsAfterEveryStep) {
    GanTrainConfig t;
    t.epochs = 100;
    t.max_steps = 12;
    t.batch_size = 2;
    t.seed = 3;
    int calls = 0;
    double worst = 0.0;
    t.on_step = [&](const GanBundle& b, int step) {
        EXPECT_EQ(step, ++calls);
        for (const auto& w : b.discriminator_effective_weights()) worst = std::max(worst, top_singular_value(w));
    };
    const GanTrainResult r = train_generator(pairs(4, 16, 1), tiny_gan(), t);
    EXPECT_EQ(calls, 12);
    EXPECT_LE(worst, 1.0 + 1e-3);
    EXPECT_GT(worst, 0.99);
    EXPECT_EQ(r.log.size(), 6u);
    for (const auto& e : r.log) {
        EXPECT_GT(e.discriminator_loss, 0.0);
        EXPECT_GT(e.reconstruction_l1, 0.0);
    }
}

TEST(GanTraining, SameSeedSameTrajectory) {
    GanTrainConfig t;
    t.epochs = 2;
    t.batch_size = 2;
    t.seed = 5;
    const auto data = pairs(4, 16, 2);
    const GanTrainResult a = train_generator(data, tiny_gan(), t);
    const GanTrainResult b = train_generator(data, tiny_gan(), t);
    ASSERT_EQ(a.log.size(), b.log.size());
    EXPECT_EQ(a.log[0].reconstruction_l1, b.log[0].reconstruction_l1);
    EXPECT_EQ(a.log[0].discriminator_loss, b.log[0].discriminator_loss);
    EXPECT_EQ(a.bundle->to_checkpoint(), b.bundle->to_checkpoint());
}

TEST(GanTraining, ZeroAdversarialWeightNeverTouchesTheDiscriminator) {
    GanTrainConfig t;
    t.epochs = 15;
    t.batch_size = 2;
    t.adversarial_weight = 0.0;
    t.generator_lr = 2e-3;
    t.patch_shuffle_probability = 0.0;
    const auto data = pairs(4, 16, 3);
    const GanBundle init(tiny_gan(), t.seed);
    const GanTrainResult r = train_generator(data, tiny_gan(), t);
    const auto before = init.to_checkpoint(), after = r.bundle->to_checkpoint();
    const auto& d0 = before.parts.at("discriminator");
    const auto& d1 = after.parts.at("discriminator");
    for (const auto& [name, tensor] : d0)
        if (name.find(".weight") != std::string::npos || name.find(".bias") != std::string::npos)
            for (std::size_t i = 0; i < tensor.size(); ++i) ASSERT_EQ(tensor[i], d1.at(name)[i]) << name;
    for (const auto& e : r.log) {
        EXPECT_EQ(e.discriminator_loss, 0.0);
        EXPECT_EQ(e.adversarial_loss, 0.0);
    }
    EXPECT_LT(r.log.back().reconstruction_l1, 0.5 * r.log.front().reconstruction_l1);
}

TEST(GanTraining, InvalidConfigurationsAreRejected) {
    const auto data = pairs(2, 16, 4);
    GanTrainConfig t;
    t.adversarial_weight = 0.0;
    t.reconstruction_weight = 0.0;
    EXPECT_THROW(train_generator(data, tiny_gan(), t), Error);
    t = {};
    t.feature_matching_weight = -1.0;
    EXPECT_THROW(train_generator(data, tiny_gan(), t), Error);
    EXPECT_THROW(train_generator({}, tiny_gan(), GanTrainConfig{}), Error);
}

TEST(GanTraining, DeskDefaults) {
    const GanTrainConfig t;
    EXPECT_EQ(t.epochs, 50);
    EXPECT_EQ(GanModelConfig{}.discriminator_scales, 2);
    EXPECT_EQ(GanModelConfig{}.depth, 3);
}
