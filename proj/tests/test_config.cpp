#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

#include "mipr/config.hpp"
#include "mipr/error.hpp"

using namespace mipr;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Sha256, KnownVectors) {
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Sha256, TreeHashSeesNamesAndContents) {
    const fs::path dir = fs::temp_directory_path() / "mipr_test_tree";
    fs::remove_all(dir);
    fs::create_directories(dir / "sub");
    std::ofstream(dir / "a.txt") << "one";
    std::ofstream(dir / "sub" / "b.txt") << "two";
    const std::string h0 = sha256_tree(dir);
    EXPECT_EQ(sha256_tree(dir), h0);
    EXPECT_EQ(sha256_file(dir / "a.txt"), sha256_hex("one"));
    std::ofstream(dir / "a.txt") << "uno";
    const std::string h1 = sha256_tree(dir);
    EXPECT_NE(h1, h0);
    fs::rename(dir / "sub" / "b.txt", dir / "sub" / "c.txt");
    EXPECT_NE(sha256_tree(dir), h1);
    fs::remove_all(dir);
}

TEST(RunConfig, JsonRoundTripIsCanonical) {
    RunConfig c;
    c.seed = 42;
    c.seg_model.arch = SegArch::AttentionUNet;
    c.gan_train.grid_image = PatchGrid(4);
    c.loop.metric = AcceptMetric::L1;
    c.tau_accept_fraction = 0.8;
    const std::string text = c.to_json();
    const RunConfig back = RunConfig::from_json(text);
    EXPECT_EQ(back.to_json(), text);
    EXPECT_EQ(back.seed, 42u);
    EXPECT_EQ(back.seg_model.arch, SegArch::AttentionUNet);
    EXPECT_EQ(back.gan_train.grid_image.k(), 4);
    EXPECT_EQ(back.loop.metric, AcceptMetric::L1);
    ASSERT_TRUE(back.tau_accept_fraction.has_value());
    EXPECT_DOUBLE_EQ(*back.tau_accept_fraction, 0.8);
    // Key order and whitespace in the input do not matter.
    EXPECT_EQ(RunConfig::from_json(json::parse(text).dump(4)).to_json(), text);
}

TEST(RunConfig, PartialDocumentsKeepDefaults) {
    const RunConfig c = RunConfig::from_json(R"({"segmenter": {"epochs": 7}})");
    EXPECT_EQ(c.seg_train.epochs, 7);
    EXPECT_DOUBLE_EQ(c.seg_train.learning_rate, 1e-3);
    EXPECT_EQ(c.data.height, 64);
}

TEST(RunConfig, UnknownKeysAreNamed) {
    const std::string msg = error_of([] { RunConfig::from_json(R"({"segmenter": {"epoch": 7}})"); });
    EXPECT_NE(msg.find("segmenter.epoch"), std::string::npos) << msg;
    EXPECT_NE(error_of([] { RunConfig::from_json(R"({"bogus": 1})"); }).find("bogus"), std::string::npos);
}

TEST(RunConfig, TypeErrorsAreNamed) {
    const std::string msg = error_of([] { RunConfig::from_json(R"({"segmenter": {"epochs": "ten"}})"); });
    EXPECT_NE(msg.find("segmenter.epochs"), std::string::npos) << msg;
    EXPECT_FALSE(error_of([] { RunConfig::from_json(R"({"segmenter": {"epochs": 2.5}})"); }).empty());
    EXPECT_FALSE(error_of([] { RunConfig::from_json(R"({"seed": -1})"); }).empty());
    EXPECT_FALSE(error_of([] { RunConfig::from_json(R"({"loop": {"metric": "psnr"}})"); }).empty());
    EXPECT_FALSE(error_of([] { RunConfig::from_json("{not json"); }).empty());
}

TEST(RunConfig, RangeChecks) {
    EXPECT_FALSE(error_of([] { RunConfig::from_json(R"({"segmenter": {"epochs": 0}})"); }).empty());
    EXPECT_FALSE(error_of([] { RunConfig::from_json(R"({"segmenter": {"learning_rate": 0}})"); }).empty());
    EXPECT_FALSE(error_of([] { RunConfig::from_json(R"({"loop": {"max_iterations": 0}})"); }).empty());
    EXPECT_FALSE(error_of([] { RunConfig::from_json(R"({"loop": {"tau": -0.1}})"); }).empty());
    // Split sizes come together and must add up.
    EXPECT_FALSE(error_of([] { RunConfig::from_json(R"({"data": {"labeled": 20}})"); }).empty());
    EXPECT_FALSE(error_of([] {
                     RunConfig::from_json(R"({"data": {"count": 10, "labeled": 2, "unlabeled": 2, "test": 2}})");
                 }).empty());
    const RunConfig ok =
        RunConfig::from_json(R"({"data": {"count": 140, "labeled": 20, "unlabeled": 100, "test": 20}})");
    ASSERT_TRUE(ok.data.split().has_value());
    EXPECT_EQ(ok.data.split()->unlabeled, 100u);
    EXPECT_FALSE(RunConfig{}.data.split().has_value());
}

TEST(RunConfig, OverridesEqualFileValues) {
    const RunConfig file = RunConfig::from_json(
        R"({"seed": 9, "segmenter": {"epochs": 12, "arch": "attention-unet-small", "augment": {"hflip": true}},
            "loop": {"tau": 0.7}})");
    RunConfig flags;
    flags.apply_overrides({"seed=9", "segmenter.epochs=12", "segmenter.arch=attention-unet-small",
                           "segmenter.augment.hflip=true", "loop.tau=0.7"});
    EXPECT_EQ(flags.to_json(), file.to_json());
    EXPECT_EQ(flags.fingerprint(), file.fingerprint());
}

TEST(RunConfig, BadOverridesAreRejected) {
    RunConfig c;
    EXPECT_FALSE(error_of([&] { c.apply_overrides({"segmenter.nope=1"}); }).empty());
    EXPECT_FALSE(error_of([&] { c.apply_overrides({"no-equals-sign"}); }).empty());
    EXPECT_FALSE(error_of([&] { c.apply_overrides({"segmenter.epochs=abc"}); }).empty());
    // A failed override leaves the config untouched.
    EXPECT_EQ(c.to_json(), RunConfig{}.to_json());
}

TEST(RunConfig, FingerprintTracksContent) {
    RunConfig a, b;
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
    EXPECT_EQ(a.fingerprint(), sha256_hex(a.to_json()));
    EXPECT_EQ(a.fingerprint().size(), 64u);
    b.seg_train.epochs = 99;
    EXPECT_NE(a.fingerprint(), b.fingerprint());
}

TEST(RunConfig, ComponentSeedsAreDerivedAndDistinct) {
    RunConfig c;
    c.seed = 3;
    EXPECT_EQ(c.component_seed("segmenter"), derive_seed(3, "segmenter"));
    EXPECT_NE(c.component_seed("segmenter"), c.component_seed("generator"));
    EXPECT_EQ(c.segmenter_training().seed, c.component_seed("segmenter"));
    EXPECT_EQ(c.generator_training().seed, c.component_seed("generator"));
    RunConfig d = c;
    d.seed = 4;
    EXPECT_NE(d.segmenter_training().seed, c.segmenter_training().seed);
}

TEST(RunConfig, LoadReportsThePath) {
    const fs::path missing = fs::temp_directory_path() / "mipr_no_config.json";
    EXPECT_NE(error_of([&] { RunConfig::load(missing); }).find(missing.string()), std::string::npos);
}

TEST(RunManifest, RecordsEverything) {
    const fs::path path = fs::temp_directory_path() / "mipr_test_manifest.json";
    RunManifest m;
    m.command = "train-seg";
    RunConfig c;
    m.config_json = c.to_json();
    m.fingerprint = c.fingerprint();
    m.inputs = {{"data/manifest.json", sha256_hex("x")}};
    m.seeds = {{"segmenter", 17}};
    m.wall_seconds = 1.5;
    m.extra_json = R"({"train_dsc": 0.9})";
    write_run_manifest(path, m);
    std::ifstream in(path);
    const json j = json::parse(in);
    EXPECT_EQ(j.at("command"), "train-seg");
    EXPECT_EQ(j.at("version"), kMiprVersion);
    EXPECT_EQ(j.at("config_fingerprint"), c.fingerprint());
    EXPECT_EQ(j.at("config"), json::parse(c.to_json()));
    EXPECT_EQ(j.at("inputs").at(0).at("sha256"), sha256_hex("x"));
    EXPECT_EQ(j.at("seeds").at("segmenter"), 17u);
    EXPECT_EQ(j.at("details").at("train_dsc"), 0.9);
    fs::remove(path);
}
