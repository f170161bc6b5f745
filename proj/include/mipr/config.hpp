#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mipr/datakit.hpp"
#include "mipr/evalkit.hpp"
#include "mipr/generator.hpp"
#include "mipr/miprloop.hpp"
#include "mipr/segmenter.hpp"

namespace mipr {

struct DataSection {
    int height = 64;
    int width = 64;
    int count = 140;
    /// Either all three or none; none scales the ISIC proportions to `count`.
    std::optional<std::size_t> labeled;
    std::optional<std::size_t> unlabeled;
    std::optional<std::size_t> test;
    SyntheticOptions synthetic;

    std::optional<SplitSizes> split() const;
};

struct EvalSection {
    double empty_dsc = 1.0;
    TsneOptions tsne;
};

/// Sections data, segmenter, generator, loop, eval plus a root seed. Parsing
/// is strict: unknown keys and mistyped values are errors that name the key.
struct RunConfig {
    std::uint64_t seed = 0;
    DataSection data;
    SegModelConfig seg_model;
    SegTrainConfig seg_train;
    GanModelConfig gan_model;
    GanTrainConfig gan_train;
    LoopConfig loop;
    /// When set, tau is calibrated to accept this fraction of validation scores.
    std::optional<double> tau_accept_fraction;
    EvalSection eval;

    /// Canonical JSON text (sorted keys, no whitespace).
    std::string to_json() const;
    static RunConfig from_json(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);

    /// Applies "section.key=value" (value parsed as JSON, else taken as a
    /// string) on top of the current settings.
    void apply_overrides(const std::vector<std::string>& assignments);

    /// SHA-256 of to_json().
    std::string fingerprint() const;

    /// Per-component seeds derived from the root seed.
    std::uint64_t component_seed(const std::string& component) const;
    /// Training configs with their derived seeds filled in.
    SegTrainConfig segmenter_training() const;
    GanTrainConfig generator_training() const;
    LoopConfig loop_config() const;
};

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);
/// Hash over relative paths and contents of every regular file, in sorted order.
std::string sha256_tree(const std::filesystem::path& directory);

struct RunManifest {
    std::string command;
    std::string config_json;
    std::string fingerprint;
    std::vector<std::pair<std::string, std::string>> inputs;  // path, checksum
    std::vector<std::pair<std::string, std::uint64_t>> seeds;
    double wall_seconds = 0.0;
    std::string extra_json = "{}";
};

inline constexpr const char* kMiprVersion = "1.0.0";

void write_run_manifest(const std::filesystem::path& path, const RunManifest& manifest);

}  // namespace mipr
