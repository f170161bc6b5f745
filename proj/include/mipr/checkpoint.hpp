#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "mipr/nn/layers.hpp"

namespace mipr {

/// Parameter blobs plus a JSON metadata document. `kind` names the model
/// family ("segmenter", "generator"); `fingerprint` is the config hash the
/// model was trained under.
struct Checkpoint {
    std::string kind;
    std::string fingerprint;
    std::string meta_json = "{}";
    std::map<std::string, nn::StateDict> parts;

    bool operator==(const Checkpoint&) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws with the path when the file is missing or malformed, and when
/// `expected_kind` is non-empty and differs.
Checkpoint read_checkpoint(const std::filesystem::path& path, const std::string& expected_kind = "");

}  // namespace mipr
