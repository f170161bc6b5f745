#include "mipr/checkpoint.hpp"

#include <fstream>

#include "json.hpp"
#include "mipr/error.hpp"

namespace mipr {

namespace {

constexpr char kMagic[8] = {'M', 'I', 'P', 'R', 'C', 'K', 'P', '1'};

bool same_state(const nn::StateDict& a, const nn::StateDict& b) {
    if (a.size() != b.size()) return false;
    for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
        if (ia->first != ib->first || ia->second.shape() != ib->second.shape()) return false;
        if (!std::equal(ia->second.values().begin(), ia->second.values().end(), ib->second.values().begin()))
            return false;
    }
    return true;
}

}  // namespace

bool Checkpoint::operator==(const Checkpoint& other) const {
    if (kind != other.kind || fingerprint != other.fingerprint || meta_json != other.meta_json) return false;
    if (parts.size() != other.parts.size()) return false;
    for (auto ia = parts.begin(), ib = other.parts.begin(); ia != parts.end(); ++ia, ++ib)
        if (ia->first != ib->first || !same_state(ia->second, ib->second)) return false;
    return true;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    nlohmann::json header;
    header["kind"] = checkpoint.kind;
    header["fingerprint"] = checkpoint.fingerprint;
    header["meta"] = nlohmann::json::parse(checkpoint.meta_json);
    nlohmann::json names = nlohmann::json::array();
    for (const auto& [name, state] : checkpoint.parts) names.push_back(name);
    header["parts"] = names;
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    const auto len = static_cast<std::uint64_t>(text.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, state] : checkpoint.parts) nn::write_state(out, state);
    require(static_cast<bool>(out), ErrorKind::Io, "failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path, const std::string& expected_kind) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, "checkpoint not found: " + path.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    require(in && std::equal(magic, magic + 8, kMagic), ErrorKind::Data,
            "not a checkpoint file: " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    require(in && len < (1u << 24), ErrorKind::Data, "corrupt checkpoint header: " + path.string());
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    require(static_cast<bool>(in), ErrorKind::Data, "truncated checkpoint header: " + path.string());

    Checkpoint checkpoint;
    try {
        const auto header = nlohmann::json::parse(text);
        checkpoint.kind = header.at("kind").get<std::string>();
        checkpoint.fingerprint = header.at("fingerprint").get<std::string>();
        checkpoint.meta_json = header.at("meta").dump();
        for (const auto& name : header.at("parts")) {
            try {
                checkpoint.parts[name.get<std::string>()] = nn::read_state(in);
            } catch (const Error& e) {
                fail(ErrorKind::Data, path.string() + ": part " + name.get<std::string>() + ": " + e.what());
            }
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Data, "malformed checkpoint header in " + path.string() + ": " + e.what());
    }
    require(expected_kind.empty() || checkpoint.kind == expected_kind, ErrorKind::Data,
            path.string() + " holds a " + checkpoint.kind + " checkpoint, expected " + expected_kind);
    return checkpoint;
}

}  // namespace mipr
