#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eksft/errors.hpp"
#include "eksft/hash.hpp"
#include "eksft/model.hpp"

namespace eksft {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written as native little-endian f32");

struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::string run_id;
};

inline std::filesystem::path manifest_path(const std::filesystem::path& stem) {
    return stem.string() + ".manifest.json";
}
inline std::filesystem::path weights_path(const std::filesystem::path& stem) {
    return stem.string() + ".weights.bin";
}

// Writes `<stem>.manifest.json` and `<stem>.weights.bin` (f32, little endian,
// tensors in manifest order).
inline void save_checkpoint(const ParameterSet& params, const std::filesystem::path& stem,
                            const CheckpointMeta& meta = {}) {
    if (!params.all_finite()) {
        throw NumericError("refusing to checkpoint non-finite parameters");
    }
    if (stem.has_parent_path()) {
        std::filesystem::create_directories(stem.parent_path());
    }
    nlohmann::json tensors = nlohmann::json::array();
    std::uint64_t byte_offset = 0;
    for (const auto& s : params.slots()) {
        tensors.push_back({{"name", s.name}, {"shape", s.shape}, {"offset", byte_offset}});
        byte_offset += s.size * sizeof(float);
    }
    const nlohmann::json manifest = {
        {"format", "eksft-checkpoint-v1"},
        {"config", params.config()},
        {"config_hash", hex64(params.config_hash())},
        {"seed", meta.seed},
        {"run_id", meta.run_id},
        {"version", params.version},
        {"dtype", "f32"},
        {"total_bytes", byte_offset},
        {"tensors", tensors},
    };

    std::vector<float> blob(params.size());
    const auto values = params.values();
    for (std::size_t i = 0; i < blob.size(); ++i) {
        blob[i] = static_cast<float>(values[i]);
    }
    {
        std::ofstream out(weights_path(stem), std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(blob.data()),
                  static_cast<std::streamsize>(blob.size() * sizeof(float)));
        if (!out) {
            throw Error("failed writing " + weights_path(stem).string());
        }
    }
    std::ofstream out(manifest_path(stem), std::ios::trunc);
    out << manifest.dump(2) << '\n';
    if (!out) {
        throw Error("failed writing " + manifest_path(stem).string());
    }
}

struct LoadedCheckpoint {
    ParameterSet params;
    CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint_with_meta(const std::filesystem::path& stem) {
    const auto mpath = manifest_path(stem);
    std::ifstream min(mpath);
    if (!min) {
        throw InputError("checkpoint manifest not found: " + mpath.string());
    }
    nlohmann::json manifest;
    ModelConfig config;
    std::vector<nlohmann::json> entries;
    std::string stored_hash;
    LoadedCheckpoint out;
    try {
        manifest = nlohmann::json::parse(min);
        config = manifest.at("config").get<ModelConfig>();
        stored_hash = manifest.at("config_hash").get<std::string>();
        entries = manifest.at("tensors").get<std::vector<nlohmann::json>>();
        out.meta.seed = manifest.value("seed", std::uint64_t{0});
        out.meta.run_id = manifest.value("run_id", std::string{});
    } catch (const nlohmann::json::exception& e) {
        throw CorruptManifestError("corrupt checkpoint manifest " + mpath.string() + ": " +
                                   e.what());
    }
    try {
        config.validate();
    } catch (const ConfigError& e) {
        throw CorruptManifestError("manifest holds an invalid config: " + std::string(e.what()));
    }
    if (stored_hash != hex64(config.architecture_hash())) {
        throw ConfigHashMismatchError("manifest config hash " + stored_hash +
                                      " does not match its config (" +
                                      hex64(config.architecture_hash()) + ")");
    }

    ParameterSet params(config);
    params.version = manifest.value("version", std::string{"loaded"});
    if (entries.size() != params.slots().size()) {
        throw ShapeMismatchError("manifest lists " + std::to_string(entries.size()) +
                                 " tensors, config implies " +
                                 std::to_string(params.slots().size()));
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& slot = params.slots()[i];
        std::string name;
        std::vector<std::size_t> shape;
        std::uint64_t offset = 0;
        try {
            name = entries[i].at("name").get<std::string>();
            shape = entries[i].at("shape").get<std::vector<std::size_t>>();
            offset = entries[i].at("offset").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw CorruptManifestError("bad tensor entry " + std::to_string(i) + ": " + e.what());
        }
        if (name != slot.name || shape != slot.shape ||
            offset != slot.offset * sizeof(float)) {
            throw ShapeMismatchError("tensor '" + name + "' does not match expected layout of '" +
                                     slot.name + "'");
        }
    }

    const auto wpath = weights_path(stem);
    std::ifstream win(wpath, std::ios::binary);
    if (!win) {
        throw TruncatedBlobError("weights blob missing: " + wpath.string());
    }
    const std::vector<char> bytes((std::istreambuf_iterator<char>(win)),
                                  std::istreambuf_iterator<char>());
    const std::size_t expected = params.size() * sizeof(float);
    if (bytes.size() < expected) {
        throw TruncatedBlobError("weights blob " + wpath.string() + " has " +
                                 std::to_string(bytes.size()) + " bytes, expected " +
                                 std::to_string(expected));
    }
    if (bytes.size() > expected) {
        throw ShapeMismatchError("weights blob " + wpath.string() + " is larger than the layout");
    }
    auto values = params.values();
    for (std::size_t i = 0; i < params.size(); ++i) {
        float f = 0.0F;
        std::memcpy(&f, bytes.data() + i * sizeof(float), sizeof(float));
        values[i] = static_cast<double>(f);
    }
    if (!params.all_finite()) {
        throw CorruptManifestError("weights blob contains non-finite values");
    }
    out.params = std::move(params);
    return out;
}

inline ParameterSet load_checkpoint(const std::filesystem::path& stem) {
    return load_checkpoint_with_meta(stem).params;
}

// Rounds every value to storage precision, as a save/load round trip would.
inline ParameterSet round_to_storage(const ParameterSet& p) {
    ParameterSet q = p;
    for (auto& v : q.values()) {
        v = static_cast<double>(static_cast<float>(v));
    }
    return q;
}

}  // namespace eksft
