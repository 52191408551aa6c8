// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: magic + JSON header (config echo, step, tensor
// manifest) + raw little-endian payload + trailing checksum. Only trainable
// tensors are stored; backbones are regenerated from their seeds, which keeps
// files small and makes the frozen contract structural.
#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cktwam/ckt.hpp"
#include "cktwam/config.hpp"

namespace cktwam {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

namespace checkpoint {

inline constexpr char kMagic[9] = "CKTWAM1\n";  // 8 bytes on disk

template <typename T>
constexpr const char* dtype_name() {
    if constexpr (sizeof(T) == 4)
        return "f32";
    else
        return "f64";
}

/// The config sections that must agree between a checkpoint and the run
/// loading it.
inline json config_echo(const RunConfig& cfg) {
    json full = to_json(cfg);
    return json{{"precision", cfg.precision},
                {"teacher", full["teacher"]},
                {"student", full["student"]},
                {"ckt", full["ckt"]}};
}

template <typename T>
void save(const std::string& path, const RunConfig& cfg, int64_t step, const AdapterBank<T>& bank) {
    json manifest = json::array();
    std::vector<char> payload;
    uint64_t offset = 0;
    for (const auto& [name, tensor] : bank.named_params()) {
        uint64_t nbytes = tensor->values().size() * sizeof(T);
        manifest.push_back(
            {{"name", name}, {"shape", tensor->shape()}, {"offset", offset}, {"nbytes", nbytes}});
        size_t pos = payload.size();
        payload.resize(pos + nbytes);
        std::memcpy(payload.data() + pos, tensor->data(), nbytes);
        offset += nbytes;
    }
    json header{{"config", config_echo(cfg)},
                {"step", step},
                {"dtype", dtype_name<T>()},
                {"tensors", manifest}};
    std::string header_str = header.dump();

    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint: " + path);
    out.write(kMagic, 8);
    uint64_t hlen = header_str.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    uint64_t checksum = fnv1a64(payload.data(), payload.size());
    out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    if (!out) throw ConfigError("short write while saving checkpoint: " + path);
}

/// Restores every trainable tensor bitwise. Rejects checkpoints whose config
/// echo, dtype, or tensor manifest disagree with the loading run. Returns the
/// stored step.
template <typename T>
int64_t load(const std::string& path, const RunConfig& cfg, AdapterBank<T>& bank) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw ConfigError("not a checkpoint file (bad magic): " + path);
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string header_str(hlen, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw ConfigError("truncated checkpoint header: " + path);
    json header = json::parse(header_str, nullptr, false);
    if (header.is_discarded()) throw ConfigError("corrupt checkpoint header: " + path);

    if (header.at("dtype").get<std::string>() != dtype_name<T>())
        throw ConfigError("checkpoint dtype " + header.at("dtype").get<std::string>() +
                          " does not match run precision " + dtype_name<T>());
    if (header.at("config") != config_echo(cfg))
        throw ConfigError("checkpoint config does not match the loading config");

    auto params = bank.named_params();
    const json& manifest = header.at("tensors");
    if (manifest.size() != params.size())
        throw ConfigError("checkpoint tensor count mismatch");

    uint64_t payload_bytes = 0;
    for (const auto& item : manifest) payload_bytes += item.at("nbytes").get<uint64_t>();
    std::vector<char> payload(payload_bytes);
    in.read(payload.data(), static_cast<std::streamsize>(payload_bytes));
    uint64_t checksum = 0;
    in.read(reinterpret_cast<char*>(&checksum), sizeof(checksum));
    if (!in) throw ConfigError("truncated checkpoint payload: " + path);
    if (checksum != fnv1a64(payload.data(), payload.size()))
        throw IntegrityError("checkpoint payload checksum mismatch: " + path);

    for (size_t i = 0; i < params.size(); ++i) {
        const json& item = manifest[i];
        auto& [name, tensor] = params[i];
        if (item.at("name").get<std::string>() != name)
            throw ConfigError("checkpoint tensor order mismatch at " + name);
        Shape shape = item.at("shape").get<Shape>();
        if (shape != tensor->shape())
            throw ConfigError("checkpoint shape mismatch for " + name);
        uint64_t off = item.at("offset").get<uint64_t>();
        uint64_t nbytes = item.at("nbytes").get<uint64_t>();
        if (nbytes != tensor->values().size() * sizeof(T))
            throw ConfigError("checkpoint size mismatch for " + name);
        std::memcpy(tensor->mutable_values().data(), payload.data() + off, nbytes);
    }
    return header.at("step").get<int64_t>();
}

}  // namespace checkpoint
}  // namespace cktwam
