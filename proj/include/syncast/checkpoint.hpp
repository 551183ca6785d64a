#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "syncast/diffusion.hpp"
#include "syncast/forecaster.hpp"
#include "syncast/nn.hpp"

namespace syncast {

/// Named tensors plus a JSON manifest.
///
/// On disk: "SCK1", u32 LE manifest length, UTF-8 JSON manifest (kind,
/// config, dtype, step, tensor names, shapes, byte offsets), raw payload in
/// the declared dtype, u32 LE CRC-32 of everything before it. Parameters are
/// written as f64le by default so that a resumed run continues bit-exactly;
/// f32le is accepted for export.
struct Checkpoint {
    std::string kind;  // "backbone", "adapters" or "denoiser"
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json extra = nlohmann::json::object();
    long step = 0;
    std::string base_hash;  // adapters: content hash of their base checkpoint
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& tensor(const std::string& name) const;
    bool has(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck, const std::string& dtype = "f64le");
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path, const std::string& dtype = "f64le");
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Lower-case hex SHA-256.
std::string sha256_hex(const void* data, std::size_t size);
std::string file_hash(const std::filesystem::path& path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

// Optimizer moments are stored as "adam.m.<name>" / "adam.v.<name>" with the
// step count in the manifest, so a run can continue from the file.
Checkpoint backbone_checkpoint(const ModelParams& params, const Adam* optimizer, long step);
ModelParams backbone_from_checkpoint(const Checkpoint& ck);

Checkpoint adapter_checkpoint(const LoraAdapterSet& adapters, const Adam* optimizer, long step,
                              const std::string& base_hash);
/// `base` supplies the adapted shapes; shapes must match.
LoraAdapterSet adapters_from_checkpoint(const Checkpoint& ck, const ModelParams& base);

Checkpoint denoiser_checkpoint(const DenoiserParams& params, const Adam* optimizer, long step);
DenoiserParams denoiser_from_checkpoint(const Checkpoint& ck);

/// Rebuilds optimizer state saved by one of the above with `cfg`.
Adam optimizer_from_checkpoint(const Checkpoint& ck, const AdamConfig& cfg);

}  // namespace syncast
