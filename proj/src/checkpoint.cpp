#include "syncast/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <openssl/evp.h>

#include "syncast/config.hpp"
#include "syncast/grid_file.hpp"

namespace syncast {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are little-endian");

namespace {

constexpr char kMagic[4] = {'S', 'C', 'K', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "f64le") return 8;
    if (dtype == "f32le") return 4;
    fail(ErrorCode::HeaderMismatch, "dtype: unsupported '" + dtype + "'");
}

void add_optimizer(Checkpoint& ck, const Adam* opt) {
    if (!opt) return;
    ck.extra["optimizer_steps"] = opt->steps();
    for (const auto& [name, t] : opt->first_moments()) ck.tensors.emplace_back("adam.m." + name, t);
    for (const auto& [name, t] : opt->second_moments()) ck.tensors.emplace_back("adam.v." + name, t);
}

void require_kind(const Checkpoint& ck, const std::string& kind) {
    if (ck.kind != kind)
        fail(ErrorCode::HeaderMismatch, "kind: expected a " + kind + " checkpoint, found '" + ck.kind + "'");
}

void load_into(const Checkpoint& ck, const std::string& name, Tensor& t) {
    const Tensor& src = ck.tensor(name);
    if (src.shape != t.shape)
        fail(ErrorCode::HeaderMismatch, "tensor '" + name + "' has shape " + shape_string(src.shape) + ", expected " +
                                            shape_string(t.shape));
    t.data = src.data;
}

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    fail(ErrorCode::HeaderMismatch, "checkpoint lacks tensor '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return true;
    return false;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck, const std::string& dtype) {
    const std::size_t width = dtype_size(dtype);
    json manifest;
    manifest["format"] = "SCK1";
    manifest["kind"] = ck.kind;
    manifest["config"] = ck.config;
    manifest["extra"] = ck.extra;
    manifest["step"] = ck.step;
    manifest["dtype"] = dtype;
    if (!ck.base_hash.empty()) manifest["base_hash"] = ck.base_hash;
    json entries = json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : ck.tensors) {
        const std::size_t bytes = t.data.size() * width;
        entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}, {"bytes", bytes}});
        offset += bytes;
    }
    manifest["tensors"] = std::move(entries);
    const std::string text = manifest.dump();

    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    out.reserve(out.size() + offset + 4);
    for (const auto& [name, t] : ck.tensors)
        for (double v : t.data) {
            std::uint8_t buf[8];
            if (width == 8) {
                std::memcpy(buf, &v, 8);
            } else {
                const float f = static_cast<float>(v);
                std::memcpy(buf, &f, 4);
            }
            out.insert(out.end(), buf, buf + width);
        }
    put_u32(out, crc32_of(out.data(), out.size()));
    return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        fail(ErrorCode::MagicMismatch, "not a checkpoint (magic bytes are not 'SCK1')");
    const std::uint32_t len = get_u32(bytes.data() + 4);
    if (8ull + len + 4 > bytes.size()) fail(ErrorCode::TruncatedPayload, "manifest length exceeds file size");
    const std::uint32_t stored = get_u32(bytes.data() + bytes.size() - 4);
    if (crc32_of(bytes.data(), bytes.size() - 4) != stored)
        fail(ErrorCode::ChecksumMismatch, "checkpoint CRC-32 does not match");
    json manifest;
    try {
        manifest = json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
    } catch (const json::exception& e) {
        fail(ErrorCode::HeaderMismatch, std::string("manifest is not valid JSON: ") + e.what());
    }
    Checkpoint ck;
    std::size_t width = 8;
    try {
        if (manifest.at("format") != "SCK1") fail(ErrorCode::HeaderMismatch, "format: expected 'SCK1'");
        ck.kind = manifest.at("kind").get<std::string>();
        ck.config = manifest.at("config");
        ck.extra = manifest.at("extra");
        ck.step = manifest.at("step").get<long>();
        ck.base_hash = manifest.value("base_hash", std::string());
        width = dtype_size(manifest.at("dtype").get<std::string>());
        const std::uint8_t* payload = bytes.data() + 8 + len;
        const std::size_t payload_size = bytes.size() - 12 - len;
        std::size_t expected = 0;
        for (const auto& e : manifest.at("tensors")) {
            Tensor t(e.at("shape").get<std::vector<std::size_t>>());
            const auto offset = e.at("offset").get<std::size_t>();
            const auto size = e.at("bytes").get<std::size_t>();
            const std::string name = e.at("name").get<std::string>();
            if (size != t.data.size() * width || offset != expected)
                fail(ErrorCode::HeaderMismatch, "tensor '" + name + "': offset or byte count disagrees with its shape");
            if (offset + size > payload_size)
                fail(ErrorCode::TruncatedPayload, "tensor '" + name + "' runs past the end of the payload");
            for (std::size_t k = 0; k < t.data.size(); ++k) {
                const std::uint8_t* p = payload + offset + k * width;
                if (width == 8) {
                    std::memcpy(&t.data[k], p, 8);
                } else {
                    float f;
                    std::memcpy(&f, p, 4);
                    t.data[k] = f;
                }
            }
            expected += size;
            ck.tensors.emplace_back(name, std::move(t));
        }
        if (expected != payload_size) fail(ErrorCode::HeaderMismatch, "payload size disagrees with the tensor table");
    } catch (const json::exception& e) {
        fail(ErrorCode::HeaderMismatch, std::string("manifest field missing or mistyped: ") + e.what());
    }
    return ck;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::Io, "short write to " + path.string());
}

void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path, const std::string& dtype) {
    write_bytes(path, encode_checkpoint(ck, dtype));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_bytes(path)); }

std::string sha256_hex(const void* data, std::size_t size) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int n = 0;
    if (EVP_Digest(data, size, digest, &n, EVP_sha256(), nullptr) != 1) fail(ErrorCode::Io, "SHA-256 failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int k = 0; k < n; ++k) {
        out += hex[digest[k] >> 4];
        out += hex[digest[k] & 15];
    }
    return out;
}

std::string file_hash(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    return sha256_hex(bytes.data(), bytes.size());
}

Checkpoint backbone_checkpoint(const ModelParams& params, const Adam* optimizer, long step) {
    Checkpoint ck;
    ck.kind = "backbone";
    ck.config = to_json(params.config);
    ck.step = step;
    params.for_each([&](const std::string& name, const Tensor& t) { ck.tensors.emplace_back(name, t); });
    add_optimizer(ck, optimizer);
    return ck;
}

ModelParams backbone_from_checkpoint(const Checkpoint& ck) {
    require_kind(ck, "backbone");
    ModelParams p = ModelParams::init(model_config_from_json(ck.config, "checkpoint.config"), 0);
    p.for_each([&](const std::string& name, Tensor& t) { load_into(ck, name, t); });
    return p;
}

Checkpoint adapter_checkpoint(const LoraAdapterSet& adapters, const Adam* optimizer, long step,
                              const std::string& base_hash) {
    Checkpoint ck;
    ck.kind = "adapters";
    ck.config = to_json(adapters.config);
    ck.step = step;
    ck.base_hash = base_hash;
    adapters.for_each([&](const std::string& name, const Tensor& t) { ck.tensors.emplace_back(name, t); });
    add_optimizer(ck, optimizer);
    return ck;
}

LoraAdapterSet adapters_from_checkpoint(const Checkpoint& ck, const ModelParams& base) {
    require_kind(ck, "adapters");
    LoraAdapterSet a = LoraAdapterSet::init(base, lora_config_from_json(ck.config, "checkpoint.config"), 0);
    a.for_each([&](const std::string& name, Tensor& t) { load_into(ck, name, t); });
    return a;
}

Checkpoint denoiser_checkpoint(const DenoiserParams& params, const Adam* optimizer, long step) {
    Checkpoint ck;
    ck.kind = "denoiser";
    ck.config = {{"cond_channels", params.cond_channels}, {"hidden", params.hidden}, {"time_dim", params.time_dim},
                 {"target_mean", params.target_mean}, {"target_scale", params.target_scale}};
    // JSON has no infinities; an unset range is simply absent.
    if (std::isfinite(params.x0_min) && std::isfinite(params.x0_max)) {
        ck.config["x0_min"] = params.x0_min;
        ck.config["x0_max"] = params.x0_max;
    }
    ck.step = step;
    params.for_each([&](const std::string& name, const Tensor& t) { ck.tensors.emplace_back(name, t); });
    add_optimizer(ck, optimizer);
    return ck;
}

DenoiserParams denoiser_from_checkpoint(const Checkpoint& ck) {
    require_kind(ck, "denoiser");
    DenoiserParams p;
    try {
        p = DenoiserParams::init(ck.config.at("cond_channels").get<int>(), ck.config.at("hidden").get<int>(),
                                 ck.config.at("time_dim").get<int>(), 0);
        if (ck.config.contains("target_mean")) {
            p.target_mean = ck.config.at("target_mean").get<std::array<double, 3>>();
            p.target_scale = ck.config.at("target_scale").get<std::array<double, 3>>();
        }
        if (ck.config.contains("x0_min")) {
            p.x0_min = ck.config.at("x0_min").get<double>();
            p.x0_max = ck.config.at("x0_max").get<double>();
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::HeaderMismatch, std::string("denoiser config incomplete: ") + e.what());
    }
    p.for_each([&](const std::string& name, Tensor& t) { load_into(ck, name, t); });
    return p;
}

Adam optimizer_from_checkpoint(const Checkpoint& ck, const AdamConfig& cfg) {
    Adam opt(cfg);
    if (!ck.extra.contains("optimizer_steps")) return opt;
    opt.set_steps(ck.extra["optimizer_steps"].get<long>());
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("adam.m.", 0) == 0) opt.first_moments()[name.substr(7)] = t;
        else if (name.rfind("adam.v.", 0) == 0) opt.second_moments()[name.substr(7)] = t;
    }
    return opt;
}

}  // namespace syncast
