#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "syncast/grid.hpp"
#include "syncast/nn.hpp"

namespace syncast {

struct WindowShape {
    int levels = 2;
    int lat = 4;
    int lon = 4;

    bool operator==(const WindowShape&) const = default;
};

/// Architecture of the windowed-attention encoder/decoder. Upper-air
/// fields are tokenized with 2x4x4 patches and the surface with 4x4
/// patches; both are fixed by the data layout.
struct ModelConfig {
    static constexpr int kUpperPatchLevels = 2;
    static constexpr int kSpatialPatch = kPatch;

    int embed_dim = 64;
    int encoder_depth = 2;
    int decoder_depth = 2;
    int heads = 4;
    WindowShape window;
    int mlp_ratio = 4;
    double drop_rate = 0.0;  // residual-branch dropout, training only
    int levels = 4;          // pressure levels Z
    int grid_lat = 32;       // extent of the grid the positional bias covers
    int grid_lon = 64;
    int bias_origin_lat = 0;  // token offset of that grid in the original
    int bias_origin_lon = 0;  // training grid (non-zero after a regional crop)
    int lead_hours = 1;
    bool shift_windows = true;  // odd blocks use half-window shifted partitions
    bool residual = true;       // predict the increment over the input state

    void validate() const;
    int upper_planes() const { return (levels + 1) / 2; }
    int token_planes() const { return upper_planes() + 1; }
    int bias_tokens_lat() const { return (grid_lat + kSpatialPatch - 1) / kSpatialPatch; }
    int bias_tokens_lon() const { return (grid_lon + kSpatialPatch - 1) / kSpatialPatch; }
    int relative_positions() const {
        return (2 * window.levels - 1) * (2 * window.lat - 1) * (2 * window.lon - 1);
    }
    int depth() const { return encoder_depth + decoder_depth; }
    int upper_patch_features() const { return kUpperPatchLevels * kSpatialPatch * kSpatialPatch * kUpperVars; }
    int surface_patch_features() const { return kSpatialPatch * kSpatialPatch * kSurfaceVars; }

    bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
    Tensor ln1_gamma, ln1_beta;
    LinearParams qkv, proj;
    Tensor ln2_gamma, ln2_beta;
    LinearParams fc1, fc2;
    /// Earth-specific bias [planes, lat tokens, lon tokens, heads, relative
    /// offsets], indexed by the query's absolute token position.
    Tensor position_bias;
};

struct ModelParams {
    ModelConfig config;
    LinearParams embed_upper, embed_surface;
    std::vector<BlockParams> blocks;
    LinearParams recover_upper, recover_surface;  // no bias: recovery is linear
    bool frozen = false;

    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
    ModelParams zeros_like() const;

    void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;

    /// Names of the linear maps that accept LoRA adapters.
    std::vector<std::string> adaptable_linears() const;
    LinearParams& linear(const std::string& name);
    const LinearParams& linear(const std::string& name) const;

    std::size_t parameter_count() const;
    bool operator==(const ModelParams& o) const;
};

struct LoraAdapterSet {
    LoraConfig config;
    std::map<std::string, LoraPair> pairs;

    /// A ~ U(-1/sqrt(k), 1/sqrt(k)), B = 0, for every adaptable linear map.
    static LoraAdapterSet init(const ModelParams& base, const LoraConfig& cfg, std::uint64_t seed);
    LoraAdapterSet zeros_like() const;
    void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    bool operator==(const LoraAdapterSet& o) const;
};

/// Position of a state's first token inside the bias grid.
struct TokenOffset {
    int lat = 0;
    int lon = 0;
};

/// Validates that `region` starts on a patch boundary and its padded
/// extent fits in the bias grid; throws Alignment otherwise.
TokenOffset token_offset(const RegionSpec& region, const ModelConfig& cfg);

/// Upper/surface fields at the unpadded resolution, double precision.
struct FieldSet {
    int levels = 0;
    int n_lat = 0;
    int n_lon = 0;
    std::vector<double> upper;    // [Z, lat, lon, 5]
    std::vector<double> surface;  // [lat, lon, 7]

    static FieldSet zeros(int levels, int n_lat, int n_lon);
    static FieldSet from_state(const AtmosphericState& s);
    AtmosphericState to_state(const GridSpec& grid, std::int64_t timestamp) const;
};

/// Tokens [planes, lat tokens, lon tokens, C] from a normalized state. The
/// state is replicate-padded to whole patches (and to an even level count).
Tensor patch_embed(const AtmosphericState& normalized, const ModelParams& params);

/// Linear inverse of the embedding with its own weights; padding rows,
/// columns and levels are dropped from the result.
FieldSet patch_recover(const Tensor& tokens, const ModelParams& params, int levels, int n_lat, int n_lon);

Tensor crop_positional_bias(const Tensor& global_bias, const RegionSpec& region);

/// Copy of `params` whose positional biases cover only `region`.
ModelParams crop_to_region(const ModelParams& params, const RegionSpec& region);

/// One deterministic step in normalized space (dropout off).
AtmosphericState forward(const AtmosphericState& normalized, const ModelParams& params,
                         const LoraAdapterSet* adapters = nullptr, const RegionSpec* region = nullptr);

struct Prediction {
    AtmosphericState normalized;
    AtmosphericState physical;
};

Prediction predict(const AtmosphericState& normalized, const ModelParams& params, const NormalizationStats& stats,
                   const LoraAdapterSet* adapters = nullptr, const RegionSpec* region = nullptr);

/// W + (alpha/r) B A for every adapted map.
ModelParams merge_lora(const ModelParams& params, const LoraAdapterSet& adapters);

/// Repeated forward steps. With `stats`, each prediction is mapped to
/// physical space, clamped to physical bounds, and re-normalized before it
/// is fed back.
std::vector<AtmosphericState> rollout(const AtmosphericState& normalized, const ModelParams& params, int n,
                                      const NormalizationStats* stats = nullptr,
                                      const LoraAdapterSet* adapters = nullptr, const RegionSpec* region = nullptr);

/// Forward pass that keeps activations for a backward pass.
class ForecasterTape {
public:
    ForecasterTape(const FieldSet& input, const ModelParams& params, const LoraAdapterSet* adapters,
                   TokenOffset offset, Rng* dropout_rng);
    ~ForecasterTape();
    ForecasterTape(ForecasterTape&&) noexcept;
    ForecasterTape& operator=(ForecasterTape&&) noexcept;

    const FieldSet& output() const;

    /// Accumulates d(loss)/d(params) given d(loss)/d(output). Either
    /// gradient sink may be null to skip that group.
    void backward(const FieldSet& grad_output, ModelParams* param_grads, LoraAdapterSet* lora_grads) const;

    struct Impl;  // opaque; also used by the inference path

private:
    std::unique_ptr<Impl> impl_;
};

}  // namespace syncast
