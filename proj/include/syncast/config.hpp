#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "syncast/datagen.hpp"
#include "syncast/diffusion.hpp"
#include "syncast/forecaster.hpp"
#include "syncast/metrics.hpp"
#include "syncast/training.hpp"

namespace syncast {

inline constexpr int kConfigVersion = 1;

struct DataConfig {
    SyntheticConfig synthetic;
    double train_fraction = 0.7;  // of the sequence, in time order
    double val_fraction = 0.15;   // the rest is test
    int lead_hours = 1;

    void validate() const;
    bool operator==(const DataConfig&) const = default;
};

/// Regional window as parent-grid indices. Disabled means the full grid.
struct RegionConfig {
    bool enabled = false;
    int i0 = 0, height = 0, j0 = 0, width = 0;

    RegionSpec resolve(const GridSpec& parent) const;
    bool operator==(const RegionConfig&) const = default;
};

struct ClimatologyConfig {
    int period_hours = 24;
    int buckets = 24;
    double delta = 1.0;  // gate margin in spread units

    void validate() const;
    bool operator==(const ClimatologyConfig&) const = default;
};

struct MetricConfig {
    std::vector<std::string> variables{"msl", "u10", "v10", "t2m", "pm1", "pm2p5", "pm10"};
    std::vector<double> quantiles = high_quantile_set();
    bool quartile_rqe = true;
    std::vector<double> sedi_percentiles{90.0};
    std::vector<int> lead_steps{1, 2, 3, 4, 5, 6};  // rollout steps scored by `rollout`

    EvalOptions options() const;
    void validate() const;
    bool operator==(const MetricConfig&) const = default;
};

struct PlotConfig {
    std::string variable = "pm2p5";
    double vmin = 0.0;  // physical units anchoring the colormap
    double vmax = 1e-7;
    double diff_range = 5e-8;  // difference map spans [-diff_range, diff_range]
    int scale = 4;             // pixels per grid cell

    void validate() const;
    bool operator==(const PlotConfig&) const = default;
};

struct RunConfig {
    int version = kConfigVersion;
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    TrainConfig finetune;
    LoraConfig lora;
    RegionConfig region;
    DiffusionConfig diffusion;
    ClimatologyConfig climatology;
    MetricConfig metrics;
    PlotConfig plot;
    bool dee = false;

    void validate() const;
};

/// Strict parse: unknown keys, wrong types and a missing or unsupported
/// version raise InvalidConfig naming the offending key path. Missing keys
/// keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

/// Content hash of the resolved config (16 hex digits of SHA-256 over its
/// canonical dump); names run directories.
std::string config_hash(const RunConfig& c);

nlohmann::json to_json(const GridSpec& g);
GridSpec grid_from_json(const nlohmann::json& j, const std::string& where = "grid");
nlohmann::json to_json(const SyntheticConfig& c);
nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& where = "model");
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const LoraConfig& c);
LoraConfig lora_config_from_json(const nlohmann::json& j, const std::string& where = "lora");
nlohmann::json to_json(const DiffusionConfig& c);
DiffusionConfig diffusion_config_from_json(const nlohmann::json& j, const std::string& where = "diffusion");
nlohmann::json to_json(const NormalizationStats& s);
NormalizationStats stats_from_json(const nlohmann::json& j);

}  // namespace syncast
