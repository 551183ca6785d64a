#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "syncast/forecaster.hpp"
#include "syncast/grid.hpp"
#include "syncast/nn.hpp"
#include "syncast/training.hpp"

namespace syncast {

struct DiffusionConfig {
    int n_train_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    int n_sample_steps = 50;  // strided subset of the training steps
    double learning_rate = 1e-6;
    int epochs = 5;
    int batch_size = 1;
    long max_steps = 0;  // 0 runs every epoch
    std::uint64_t seed = 0;
    int hidden_channels = 32;
    int time_embed_dim = 16;
    // Denoise the increment over the deterministic PM field instead of the
    // field itself; the sampler adds the prediction back.
    bool residual_target = true;
    int ensemble_size = 1;        // samples per forecast
    bool gate_on_mean = false;    // gate the ensemble mean instead of member 0

    void validate() const;
    bool operator==(const DiffusionConfig&) const = default;
};

/// Linear beta schedule and its cumulative products. Index 0 is the clean
/// state (alpha_bar = 1); steps run 1..N.
struct NoiseSchedule {
    std::vector<double> beta;       // size N + 1, beta[0] = 0
    std::vector<double> alpha_bar;  // size N + 1, alpha_bar[0] = 1

    static NoiseSchedule linear(int n, double beta_start, double beta_end);
    int steps() const { return static_cast<int>(beta.size()) - 1; }
};

/// Field of 3 normalized PM channels, [lat, lon, 3].
struct PmField {
    int n_lat = 0;
    int n_lon = 0;
    std::vector<double> values;

    static PmField zeros(int n_lat, int n_lon);
    static PmField from_state(const AtmosphericState& s);  // surface channels 4..6
    std::size_t cells() const { return static_cast<std::size_t>(n_lat) * n_lon; }
    bool operator==(const PmField&) const = default;
};

struct NoisedField {
    PmField x;
    PmField eps;
};

/// x_i = sqrt(abar_i) x0 + sqrt(1 - abar_i) eps, eps ~ N(0, 1) from `rng`.
NoisedField forward_noise(const PmField& x0, int i, const NoiseSchedule& schedule, Rng& rng);

/// Conditioning c: deterministic PM (3), surface (7), upper flattened by
/// level (Z*5), all normalized, [lat, lon, 10 + 5Z].
struct ConditioningPack {
    int n_lat = 0;
    int n_lon = 0;
    int channels = 0;
    std::vector<double> values;

    static ConditioningPack build(const AtmosphericState& deterministic_normalized);
    PmField deterministic_pm() const;
};

/// Three 3x3 same-padded convolutions with a sinusoidal step embedding
/// added after the first. Input channels: 3 (x_i) + conditioning.
struct DenoiserParams {
    int cond_channels = 0;
    int hidden = 0;
    int time_dim = 0;
    LinearParams conv1, conv2, conv3;  // weights [out, 9 * in]
    LinearParams time_proj;            // [hidden, time_dim]
    // Per-channel shift and scale that bring the training targets to unit
    // spread, and the range of the scaled targets; the sampler works in scaled
    // units and clips its clean-state estimate to that range. Identity and
    // unbounded until a training run sets them.
    std::array<double, 3> target_mean{0.0, 0.0, 0.0};
    std::array<double, 3> target_scale{1.0, 1.0, 1.0};
    double x0_min = -HUGE_VAL;
    double x0_max = HUGE_VAL;

    static DenoiserParams init(int cond_channels, int hidden, int time_dim, std::uint64_t seed);
    DenoiserParams zeros_like() const;
    void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    bool operator==(const DenoiserParams& o) const;
};

/// Predicted noise for x_i at step i.
PmField denoiser_forward(const DenoiserParams& p, const PmField& x, const ConditioningPack& c, int step);

/// Mean squared noise-prediction error and its gradient w.r.t. the params.
double denoiser_loss_and_grad(const DenoiserParams& p, const PmField& x, const ConditioningPack& c, int step,
                              const PmField& eps, DenoiserParams* grads);

struct DenoisePair {
    ConditioningPack cond;
    PmField target;  // normalized PM truth
};

struct DeeResult {
    DenoiserParams params;
    std::vector<double> epoch_losses;
    std::vector<StepRecord> log;
};

struct DeeRun {
    DenoiserParams params;
    Adam optimizer;
    long step = 0;
    std::vector<StepRecord> log;
};

DeeRun start_dee_run(int cond_channels, const DiffusionConfig& cfg);
/// Records the per-channel mean and population std of the training targets
/// and the range of the standardized targets in `params`.
void set_target_stats(DenoiserParams& params, const std::vector<DenoisePair>& pairs, const DiffusionConfig& cfg);
void continue_dee(DeeRun& run, const std::vector<DenoisePair>& pairs, const DiffusionConfig& cfg, long stop_step,
                  const StepCallback& on_step = {});
DeeResult train_dee(const std::vector<DenoisePair>& pairs, const DiffusionConfig& cfg);
long dee_total_steps(std::size_t pairs, const DiffusionConfig& cfg);

/// Step indices visited by the sampler, descending, ending at 1.
std::vector<int> sample_steps(int n_train_steps, int n_sample_steps);

using NoisePredictor = std::function<PmField(const PmField& x, int step)>;

/// Ancestral reverse process over the strided steps, starting from
/// N(0, 1) noise drawn from `seed`. `stochastic = false` drops the injected
/// noise (posterior-mean path). Each step's clean-state estimate is clipped
/// to [x0_min, x0_max].
PmField ancestral_sample(const NoisePredictor& predict_noise, int n_lat, int n_lon, const NoiseSchedule& schedule,
                         const std::vector<int>& steps, std::uint64_t seed, bool stochastic = true,
                         double x0_min = -HUGE_VAL, double x0_max = HUGE_VAL);

/// Refined normalized PM field for one conditioning pack.
PmField denoise_sample(const ConditioningPack& c, const DenoiserParams& params, const DiffusionConfig& cfg,
                       std::uint64_t seed);

/// Per-bucket, per-pixel mean and spread (population std) of the PM fields,
/// physical units. Bucket of time t: floor((t mod P) * buckets / P).
struct Climatology {
    GridSpec grid;
    int period_hours = 0;
    int buckets = 0;
    std::vector<std::vector<double>> mean;    // [bucket][cell * 3 + v]
    std::vector<std::vector<double>> spread;

    int bucket_of(std::int64_t timestamp) const;
};

Climatology build_climatology(const std::vector<AtmosphericState>& physical, int period_hours, int buckets);

void write_climatology(const Climatology& clim, const std::filesystem::path& path);
Climatology read_climatology(const std::filesystem::path& path);

struct GateResult {
    AtmosphericState state;          // deterministic state with gated PM channels
    std::vector<std::uint8_t> cell;  // 1 where any PM channel took the refined value
    std::size_t refined_values = 0;  // count over cells x PM channels
};

/// Pixel-wise selection in physical units: where pred > mean + delta*spread
/// take the refined PM value, elsewhere keep pred.
GateResult climatology_gate(const AtmosphericState& pred_physical, const AtmosphericState& refined_physical,
                            const Climatology& clim, double delta);

/// Deterministic prediction (normalized) -> refined prediction (physical)
/// using `cfg.ensemble_size` members and the gate.
struct RefinedForecast {
    GateResult gated;
    AtmosphericState refined_physical;  // ungated: member 0, or the physical-unit mean with gate_on_mean
};

RefinedForecast refine_forecast(const AtmosphericState& deterministic_normalized, const NormalizationStats& stats,
                                const DenoiserParams& params, const DiffusionConfig& cfg, const Climatology& clim,
                                double delta, std::uint64_t seed);

}  // namespace syncast
