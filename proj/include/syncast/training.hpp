#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "syncast/datagen.hpp"
#include "syncast/forecaster.hpp"

namespace syncast {

struct TrainConfig {
    double learning_rate = 1e-5;
    int epochs = 20;
    int batch_size = 1;
    double smooth_l1_delta = 1.0;
    std::array<double, kSurfaceVars> surface_var_weights{1.50, 0.77, 0.66, 3.00, 1.20, 1.20, 1.20};
    std::array<double, kUpperVars> upper_var_weights{1.0, 1.0, 1.0, 1.0, 1.0};
    std::uint64_t seed = 0;
    long max_steps = 0;  // stop after this many optimizer steps; 0 runs every epoch

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

double smooth_l1(double x, double y, double delta);

/// d smooth_l1 / dx.
double smooth_l1_grad(double x, double y, double delta);

/// Per-channel mean Smooth L1 (12 channels: 7 surface, 5 upper pooled
/// over levels) combined as sum(w_v * loss_v) / sum(w_v). Fills `grad`
/// with d(loss)/d(pred) when given.
double weighted_forecast_loss(const FieldSet& pred, const FieldSet& target, const TrainConfig& cfg,
                              FieldSet* grad = nullptr);
double weighted_forecast_loss(const AtmosphericState& pred, const AtmosphericState& target, const TrainConfig& cfg);

struct StepRecord {
    long step = 0;
    int epoch = 0;
    double loss = 0.0;
    double wall_seconds = 0.0;
};

/// Optimizer steps taken per epoch for a dataset of `pairs` items.
long steps_per_epoch(std::size_t pairs, const TrainConfig& cfg);
long total_steps(std::size_t pairs, const TrainConfig& cfg);

/// Sample order for one epoch; depends only on (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t pairs, std::uint64_t seed, int epoch);

/// Everything needed to continue a backbone run bit-exactly.
struct BackboneRun {
    ModelParams params;
    Adam optimizer;
    long step = 0;
    std::vector<StepRecord> log;
};

BackboneRun start_backbone_run(const ModelConfig& model_cfg, const TrainConfig& cfg);

using StepCallback = std::function<void(const StepRecord&)>;

/// Advances `run` until `stop_step` (clamped to the schedule end). Pairs
/// are normalized. Throws TrainingDiverged with the step index on a
/// non-finite loss or activation.
void continue_backbone(BackboneRun& run, const std::vector<TrainingPair>& pairs, const TrainConfig& cfg,
                       long stop_step, const StepCallback& on_step = {});

struct TrainResult {
    ModelParams params;
    std::vector<double> epoch_losses;
    std::vector<StepRecord> log;
};

TrainResult train_backbone(const std::vector<TrainingPair>& pairs, const ModelConfig& model_cfg,
                           const TrainConfig& cfg);

/// Mean of the per-epoch step losses recorded in `log`.
std::vector<double> epoch_means(const std::vector<StepRecord>& log);

struct LoraRun {
    LoraAdapterSet adapters;
    Adam optimizer;
    long step = 0;
    std::vector<StepRecord> log;
};

/// Fine-tunes adapters on regional pairs (states already cropped to
/// `region`). The base must carry the frozen flag; only adapter tensors are
/// offered to the optimizer.
void continue_lora(LoraRun& run, const ModelParams& base, const std::vector<TrainingPair>& pairs,
                   const RegionSpec& region, const TrainConfig& cfg, long stop_step, const StepCallback& on_step = {});

struct LoraResult {
    LoraAdapterSet adapters;
    std::vector<double> epoch_losses;
    std::vector<StepRecord> log;
};

LoraResult finetune_lora(const ModelParams& base, const LoraAdapterSet& adapters,
                         const std::vector<TrainingPair>& pairs, const RegionSpec& region, const TrainConfig& cfg);

/// Optimizer slots for every tensor of `params` with gradients in `grads`;
/// slots inherit `params.frozen`.
std::vector<ParamSlot> param_slots(ModelParams& params, const ModelParams& grads);
std::vector<ParamSlot> adapter_slots(LoraAdapterSet& adapters, const LoraAdapterSet& grads);

/// Loss and gradients of one pair. Gradient sinks may be null.
double loss_and_grad(const TrainingPair& pair, const ModelParams& params, const LoraAdapterSet* adapters,
                     TokenOffset offset, const TrainConfig& cfg, Rng* dropout_rng, ModelParams* grads,
                     LoraAdapterSet* lora_grads);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;   // "tensor[index]" of the worst entry
    std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-8);

/// Central differences of `f` over the entries of `x` against `grad`.
GradCheckResult grad_check_function(const std::function<double(const std::vector<double>&)>& f,
                                    const std::vector<double>& x, const std::vector<double>& grad, double eps);

/// Checks every parameter (and every adapter entry, when given) of a
/// model on one pair. Targets within 1e-3 of the Smooth L1 kink are nudged
/// away from it first.
GradCheckResult grad_check(const ModelParams& params, const TrainingPair& pair, const TrainConfig& cfg, double eps,
                           const LoraAdapterSet* adapters = nullptr);

}  // namespace syncast
