#include "syncast/training.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace syncast {

void TrainConfig::validate() const {
    // Zero is accepted so a run can be replayed without moving the weights.
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        fail(ErrorCode::InvalidConfig, "learning_rate: must be finite and >= 0");
    if (epochs < 0) fail(ErrorCode::InvalidConfig, "epochs: must be >= 0");
    if (batch_size < 1) fail(ErrorCode::InvalidConfig, "batch_size: must be >= 1");
    if (!(smooth_l1_delta > 0.0)) fail(ErrorCode::InvalidConfig, "smooth_l1_delta: must be positive");
    if (max_steps < 0) fail(ErrorCode::InvalidConfig, "max_steps: must be >= 0");
    double total = 0.0;
    for (double w : surface_var_weights) {
        if (!(w >= 0.0)) fail(ErrorCode::InvalidConfig, "surface_var_weights: entries must be >= 0");
        total += w;
    }
    for (double w : upper_var_weights) {
        if (!(w >= 0.0)) fail(ErrorCode::InvalidConfig, "upper_var_weights: entries must be >= 0");
        total += w;
    }
    if (!(total > 0.0)) fail(ErrorCode::InvalidConfig, "surface_var_weights/upper_var_weights: need one positive weight");
}

double smooth_l1(double x, double y, double delta) {
    if (!(delta > 0.0)) fail(ErrorCode::InvalidConfig, "smooth L1 delta must be positive");
    const double d = std::abs(x - y);
    return d < delta ? 0.5 * d * d : delta * (d - 0.5 * delta);
}

double smooth_l1_grad(double x, double y, double delta) {
    const double d = x - y;
    if (std::abs(d) < delta) return d;
    return d > 0 ? delta : -delta;
}

double weighted_forecast_loss(const FieldSet& pred, const FieldSet& target, const TrainConfig& cfg, FieldSet* grad) {
    if (pred.levels != target.levels || pred.n_lat != target.n_lat || pred.n_lon != target.n_lon ||
        pred.upper.size() != target.upper.size() || pred.surface.size() != target.surface.size())
        fail(ErrorCode::Shape, "prediction and target shapes differ");
    const double delta = cfg.smooth_l1_delta;
    if (!(delta > 0.0)) fail(ErrorCode::InvalidConfig, "smooth_l1_delta: must be positive");
    double wsum = 0.0;
    for (double w : cfg.surface_var_weights) wsum += w;
    for (double w : cfg.upper_var_weights) wsum += w;
    if (!(wsum > 0.0)) fail(ErrorCode::InvalidConfig, "loss weights sum to zero");

    if (grad) *grad = FieldSet::zeros(pred.levels, pred.n_lat, pred.n_lon);
    const std::size_t cells = static_cast<std::size_t>(pred.n_lat) * pred.n_lon;

    std::array<double, kSurfaceVars> sfc{};
    for (std::size_t c = 0; c < cells; ++c)
        for (int v = 0; v < kSurfaceVars; ++v) {
            const std::size_t k = c * kSurfaceVars + v;
            sfc[v] += smooth_l1(pred.surface[k], target.surface[k], delta);
        }
    std::array<double, kUpperVars> up{};
    const std::size_t up_points = cells * static_cast<std::size_t>(pred.levels);
    for (std::size_t c = 0; c < up_points; ++c)
        for (int v = 0; v < kUpperVars; ++v) {
            const std::size_t k = c * kUpperVars + v;
            up[v] += smooth_l1(pred.upper[k], target.upper[k], delta);
        }

    double total = 0.0;
    for (int v = 0; v < kSurfaceVars; ++v) total += cfg.surface_var_weights[v] * sfc[v] / static_cast<double>(cells);
    for (int v = 0; v < kUpperVars; ++v) total += cfg.upper_var_weights[v] * up[v] / static_cast<double>(up_points);
    total /= wsum;

    if (grad) {
        for (std::size_t c = 0; c < cells; ++c)
            for (int v = 0; v < kSurfaceVars; ++v) {
                const std::size_t k = c * kSurfaceVars + v;
                grad->surface[k] = cfg.surface_var_weights[v] / (wsum * static_cast<double>(cells)) *
                                   smooth_l1_grad(pred.surface[k], target.surface[k], delta);
            }
        for (std::size_t c = 0; c < up_points; ++c)
            for (int v = 0; v < kUpperVars; ++v) {
                const std::size_t k = c * kUpperVars + v;
                grad->upper[k] = cfg.upper_var_weights[v] / (wsum * static_cast<double>(up_points)) *
                                 smooth_l1_grad(pred.upper[k], target.upper[k], delta);
            }
    }
    return total;
}

double weighted_forecast_loss(const AtmosphericState& pred, const AtmosphericState& target, const TrainConfig& cfg) {
    if (!pred.same_layout(target)) fail(ErrorCode::Shape, "prediction and target grids differ");
    return weighted_forecast_loss(FieldSet::from_state(pred), FieldSet::from_state(target), cfg, nullptr);
}

long steps_per_epoch(std::size_t pairs, const TrainConfig& cfg) {
    return static_cast<long>((pairs + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size));
}

long total_steps(std::size_t pairs, const TrainConfig& cfg) {
    const long full = steps_per_epoch(pairs, cfg) * cfg.epochs;
    return cfg.max_steps > 0 ? std::min(full, cfg.max_steps) : full;
}

std::vector<std::size_t> epoch_order(std::size_t pairs, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(pairs);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng({seed, static_cast<std::uint64_t>(epoch), 0x53485546u});
    rng.shuffle(order);
    return order;
}

std::vector<double> epoch_means(const std::vector<StepRecord>& log) {
    std::vector<double> sums, counts;
    for (const auto& r : log) {
        if (r.epoch >= static_cast<int>(sums.size())) {
            sums.resize(static_cast<std::size_t>(r.epoch) + 1, 0.0);
            counts.resize(sums.size(), 0.0);
        }
        sums[static_cast<std::size_t>(r.epoch)] += r.loss;
        counts[static_cast<std::size_t>(r.epoch)] += 1.0;
    }
    std::vector<double> out;
    for (std::size_t e = 0; e < sums.size(); ++e)
        if (counts[e] > 0) out.push_back(sums[e] / counts[e]);
    return out;
}

std::vector<ParamSlot> param_slots(ModelParams& params, const ModelParams& grads) {
    std::vector<const Tensor*> g;
    grads.for_each([&](const std::string&, const Tensor& t) { g.push_back(&t); });
    std::vector<ParamSlot> slots;
    std::size_t k = 0;
    params.for_each([&](const std::string& name, Tensor& t) {
        slots.push_back({name, &t, g.at(k++), params.frozen});
    });
    return slots;
}

std::vector<ParamSlot> adapter_slots(LoraAdapterSet& adapters, const LoraAdapterSet& grads) {
    std::vector<const Tensor*> g;
    grads.for_each([&](const std::string&, const Tensor& t) { g.push_back(&t); });
    std::vector<ParamSlot> slots;
    std::size_t k = 0;
    adapters.for_each([&](const std::string& name, Tensor& t) { slots.push_back({name, &t, g.at(k++), false}); });
    return slots;
}

double loss_and_grad(const TrainingPair& pair, const ModelParams& params, const LoraAdapterSet* adapters,
                     TokenOffset offset, const TrainConfig& cfg, Rng* dropout_rng, ModelParams* grads,
                     LoraAdapterSet* lora_grads) {
    const FieldSet input = FieldSet::from_state(pair.input);
    const FieldSet target = FieldSet::from_state(pair.target);
    ForecasterTape tape(input, params, adapters, offset, dropout_rng);
    FieldSet dout;
    const bool want_grad = grads || lora_grads;
    const double loss = weighted_forecast_loss(tape.output(), target, cfg, want_grad ? &dout : nullptr);
    if (want_grad && std::isfinite(loss)) tape.backward(dout, grads, lora_grads);
    return loss;
}

namespace {

template <class Grads>
void scale_grads(Grads& g, double s) {
    g.for_each([&](const std::string&, Tensor& t) {
        for (auto& v : t.data) v *= s;
    });
}

// Shared loop for backbone and adapter training. `step_fn(batch, step)`
// returns the mean batch loss after applying one optimizer update.
template <class StepFn>
void run_schedule(long& step, std::vector<StepRecord>& log, std::size_t n_pairs, const TrainConfig& cfg,
                  long stop_step, const StepCallback& on_step, StepFn&& step_fn) {
    const long per_epoch = steps_per_epoch(n_pairs, cfg);
    const long end = std::min(stop_step, total_steps(n_pairs, cfg));
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order;
    int order_epoch = -1;
    while (step < end) {
        const int epoch = static_cast<int>(step / per_epoch);
        if (epoch != order_epoch) {
            order = epoch_order(n_pairs, cfg.seed, epoch);
            order_epoch = epoch;
        }
        const std::size_t first = static_cast<std::size_t>(step % per_epoch) * static_cast<std::size_t>(cfg.batch_size);
        const std::size_t last = std::min(first + static_cast<std::size_t>(cfg.batch_size), n_pairs);
        std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(first),
                                       order.begin() + static_cast<std::ptrdiff_t>(last));
        double loss = 0.0;
        try {
            loss = step_fn(batch, step);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NumericFailure) throw;
            fail(ErrorCode::TrainingDiverged, "step " + std::to_string(step) + ": " + e.what(), step);
        }
        if (!std::isfinite(loss))
            fail(ErrorCode::TrainingDiverged, "non-finite loss at step " + std::to_string(step), step);
        StepRecord rec;
        rec.step = step;
        rec.epoch = epoch;
        rec.loss = loss;
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.push_back(rec);
        if (on_step) on_step(rec);
        ++step;
    }
}

Rng step_rng(std::uint64_t seed, long step) { return Rng({seed, static_cast<std::uint64_t>(step), 0x44524f50u}); }

}  // namespace

BackboneRun start_backbone_run(const ModelConfig& model_cfg, const TrainConfig& cfg) {
    cfg.validate();
    BackboneRun run{ModelParams::init(model_cfg, cfg.seed), Adam({cfg.learning_rate}), 0, {}};
    return run;
}

void continue_backbone(BackboneRun& run, const std::vector<TrainingPair>& pairs, const TrainConfig& cfg,
                       long stop_step, const StepCallback& on_step) {
    cfg.validate();
    if (pairs.empty()) fail(ErrorCode::EmptyDataset, "no training pairs");
    run_schedule(run.step, run.log, pairs.size(), cfg, stop_step, on_step,
                 [&](const std::vector<std::size_t>& batch, long step) {
                     ModelParams grads = run.params.zeros_like();
                     Rng rng = step_rng(cfg.seed, step);
                     double loss = 0.0;
                     for (std::size_t idx : batch)
                         loss += loss_and_grad(pairs[idx], run.params, nullptr, {}, cfg, &rng, &grads, nullptr);
                     const double inv = 1.0 / static_cast<double>(batch.size());
                     loss *= inv;
                     if (!std::isfinite(loss)) return loss;
                     scale_grads(grads, inv);
                     run.optimizer.step(param_slots(run.params, grads));
                     return loss;
                 });
}

TrainResult train_backbone(const std::vector<TrainingPair>& pairs, const ModelConfig& model_cfg,
                           const TrainConfig& cfg) {
    BackboneRun run = start_backbone_run(model_cfg, cfg);
    continue_backbone(run, pairs, cfg, total_steps(pairs.size(), cfg));
    TrainResult out;
    out.params = std::move(run.params);
    out.epoch_losses = epoch_means(run.log);
    out.log = std::move(run.log);
    return out;
}

void continue_lora(LoraRun& run, const ModelParams& base, const std::vector<TrainingPair>& pairs,
                   const RegionSpec& region, const TrainConfig& cfg, long stop_step, const StepCallback& on_step) {
    cfg.validate();
    if (!base.frozen) fail(ErrorCode::InvalidConfig, "base parameters must be frozen before adapter fine-tuning");
    if (pairs.empty()) fail(ErrorCode::EmptyDataset, "no regional training pairs");
    const TokenOffset offset = token_offset(region, base.config);
    run_schedule(run.step, run.log, pairs.size(), cfg, stop_step, on_step,
                 [&](const std::vector<std::size_t>& batch, long step) {
                     LoraAdapterSet grads = run.adapters.zeros_like();
                     Rng rng = step_rng(cfg.seed, step);
                     double loss = 0.0;
                     for (std::size_t idx : batch)
                         loss += loss_and_grad(pairs[idx], base, &run.adapters, offset, cfg, &rng, nullptr, &grads);
                     const double inv = 1.0 / static_cast<double>(batch.size());
                     loss *= inv;
                     if (!std::isfinite(loss)) return loss;
                     scale_grads(grads, inv);
                     run.optimizer.step(adapter_slots(run.adapters, grads));
                     return loss;
                 });
}

LoraResult finetune_lora(const ModelParams& base, const LoraAdapterSet& adapters,
                         const std::vector<TrainingPair>& pairs, const RegionSpec& region, const TrainConfig& cfg) {
    cfg.validate();
    LoraRun run{adapters, Adam({cfg.learning_rate}), 0, {}};
    continue_lora(run, base, pairs, region, cfg, total_steps(pairs.size(), cfg));
    LoraResult out;
    out.adapters = std::move(run.adapters);
    out.epoch_losses = epoch_means(run.log);
    out.log = std::move(run.log);
    return out;
}

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check_function(const std::function<double(const std::vector<double>&)>& f,
                                    const std::vector<double>& x, const std::vector<double>& grad, double eps) {
    if (x.size() != grad.size()) fail(ErrorCode::Shape, "gradient length differs from point length");
    GradCheckResult r;
    std::vector<double> p = x;
    for (std::size_t k = 0; k < x.size(); ++k) {
        p[k] = x[k] + eps;
        const double fp = f(p);
        p[k] = x[k] - eps;
        const double fm = f(p);
        p[k] = x[k];
        const double err = relative_error(grad[k], (fp - fm) / (2.0 * eps));
        if (err > r.max_rel_error || r.checked == 0) {
            r.max_rel_error = std::max(r.max_rel_error, err);
            r.worst = "x[" + std::to_string(k) + "]";
        }
        ++r.checked;
    }
    return r;
}

// Entries whose true gradient is below this are dominated by the
// finite-difference roundoff (about |loss| * 1e-16 / eps).
constexpr double kGradFloor = 1e-6;

GradCheckResult grad_check(const ModelParams& params, const TrainingPair& pair, const TrainConfig& cfg, double eps,
                           const LoraAdapterSet* adapters) {
    ModelParams work = params;
    work.config.drop_rate = 0.0;
    std::optional<LoraAdapterSet> lora;
    if (adapters) {
        lora = *adapters;
        lora->config.dropout = 0.0;
    }
    const LoraAdapterSet* lp = lora ? &*lora : nullptr;

    // Keep every residual at least 1e-3 away from the Smooth L1 kink.
    TrainingPair p = pair;
    const AtmosphericState pred = forward(p.input, work, lp);
    const double delta = cfg.smooth_l1_delta;
    auto nudge = [&](const std::vector<float>& out, std::vector<float>& tgt) {
        for (std::size_t k = 0; k < tgt.size(); ++k) {
            const double d = static_cast<double>(out[k]) - tgt[k];
            if (std::abs(std::abs(d) - delta) < 1e-3)
                tgt[k] = static_cast<float>(out[k] - (d > 0 ? 1.0 : -1.0) * (delta - 2e-3));
        }
    };
    nudge(pred.upper, p.target.upper);
    nudge(pred.surface, p.target.surface);

    ModelParams grads = work.zeros_like();
    LoraAdapterSet lgrads;
    if (lp) lgrads = lp->zeros_like();
    loss_and_grad(p, work, lp, {}, cfg, nullptr, &grads, lp ? &lgrads : nullptr);

    GradCheckResult r;
    auto check_tensor = [&](const std::string& name, Tensor& value, const Tensor& g) {
        for (std::size_t k = 0; k < value.data.size(); ++k) {
            const double orig = value.data[k];
            value.data[k] = orig + eps;
            const double fp = loss_and_grad(p, work, lp, {}, cfg, nullptr, nullptr, nullptr);
            value.data[k] = orig - eps;
            const double fm = loss_and_grad(p, work, lp, {}, cfg, nullptr, nullptr, nullptr);
            value.data[k] = orig;
            const double err = relative_error(g.data[k], (fp - fm) / (2.0 * eps), kGradFloor);
            if (err > r.max_rel_error || r.checked == 0) {
                r.max_rel_error = std::max(r.max_rel_error, err);
                r.worst = name + "[" + std::to_string(k) + "] " + std::to_string(g.data[k]) + " vs " + std::to_string((fp - fm) / (2.0 * eps));
            }
            ++r.checked;
        }
    };
    std::vector<const Tensor*> gp;
    grads.for_each([&](const std::string&, const Tensor& t) { gp.push_back(&t); });
    std::size_t idx = 0;
    work.for_each([&](const std::string& name, Tensor& t) { check_tensor(name, t, *gp[idx++]); });
    if (lp) {
        std::vector<const Tensor*> gl;
        lgrads.for_each([&](const std::string&, const Tensor& t) { gl.push_back(&t); });
        idx = 0;
        lora->for_each([&](const std::string& name, Tensor& t) { check_tensor(name, t, *gl[idx++]); });
    }
    return r;
}

}  // namespace syncast
