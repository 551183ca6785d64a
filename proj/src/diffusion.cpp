#include "syncast/diffusion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include "syncast/grid_file.hpp"

namespace syncast {

void DiffusionConfig::validate() const {
    if (n_train_steps < 1) fail(ErrorCode::InvalidConfig, "n_train_steps: must be >= 1");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        fail(ErrorCode::InvalidConfig, "beta_start/beta_end: need 0 < beta_start <= beta_end < 1");
    if (n_train_steps > 1 && !(beta_start < beta_end))
        fail(ErrorCode::InvalidConfig, "beta_start/beta_end: schedule must be strictly increasing");
    if (n_sample_steps < 1 || n_sample_steps > n_train_steps)
        fail(ErrorCode::InvalidConfig, "n_sample_steps: must lie in [1, n_train_steps]");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        fail(ErrorCode::InvalidConfig, "learning_rate: must be finite and >= 0");
    if (epochs < 0) fail(ErrorCode::InvalidConfig, "epochs: must be >= 0");
    if (batch_size < 1) fail(ErrorCode::InvalidConfig, "batch_size: must be >= 1");
    if (max_steps < 0) fail(ErrorCode::InvalidConfig, "max_steps: must be >= 0");
    if (hidden_channels < 1) fail(ErrorCode::InvalidConfig, "hidden_channels: must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
        fail(ErrorCode::InvalidConfig, "time_embed_dim: must be even and >= 2");
    if (ensemble_size < 1) fail(ErrorCode::InvalidConfig, "ensemble_size: must be >= 1");
}

NoiseSchedule NoiseSchedule::linear(int n, double beta_start, double beta_end) {
    if (n < 1) fail(ErrorCode::InvalidConfig, "schedule needs at least one step");
    NoiseSchedule s;
    s.beta.assign(static_cast<std::size_t>(n) + 1, 0.0);
    s.alpha_bar.assign(static_cast<std::size_t>(n) + 1, 1.0);
    for (int i = 1; i <= n; ++i) {
        const double frac = n > 1 ? static_cast<double>(i - 1) / (n - 1) : 0.0;
        s.beta[i] = beta_start + (beta_end - beta_start) * frac;
        s.alpha_bar[i] = s.alpha_bar[i - 1] * (1.0 - s.beta[i]);
    }
    return s;
}

PmField PmField::zeros(int n_lat, int n_lon) {
    PmField f;
    f.n_lat = n_lat;
    f.n_lon = n_lon;
    f.values.assign(static_cast<std::size_t>(n_lat) * n_lon * kPmVars, 0.0);
    return f;
}

PmField PmField::from_state(const AtmosphericState& s) {
    PmField f = zeros(s.grid.n_lat, s.grid.n_lon);
    for (std::size_t c = 0; c < f.cells(); ++c)
        for (int v = 0; v < kPmVars; ++v) f.values[c * kPmVars + v] = s.surface[c * kSurfaceVars + kPmOffset + v];
    return f;
}

NoisedField forward_noise(const PmField& x0, int i, const NoiseSchedule& schedule, Rng& rng) {
    if (i < 1 || i > schedule.steps())
        fail(ErrorCode::Index, "diffusion step " + std::to_string(i) + " outside [1, " +
                                   std::to_string(schedule.steps()) + "]", i);
    const double a = std::sqrt(schedule.alpha_bar[i]);
    const double b = std::sqrt(1.0 - schedule.alpha_bar[i]);
    NoisedField out{x0, x0};
    for (std::size_t k = 0; k < x0.values.size(); ++k) {
        const double e = rng.normal();
        out.eps.values[k] = e;
        out.x.values[k] = a * x0.values[k] + b * e;
    }
    return out;
}

ConditioningPack ConditioningPack::build(const AtmosphericState& det) {
    ConditioningPack c;
    c.n_lat = det.grid.n_lat;
    c.n_lon = det.grid.n_lon;
    c.channels = kPmVars + kSurfaceVars + det.levels * kUpperVars;
    const std::size_t cells = det.grid.cells();
    c.values.resize(cells * static_cast<std::size_t>(c.channels));
    for (std::size_t k = 0; k < cells; ++k) {
        double* dst = c.values.data() + k * static_cast<std::size_t>(c.channels);
        for (int v = 0; v < kPmVars; ++v) *dst++ = det.surface[k * kSurfaceVars + kPmOffset + v];
        for (int v = 0; v < kSurfaceVars; ++v) *dst++ = det.surface[k * kSurfaceVars + v];
        for (int z = 0; z < det.levels; ++z)
            for (int v = 0; v < kUpperVars; ++v) *dst++ = det.upper[(z * cells + k) * kUpperVars + v];
    }
    for (double v : c.values)
        if (!std::isfinite(v)) fail(ErrorCode::InvalidValue, "non-finite conditioning value");
    return c;
}

PmField ConditioningPack::deterministic_pm() const {
    PmField f = PmField::zeros(n_lat, n_lon);
    for (std::size_t k = 0; k < f.cells(); ++k)
        for (int v = 0; v < kPmVars; ++v) f.values[k * kPmVars + v] = values[k * static_cast<std::size_t>(channels) + v];
    return f;
}

// ---------------------------------------------------------------------------
// Denoiser

namespace {

// [H*W, C] -> [H*W, 9C] zero-padded 3x3 neighbourhoods, column (ky*3+kx)*C + c.
Mat im2col(const Mat& x, int h, int w) {
    const Eigen::Index C = x.cols();
    Mat p = Mat::Zero(x.rows(), 9 * C);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const Eigen::Index row = static_cast<Eigen::Index>(i) * w + j;
            for (int ky = 0; ky < 3; ++ky) {
                const int ii = i + ky - 1;
                if (ii < 0 || ii >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int jj = j + kx - 1;
                    if (jj < 0 || jj >= w) continue;
                    p.row(row).segment((ky * 3 + kx) * C, C) = x.row(static_cast<Eigen::Index>(ii) * w + jj);
                }
            }
        }
    return p;
}

Mat col2im(const Mat& dp, int h, int w, Eigen::Index C) {
    Mat dx = Mat::Zero(dp.rows(), C);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const Eigen::Index row = static_cast<Eigen::Index>(i) * w + j;
            for (int ky = 0; ky < 3; ++ky) {
                const int ii = i + ky - 1;
                if (ii < 0 || ii >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int jj = j + kx - 1;
                    if (jj < 0 || jj >= w) continue;
                    dx.row(static_cast<Eigen::Index>(ii) * w + jj) += dp.row(row).segment((ky * 3 + kx) * C, C);
                }
            }
        }
    return dx;
}

Mat step_embedding(int step, int dim) {
    Mat e(1, dim);
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * k / half);
        e(0, k) = std::sin(step * freq);
        e(0, k + half) = std::cos(step * freq);
    }
    return e;
}

struct DenoiserTape {
    LinearCache c1, c2, c3, ct;
    Mat h1, h2;
    Mat out;
};

Mat denoiser_run(const DenoiserParams& p, const PmField& x, const ConditioningPack& c, int step, DenoiserTape* tape) {
    if (x.n_lat != c.n_lat || x.n_lon != c.n_lon) fail(ErrorCode::Shape, "noised field and conditioning grids differ");
    if (c.channels != p.cond_channels)
        fail(ErrorCode::Shape, "conditioning has " + std::to_string(c.channels) + " channels, denoiser expects " +
                                   std::to_string(p.cond_channels));
    const int h = x.n_lat, w = x.n_lon;
    const Eigen::Index n = static_cast<Eigen::Index>(x.cells());
    Mat in(n, kPmVars + c.channels);
    in.leftCols(kPmVars) = ConstMatMap(x.values.data(), n, kPmVars);
    in.rightCols(c.channels) = ConstMatMap(c.values.data(), n, c.channels);

    Mat h1 = linear_forward(im2col(in, h, w), p.conv1, {}, tape ? &tape->c1 : nullptr);
    const Mat t = linear_forward(step_embedding(step, p.time_dim), p.time_proj, {}, tape ? &tape->ct : nullptr);
    h1.rowwise() += t.row(0);
    const Mat a1 = gelu(h1);
    Mat h2 = linear_forward(im2col(a1, h, w), p.conv2, {}, tape ? &tape->c2 : nullptr);
    const Mat a2 = gelu(h2);
    Mat out = linear_forward(im2col(a2, h, w), p.conv3, {}, tape ? &tape->c3 : nullptr);
    if (tape) {
        tape->h1 = std::move(h1);
        tape->h2 = std::move(h2);
    }
    return out;
}

}  // namespace

DenoiserParams DenoiserParams::init(int cond_channels, int hidden, int time_dim, std::uint64_t seed) {
    Rng rng({seed, 0x44454e4fu});
    DenoiserParams p;
    p.cond_channels = cond_channels;
    p.hidden = hidden;
    p.time_dim = time_dim;
    const auto H = static_cast<std::size_t>(hidden);
    const auto in1 = static_cast<std::size_t>(9 * (kPmVars + cond_channels));
    p.conv1 = LinearParams::make(H, in1, true);
    p.conv2 = LinearParams::make(H, 9 * H, true);
    p.conv3 = LinearParams::make(kPmVars, 9 * H, true);
    p.time_proj = LinearParams::make(H, static_cast<std::size_t>(time_dim), true);
    fill_normal(p.conv1.weight, rng, std::sqrt(2.0 / static_cast<double>(in1)));
    fill_normal(p.conv2.weight, rng, std::sqrt(2.0 / (9.0 * hidden)));
    fill_normal(p.conv3.weight, rng, 0.1 / std::sqrt(9.0 * hidden));
    fill_normal(p.time_proj.weight, rng, 1.0 / std::sqrt(static_cast<double>(time_dim)));
    return p;
}

DenoiserParams DenoiserParams::zeros_like() const {
    DenoiserParams z = *this;
    z.for_each([](const std::string&, Tensor& t) { t.zero(); });
    return z;
}

namespace {

template <class P, class Fn>
void visit_denoiser(P& p, Fn&& fn) {
    auto lin = [&](const std::string& name, auto& l) {
        fn(name + ".weight", l.weight);
        fn(name + ".bias", l.bias);
    };
    lin("conv1", p.conv1);
    lin("conv2", p.conv2);
    lin("conv3", p.conv3);
    lin("time_proj", p.time_proj);
}

}  // namespace

void DenoiserParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) { visit_denoiser(*this, fn); }
void DenoiserParams::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
    visit_denoiser(*this, fn);
}

bool DenoiserParams::operator==(const DenoiserParams& o) const {
    if (cond_channels != o.cond_channels || hidden != o.hidden || time_dim != o.time_dim || target_mean != o.target_mean ||
        target_scale != o.target_scale || x0_min != o.x0_min || x0_max != o.x0_max)
        return false;
    return conv1.weight == o.conv1.weight && conv1.bias == o.conv1.bias && conv2.weight == o.conv2.weight &&
           conv2.bias == o.conv2.bias && conv3.weight == o.conv3.weight && conv3.bias == o.conv3.bias &&
           time_proj.weight == o.time_proj.weight && time_proj.bias == o.time_proj.bias;
}

PmField denoiser_forward(const DenoiserParams& p, const PmField& x, const ConditioningPack& c, int step) {
    const Mat out = denoiser_run(p, x, c, step, nullptr);
    PmField f = PmField::zeros(x.n_lat, x.n_lon);
    MatMap(f.values.data(), out.rows(), out.cols()) = out;
    return f;
}

double denoiser_loss_and_grad(const DenoiserParams& p, const PmField& x, const ConditioningPack& c, int step,
                              const PmField& eps, DenoiserParams* grads) {
    DenoiserTape tape;
    const Mat out = denoiser_run(p, x, c, step, grads ? &tape : nullptr);
    const ConstMatMap target(eps.values.data(), out.rows(), out.cols());
    const Mat diff = out - target;
    const double n = static_cast<double>(diff.size());
    const double loss = diff.squaredNorm() / n;
    if (!grads || !std::isfinite(loss)) return loss;

    const int h = x.n_lat, w = x.n_lon;
    const Mat dout = (2.0 / n) * diff;
    const Mat dp3 = linear_backward(dout, tape.c3, p.conv3, {}, {&grads->conv3, nullptr});
    const Mat dh2 = gelu_backward(col2im(dp3, h, w, p.hidden), tape.h2);
    const Mat dp2 = linear_backward(dh2, tape.c2, p.conv2, {}, {&grads->conv2, nullptr});
    const Mat dh1 = gelu_backward(col2im(dp2, h, w, p.hidden), tape.h1);
    linear_backward(dh1, tape.c1, p.conv1, {}, {&grads->conv1, nullptr});
    const Mat dt = dh1.colwise().sum();
    linear_backward(dt, tape.ct, p.time_proj, {}, {&grads->time_proj, nullptr});
    return loss;
}

// ---------------------------------------------------------------------------
// Training

long dee_total_steps(std::size_t pairs, const DiffusionConfig& cfg) {
    const long per_epoch = static_cast<long>((pairs + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                             static_cast<std::size_t>(cfg.batch_size));
    const long full = per_epoch * cfg.epochs;
    return cfg.max_steps > 0 ? std::min(full, cfg.max_steps) : full;
}

DeeRun start_dee_run(int cond_channels, const DiffusionConfig& cfg) {
    cfg.validate();
    return DeeRun{DenoiserParams::init(cond_channels, cfg.hidden_channels, cfg.time_embed_dim, cfg.seed),
                  Adam({cfg.learning_rate}), 0, {}};
}

namespace {

PmField raw_target(const DenoisePair& pair, bool residual) {
    if (pair.target.n_lat != pair.cond.n_lat || pair.target.n_lon != pair.cond.n_lon)
        fail(ErrorCode::Shape, "target and conditioning grids differ");
    if (!residual) return pair.target;
    PmField r = pair.target;
    const PmField det = pair.cond.deterministic_pm();
    for (std::size_t k = 0; k < r.values.size(); ++k) r.values[k] -= det.values[k];
    return r;
}

PmField training_target(const DenoisePair& pair, bool residual, const DenoiserParams& p) {
    PmField r = raw_target(pair, residual);
    for (std::size_t k = 0; k < r.values.size(); ++k)
        r.values[k] = (r.values[k] - p.target_mean[k % 3]) / p.target_scale[k % 3];
    return r;
}

}  // namespace

void set_target_stats(DenoiserParams& params, const std::vector<DenoisePair>& pairs, const DiffusionConfig& cfg) {
    if (pairs.empty()) fail(ErrorCode::EmptyDataset, "no denoising pairs");
    std::array<double, 3> sum{}, sq{};
    std::array<double, 3> n{};
    for (const auto& p : pairs) {
        const PmField r = raw_target(p, cfg.residual_target);
        for (std::size_t k = 0; k < r.values.size(); ++k) {
            sum[k % 3] += r.values[k];
            n[k % 3] += 1.0;
        }
    }
    for (int v = 0; v < 3; ++v) params.target_mean[v] = sum[v] / n[v];
    for (const auto& p : pairs) {
        const PmField r = raw_target(p, cfg.residual_target);
        for (std::size_t k = 0; k < r.values.size(); ++k) {
            const double d = r.values[k] - params.target_mean[k % 3];
            sq[k % 3] += d * d;
        }
    }
    for (int v = 0; v < 3; ++v) {
        const double sd = std::sqrt(sq[v] / n[v]);
        params.target_scale[v] = sd > 0.0 && std::isfinite(sd) ? sd : 1.0;
    }
    double lo = HUGE_VAL, hi = -HUGE_VAL;
    for (const auto& p : pairs)
        for (double v : training_target(p, cfg.residual_target, params).values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    params.x0_min = lo;
    params.x0_max = hi;
}

void continue_dee(DeeRun& run, const std::vector<DenoisePair>& pairs, const DiffusionConfig& cfg, long stop_step,
                  const StepCallback& on_step) {
    cfg.validate();
    if (pairs.empty()) fail(ErrorCode::EmptyDataset, "no denoising pairs");
    const NoiseSchedule schedule = NoiseSchedule::linear(cfg.n_train_steps, cfg.beta_start, cfg.beta_end);
    const long per_epoch = static_cast<long>((pairs.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                             static_cast<std::size_t>(cfg.batch_size));
    const long end = std::min(stop_step, dee_total_steps(pairs.size(), cfg));
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order;
    int order_epoch = -1;
    while (run.step < end) {
        const int epoch = static_cast<int>(run.step / per_epoch);
        if (epoch != order_epoch) {
            order = epoch_order(pairs.size(), cfg.seed, epoch);
            order_epoch = epoch;
        }
        const std::size_t first = static_cast<std::size_t>(run.step % per_epoch) * static_cast<std::size_t>(cfg.batch_size);
        const std::size_t last = std::min(first + static_cast<std::size_t>(cfg.batch_size), pairs.size());
        Rng rng({cfg.seed, static_cast<std::uint64_t>(run.step), 0x4e4f4953u});
        DenoiserParams grads = run.params.zeros_like();
        double loss = 0.0;
        for (std::size_t b = first; b < last; ++b) {
            const DenoisePair& pair = pairs[order[b]];
            const int i = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_train_steps)));
            const NoisedField noised = forward_noise(training_target(pair, cfg.residual_target, run.params), i, schedule, rng);
            loss += denoiser_loss_and_grad(run.params, noised.x, pair.cond, i, noised.eps, &grads);
        }
        const double inv = 1.0 / static_cast<double>(last - first);
        loss *= inv;
        if (!std::isfinite(loss))
            fail(ErrorCode::TrainingDiverged, "non-finite denoising loss at step " + std::to_string(run.step), run.step);
        grads.for_each([&](const std::string&, Tensor& t) {
            for (auto& v : t.data) v *= inv;
        });
        std::vector<const Tensor*> g;
        grads.for_each([&](const std::string&, const Tensor& t) { g.push_back(&t); });
        std::vector<ParamSlot> slots;
        std::size_t k = 0;
        run.params.for_each([&](const std::string& name, Tensor& t) { slots.push_back({name, &t, g[k++], false}); });
        run.optimizer.step(slots);

        StepRecord rec;
        rec.step = run.step;
        rec.epoch = epoch;
        rec.loss = loss;
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        run.log.push_back(rec);
        if (on_step) on_step(rec);
        ++run.step;
    }
}

DeeResult train_dee(const std::vector<DenoisePair>& pairs, const DiffusionConfig& cfg) {
    if (pairs.empty()) fail(ErrorCode::EmptyDataset, "no denoising pairs");
    DeeRun run = start_dee_run(pairs.front().cond.channels, cfg);
    set_target_stats(run.params, pairs, cfg);
    continue_dee(run, pairs, cfg, dee_total_steps(pairs.size(), cfg));
    DeeResult out;
    out.params = std::move(run.params);
    out.epoch_losses = epoch_means(run.log);
    out.log = std::move(run.log);
    return out;
}

// ---------------------------------------------------------------------------
// Sampling

std::vector<int> sample_steps(int n_train_steps, int n_sample_steps) {
    if (n_sample_steps < 1 || n_sample_steps > n_train_steps)
        fail(ErrorCode::InvalidConfig, "n_sample_steps must lie in [1, n_train_steps]");
    std::vector<int> steps;
    for (int k = n_sample_steps; k >= 1; --k)
        steps.push_back(1 + static_cast<int>(static_cast<long>(k - 1) * n_train_steps / n_sample_steps));
    return steps;
}

PmField ancestral_sample(const NoisePredictor& predict_noise, int n_lat, int n_lon, const NoiseSchedule& schedule,
                         const std::vector<int>& steps, std::uint64_t seed, bool stochastic, double x0_min,
                         double x0_max) {
    Rng rng(seed);
    PmField x = PmField::zeros(n_lat, n_lon);
    for (auto& v : x.values) v = rng.normal();
    for (std::size_t k = 0; k < steps.size(); ++k) {
        const int t = steps[k];
        const int s = k + 1 < steps.size() ? steps[k + 1] : 0;
        if (t < 1 || t > schedule.steps() || s >= t) fail(ErrorCode::Index, "invalid sampling step sequence", t);
        const double ab_t = schedule.alpha_bar[t], ab_s = schedule.alpha_bar[s];
        const double beta_eff = 1.0 - ab_t / ab_s;
        const double c_x0 = std::sqrt(ab_s) * beta_eff / (1.0 - ab_t);
        const double c_xt = std::sqrt(1.0 - beta_eff) * (1.0 - ab_s) / (1.0 - ab_t);
        const double var = beta_eff * (1.0 - ab_s) / (1.0 - ab_t);
        const PmField eps = predict_noise(x, t);
        for (std::size_t i = 0; i < x.values.size(); ++i) {
            const double x0 =
                std::clamp((x.values[i] - std::sqrt(1.0 - ab_t) * eps.values[i]) / std::sqrt(ab_t), x0_min, x0_max);
            x.values[i] = c_x0 * x0 + c_xt * x.values[i];
        }
        if (stochastic && s > 0) {
            const double sd = std::sqrt(var);
            for (auto& v : x.values) v += sd * rng.normal();
        }
        for (double v : x.values)
            if (!std::isfinite(v))
                fail(ErrorCode::SamplingFailure, "non-finite sample at diffusion step " + std::to_string(t), t);
    }
    return x;
}

PmField denoise_sample(const ConditioningPack& c, const DenoiserParams& params, const DiffusionConfig& cfg,
                       std::uint64_t seed) {
    cfg.validate();
    const NoiseSchedule schedule = NoiseSchedule::linear(cfg.n_train_steps, cfg.beta_start, cfg.beta_end);
    const auto steps = sample_steps(cfg.n_train_steps, cfg.n_sample_steps);
    PmField x = ancestral_sample([&](const PmField& xi, int t) { return denoiser_forward(params, xi, c, t); },
                                 c.n_lat, c.n_lon, schedule, steps, seed, true, params.x0_min, params.x0_max);
    for (std::size_t k = 0; k < x.values.size(); ++k)
        x.values[k] = params.target_mean[k % 3] + params.target_scale[k % 3] * x.values[k];
    if (cfg.residual_target) {
        const PmField det = c.deterministic_pm();
        for (std::size_t k = 0; k < x.values.size(); ++k) x.values[k] += det.values[k];
    }
    return x;
}

// ---------------------------------------------------------------------------
// Climatology and gate

int Climatology::bucket_of(std::int64_t timestamp) const {
    if (period_hours <= 0 || buckets <= 0) fail(ErrorCode::InvalidConfig, "climatology has no buckets");
    const std::int64_t phase = ((timestamp % period_hours) + period_hours) % period_hours;
    return static_cast<int>(phase * buckets / period_hours);
}

Climatology build_climatology(const std::vector<AtmosphericState>& physical, int period_hours, int buckets) {
    if (period_hours < 1) fail(ErrorCode::InvalidConfig, "period_hours: must be >= 1");
    if (buckets < 1 || buckets > period_hours) fail(ErrorCode::InvalidConfig, "buckets: must lie in [1, period_hours]");
    if (physical.empty()) fail(ErrorCode::InsufficientData, "no states for climatology");
    const int cadence = physical.size() > 1 ? static_cast<int>(physical[1].timestamp - physical[0].timestamp) : 1;
    const std::int64_t span = physical.back().timestamp - physical.front().timestamp + cadence;
    if (span < period_hours)
        fail(ErrorCode::InsufficientData, "sequence spans " + std::to_string(span) + " h, less than one period (" +
                                              std::to_string(period_hours) + " h)");
    Climatology clim;
    clim.grid = physical.front().grid;
    clim.period_hours = period_hours;
    clim.buckets = buckets;
    const std::size_t n = clim.grid.cells() * kPmVars;
    std::vector<std::vector<double>> sum(static_cast<std::size_t>(buckets), std::vector<double>(n, 0.0));
    std::vector<std::vector<double>> sq = sum;
    std::vector<long> count(static_cast<std::size_t>(buckets), 0);
    for (const auto& s : physical) {
        if (!(s.grid == clim.grid)) fail(ErrorCode::Shape, "climatology states differ in grid");
        const auto b = static_cast<std::size_t>(clim.bucket_of(s.timestamp));
        const PmField f = PmField::from_state(s);
        for (std::size_t k = 0; k < n; ++k) sum[b][k] += f.values[k];
        ++count[b];
    }
    clim.mean.resize(static_cast<std::size_t>(buckets));
    clim.spread.resize(static_cast<std::size_t>(buckets));
    for (std::size_t b = 0; b < sum.size(); ++b) {
        if (count[b] == 0) fail(ErrorCode::InsufficientData, "climatology bucket " + std::to_string(b) + " is empty",
                                static_cast<long>(b));
        clim.mean[b].resize(n);
        for (std::size_t k = 0; k < n; ++k) clim.mean[b][k] = sum[b][k] / static_cast<double>(count[b]);
    }
    // Second pass about the mean keeps the spread exact for constant series.
    for (const auto& s : physical) {
        const auto b = static_cast<std::size_t>(clim.bucket_of(s.timestamp));
        const PmField f = PmField::from_state(s);
        for (std::size_t k = 0; k < n; ++k) {
            const double d = f.values[k] - clim.mean[b][k];
            sq[b][k] += d * d;
        }
    }
    for (std::size_t b = 0; b < sum.size(); ++b) {
        clim.spread[b].resize(n);
        for (std::size_t k = 0; k < n; ++k) clim.spread[b][k] = std::sqrt(sq[b][k] / static_cast<double>(count[b]));
    }
    return clim;
}

void write_climatology(const Climatology& clim, const std::filesystem::path& path) {
    GridContainer c;
    c.step_hours = 1;
    c.z_levels = 0;
    c.grid = clim.grid;
    c.surface_vars = {"pm1_mean", "pm2p5_mean", "pm10_mean", "pm1_spread", "pm2p5_spread", "pm10_spread"};
    c.extra["climatology"] = true;
    c.extra["period_hours"] = clim.period_hours;
    c.extra["buckets"] = clim.buckets;
    const std::size_t cells = clim.grid.cells();
    for (int b = 0; b < clim.buckets; ++b) {
        c.timestamps.push_back(b);
        GridContainer::Frame f;
        f.surface.resize(cells * 6);
        for (std::size_t k = 0; k < cells; ++k)
            for (int v = 0; v < kPmVars; ++v) {
                f.surface[k * 6 + v] = static_cast<float>(clim.mean[b][k * kPmVars + v]);
                f.surface[k * 6 + 3 + v] = static_cast<float>(clim.spread[b][k * kPmVars + v]);
            }
        c.frames.push_back(std::move(f));
    }
    write_grid_container(c, path);
}

Climatology read_climatology(const std::filesystem::path& path) {
    const GridContainer c = read_grid_container(path);
    if (!c.extra.contains("climatology") || c.extra["climatology"] != true)
        fail(ErrorCode::HeaderMismatch, "file is not a climatology ('climatology' flag missing)");
    if (!c.extra.contains("period_hours") || !c.extra.contains("buckets"))
        fail(ErrorCode::HeaderMismatch, "climatology header lacks 'period_hours' or 'buckets'");
    if (c.surface_vars.size() != 6) fail(ErrorCode::HeaderMismatch, "climatology must hold 6 surface channels");
    Climatology clim;
    clim.grid = c.grid;
    clim.period_hours = c.extra["period_hours"].get<int>();
    clim.buckets = c.extra["buckets"].get<int>();
    if (static_cast<int>(c.frames.size()) != clim.buckets)
        fail(ErrorCode::HeaderMismatch, "'buckets' disagrees with the number of frames");
    const std::size_t cells = clim.grid.cells();
    for (const auto& f : c.frames) {
        std::vector<double> m(cells * kPmVars), s(cells * kPmVars);
        for (std::size_t k = 0; k < cells; ++k)
            for (int v = 0; v < kPmVars; ++v) {
                m[k * kPmVars + v] = f.surface[k * 6 + v];
                s[k * kPmVars + v] = f.surface[k * 6 + 3 + v];
            }
        clim.mean.push_back(std::move(m));
        clim.spread.push_back(std::move(s));
    }
    return clim;
}

GateResult climatology_gate(const AtmosphericState& pred, const AtmosphericState& refined, const Climatology& clim,
                            double delta) {
    if (!(pred.grid == clim.grid) || !(refined.grid == clim.grid))
        fail(ErrorCode::Shape, "gate inputs and climatology are on different grids");
    if (std::isnan(delta)) fail(ErrorCode::InvalidConfig, "delta must not be NaN");
    const auto b = static_cast<std::size_t>(clim.bucket_of(pred.timestamp));
    GateResult out{pred, std::vector<std::uint8_t>(pred.grid.cells(), 0), 0};
    for (std::size_t k = 0; k < pred.grid.cells(); ++k)
        for (int v = 0; v < kPmVars; ++v) {
            const double spread = clim.spread[b][k * kPmVars + v];
            // An infinite margin never fires, also where the spread is zero.
            const double thr = std::isinf(delta) && delta > 0 ? INFINITY : clim.mean[b][k * kPmVars + v] + delta * spread;
            const std::size_t idx = k * kSurfaceVars + kPmOffset + v;
            if (pred.surface[idx] > thr) {
                out.state.surface[idx] = refined.surface[idx];
                out.cell[k] = 1;
                ++out.refined_values;
            }
        }
    return out;
}

RefinedForecast refine_forecast(const AtmosphericState& det_norm, const NormalizationStats& stats,
                                const DenoiserParams& params, const DiffusionConfig& cfg, const Climatology& clim,
                                double delta, std::uint64_t seed) {
    const ConditioningPack c = ConditioningPack::build(det_norm);
    auto member_physical = [&](int m) {
        const PmField x = denoise_sample(c, params, cfg, Rng({seed, static_cast<std::uint64_t>(m)}).next());
        AtmosphericState s = det_norm;
        for (std::size_t k = 0; k < x.cells(); ++k)
            for (int v = 0; v < kPmVars; ++v)
                s.surface[k * kSurfaceVars + kPmOffset + v] = static_cast<float>(x.values[k * kPmVars + v]);
        return denormalize_state(s, stats);
    };
    RefinedForecast out;
    const AtmosphericState det_phys = denormalize_state(det_norm, stats);
    out.refined_physical = member_physical(0);
    if (cfg.gate_on_mean && cfg.ensemble_size > 1) {
        // Members are averaged in physical units, where the forecast is scored.
        std::vector<double> sum(out.refined_physical.surface.begin(), out.refined_physical.surface.end());
        for (int m = 1; m < cfg.ensemble_size; ++m) {
            const AtmosphericState s = member_physical(m);
            for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += s.surface[k];
        }
        for (std::size_t k = 0; k < det_phys.grid.cells(); ++k)
            for (int v = 0; v < kPmVars; ++v) {
                const std::size_t i = k * kSurfaceVars + kPmOffset + v;
                out.refined_physical.surface[i] = static_cast<float>(sum[i] / cfg.ensemble_size);
            }
    }
    out.gated = climatology_gate(det_phys, out.refined_physical, clim, delta);
    return out;
}

}  // namespace syncast
