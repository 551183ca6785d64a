#include "syncast/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "syncast/rng.hpp"

namespace syncast {

namespace {

constexpr double kMetersPerDegree = 111195.0;
constexpr double kGravity = 9.80665;

struct Mode {
    int kx;
    double ky;
    double amp;
    double omega;  // rad/hour
    double phase_x;
    double phase_y;
};

std::vector<Mode> draw_modes(Rng& rng, int n) {
    std::vector<Mode> modes;
    for (int m = 0; m < n; ++m) {
        Mode md;
        md.kx = 1 + static_cast<int>(rng.below(3));
        md.ky = 0.5 + static_cast<double>(rng.below(3));
        md.amp = 0.5 + rng.uniform();
        md.omega = 2.0 * std::numbers::pi / (24.0 + 72.0 * rng.uniform());
        md.phase_x = 2.0 * std::numbers::pi * rng.uniform();
        md.phase_y = 2.0 * std::numbers::pi * rng.uniform();
        modes.push_back(md);
    }
    return modes;
}

struct Meteorology {
    WindField wind;
    std::vector<double> msl, t2m, theta;  // theta: secondary mode field in [-1, 1]
};

Meteorology compute_meteorology(const SyntheticConfig& cfg, const std::vector<Mode>& eddies,
                                const std::vector<Mode>& thermal, double t_hours) {
    const auto& g = cfg.grid;
    Meteorology met;
    met.wind.n_lat = g.n_lat;
    met.wind.n_lon = g.n_lon;
    const std::size_t cells = g.cells();
    met.wind.u.resize(cells);
    met.wind.v.resize(cells);
    met.msl.resize(cells);
    met.t2m.resize(cells);
    met.theta.resize(cells);

    double amp_sum = 0.0, grad_sum = 0.0, th_sum = 0.0;
    for (const auto& m : eddies) {
        amp_sum += m.amp;
        grad_sum += m.amp * std::max<double>(m.kx, m.ky * std::numbers::pi);
    }
    for (const auto& m : thermal) th_sum += m.amp;
    const double wind_scale = grad_sum > 0.0 ? cfg.wind_speed / grad_sum : 0.0;

    for (int i = 0; i < g.n_lat; ++i) {
        const double y = g.n_lat > 1 ? static_cast<double>(i) / (g.n_lat - 1) : 0.0;
        const double lat = g.lat_deg[i];
        for (int j = 0; j < g.n_lon; ++j) {
            const double x = 2.0 * std::numbers::pi * j / g.n_lon;
            double psi = 0.0, dpsi_dy = 0.0, dpsi_dx = 0.0;
            for (const auto& m : eddies) {
                const double ax = m.kx * x - m.omega * t_hours + m.phase_x;
                const double ay = m.ky * std::numbers::pi * y + m.phase_y;
                psi += m.amp * std::sin(ax) * std::sin(ay);
                dpsi_dy += m.amp * std::sin(ax) * m.ky * std::numbers::pi * std::cos(ay);
                dpsi_dx += m.amp * m.kx * std::cos(ax) * std::sin(ay);
            }
            double th = 0.0;
            for (const auto& m : thermal) {
                const double ax = m.kx * x - m.omega * t_hours + m.phase_x;
                const double ay = m.ky * std::numbers::pi * y + m.phase_y;
                th += m.amp * std::cos(ax) * std::sin(ay);
            }
            const std::size_t c = static_cast<std::size_t>(i) * g.n_lon + j;
            const double psin = amp_sum > 0.0 ? psi / amp_sum : 0.0;
            met.theta[c] = th_sum > 0.0 ? th / th_sum : 0.0;
            met.wind.u[c] = cfg.mean_zonal_wind + wind_scale * dpsi_dy;
            met.wind.v[c] = -wind_scale * dpsi_dx;
            met.msl[c] = 101325.0 + 1200.0 * psin;
            const double diurnal = 4.0 * std::sin(2.0 * std::numbers::pi * (t_hours / 24.0 + g.lon_deg[j] / 360.0));
            met.t2m[c] = 288.0 + 0.5 * (30.0 - lat) * 0.3 + diurnal + 2.5 * met.theta[c];
        }
    }
    return met;
}

void validate_grid_for_generation(const GridSpec& g) {
    if (g.n_lat <= 0 || g.n_lon <= 0) fail(ErrorCode::InvalidConfig, "grid: zero-area grid");
    try {
        g.validate();
    } catch (const Error& e) {
        fail(ErrorCode::InvalidConfig, std::string("grid: ") + e.what());
    }
}

}  // namespace

void SyntheticConfig::validate() const {
    validate_grid_for_generation(grid);
    if (levels < 2 || levels > 13) fail(ErrorCode::InvalidConfig, "levels: must be in [2, 13]");
    if (n_steps < 1) fail(ErrorCode::InvalidConfig, "n_steps: must be positive");
    if (step_hours < 1) fail(ErrorCode::InvalidConfig, "step_hours: must be positive");
    if (spinup_steps < 0) fail(ErrorCode::InvalidConfig, "spinup_steps: must be nonnegative");
    if (!(emission_rate >= 0.0)) fail(ErrorCode::InvalidConfig, "emission_rate: must be nonnegative");
    if (!(emission_tail_index > 1.0))
        fail(ErrorCode::InvalidConfig, "emission_tail_index: must exceed 1 for a finite mean");
    if (!(spike_events_per_step >= 0.0)) fail(ErrorCode::InvalidConfig, "spike_events_per_step: must be nonnegative");
    if (point_sources < 0) fail(ErrorCode::InvalidConfig, "point_sources: must be nonnegative");
    if (!std::isfinite(advection_gain)) fail(ErrorCode::InvalidConfig, "advection_gain: must be finite");
    if (!(diffusion_coeff >= 0.0 && diffusion_coeff <= 0.25))
        fail(ErrorCode::InvalidConfig, "diffusion_coeff: must lie in [0, 0.25] for a stable explicit step");
    if (!(deposition_rate >= 0.0)) fail(ErrorCode::InvalidConfig, "deposition_rate: must be nonnegative");
    if (!(initial_pm >= 0.0)) fail(ErrorCode::InvalidConfig, "initial_pm: must be nonnegative");
    if (!(wind_speed >= 0.0)) fail(ErrorCode::InvalidConfig, "wind_speed: must be nonnegative");
    if (met_modes < 0) fail(ErrorCode::InvalidConfig, "met_modes: must be nonnegative");
}

std::vector<double> advect_diffuse_step(const std::vector<double>& tracer, const WindField& wind,
                                        const GridSpec& g, double dt_hours, double advection_gain,
                                        double diffusion_coeff) {
    const int nl = g.n_lat, nm = g.n_lon;
    if (tracer.size() != g.cells() || wind.u.size() != g.cells() || wind.v.size() != g.cells())
        fail(ErrorCode::Shape, "tracer/wind size does not match grid");
    const double lat_step = nl > 1 ? g.lat_deg[1] - g.lat_deg[0] : -g.resolution_deg;
    const double seconds = dt_hours * 3600.0 * advection_gain;

    std::vector<double> moved(tracer.size(), 0.0);
    for (int i = 0; i < nl; ++i) {
        const double coslat = std::max(std::cos(g.lat_deg[i] * std::numbers::pi / 180.0), 0.05);
        for (int j = 0; j < nm; ++j) {
            const std::size_t c = static_cast<std::size_t>(i) * nm + j;
            const double mass = tracer[c];
            if (mass == 0.0) continue;
            const double di = wind.v[c] * seconds / (kMetersPerDegree * lat_step);
            const double dj = wind.u[c] * seconds / (kMetersPerDegree * g.resolution_deg * coslat);
            const double pi = i + di, pj = j + dj;
            const double fi = std::floor(pi), fj = std::floor(pj);
            const double wi = pi - fi, wj = pj - fj;
            const long ii = static_cast<long>(fi), jj = static_cast<long>(fj);
            for (int a = 0; a < 2; ++a) {
                const long row = std::clamp<long>(ii + a, 0, nl - 1);
                const double w_row = a == 0 ? 1.0 - wi : wi;
                if (w_row == 0.0) continue;
                for (int b = 0; b < 2; ++b) {
                    const double w_col = b == 0 ? 1.0 - wj : wj;
                    if (w_col == 0.0) continue;
                    long col = (jj + b) % nm;
                    if (col < 0) col += nm;
                    moved[static_cast<std::size_t>(row) * nm + static_cast<std::size_t>(col)] += mass * w_row * w_col;
                }
            }
        }
    }
    if (diffusion_coeff == 0.0) return moved;

    std::vector<double> out(moved.size());
    for (int i = 0; i < nl; ++i)
        for (int j = 0; j < nm; ++j) {
            const std::size_t c = static_cast<std::size_t>(i) * nm + j;
            const double here = moved[c];
            double flux = 0.0;
            flux += moved[static_cast<std::size_t>(i) * nm + (j + 1) % nm] - here;
            flux += moved[static_cast<std::size_t>(i) * nm + (j + nm - 1) % nm] - here;
            if (i > 0) flux += moved[c - nm] - here;
            if (i < nl - 1) flux += moved[c + nm] - here;
            out[c] = here + diffusion_coeff * flux;
        }
    return out;
}

std::vector<AtmosphericState> gen_synthetic_sequence(const SyntheticConfig& cfg) {
    cfg.validate();
    const auto& g = cfg.grid;
    const std::size_t cells = g.cells();
    const auto catalog = VariableCatalog::standard(cfg.levels);

    Rng rng({cfg.seed, 0x53594e43u});
    const auto eddies = draw_modes(rng, cfg.met_modes);
    const auto thermal = draw_modes(rng, std::max(cfg.met_modes - 1, 1));
    std::vector<std::size_t> sources;
    for (int s = 0; s < cfg.point_sources; ++s) sources.push_back(rng.below(cells));

    std::vector<double> fine(cells, cfg.initial_pm * 0.7), coarse(cells, cfg.initial_pm * 0.3);

    const double dt = cfg.step_hours;
    const double emitted = cfg.emission_rate * dt;  // per cell per step
    const double pareto_mean = cfg.emission_tail_index / (cfg.emission_tail_index - 1.0);
    // Emission budget split: background, persistent sources, heavy-tailed spikes.
    const double bg_share = 0.3, src_share = sources.empty() ? 0.0 : 0.3;
    const double spike_share = cfg.spike_events_per_step > 0.0 ? 1.0 - bg_share - src_share : 0.0;

    std::vector<AtmosphericState> out;
    out.reserve(static_cast<std::size_t>(cfg.n_steps));
    const int total = cfg.spinup_steps + cfg.n_steps;
    for (int step = 0; step < total; ++step) {
        const double t_hours = static_cast<double>(cfg.t0_hours) + (step - cfg.spinup_steps) * dt;
        const Meteorology met = compute_meteorology(cfg, eddies, thermal, t_hours);

        if (step >= cfg.spinup_steps) {
            AtmosphericState s = AtmosphericState::zeros(g, cfg.levels,
                                                         cfg.t0_hours + static_cast<std::int64_t>(step - cfg.spinup_steps) * cfg.step_hours);
            for (std::size_t c = 0; c < cells; ++c) {
                const int i = static_cast<int>(c / g.n_lon), j = static_cast<int>(c % g.n_lon);
                s.sfc(i, j, 0) = static_cast<float>(met.msl[c]);
                s.sfc(i, j, 1) = static_cast<float>(met.wind.u[c]);
                s.sfc(i, j, 2) = static_cast<float>(met.wind.v[c]);
                s.sfc(i, j, 3) = static_cast<float>(met.t2m[c]);
                s.sfc(i, j, 4) = static_cast<float>(0.6 * fine[c]);
                s.sfc(i, j, 5) = static_cast<float>(fine[c] + 0.1 * coarse[c]);
                s.sfc(i, j, 6) = static_cast<float>(fine[c] + coarse[c]);
                const double psin = (met.msl[c] - 101325.0) / 1200.0;
                for (int z = 0; z < cfg.levels; ++z) {
                    const double p = catalog.pressure_levels[static_cast<std::size_t>(z)];
                    const double lift = 1.0 + 1.2 * (1.0 - p / 1000.0);
                    const double geo = kGravity * 7200.0 * std::log(1013.25 / p) + 200.0 * psin * (1.0 + z);
                    s.up(z, i, j, 0) = static_cast<float>(geo);
                    s.up(z, i, j, 1) = static_cast<float>(std::max(0.0, 0.012 * std::pow(p / 1000.0, 3.0) * (1.0 + 0.3 * met.theta[c])));
                    s.up(z, i, j, 2) = static_cast<float>(met.wind.u[c] * lift);
                    s.up(z, i, j, 3) = static_cast<float>(met.wind.v[c] * lift);
                    s.up(z, i, j, 4) = static_cast<float>(met.t2m[c] - 6.5e-3 * geo / kGravity);
                }
            }
            out.push_back(std::move(s));
        }
        if (step == total - 1) break;

        fine = advect_diffuse_step(fine, met.wind, g, dt, cfg.advection_gain, cfg.diffusion_coeff);
        coarse = advect_diffuse_step(coarse, met.wind, g, dt, cfg.advection_gain, cfg.diffusion_coeff);
        if (cfg.deposition_rate > 0.0) {
            for (std::size_t c = 0; c < cells; ++c) {
                // Warmer air mixes and ventilates faster.
                const double k = cfg.deposition_rate * (1.0 + 0.5 * std::tanh((met.t2m[c] - 288.0) / 5.0));
                fine[c] *= std::exp(-k * dt);
                coarse[c] *= std::exp(-2.0 * k * dt);
            }
        }
        if (emitted > 0.0) {
            const double bg = bg_share * emitted;
            for (std::size_t c = 0; c < cells; ++c) {
                fine[c] += 0.7 * bg;
                coarse[c] += 0.3 * bg;
            }
            if (!sources.empty()) {
                const double per_source = src_share * emitted * static_cast<double>(cells) / sources.size();
                for (auto c : sources) {
                    fine[c] += 0.8 * per_source;
                    coarse[c] += 0.2 * per_source;
                }
            }
            if (spike_share > 0.0) {
                const int events = rng.poisson(cfg.spike_events_per_step);
                const double unit = spike_share * emitted * static_cast<double>(cells) / cfg.spike_events_per_step / pareto_mean;
                for (int e = 0; e < events; ++e) {
                    const std::size_t c = rng.below(cells);
                    const double mass = unit * rng.pareto(cfg.emission_tail_index);
                    fine[c] += 0.3 * mass;
                    coarse[c] += 0.7 * mass;
                }
            }
        }
    }
    return out;
}

int sequence_cadence_hours(const std::vector<AtmosphericState>& seq) {
    if (seq.size() < 2) return 1;
    const std::int64_t cadence = seq[1].timestamp - seq[0].timestamp;
    if (cadence <= 0) fail(ErrorCode::InvalidConfig, "sequence timestamps must increase");
    for (std::size_t k = 2; k < seq.size(); ++k)
        if (seq[k].timestamp - seq[k - 1].timestamp != cadence)
            fail(ErrorCode::InvalidConfig, "sequence cadence is not uniform");
    return static_cast<int>(cadence);
}

std::vector<AtmosphericState> temporal_upsample_linear(const std::vector<AtmosphericState>& seq, int factor) {
    if (factor < 1) fail(ErrorCode::InvalidConfig, "factor: must be >= 1");
    if (seq.size() < 2) fail(ErrorCode::InvalidConfig, "sequence must hold at least 2 states");
    const int cadence = sequence_cadence_hours(seq);
    if (factor == 1) return seq;
    if (cadence % factor != 0) fail(ErrorCode::InvalidConfig, "factor must divide the cadence in hours");
    const int sub = cadence / factor;

    std::vector<AtmosphericState> out;
    out.reserve((seq.size() - 1) * static_cast<std::size_t>(factor) + 1);
    for (std::size_t k = 0; k + 1 < seq.size(); ++k) {
        const auto& a = seq[k];
        const auto& b = seq[k + 1];
        if (!a.same_layout(b)) fail(ErrorCode::Shape, "states in sequence differ in layout");
        out.push_back(a);
        for (int m = 1; m < factor; ++m) {
            const double frac = static_cast<double>(m) / factor;
            AtmosphericState s = a;
            s.timestamp = a.timestamp + static_cast<std::int64_t>(m) * sub;
            for (std::size_t e = 0; e < s.upper.size(); ++e)
                s.upper[e] = static_cast<float>(a.upper[e] + (static_cast<double>(b.upper[e]) - a.upper[e]) * frac);
            for (std::size_t e = 0; e < s.surface.size(); ++e)
                s.surface[e] = static_cast<float>(a.surface[e] + (static_cast<double>(b.surface[e]) - a.surface[e]) * frac);
            out.push_back(std::move(s));
        }
    }
    out.push_back(seq.back());
    return out;
}

std::vector<TrainingPair> make_training_pairs(const std::vector<AtmosphericState>& seq, int lead_hours) {
    if (lead_hours <= 0) fail(ErrorCode::InvalidConfig, "lead_hours: must be positive");
    if (seq.empty()) fail(ErrorCode::EmptyDataset, "empty sequence");
    const int cadence = sequence_cadence_hours(seq);
    if (lead_hours % cadence != 0) fail(ErrorCode::InvalidConfig, "lead_hours: must be a multiple of the cadence");
    const std::size_t lead_steps = static_cast<std::size_t>(lead_hours / cadence);
    if (lead_steps >= seq.size()) fail(ErrorCode::EmptyDataset, "lead time longer than the sequence");
    std::vector<TrainingPair> pairs;
    pairs.reserve(seq.size() - lead_steps);
    for (std::size_t k = 0; k + lead_steps < seq.size(); ++k) pairs.push_back({seq[k], seq[k + lead_steps]});
    return pairs;
}

}  // namespace syncast
