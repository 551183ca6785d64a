#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "syncast/grid.hpp"

namespace syncast {

/// Parameters of the synthetic ERA5/CAMS stand-in. Winds advect two aerosol
/// modes (fine, coarse) from which the three PM species are derived, so PM
/// co-varies with the meteorology.
struct SyntheticConfig {
    std::uint64_t seed = 0;
    GridSpec grid = GridSpec::regular(45.0, 0.0, 32, 64, 0.25);
    int levels = 4;
    int n_steps = 240;
    int step_hours = 1;
    std::int64_t t0_hours = 0;
    int spinup_steps = 48;

    double emission_rate = 2e-10;     // mean emitted concentration per cell per hour, kg/m^3
    double emission_tail_index = 1.5;  // Pareto alpha of spike magnitudes
    double spike_events_per_step = 1.5;
    int point_sources = 3;
    double advection_gain = 1.0;
    double diffusion_coeff = 0.05;  // nondimensional D*dt/dx^2 per step
    double deposition_rate = 0.02;  // per hour, modulated by t2m
    double initial_pm = 1e-8;
    double wind_speed = 6.0;  // m/s scale of the eddy field
    double mean_zonal_wind = 2.0;
    int met_modes = 3;

    void validate() const;
};

/// Meteorology at one instant, used internally by the generator and exposed
/// for tests of the transport step.
struct WindField {
    int n_lat = 0, n_lon = 0;
    std::vector<double> u, v;  // m/s, [lat, lon]
};

/// One conservative transport step of a [lat, lon] tracer: forward
/// (scatter) semi-Lagrangian advection with bilinear weights, then explicit
/// 5-point flux-form diffusion. Longitude is periodic; latitude clamps the
/// departure index and uses zero-flux walls, so total mass is preserved.
std::vector<double> advect_diffuse_step(const std::vector<double>& tracer, const WindField& wind,
                                        const GridSpec& grid, double dt_hours, double advection_gain,
                                        double diffusion_coeff);

std::vector<AtmosphericState> gen_synthetic_sequence(const SyntheticConfig& cfg);

/// Linear interpolation in time between consecutive states; endpoints are
/// copied verbatim.
std::vector<AtmosphericState> temporal_upsample_linear(const std::vector<AtmosphericState>& seq, int factor);

struct TrainingPair {
    AtmosphericState input;
    AtmosphericState target;
};

/// Pairs (X_t, X_{t+lead}) from a fixed-cadence sequence.
std::vector<TrainingPair> make_training_pairs(const std::vector<AtmosphericState>& seq, int lead_hours);

/// Cadence of a sequence in hours (1 for a single state).
int sequence_cadence_hours(const std::vector<AtmosphericState>& seq);

}  // namespace syncast
