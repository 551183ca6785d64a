#include "syncast/grid.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace syncast {

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidGrid: return "invalid-grid";
        case ErrorCode::InvalidRegion: return "invalid-region";
        case ErrorCode::InvalidValue: return "invalid-value";
        case ErrorCode::InvalidStats: return "invalid-stats";
        case ErrorCode::InvalidConfig: return "invalid-config";
        case ErrorCode::MagicMismatch: return "magic-mismatch";
        case ErrorCode::TruncatedPayload: return "truncated-payload";
        case ErrorCode::HeaderMismatch: return "header-mismatch";
        case ErrorCode::ChecksumMismatch: return "checksum-mismatch";
        case ErrorCode::Io: return "io";
        case ErrorCode::Shape: return "shape";
        case ErrorCode::Alignment: return "alignment";
        case ErrorCode::NumericFailure: return "numeric-failure";
        case ErrorCode::TrainingDiverged: return "training-diverged";
        case ErrorCode::FrozenViolation: return "frozen-violation";
        case ErrorCode::Index: return "index";
        case ErrorCode::SamplingFailure: return "sampling-failure";
        case ErrorCode::InsufficientData: return "insufficient-data";
        case ErrorCode::DivisionByZero: return "division-by-zero";
        case ErrorCode::UndefinedRate: return "undefined-rate";
        case ErrorCode::EmptyDataset: return "empty-dataset";
    }
    return "unknown";
}

namespace {

constexpr double kSpacingTol = 1e-9;

void check_axis(const std::vector<double>& axis, double res, const char* name, double lo, double hi) {
    for (std::size_t k = 0; k < axis.size(); ++k) {
        if (!std::isfinite(axis[k]) || axis[k] < lo || axis[k] > hi)
            fail(ErrorCode::InvalidGrid, std::string(name) + " value out of range at index " + std::to_string(k));
        if (k > 0) {
            const double step = std::abs(axis[k] - axis[k - 1]);
            if (std::abs(step - res) > kSpacingTol)
                fail(ErrorCode::InvalidGrid, std::string(name) + " spacing differs from resolution_deg at index " +
                                                 std::to_string(k));
        }
    }
    if (axis.size() > 2) {
        const bool up = axis[1] > axis[0];
        for (std::size_t k = 1; k < axis.size(); ++k)
            if ((axis[k] > axis[k - 1]) != up)
                fail(ErrorCode::InvalidGrid, std::string(name) + " not strictly monotonic");
    }
}

}  // namespace

GridSpec GridSpec::regular(double lat0, double lon0, int n_lat, int n_lon, double res, bool descending) {
    GridSpec g;
    g.n_lat = n_lat;
    g.n_lon = n_lon;
    g.resolution_deg = res;
    if (n_lat > 0) g.lat_deg.resize(static_cast<std::size_t>(n_lat));
    if (n_lon > 0) g.lon_deg.resize(static_cast<std::size_t>(n_lon));
    for (int i = 0; i < n_lat; ++i) g.lat_deg[i] = lat0 + (descending ? -1.0 : 1.0) * res * i;
    for (int j = 0; j < n_lon; ++j) g.lon_deg[j] = lon0 + res * j;
    g.validate();
    return g;
}

void GridSpec::validate() const {
    if (n_lat <= 0) fail(ErrorCode::InvalidGrid, "n_lat must be positive");
    if (n_lon <= 0) fail(ErrorCode::InvalidGrid, "n_lon must be positive");
    if (!(resolution_deg > 0.0) || !std::isfinite(resolution_deg))
        fail(ErrorCode::InvalidGrid, "resolution_deg must be positive");
    if (lat_deg.size() != static_cast<std::size_t>(n_lat)) fail(ErrorCode::InvalidGrid, "lat_deg length != n_lat");
    if (lon_deg.size() != static_cast<std::size_t>(n_lon)) fail(ErrorCode::InvalidGrid, "lon_deg length != n_lon");
    check_axis(lat_deg, resolution_deg, "lat_deg", -90.0, 90.0);
    check_axis(lon_deg, resolution_deg, "lon_deg", -180.0, 360.0);
    if (lon_deg.back() >= 360.0 || lon_deg.front() >= 360.0) fail(ErrorCode::InvalidGrid, "lon_deg must be < 360");
}

VariableCatalog VariableCatalog::standard(int levels) {
    static const std::array<double, 13> kLevels{1000, 925, 850, 700, 600, 500, 400, 300, 250, 200, 150, 100, 50};
    if (levels < 2 || levels > 13) fail(ErrorCode::InvalidConfig, "pressure level count must be in [2, 13]");
    VariableCatalog c;
    c.surface_vars = {{"msl", "Pa"},     {"u10", "m/s"},     {"v10", "m/s"},     {"t2m", "K"},
                      {"pm1", "kg/m^3"}, {"pm2p5", "kg/m^3"}, {"pm10", "kg/m^3"}};
    c.upper_vars = {{"z", "m^2/s^2"}, {"q", "kg/kg"}, {"u", "m/s"}, {"v", "m/s"}, {"t", "K"}};
    for (int k = 0; k < levels; ++k) {
        // Spread the chosen levels across the full column.
        const int idx = levels == 13 ? k : static_cast<int>(std::lround(k * 12.0 / (levels - 1)));
        c.pressure_levels.push_back(kLevels[static_cast<std::size_t>(idx)]);
    }
    return c;
}

std::vector<std::string> VariableCatalog::surface_names() const {
    std::vector<std::string> out;
    for (const auto& v : surface_vars) out.push_back(v.name);
    return out;
}

std::vector<std::string> VariableCatalog::upper_names() const {
    std::vector<std::string> out;
    for (const auto& v : upper_vars) out.push_back(v.name);
    return out;
}

void VariableCatalog::validate() const {
    if (surface_vars.size() != kSurfaceVars) fail(ErrorCode::InvalidConfig, "surface_vars must have 7 entries");
    if (upper_vars.size() != kUpperVars) fail(ErrorCode::InvalidConfig, "upper_vars must have 5 entries");
    if (pressure_levels.size() < 2) fail(ErrorCode::InvalidConfig, "need at least 2 pressure levels");
    for (int k = kPmOffset; k < kSurfaceVars; ++k)
        if (surface_vars[static_cast<std::size_t>(k)].name.rfind("pm", 0) != 0)
            fail(ErrorCode::InvalidConfig, "last three surface vars must be PM species");
}

AtmosphericState AtmosphericState::zeros(const GridSpec& grid, int levels, std::int64_t timestamp) {
    AtmosphericState s;
    s.levels = levels;
    s.grid = grid;
    s.timestamp = timestamp;
    s.upper.assign(static_cast<std::size_t>(levels) * grid.cells() * kUpperVars, 0.0f);
    s.surface.assign(grid.cells() * kSurfaceVars, 0.0f);
    return s;
}

std::vector<double> AtmosphericState::surface_field(int v) const {
    std::vector<double> out(grid.cells());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = surface[c * kSurfaceVars + v];
    return out;
}

std::vector<double> AtmosphericState::upper_field(int z, int v) const {
    std::vector<double> out(grid.cells());
    const std::size_t base = static_cast<std::size_t>(z) * grid.cells();
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = upper[(base + c) * kUpperVars + v];
    return out;
}

void AtmosphericState::validate(bool physical) const {
    if (upper.size() != static_cast<std::size_t>(levels) * grid.cells() * kUpperVars ||
        surface.size() != grid.cells() * kSurfaceVars)
        fail(ErrorCode::Shape, "state tensors do not match grid and level count");
    for (std::size_t k = 0; k < upper.size(); ++k) {
        if (!std::isfinite(upper[k])) fail(ErrorCode::InvalidValue, "non-finite upper-air value");
        if (physical && k % kUpperVars == kHumidityVar && upper[k] < 0.0f)
            fail(ErrorCode::InvalidValue, "negative specific humidity");
    }
    for (std::size_t k = 0; k < surface.size(); ++k) {
        if (!std::isfinite(surface[k])) fail(ErrorCode::InvalidValue, "non-finite surface value");
        if (physical && static_cast<int>(k % kSurfaceVars) >= kPmOffset && surface[k] < 0.0f)
            fail(ErrorCode::InvalidValue, "negative PM concentration");
    }
}

namespace {

int padded(int n) { return (n + kPatch - 1) / kPatch * kPatch; }

RegionSpec finish_region(const GridSpec& parent, RegionSpec r) {
    if (r.i1 <= r.i0 || r.j1 <= r.j0) fail(ErrorCode::InvalidRegion, "empty index window");
    if (r.i0 < 0 || r.j0 < 0 || r.i1 > parent.n_lat || r.j1 > parent.n_lon)
        fail(ErrorCode::InvalidRegion, "index window outside parent grid");
    r.lat_min_deg = std::min(parent.lat_deg[r.i0], parent.lat_deg[r.i1 - 1]);
    r.lat_max_deg = std::max(parent.lat_deg[r.i0], parent.lat_deg[r.i1 - 1]);
    r.lon_min_deg = std::min(parent.lon_deg[r.j0], parent.lon_deg[r.j1 - 1]);
    r.lon_max_deg = std::max(parent.lon_deg[r.j0], parent.lon_deg[r.j1 - 1]);
    r.padded_lat = padded(r.height());
    r.padded_lon = padded(r.width());
    return r;
}

}  // namespace

RegionSpec RegionSpec::from_degrees(const GridSpec& parent, double lat_min, double lat_max, double lon_min,
                                    double lon_max, bool pad_to_patch) {
    constexpr double tol = 1e-9;
    if (!(lat_min <= lat_max) || !(lon_min <= lon_max))
        fail(ErrorCode::InvalidRegion, "degree window bounds out of order");
    RegionSpec r;
    r.pad_to_patch = pad_to_patch;
    int i_lo = parent.n_lat, i_hi = -1, j_lo = parent.n_lon, j_hi = -1;
    for (int i = 0; i < parent.n_lat; ++i) {
        const double lat = parent.lat_deg[i];
        if (lat >= lat_min - tol && lat <= lat_max + tol) i_lo = std::min(i_lo, i), i_hi = std::max(i_hi, i);
    }
    for (int j = 0; j < parent.n_lon; ++j) {
        const double lon = parent.lon_deg[j];
        if (lon >= lon_min - tol && lon <= lon_max + tol) j_lo = std::min(j_lo, j), j_hi = std::max(j_hi, j);
    }
    if (i_hi < 0 || j_hi < 0) fail(ErrorCode::InvalidRegion, "degree window selects no grid nodes");
    r.i0 = i_lo;
    r.i1 = i_hi + 1;
    r.j0 = j_lo;
    r.j1 = j_hi + 1;
    r = finish_region(parent, r);
    // Keep the caller's bounds; the derived ones describe the selected nodes.
    r.lat_min_deg = lat_min;
    r.lat_max_deg = lat_max;
    r.lon_min_deg = lon_min;
    r.lon_max_deg = lon_max;
    return r;
}

RegionSpec RegionSpec::from_indices(const GridSpec& parent, int i0, int height, int j0, int width,
                                    bool pad_to_patch) {
    RegionSpec r;
    r.pad_to_patch = pad_to_patch;
    r.i0 = i0;
    r.i1 = i0 + height;
    r.j0 = j0;
    r.j1 = j0 + width;
    return finish_region(parent, r);
}

RegionSpec RegionSpec::full(const GridSpec& parent) { return from_indices(parent, 0, parent.n_lat, 0, parent.n_lon); }

void NormalizationStats::validate() const {
    if (upper_mean.size() != upper_std.size()) fail(ErrorCode::InvalidStats, "upper mean/std size mismatch");
    for (double s : upper_std)
        if (!(s > 0.0)) fail(ErrorCode::InvalidStats, "upper std must be positive");
    for (double s : surface_std)
        if (!(s > 0.0)) fail(ErrorCode::InvalidStats, "surface std must be positive");
    if (!(pm_floor > 0.0)) fail(ErrorCode::InvalidStats, "PM floor must be positive");
    if (!(pm_span_decades > 0.0)) fail(ErrorCode::InvalidStats, "PM span must be positive");
}

std::vector<double> lat_weights(const GridSpec& grid) {
    std::vector<double> w(grid.lat_deg.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double lat = grid.lat_deg[i];
        if (!(std::abs(lat) <= 90.0)) fail(ErrorCode::InvalidGrid, "latitude outside [-90, 90]");
        // cos(pi/2) is 6e-17 in floating point; the pole carries no area.
        w[i] = std::abs(lat) == 90.0 ? 0.0 : std::cos(lat * std::numbers::pi / 180.0);
    }
    return w;
}

AtmosphericState crop_region(const AtmosphericState& state, const RegionSpec& region) {
    if (region.height() <= 0 || region.width() <= 0) fail(ErrorCode::InvalidRegion, "empty window");
    if (region.i0 < 0 || region.j0 < 0 || region.i1 > state.grid.n_lat || region.j1 > state.grid.n_lon)
        fail(ErrorCode::InvalidRegion, "window outside state grid");
    const int h = region.pad_to_patch ? region.padded_lat : region.height();
    const int w = region.pad_to_patch ? region.padded_lon : region.width();

    const auto& g = state.grid;
    const double lat_step = g.n_lat > 1 ? g.lat_deg[1] - g.lat_deg[0] : -g.resolution_deg;
    const double lon_step = g.n_lon > 1 ? g.lon_deg[1] - g.lon_deg[0] : g.resolution_deg;
    GridSpec sub;
    sub.n_lat = h;
    sub.n_lon = w;
    sub.resolution_deg = g.resolution_deg;
    for (int i = 0; i < h; ++i)
        sub.lat_deg.push_back(i < region.height() ? g.lat_deg[region.i0 + i]
                                                  : g.lat_deg[region.i1 - 1] + lat_step * (i - region.height() + 1));
    for (int j = 0; j < w; ++j)
        sub.lon_deg.push_back(j < region.width() ? g.lon_deg[region.j0 + j]
                                                 : g.lon_deg[region.j1 - 1] + lon_step * (j - region.width() + 1));
    if (region.pad_to_patch) sub.validate();

    AtmosphericState out = AtmosphericState::zeros(sub, state.levels, state.timestamp);
    for (int i = 0; i < h; ++i) {
        const int si = region.i0 + std::min(i, region.height() - 1);
        for (int j = 0; j < w; ++j) {
            const int sj = region.j0 + std::min(j, region.width() - 1);
            for (int v = 0; v < kSurfaceVars; ++v) out.sfc(i, j, v) = state.sfc(si, sj, v);
            for (int z = 0; z < state.levels; ++z)
                for (int v = 0; v < kUpperVars; ++v) out.up(z, i, j, v) = state.up(z, si, sj, v);
        }
    }
    return out;
}

double pm_log_forward(double x, double floor, double span_decades) {
    if (std::isnan(x)) fail(ErrorCode::InvalidValue, "NaN PM concentration");
    return (std::log10(std::max(x, floor)) - std::log10(floor)) / span_decades;
}

double pm_log_inverse(double y, double floor, double span_decades) {
    if (std::isnan(y)) fail(ErrorCode::InvalidValue, "NaN normalized PM value");
    return floor * std::pow(10.0, y * span_decades);
}

double zscore_forward(double x, double mean, double std) {
    if (!(std > 0.0)) fail(ErrorCode::InvalidStats, "std must be positive");
    return (x - mean) / std;
}

double zscore_inverse(double y, double mean, double std) {
    if (!(std > 0.0)) fail(ErrorCode::InvalidStats, "std must be positive");
    return y * std + mean;
}

NormalizationStats compute_stats(std::span<const AtmosphericState> states) {
    if (states.empty()) fail(ErrorCode::EmptyDataset, "cannot compute statistics of an empty sequence");
    const int levels = states.front().levels;
    NormalizationStats st;
    const std::size_t nu = static_cast<std::size_t>(levels) * kUpperVars;
    std::vector<double> us(nu, 0.0), uss(nu, 0.0);
    std::array<double, 4> ss{}, sss{};
    double n_cells = 0.0;
    for (const auto& s : states) {
        if (s.levels != levels) fail(ErrorCode::Shape, "inconsistent level count in sequence");
        const std::size_t cells = s.grid.cells();
        n_cells += static_cast<double>(cells);
        for (int z = 0; z < levels; ++z)
            for (std::size_t c = 0; c < cells; ++c)
                for (int v = 0; v < kUpperVars; ++v) {
                    const double x = s.upper[(z * cells + c) * kUpperVars + v];
                    us[static_cast<std::size_t>(z) * kUpperVars + v] += x;
                    uss[static_cast<std::size_t>(z) * kUpperVars + v] += x * x;
                }
        for (std::size_t c = 0; c < cells; ++c)
            for (int v = 0; v < 4; ++v) {
                const double x = s.surface[c * kSurfaceVars + v];
                ss[v] += x;
                sss[v] += x * x;
            }
    }
    auto finish = [&](double sum, double sumsq) {
        const double mean = sum / n_cells;
        const double var = std::max(sumsq / n_cells - mean * mean, 0.0);
        // A constant channel gets unit std so the z-score stays defined.
        const double sd = std::sqrt(var);
        return std::pair{mean, sd > 1e-12 * std::max(1.0, std::abs(mean)) ? sd : 1.0};
    };
    st.upper_mean.resize(nu);
    st.upper_std.resize(nu);
    for (std::size_t k = 0; k < nu; ++k) std::tie(st.upper_mean[k], st.upper_std[k]) = finish(us[k], uss[k]);
    for (int v = 0; v < 4; ++v) std::tie(st.surface_mean[v], st.surface_std[v]) = finish(ss[v], sss[v]);
    return st;
}

AtmosphericState normalize_state(const AtmosphericState& phys, const NormalizationStats& stats) {
    if (stats.upper_mean.size() != static_cast<std::size_t>(phys.levels) * kUpperVars)
        fail(ErrorCode::Shape, "normalization stats level count does not match state");
    AtmosphericState out = phys;
    const std::size_t cells = phys.grid.cells();
    for (int z = 0; z < phys.levels; ++z)
        for (std::size_t c = 0; c < cells; ++c)
            for (int v = 0; v < kUpperVars; ++v) {
                const std::size_t k = (z * cells + c) * kUpperVars + v;
                const std::size_t s = static_cast<std::size_t>(z) * kUpperVars + v;
                out.upper[k] = static_cast<float>(zscore_forward(phys.upper[k], stats.upper_mean[s], stats.upper_std[s]));
            }
    for (std::size_t c = 0; c < cells; ++c) {
        for (int v = 0; v < 4; ++v) {
            const std::size_t k = c * kSurfaceVars + v;
            out.surface[k] = static_cast<float>(zscore_forward(phys.surface[k], stats.surface_mean[v], stats.surface_std[v]));
        }
        for (int v = kPmOffset; v < kSurfaceVars; ++v) {
            const std::size_t k = c * kSurfaceVars + v;
            out.surface[k] = static_cast<float>(pm_log_forward(phys.surface[k], stats.pm_floor, stats.pm_span_decades));
        }
    }
    return out;
}

AtmosphericState denormalize_state(const AtmosphericState& norm, const NormalizationStats& stats) {
    if (stats.upper_mean.size() != static_cast<std::size_t>(norm.levels) * kUpperVars)
        fail(ErrorCode::Shape, "normalization stats level count does not match state");
    AtmosphericState out = norm;
    const std::size_t cells = norm.grid.cells();
    for (int z = 0; z < norm.levels; ++z)
        for (std::size_t c = 0; c < cells; ++c)
            for (int v = 0; v < kUpperVars; ++v) {
                const std::size_t k = (z * cells + c) * kUpperVars + v;
                const std::size_t s = static_cast<std::size_t>(z) * kUpperVars + v;
                double x = zscore_inverse(norm.upper[k], stats.upper_mean[s], stats.upper_std[s]);
                if (v == kHumidityVar) x = std::max(x, 0.0);
                out.upper[k] = static_cast<float>(x);
            }
    for (std::size_t c = 0; c < cells; ++c) {
        for (int v = 0; v < 4; ++v) {
            const std::size_t k = c * kSurfaceVars + v;
            out.surface[k] = static_cast<float>(zscore_inverse(norm.surface[k], stats.surface_mean[v], stats.surface_std[v]));
        }
        for (int v = kPmOffset; v < kSurfaceVars; ++v) {
            const std::size_t k = c * kSurfaceVars + v;
            out.surface[k] = static_cast<float>(pm_log_inverse(norm.surface[k], stats.pm_floor, stats.pm_span_decades));
        }
    }
    return out;
}

}  // namespace syncast
