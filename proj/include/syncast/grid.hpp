#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "syncast/error.hpp"

namespace syncast {

inline constexpr int kSurfaceVars = 7;
inline constexpr int kUpperVars = 5;
inline constexpr int kPmVars = 3;
inline constexpr int kPmOffset = 4;  // first PM channel in the surface tensor
inline constexpr int kHumidityVar = 1;  // q in the upper tensor
inline constexpr int kPatch = 4;

/// Regular lat/lon grid. Latitudes may be ascending or descending.
struct GridSpec {
    int n_lat = 0;
    int n_lon = 0;
    std::vector<double> lat_deg;
    std::vector<double> lon_deg;
    double resolution_deg = 0.0;

    /// Builds a grid starting at (lat0, lon0) stepping `res` degrees;
    /// latitude runs north to south when `descending`.
    static GridSpec regular(double lat0, double lon0, int n_lat, int n_lon, double res, bool descending = true);

    /// Throws InvalidGrid on any invariant violation.
    void validate() const;

    std::size_t cells() const { return static_cast<std::size_t>(n_lat) * static_cast<std::size_t>(n_lon); }

    bool operator==(const GridSpec&) const = default;
};

struct VariableInfo {
    std::string name;
    std::string units;
};

struct VariableCatalog {
    std::vector<VariableInfo> surface_vars;
    std::vector<VariableInfo> upper_vars;
    std::vector<double> pressure_levels;  // hPa

    /// Catalog with `levels` evenly chosen from the 13 standard pressure levels.
    static VariableCatalog standard(int levels = 13);

    std::vector<std::string> surface_names() const;
    std::vector<std::string> upper_names() const;
    void validate() const;
};

/// One timestamp of upper-air [Z, lat, lon, 5] and surface [lat, lon, 7] fields.
struct AtmosphericState {
    int levels = 0;
    std::vector<float> upper;
    std::vector<float> surface;
    std::int64_t timestamp = 0;  // hours since epoch
    GridSpec grid;

    static AtmosphericState zeros(const GridSpec& grid, int levels, std::int64_t timestamp = 0);

    std::size_t upper_index(int z, int i, int j, int v) const {
        return ((static_cast<std::size_t>(z) * grid.n_lat + i) * grid.n_lon + j) * kUpperVars + v;
    }
    std::size_t surface_index(int i, int j, int v) const {
        return (static_cast<std::size_t>(i) * grid.n_lon + j) * kSurfaceVars + v;
    }
    float& up(int z, int i, int j, int v) { return upper[upper_index(z, i, j, v)]; }
    float up(int z, int i, int j, int v) const { return upper[upper_index(z, i, j, v)]; }
    float& sfc(int i, int j, int v) { return surface[surface_index(i, j, v)]; }
    float sfc(int i, int j, int v) const { return surface[surface_index(i, j, v)]; }

    /// Copies one surface channel out as a [lat, lon] field.
    std::vector<double> surface_field(int v) const;
    std::vector<double> upper_field(int z, int v) const;

    bool same_layout(const AtmosphericState& o) const {
        return levels == o.levels && grid == o.grid;
    }

    /// Throws InvalidValue on non-finite entries; with `physical` also
    /// checks PM and humidity nonnegativity.
    void validate(bool physical) const;

    bool operator==(const AtmosphericState&) const = default;
};

/// Lat/lon window resolved against a parent grid.
struct RegionSpec {
    double lat_min_deg = 0.0;
    double lat_max_deg = 0.0;
    double lon_min_deg = 0.0;
    double lon_max_deg = 0.0;
    int i0 = 0, i1 = 0;  // [i0, i1) latitude indices in the parent grid
    int j0 = 0, j1 = 0;  // [j0, j1) longitude indices
    bool pad_to_patch = false;
    int padded_lat = 0;  // H_l rounded up to the patch size
    int padded_lon = 0;

    int height() const { return i1 - i0; }
    int width() const { return j1 - j0; }

    /// Selects every grid node inside the closed degree window.
    static RegionSpec from_degrees(const GridSpec& parent, double lat_min, double lat_max, double lon_min,
                                   double lon_max, bool pad_to_patch = false);
    /// Direct index window [i0, i0+height) x [j0, j0+width).
    static RegionSpec from_indices(const GridSpec& parent, int i0, int height, int j0, int width,
                                   bool pad_to_patch = false);
    static RegionSpec full(const GridSpec& parent);

    bool operator==(const RegionSpec&) const = default;
};

struct NormalizationStats {
    // Per (level, var) for upper air, per var for the 4 surface met fields.
    std::vector<double> upper_mean, upper_std;  // size Z*5
    std::array<double, 4> surface_mean{}, surface_std{};
    double pm_floor = 1e-11;
    double pm_span_decades = 4.0;

    void validate() const;
};

/// cos(latitude) per row; unnormalized.
std::vector<double> lat_weights(const GridSpec& grid);

AtmosphericState crop_region(const AtmosphericState& state, const RegionSpec& region);

double pm_log_forward(double x, double floor = 1e-11, double span_decades = 4.0);
double pm_log_inverse(double y, double floor = 1e-11, double span_decades = 4.0);
double zscore_forward(double x, double mean, double std);
double zscore_inverse(double y, double mean, double std);

/// Mean/std per variable over a set of physical-unit states.
NormalizationStats compute_stats(std::span<const AtmosphericState> states);

AtmosphericState normalize_state(const AtmosphericState& physical, const NormalizationStats& stats);
AtmosphericState denormalize_state(const AtmosphericState& normalized, const NormalizationStats& stats);

}  // namespace syncast
