#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace syncast {

using Rgb = std::array<std::uint8_t, 3>;

/// Sequential map on [0, 1], piecewise linear through five fixed anchors.
Rgb sequential_color(double t);
/// Diverging map on [-1, 1]; 0 is white.
Rgb diverging_color(double t);

inline constexpr Rgb kMissingColor{128, 128, 128};

/// Binary PPM (P6) of a [n_lat, n_lon] field, first row on top, each cell
/// drawn as a scale x scale block. Values are mapped linearly from
/// [vmin, vmax] and clamped; NaN cells use kMissingColor.
std::vector<std::uint8_t> render_field_ppm(const std::vector<double>& field, int n_lat, int n_lon, double vmin,
                                           double vmax, int scale);

/// Diverging PPM of a - b, mapped from [-range, range].
std::vector<std::uint8_t> render_difference_ppm(const std::vector<double>& a, const std::vector<double>& b, int n_lat,
                                                int n_lon, double range, int scale);

}  // namespace syncast
