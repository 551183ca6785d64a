#pragma once

#include <cstddef>
#include <vector>

#include "syncast/grid.hpp"

namespace syncast {

struct RegridReport {
    std::size_t clamped_points = 0;  // destination nodes outside the source hull
};

/// Bilinear interpolation of a [lat, lon] field onto `dst`. Destination
/// nodes outside the source hull are clamped to the nearest edge and
/// counted in `report`.
std::vector<double> regrid_bilinear(const std::vector<double>& field, const GridSpec& src, const GridSpec& dst,
                                    RegridReport* report = nullptr);

/// Area-weighted (cos latitude) block mean onto a coarser grid whose
/// resolution is an integer multiple of the source and whose nodes sit at
/// block centres.
std::vector<double> downsample_to_resolution(const std::vector<double>& field, const GridSpec& src,
                                             const GridSpec& dst);

/// The coarse grid `downsample_to_resolution` expects for an integer factor.
GridSpec coarsened_grid(const GridSpec& src, int factor);

}  // namespace syncast
