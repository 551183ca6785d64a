#include "syncast/regrid.hpp"

#include <algorithm>
#include <cmath>

namespace syncast {

namespace {

// Fractional index of `x` along a regular axis, clamped into [0, n-1].
double axis_position(const std::vector<double>& axis, double x, bool& clamped) {
    const double step = axis[1] - axis[0];
    double pos = (x - axis[0]) / step;
    const double snapped = std::round(pos);
    if (std::abs(pos - snapped) < 1e-9) pos = snapped;
    const double hi = static_cast<double>(axis.size() - 1);
    if (pos < 0.0 || pos > hi) {
        clamped = true;
        pos = std::clamp(pos, 0.0, hi);
    }
    return pos;
}

}  // namespace

std::vector<double> regrid_bilinear(const std::vector<double>& field, const GridSpec& src, const GridSpec& dst,
                                    RegridReport* report) {
    if (src.n_lat < 2 || src.n_lon < 2) fail(ErrorCode::InvalidGrid, "source grid needs >= 2 points per axis");
    if (field.size() != src.cells()) fail(ErrorCode::Shape, "field size does not match source grid");
    if (src == dst) return field;

    std::vector<double> out(dst.cells());
    std::size_t clamped_points = 0;
    for (int i = 0; i < dst.n_lat; ++i) {
        bool clamped_lat = false;
        const double pi = axis_position(src.lat_deg, dst.lat_deg[i], clamped_lat);
        const int i0 = std::min(static_cast<int>(std::floor(pi)), src.n_lat - 2);
        const double wi = pi - i0;
        for (int j = 0; j < dst.n_lon; ++j) {
            bool clamped = clamped_lat;
            const double pj = axis_position(src.lon_deg, dst.lon_deg[j], clamped);
            const int j0 = std::min(static_cast<int>(std::floor(pj)), src.n_lon - 2);
            const double wj = pj - j0;
            auto at = [&](int a, int b) { return field[static_cast<std::size_t>(a) * src.n_lon + b]; };
            double v;
            if (wi == 0.0 && wj == 0.0) {
                v = at(i0, j0);  // shared node: exact copy
            } else {
                v = (1.0 - wi) * ((1.0 - wj) * at(i0, j0) + wj * at(i0, j0 + 1)) +
                    wi * ((1.0 - wj) * at(i0 + 1, j0) + wj * at(i0 + 1, j0 + 1));
            }
            out[static_cast<std::size_t>(i) * dst.n_lon + j] = v;
            if (clamped) ++clamped_points;
        }
    }
    if (report) report->clamped_points = clamped_points;
    return out;
}

GridSpec coarsened_grid(const GridSpec& src, int factor) {
    if (factor < 1) fail(ErrorCode::InvalidConfig, "coarsening factor must be >= 1");
    if (src.n_lat % factor != 0 || src.n_lon % factor != 0)
        fail(ErrorCode::InvalidConfig, "grid size must be divisible by the coarsening factor");
    GridSpec g;
    g.n_lat = src.n_lat / factor;
    g.n_lon = src.n_lon / factor;
    g.resolution_deg = src.resolution_deg * factor;
    for (int I = 0; I < g.n_lat; ++I) {
        double s = 0.0;
        for (int k = 0; k < factor; ++k) s += src.lat_deg[I * factor + k];
        g.lat_deg.push_back(s / factor);
    }
    for (int J = 0; J < g.n_lon; ++J) {
        double s = 0.0;
        for (int k = 0; k < factor; ++k) s += src.lon_deg[J * factor + k];
        g.lon_deg.push_back(s / factor);
    }
    g.validate();
    return g;
}

std::vector<double> downsample_to_resolution(const std::vector<double>& field, const GridSpec& src,
                                             const GridSpec& dst) {
    if (field.size() != src.cells()) fail(ErrorCode::Shape, "field size does not match source grid");
    if (dst.resolution_deg < src.resolution_deg - 1e-12)
        fail(ErrorCode::InvalidConfig, "destination grid is finer than the source");
    const double ratio = dst.resolution_deg / src.resolution_deg;
    const int factor = static_cast<int>(std::lround(ratio));
    if (std::abs(ratio - factor) > 1e-9) fail(ErrorCode::InvalidConfig, "resolution ratio must be an integer");
    const GridSpec expect = coarsened_grid(src, factor);
    if (expect.n_lat != dst.n_lat || expect.n_lon != dst.n_lon)
        fail(ErrorCode::InvalidConfig, "destination grid size does not match the block layout");
    for (int I = 0; I < dst.n_lat; ++I)
        if (std::abs(expect.lat_deg[I] - dst.lat_deg[I]) > 1e-9)
            fail(ErrorCode::InvalidConfig, "destination latitudes must sit at block centres");
    for (int J = 0; J < dst.n_lon; ++J)
        if (std::abs(expect.lon_deg[J] - dst.lon_deg[J]) > 1e-9)
            fail(ErrorCode::InvalidConfig, "destination longitudes must sit at block centres");

    const auto w = lat_weights(src);
    std::vector<double> out(dst.cells(), 0.0);
    for (int I = 0; I < dst.n_lat; ++I) {
        double wsum = 0.0;
        for (int k = 0; k < factor; ++k) wsum += w[static_cast<std::size_t>(I * factor + k)];
        for (int J = 0; J < dst.n_lon; ++J) {
            double acc = 0.0;
            for (int a = 0; a < factor; ++a) {
                const int i = I * factor + a;
                double row = 0.0;
                for (int b = 0; b < factor; ++b) row += field[static_cast<std::size_t>(i) * src.n_lon + J * factor + b];
                acc += w[static_cast<std::size_t>(i)] * row;
            }
            // A block of polar rows carries no area; fall back to the plain mean.
            out[static_cast<std::size_t>(I) * dst.n_lon + J] =
                wsum > 0.0 ? acc / (wsum * factor) : 0.0;
            if (wsum <= 0.0) {
                double plain = 0.0;
                for (int a = 0; a < factor; ++a)
                    for (int b = 0; b < factor; ++b)
                        plain += field[static_cast<std::size_t>(I * factor + a) * src.n_lon + J * factor + b];
                out[static_cast<std::size_t>(I) * dst.n_lon + J] = plain / (factor * factor);
            }
        }
    }
    return out;
}

}  // namespace syncast
