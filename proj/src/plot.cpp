#include "syncast/plot.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "syncast/error.hpp"

namespace syncast {

namespace {

using Anchor = std::array<double, 3>;

Rgb lerp_anchors(const Anchor* anchors, int n, double t) {
    t = std::clamp(t, 0.0, 1.0);
    const double x = t * (n - 1);
    const int k = std::min(static_cast<int>(x), n - 2);
    const double f = x - k;
    Rgb out{};
    for (int c = 0; c < 3; ++c)
        out[c] = static_cast<std::uint8_t>(std::lround(anchors[k][c] + f * (anchors[k + 1][c] - anchors[k][c])));
    return out;
}

std::vector<std::uint8_t> render(int n_lat, int n_lon, int scale, auto&& color_of) {
    if (n_lat < 1 || n_lon < 1) fail(ErrorCode::Shape, "image needs at least one cell");
    if (scale < 1) fail(ErrorCode::InvalidConfig, "scale: must be >= 1");
    const int w = n_lon * scale, h = n_lat * scale;
    const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + static_cast<std::size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Rgb c = color_of(static_cast<std::size_t>(y / scale) * n_lon + x / scale);
            out.insert(out.end(), c.begin(), c.end());
        }
    return out;
}

}  // namespace

Rgb sequential_color(double t) {
    static const Anchor anchors[] = {
        {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
    return lerp_anchors(anchors, 5, t);
}

Rgb diverging_color(double t) {
    static const Anchor anchors[] = {{33, 102, 172}, {255, 255, 255}, {178, 24, 43}};
    return lerp_anchors(anchors, 3, (std::clamp(t, -1.0, 1.0) + 1.0) / 2.0);
}

std::vector<std::uint8_t> render_field_ppm(const std::vector<double>& field, int n_lat, int n_lon, double vmin,
                                           double vmax, int scale) {
    if (field.size() != static_cast<std::size_t>(n_lat) * n_lon) fail(ErrorCode::Shape, "field size does not match image");
    if (!(vmax > vmin)) fail(ErrorCode::InvalidConfig, "vmax: must exceed vmin");
    return render(n_lat, n_lon, scale, [&](std::size_t k) {
        const double v = field[k];
        return std::isnan(v) ? kMissingColor : sequential_color((v - vmin) / (vmax - vmin));
    });
}

std::vector<std::uint8_t> render_difference_ppm(const std::vector<double>& a, const std::vector<double>& b, int n_lat,
                                                int n_lon, double range, int scale) {
    if (a.size() != b.size() || a.size() != static_cast<std::size_t>(n_lat) * n_lon)
        fail(ErrorCode::Shape, "difference fields do not match the image");
    if (!(range > 0.0)) fail(ErrorCode::InvalidConfig, "diff_range: must be positive");
    return render(n_lat, n_lon, scale, [&](std::size_t k) {
        const double d = a[k] - b[k];
        return std::isnan(d) ? kMissingColor : diverging_color(d / range);
    });
}

}  // namespace syncast
