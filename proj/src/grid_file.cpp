#include "syncast/grid_file.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace syncast {

namespace {

constexpr char kMagic[4] = {'S', 'C', 'G', '1'};
constexpr const char* kLayout = "t,z?,lat,lon,var";

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>((v >> (8 * b)) & 0xffu));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_floats(std::vector<std::uint8_t>& out, const std::vector<float>& values) {
    for (float f : values) {
        if (!std::isfinite(f)) fail(ErrorCode::InvalidValue, "refusing to write a non-finite value");
        put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
}

template <class T>
T header_get(const nlohmann::json& h, const char* key) {
    if (!h.contains(key)) fail(ErrorCode::HeaderMismatch, std::string("header missing key '") + key + "'");
    try {
        return h.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        fail(ErrorCode::HeaderMismatch, std::string("header key '") + key + "' has the wrong type");
    }
}

}  // namespace

std::uint32_t crc32_of(const void* data, std::size_t size) {
    uLong crc = crc32(0L, Z_NULL, 0);
    const auto* p = static_cast<const Bytef*>(data);
    // zlib takes uInt lengths; feed large buffers in chunks.
    while (size > 0) {
        const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
        crc = crc32(crc, p, chunk);
        p += chunk;
        size -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_grid_container(const GridContainer& f) {
    f.grid.validate();
    const std::size_t n_steps = f.frames.size();
    if (f.timestamps.size() != n_steps) fail(ErrorCode::Shape, "one timestamp per frame required");
    if (f.z_levels < 0) fail(ErrorCode::Shape, "negative level count");
    nlohmann::json h = f.extra;
    h["version"] = 1;
    h["n_steps"] = n_steps;
    h["step_hours"] = f.step_hours;
    h["z_levels"] = f.z_levels;
    h["n_lat"] = f.grid.n_lat;
    h["n_lon"] = f.grid.n_lon;
    h["lat_deg"] = f.grid.lat_deg;
    h["lon_deg"] = f.grid.lon_deg;
    h["resolution_deg"] = f.grid.resolution_deg;
    h["upper_vars"] = f.upper_vars;
    h["surface_vars"] = f.surface_vars;
    h["pressure_levels"] = f.pressure_levels;
    h["timestamps"] = f.timestamps;
    h["dtype"] = "f32le";
    h["layout"] = kLayout;
    const std::string header = h.dump();

    std::vector<std::uint8_t> out;
    out.reserve(12 + header.size() + n_steps * 4 * (f.upper_floats() + f.surface_floats()));
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    put_u32(out, static_cast<std::uint32_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    const std::size_t payload_start = out.size();
    for (const auto& fr : f.frames) {
        if (fr.upper.size() != f.upper_floats() || fr.surface.size() != f.surface_floats())
            fail(ErrorCode::Shape, "frame size does not match declared layout");
        put_floats(out, fr.upper);
        put_floats(out, fr.surface);
    }
    put_u32(out, crc32_of(out.data() + payload_start, out.size() - payload_start));
    return out;
}

GridContainer decode_grid_container(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        fail(ErrorCode::MagicMismatch, "file does not start with 'SCG1'");
    const std::uint32_t header_len = get_u32(bytes.data() + 4);
    if (bytes.size() < 8ull + header_len) fail(ErrorCode::TruncatedPayload, "file ends inside the header");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::HeaderMismatch, std::string("header is not valid JSON: ") + e.what());
    }
    if (!h.is_object()) fail(ErrorCode::HeaderMismatch, "header is not a JSON object");
    if (header_get<int>(h, "version") != 1) fail(ErrorCode::HeaderMismatch, "unsupported 'version'");
    if (header_get<std::string>(h, "dtype") != "f32le") fail(ErrorCode::HeaderMismatch, "unsupported 'dtype'");
    if (header_get<std::string>(h, "layout") != kLayout) fail(ErrorCode::HeaderMismatch, "unsupported 'layout'");

    GridContainer f;
    const auto n_steps = header_get<long long>(h, "n_steps");
    if (n_steps < 0) fail(ErrorCode::HeaderMismatch, "'n_steps' is negative");
    f.step_hours = header_get<int>(h, "step_hours");
    f.z_levels = header_get<int>(h, "z_levels");
    if (f.z_levels < 0) fail(ErrorCode::HeaderMismatch, "'z_levels' is negative");
    f.grid.n_lat = header_get<int>(h, "n_lat");
    f.grid.n_lon = header_get<int>(h, "n_lon");
    f.grid.lat_deg = header_get<std::vector<double>>(h, "lat_deg");
    f.grid.lon_deg = header_get<std::vector<double>>(h, "lon_deg");
    if (f.grid.lat_deg.size() != static_cast<std::size_t>(std::max(f.grid.n_lat, 0)))
        fail(ErrorCode::HeaderMismatch, "'lat_deg' length disagrees with 'n_lat'");
    if (f.grid.lon_deg.size() != static_cast<std::size_t>(std::max(f.grid.n_lon, 0)))
        fail(ErrorCode::HeaderMismatch, "'lon_deg' length disagrees with 'n_lon'");
    if (h.contains("resolution_deg")) {
        f.grid.resolution_deg = header_get<double>(h, "resolution_deg");
    } else if (f.grid.lat_deg.size() > 1) {
        f.grid.resolution_deg = std::abs(f.grid.lat_deg[1] - f.grid.lat_deg[0]);
    }
    try {
        f.grid.validate();
    } catch (const Error& e) {
        fail(ErrorCode::HeaderMismatch, std::string("grid fields: ") + e.what());
    }
    f.upper_vars = header_get<std::vector<std::string>>(h, "upper_vars");
    f.surface_vars = header_get<std::vector<std::string>>(h, "surface_vars");
    if (h.contains("pressure_levels")) f.pressure_levels = header_get<std::vector<double>>(h, "pressure_levels");
    if (h.contains("timestamps")) {
        f.timestamps = header_get<std::vector<std::int64_t>>(h, "timestamps");
        if (f.timestamps.size() != static_cast<std::size_t>(n_steps))
            fail(ErrorCode::HeaderMismatch, "'timestamps' length disagrees with 'n_steps'");
    } else {
        for (long long k = 0; k < n_steps; ++k) f.timestamps.push_back(k * f.step_hours);
    }
    if (f.z_levels > 0 && f.upper_vars.empty())
        fail(ErrorCode::HeaderMismatch, "'z_levels' > 0 but 'upper_vars' is empty");

    static const char* kKnown[] = {"version",    "n_steps",    "step_hours",   "z_levels",     "n_lat",
                                   "n_lon",      "lat_deg",    "lon_deg",      "resolution_deg", "upper_vars",
                                   "surface_vars", "pressure_levels", "timestamps", "dtype",      "layout"};
    for (auto it = h.begin(); it != h.end(); ++it) {
        bool known = false;
        for (const char* k : kKnown) known = known || it.key() == k;
        if (!known) f.extra[it.key()] = it.value();
    }

    const std::size_t per_step = f.upper_floats() + f.surface_floats();
    const std::size_t payload_bytes = static_cast<std::size_t>(n_steps) * per_step * 4;
    const std::size_t payload_start = 8ull + header_len;
    const std::size_t available = bytes.size() - payload_start;
    if (available < payload_bytes + 4)
        fail(ErrorCode::TruncatedPayload, "payload shorter than declared by 'n_steps' (" + std::to_string(n_steps) +
                                              " steps of " + std::to_string(per_step) + " floats)");
    if (available > payload_bytes + 4)
        fail(ErrorCode::HeaderMismatch, "payload longer than declared by 'n_steps'");
    const std::uint32_t stored = get_u32(bytes.data() + payload_start + payload_bytes);
    if (stored != crc32_of(bytes.data() + payload_start, payload_bytes))
        fail(ErrorCode::ChecksumMismatch, "payload CRC-32 does not match trailer");

    const std::uint8_t* p = bytes.data() + payload_start;
    auto read_floats = [&](std::size_t n) {
        std::vector<float> v(n);
        for (std::size_t k = 0; k < n; ++k, p += 4) {
            v[k] = std::bit_cast<float>(get_u32(p));
            if (!std::isfinite(v[k])) fail(ErrorCode::InvalidValue, "non-finite value in payload");
        }
        return v;
    };
    f.frames.resize(static_cast<std::size_t>(n_steps));
    for (auto& fr : f.frames) {
        fr.upper = read_floats(f.upper_floats());
        fr.surface = read_floats(f.surface_floats());
    }
    return f;
}

void write_grid_container(const GridContainer& file, const std::filesystem::path& path) {
    const auto bytes = encode_grid_container(file);
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorCode::Io, "cannot open for writing: " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) fail(ErrorCode::Io, "write failed: " + path.string());
}

GridContainer read_grid_container(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorCode::Io, "cannot open for reading: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return decode_grid_container(bytes);
}

GridContainer states_to_container(const std::vector<AtmosphericState>& states, const VariableCatalog& catalog,
                                  int step_hours) {
    if (states.empty()) fail(ErrorCode::EmptyDataset, "no states to write");
    GridContainer f;
    f.step_hours = step_hours;
    f.z_levels = states.front().levels;
    f.grid = states.front().grid;
    f.upper_vars = catalog.upper_names();
    f.surface_vars = catalog.surface_names();
    f.pressure_levels = catalog.pressure_levels;
    if (f.pressure_levels.size() != static_cast<std::size_t>(f.z_levels))
        fail(ErrorCode::Shape, "catalog level count does not match states");
    for (const auto& s : states) {
        if (!s.same_layout(states.front())) fail(ErrorCode::Shape, "states differ in layout");
        f.timestamps.push_back(s.timestamp);
        f.frames.push_back({s.upper, s.surface});
    }
    return f;
}

std::vector<AtmosphericState> container_to_states(const GridContainer& f) {
    if (f.upper_vars.size() != kUpperVars)
        fail(ErrorCode::HeaderMismatch, "'upper_vars' must list 5 variables for a state file");
    if (f.surface_vars.size() < kSurfaceVars)
        fail(ErrorCode::HeaderMismatch, "'surface_vars' must list at least 7 variables for a state file");
    const std::size_t extra = f.surface_vars.size() - kSurfaceVars;
    std::vector<AtmosphericState> out;
    for (std::size_t t = 0; t < f.frames.size(); ++t) {
        AtmosphericState s = AtmosphericState::zeros(f.grid, f.z_levels, f.timestamps[t]);
        s.upper = f.frames[t].upper;
        if (extra == 0) {
            s.surface = f.frames[t].surface;
        } else {
            const std::size_t nv = f.surface_vars.size();
            for (std::size_t c = 0; c < f.grid.cells(); ++c)
                for (int v = 0; v < kSurfaceVars; ++v) s.surface[c * kSurfaceVars + v] = f.frames[t].surface[c * nv + v];
        }
        out.push_back(std::move(s));
    }
    return out;
}

void write_grid_file(const std::vector<AtmosphericState>& states, const std::filesystem::path& path,
                     const VariableCatalog& catalog, int step_hours) {
    write_grid_container(states_to_container(states, catalog, step_hours), path);
}

std::vector<AtmosphericState> read_grid_file(const std::filesystem::path& path) {
    return container_to_states(read_grid_container(path));
}

}  // namespace syncast
