#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "syncast/grid.hpp"

namespace syncast {

/// In-memory image of an SCG1 file with arbitrary channel lists.
///
/// On disk: "SCG1", u32 LE header length, UTF-8 JSON header, then for every
/// timestep the upper tensor [z, lat, lon, var] followed by the surface
/// tensor [lat, lon, var] as f32 LE, closed by a u32 LE CRC-32 of the payload.
struct GridContainer {
    int step_hours = 1;
    int z_levels = 0;
    GridSpec grid;
    std::vector<std::string> upper_vars;
    std::vector<std::string> surface_vars;
    std::vector<double> pressure_levels;
    std::vector<std::int64_t> timestamps;  // one per step
    nlohmann::json extra = nlohmann::json::object();  // additional header keys

    struct Frame {
        std::vector<float> upper;
        std::vector<float> surface;
    };
    std::vector<Frame> frames;

    std::size_t upper_floats() const { return static_cast<std::size_t>(z_levels) * grid.cells() * upper_vars.size(); }
    std::size_t surface_floats() const { return grid.cells() * surface_vars.size(); }
};

void write_grid_container(const GridContainer& file, const std::filesystem::path& path);
GridContainer read_grid_container(const std::filesystem::path& path);

/// Byte image of a container; `write_grid_container` writes exactly these bytes.
std::vector<std::uint8_t> encode_grid_container(const GridContainer& file);
GridContainer decode_grid_container(const std::vector<std::uint8_t>& bytes);

GridContainer states_to_container(const std::vector<AtmosphericState>& states, const VariableCatalog& catalog,
                                  int step_hours);
/// Extracts the standard 5 upper / 7 surface channels; extra surface
/// channels (e.g. gate provenance) are ignored.
std::vector<AtmosphericState> container_to_states(const GridContainer& file);

void write_grid_file(const std::vector<AtmosphericState>& states, const std::filesystem::path& path,
                     const VariableCatalog& catalog, int step_hours);
std::vector<AtmosphericState> read_grid_file(const std::filesystem::path& path);

std::uint32_t crc32_of(const void* data, std::size_t size);

}  // namespace syncast
