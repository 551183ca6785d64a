#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "syncast/datagen.hpp"
#include "syncast/grid_file.hpp"
#include "syncast/regrid.hpp"
#include "test_util.hpp"

using namespace syncast;
using namespace testutil;

namespace {

SyntheticConfig tiny_config(std::uint64_t seed, int steps) {
    SyntheticConfig cfg;
    cfg.seed = seed;
    cfg.grid = GridSpec::regular(45.0, 0.0, 16, 16, 0.25);
    cfg.n_steps = steps;
    cfg.spinup_steps = 4;
    return cfg;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("syncast_test_" + name);
}

double sum_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

}  // namespace

TEST_CASE("synthetic sequence is seeded and physical") {
    const auto a = gen_synthetic_sequence(tiny_config(7, 12));
    const auto b = gen_synthetic_sequence(tiny_config(7, 12));
    const auto c = gen_synthetic_sequence(tiny_config(8, 12));
    REQUIRE(a.size() == 12);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    for (const auto& s : a) CHECK_NOTHROW(s.validate(true));
    CHECK(a[1].timestamp - a[0].timestamp == 1);
}

TEST_CASE("no sources and no transport keep PM at zero") {
    SyntheticConfig cfg = tiny_config(3, 10);
    cfg.diffusion_coeff = 0.0;
    cfg.advection_gain = 0.0;
    cfg.emission_rate = 0.0;
    cfg.initial_pm = 0.0;
    for (const auto& s : gen_synthetic_sequence(cfg))
        for (int i = 0; i < s.grid.n_lat; ++i)
            for (int j = 0; j < s.grid.n_lon; ++j)
                for (int v = kPmOffset; v < kSurfaceVars; ++v) REQUIRE(s.sfc(i, j, v) == 0.0f);
}

TEST_CASE("transport step conserves tracer mass") {
    const GridSpec g = GridSpec::regular(45.0, 0.0, 16, 24, 0.25);
    Rng rng(5);
    std::vector<double> tracer(g.cells());
    for (auto& v : tracer) v = std::exp(rng.normal());
    WindField w{g.n_lat, g.n_lon, std::vector<double>(g.cells()), std::vector<double>(g.cells())};
    for (std::size_t k = 0; k < g.cells(); ++k) {
        w.u[k] = 8.0 * rng.normal();
        w.v[k] = 8.0 * rng.normal();
    }
    std::vector<double> t = tracer;
    for (int step = 0; step < 20; ++step) {
        const double before = sum_of(t);
        t = advect_diffuse_step(t, w, g, 1.0, 1.0, 0.1);
        CHECK(std::abs(sum_of(t) - before) / before <= 1e-6);
        for (double v : t) REQUIRE(v >= 0.0);
    }
}

TEST_CASE("synthetic PM is right-skewed") {
    SyntheticConfig cfg;
    cfg.seed = 11;
    cfg.grid = GridSpec::regular(45.0, 0.0, 16, 16, 0.25);
    cfg.n_steps = 1000;
    cfg.spinup_steps = 24;
    const auto seq = gen_synthetic_sequence(cfg);
    double n = 0, m1 = 0;
    for (const auto& s : seq)
        for (std::size_t k = 0; k < s.grid.cells(); ++k) {
            m1 += s.surface[k * kSurfaceVars + 5];
            n += 1;
        }
    m1 /= n;
    double m2 = 0, m3 = 0;
    for (const auto& s : seq)
        for (std::size_t k = 0; k < s.grid.cells(); ++k) {
            const double d = s.surface[k * kSurfaceVars + 5] - m1;
            m2 += d * d;
            m3 += d * d * d;
        }
    m2 /= n;
    m3 /= n;
    CHECK(m3 / std::pow(m2, 1.5) > 0.0);
}

TEST_CASE("synthetic config validation names the field") {
    SyntheticConfig cfg = tiny_config(1, 4);
    cfg.emission_tail_index = 1.0;
    try {
        cfg.validate();
        FAIL("accepted tail index 1");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InvalidConfig);
        CHECK(std::string(e.what()).find("emission_tail_index") != std::string::npos);
    }
    cfg = tiny_config(1, 4);
    cfg.grid.n_lat = 0;
    cfg.grid.lat_deg.clear();
    CHECK_THROWS_AS(gen_synthetic_sequence(cfg), Error);
}

TEST_CASE("grid file round trip is bitwise lossless") {
    const GridSpec g = small_grid(4, 4);
    AtmosphericState s = random_state(g, 2, 3);
    s.surface[0] = -0.0f;
    s.upper[1] = std::numeric_limits<float>::denorm_min();
    s.upper[2] = std::numeric_limits<float>::max();
    const auto path = temp_path("roundtrip.scg");
    write_grid_file({s}, path, VariableCatalog::standard(2), 1);
    const auto back = read_grid_file(path);
    REQUIRE(back.size() == 1);
    CHECK(std::memcmp(back[0].surface.data(), s.surface.data(), s.surface.size() * sizeof(float)) == 0);
    CHECK(std::memcmp(back[0].upper.data(), s.upper.data(), s.upper.size() * sizeof(float)) == 0);
    CHECK(back[0].grid == s.grid);
    CHECK(back[0].timestamp == s.timestamp);
    std::filesystem::remove(path);
}

TEST_CASE("grid file parse errors") {
    const GridSpec g = small_grid(4, 4);
    std::vector<AtmosphericState> two{random_state(g, 2, 1), random_state(g, 2, 2)};
    two[1].timestamp = 1;
    const GridContainer c = states_to_container(two, VariableCatalog::standard(2), 1);
    const std::vector<std::uint8_t> bytes = encode_grid_container(c);
    auto code_of = [](const std::vector<std::uint8_t>& b) {
        try {
            decode_grid_container(b);
        } catch (const Error& e) {
            return e.code();
        }
        return ErrorCode::Io;
    };
    CHECK_NOTHROW(decode_grid_container(bytes));

    auto wrong_magic = bytes;
    wrong_magic[0] = 'X';
    CHECK(code_of(wrong_magic) == ErrorCode::MagicMismatch);

    // Header still declares 2 steps, payload holds 1 (plus the CRC).
    const std::size_t step_bytes = (c.upper_floats() + c.surface_floats()) * 4;
    std::vector<std::uint8_t> one_step(bytes.begin(), bytes.end() - static_cast<long>(step_bytes));
    CHECK(code_of(one_step) == ErrorCode::TruncatedPayload);

    auto longer = bytes;
    longer.insert(longer.end() - 4, {0, 0, 0, 0});
    CHECK(code_of(longer) == ErrorCode::HeaderMismatch);

    auto flipped = bytes;
    flipped[flipped.size() - 10] ^= 0x01;
    CHECK(code_of(flipped) == ErrorCode::ChecksumMismatch);

    CHECK_THROWS_AS(read_grid_file(temp_path("does_not_exist.scg")), Error);
}

TEST_CASE("grid file header names a missing key") {
    const GridSpec g = small_grid(4, 4);
    GridContainer c = states_to_container({random_state(g, 2, 1)}, VariableCatalog::standard(2), 1);
    auto bytes = encode_grid_container(c);
    std::uint32_t len = 0;
    std::memcpy(&len, bytes.data() + 4, 4);
    std::string header(bytes.begin() + 8, bytes.begin() + 8 + len);
    const auto pos = header.find("\"dtype\"");
    REQUIRE(pos != std::string::npos);
    header.replace(pos, 7, "\"dtypX\"");
    std::copy(header.begin(), header.end(), bytes.begin() + 8);
    try {
        decode_grid_container(bytes);
        FAIL("accepted header without dtype");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::HeaderMismatch);
        CHECK(std::string(e.what()).find("dtype") != std::string::npos);
    }
}

TEST_CASE("bilinear regrid") {
    const GridSpec src = GridSpec::regular(10.0, 0.0, 6, 8, 1.0);
    std::vector<double> affine(src.cells()), constant(src.cells(), 4.25);
    for (int i = 0; i < src.n_lat; ++i)
        for (int j = 0; j < src.n_lon; ++j) affine[i * src.n_lon + j] = 2.0 * src.lat_deg[i] + 3.0 * src.lon_deg[j];

    const GridSpec dst = GridSpec::regular(9.75, 0.5, 17, 25, 0.25);
    RegridReport rep;
    const auto out = regrid_bilinear(affine, src, dst, &rep);
    for (int i = 0; i < dst.n_lat; ++i)
        for (int j = 0; j < dst.n_lon; ++j)
            CHECK(std::abs(out[i * dst.n_lon + j] - (2.0 * dst.lat_deg[i] + 3.0 * dst.lon_deg[j])) <= 1e-6);
    CHECK(rep.clamped_points == 0);
    for (double v : regrid_bilinear(constant, src, dst)) CHECK(v == doctest::Approx(4.25).epsilon(1e-15));

    CHECK(regrid_bilinear(affine, src, src) == affine);

    const GridSpec two = GridSpec::regular(1.0, 0.0, 2, 2, 1.0);
    const GridSpec centre = GridSpec::regular(0.5, 0.5, 1, 1, 1.0);
    CHECK(regrid_bilinear({0.0, 10.0, 0.0, 10.0}, two, centre)[0] == doctest::Approx(5.0));
    CHECK(regrid_bilinear({0.0, 0.0, 10.0, 10.0}, two, centre)[0] == doctest::Approx(5.0));

    const GridSpec outside = GridSpec::regular(12.0, 0.0, 2, 2, 1.0);
    RegridReport rep2;
    regrid_bilinear(affine, src, outside, &rep2);
    CHECK(rep2.clamped_points == 4);

    const GridSpec thin = GridSpec::regular(1.0, 0.0, 1, 4, 1.0);
    CHECK_THROWS_AS(regrid_bilinear(std::vector<double>(4, 1.0), thin, dst), Error);
}

TEST_CASE("area-weighted downsampling") {
    const GridSpec src = GridSpec::regular(60.0, 0.0, 16, 16, 0.25);
    const GridSpec dst = coarsened_grid(src, 4);
    CHECK(dst.n_lat == 4);
    CHECK(dst.resolution_deg == 1.0);

    std::vector<double> c(src.cells(), 2.0);
    for (double v : downsample_to_resolution(c, src, dst)) CHECK(v == doctest::Approx(2.0).epsilon(1e-14));

    Rng rng(2);
    std::vector<double> f(src.cells());
    for (auto& v : f) v = rng.normal() + 3.0;
    const auto out = downsample_to_resolution(f, src, dst);
    auto weighted_mean = [](const std::vector<double>& x, const GridSpec& g) {
        const auto w = lat_weights(g);
        double num = 0, den = 0;
        for (int i = 0; i < g.n_lat; ++i)
            for (int j = 0; j < g.n_lon; ++j) {
                num += w[i] * x[i * g.n_lon + j];
                den += w[i];
            }
        return num / den;
    };
    const double before = weighted_mean(f, src), after = weighted_mean(out, dst);
    CHECK(std::abs(after - before) / std::abs(before) <= 1e-6);

    const GridSpec eq = GridSpec::regular(0.125, 0.0, 2, 2, 0.25);
    const GridSpec eq_dst = coarsened_grid(eq, 2);
    CHECK(downsample_to_resolution({1, 2, 3, 4}, eq, eq_dst)[0] == doctest::Approx(2.5).epsilon(1e-9));

    CHECK_THROWS_AS(downsample_to_resolution(out, dst, src), Error);
}

TEST_CASE("temporal upsampling") {
    const GridSpec g = small_grid(2, 2);
    AtmosphericState a = random_state(g, 2, 1), b = random_state(g, 2, 2);
    a.timestamp = 0;
    b.timestamp = 3;
    CHECK(temporal_upsample_linear({a, b}, 1) == std::vector<AtmosphericState>{a, b});
    const auto up = temporal_upsample_linear({a, b}, 3);
    REQUIRE(up.size() == 4);
    CHECK(up.front() == a);
    CHECK(up.back() == b);
    CHECK(up[1].timestamp == 1);
    for (std::size_t k = 0; k < a.surface.size(); ++k) {
        CHECK(up[1].surface[k] == doctest::Approx(a.surface[k] + (b.surface[k] - a.surface[k]) / 3.0).epsilon(1e-6));
        CHECK(up[2].surface[k] == doctest::Approx(a.surface[k] + 2.0 * (b.surface[k] - a.surface[k]) / 3.0).epsilon(1e-6));
    }
    // a monotone sequence stays monotone
    AtmosphericState c = b;
    c.timestamp = 6;
    for (std::size_t k = 0; k < c.surface.size(); ++k) c.surface[k] = std::max(a.surface[k], b.surface[k]) + 1.0f;
    AtmosphericState lo = a, mid = a;
    mid.timestamp = 3;
    for (std::size_t k = 0; k < mid.surface.size(); ++k) mid.surface[k] = a.surface[k] + 0.5f;
    const auto mono = temporal_upsample_linear({lo, mid, c}, 3);
    for (std::size_t t = 1; t < mono.size(); ++t)
        for (std::size_t k = 0; k < c.surface.size(); ++k) REQUIRE(mono[t].surface[k] >= mono[t - 1].surface[k]);

    CHECK_THROWS_AS(temporal_upsample_linear({a, b}, 0), Error);
    CHECK_THROWS_AS(temporal_upsample_linear({a}, 2), Error);
}

TEST_CASE("training pairs") {
    const auto seq = gen_synthetic_sequence(tiny_config(2, 30));
    const auto pairs = make_training_pairs(seq, 1);
    CHECK(pairs.size() == 29);
    CHECK(pairs[4].input == seq[4]);
    CHECK(pairs[4].target == seq[5]);
    CHECK(make_training_pairs(seq, 6).size() == 24);

    const std::vector<AtmosphericState> ten(seq.begin(), seq.begin() + 10);
    try {
        make_training_pairs(ten, 24);
        FAIL("expected empty dataset");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::EmptyDataset);
    }
    try {
        make_training_pairs(ten, 0);
        FAIL("expected invalid config");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InvalidConfig);
    }
}
