#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "syncast/diffusion.hpp"
#include "test_util.hpp"

using namespace syncast;
using namespace testutil;

namespace {

PmField random_pm(int h, int w, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    PmField f = PmField::zeros(h, w);
    for (auto& v : f.values) v = scale * rng.normal();
    return f;
}

DiffusionConfig tiny_diffusion() {
    DiffusionConfig cfg;
    cfg.n_train_steps = 50;
    cfg.beta_start = 1e-3;
    cfg.beta_end = 0.2;
    cfg.n_sample_steps = 10;
    cfg.hidden_channels = 8;
    cfg.time_embed_dim = 8;
    cfg.learning_rate = 1e-3;
    cfg.epochs = 1;
    return cfg;
}

// PM-only state sequence, physical units, one value per step at every pixel.
std::vector<AtmosphericState> pm_series(const GridSpec& g, const std::vector<double>& values) {
    std::vector<AtmosphericState> out;
    for (std::size_t t = 0; t < values.size(); ++t) {
        AtmosphericState s = AtmosphericState::zeros(g, 1, static_cast<std::int64_t>(t));
        for (int i = 0; i < g.n_lat; ++i)
            for (int j = 0; j < g.n_lon; ++j)
                for (int v = 0; v < kPmVars; ++v) s.sfc(i, j, kPmOffset + v) = static_cast<float>(values[t] * (v + 1));
        out.push_back(s);
    }
    return out;
}

}  // namespace

TEST_CASE("noise schedule is a strictly decreasing product") {
    const NoiseSchedule s = NoiseSchedule::linear(1000, 1e-4, 2e-2);
    CHECK(s.steps() == 1000);
    CHECK(s.alpha_bar[0] == 1.0);
    CHECK(s.beta[1] == 1e-4);
    CHECK(s.beta[1000] == doctest::Approx(2e-2).epsilon(1e-14));
    double prod = 1.0;
    for (int i = 1; i <= 1000; ++i) {
        CHECK(s.beta[i] > s.beta[i - 1]);
        CHECK(s.alpha_bar[i] < s.alpha_bar[i - 1]);
        CHECK(s.alpha_bar[i] > 0.0);
        prod *= 1.0 - s.beta[i];
    }
    CHECK(s.alpha_bar[1000] == doctest::Approx(prod).epsilon(1e-12));

    DiffusionConfig bad;
    bad.n_sample_steps = 1001;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = DiffusionConfig{};
    bad.beta_end = 1.0;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("forward noise: limit, determinism, Monte-Carlo variance") {
    const NoiseSchedule s = NoiseSchedule::linear(1000, 1e-4, 2e-2);
    const PmField x0 = random_pm(4, 4, 1);
    Rng r1(7), r2(7);
    const NoisedField a = forward_noise(x0, 1, s, r1);
    const NoisedField b = forward_noise(x0, 1, s, r2);
    CHECK(a.x == b.x);
    CHECK(a.eps == b.eps);
    double d2 = 0.0, e2 = 0.0;
    for (std::size_t k = 0; k < x0.values.size(); ++k) {
        d2 += std::pow(a.x.values[k] - x0.values[k], 2);
        e2 += a.eps.values[k] * a.eps.values[k];
    }
    // x1 - x0 = (sqrt(abar)-1) x0 + sqrt(1-abar) eps
    double x2 = 0.0;
    for (double v : x0.values) x2 += v * v;
    CHECK(std::sqrt(d2) <= std::sqrt(1.0 - s.alpha_bar[1]) * std::sqrt(e2) + (1.0 - std::sqrt(s.alpha_bar[1])) * std::sqrt(x2) + 1e-15);

    CHECK_THROWS_AS(forward_noise(x0, 0, s, r1), Error);
    CHECK_THROWS_AS(forward_noise(x0, 1001, s, r1), Error);

    // x0 = 0: Var(x_i) = 1 - abar_i. Standard error of a sample variance is
    // sigma^2 sqrt(2 / (n - 1)).
    const int i = 400;
    const PmField zero = PmField::zeros(1, 1);
    Rng rng(123);
    const int n = 100000;
    double sum = 0.0, sq = 0.0;
    for (int k = 0; k < n; ++k)
        for (double v : forward_noise(zero, i, s, rng).x.values) {
            sum += v;
            sq += v * v;
        }
    const double m = n * 3;
    const double var = (sq - sum * sum / m) / (m - 1);
    const double target = 1.0 - s.alpha_bar[i];
    CHECK(std::abs(var - target) <= 3.0 * target * std::sqrt(2.0 / (m - 1)));
}

TEST_CASE("conditioning pack layout") {
    const GridSpec g = small_grid(4, 6);
    const AtmosphericState st = random_state(g, 3, 5);
    const ConditioningPack c = ConditioningPack::build(st);
    CHECK(c.channels == 3 + 7 + 3 * 5);
    const std::size_t cells = g.cells();
    const std::size_t k = 2 * 6 + 5;
    const double* row = c.values.data() + k * c.channels;
    CHECK(row[1] == st.surface[k * kSurfaceVars + kPmOffset + 1]);
    CHECK(row[3 + 2] == st.surface[k * kSurfaceVars + 2]);
    CHECK(row[10 + 2 * 5 + 4] == st.upper[(2 * cells + k) * kUpperVars + 4]);
    CHECK(c.deterministic_pm() == PmField::from_state(st));

    AtmosphericState bad = st;
    bad.surface[3] = NAN;
    CHECK_THROWS_AS(ConditioningPack::build(bad), Error);
}

TEST_CASE("denoiser gradient matches central differences") {
    const GridSpec g = small_grid(4, 5);
    const ConditioningPack c = ConditioningPack::build(random_state(g, 1, 2));
    DenoiserParams p = DenoiserParams::init(c.channels, 4, 4, 3);
    // Scale the output layer up so every path carries a visible gradient.
    for (auto& v : p.conv3.weight.data) v *= 10.0;
    const PmField x = random_pm(4, 5, 8), eps = random_pm(4, 5, 9);
    DenoiserParams grads = p.zeros_like();
    denoiser_loss_and_grad(p, x, c, 7, eps, &grads);

    std::vector<Tensor*> vals;
    std::vector<const Tensor*> gs;
    p.for_each([&](const std::string&, Tensor& t) { vals.push_back(&t); });
    grads.for_each([&](const std::string&, const Tensor& t) { gs.push_back(&t); });
    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t t = 0; t < vals.size(); ++t)
        for (std::size_t k = 0; k < vals[t]->data.size(); k += 7) {
            double& w = vals[t]->data[k];
            const double w0 = w;
            w = w0 + h;
            const double lp = denoiser_loss_and_grad(p, x, c, 7, eps, nullptr);
            w = w0 - h;
            const double lm = denoiser_loss_and_grad(p, x, c, 7, eps, nullptr);
            w = w0;
            const double num = (lp - lm) / (2 * h);
            const double ana = gs[t]->data[k];
            worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6}));
        }
    CHECK(worst <= 1e-5);
}

TEST_CASE("denoiser training: zero lr, determinism, overfit") {
    const GridSpec g = small_grid(8, 8);
    DenoisePair pair{ConditioningPack::build(random_state(g, 1, 4)), random_pm(8, 8, 5)};
    DiffusionConfig cfg = tiny_diffusion();
    cfg.max_steps = 20;
    cfg.epochs = 20;

    DiffusionConfig frozen = cfg;
    frozen.learning_rate = 0.0;
    const DeeResult z = train_dee({pair}, frozen);
    DenoiserParams init = DenoiserParams::init(pair.cond.channels, cfg.hidden_channels, cfg.time_embed_dim, cfg.seed);
    set_target_stats(init, {pair}, cfg);
    CHECK(z.params == init);

    const DeeResult a = train_dee({pair}, cfg);
    const DeeResult b = train_dee({pair}, cfg);
    REQUIRE(a.log.size() == 20);
    for (std::size_t k = 0; k < a.log.size(); ++k) CHECK(a.log[k].loss == b.log[k].loss);
    CHECK(a.params == b.params);

    // Resume across a split reproduces the uninterrupted run.
    DeeRun run = start_dee_run(pair.cond.channels, cfg);
    set_target_stats(run.params, {pair}, cfg);
    continue_dee(run, {pair}, cfg, 7);
    continue_dee(run, {pair}, cfg, 20);
    CHECK(run.params == a.params);

    // Overfit on a target that is a local function of the conditioning, as
    // truth is of the forecast. The loss is evaluated over every step index
    // with fixed noise, before and after training.
    DenoisePair local = pair;
    const PmField det = pair.cond.deterministic_pm();
    for (std::size_t k = 0; k < det.values.size(); ++k) local.target.values[k] = 1.5 * det.values[k] + 0.2;
    DiffusionConfig fit = cfg;
    fit.max_steps = 2000;
    fit.epochs = 2000;
    fit.learning_rate = 2e-3;
    fit.hidden_channels = 32;

    const NoiseSchedule schedule = NoiseSchedule::linear(fit.n_train_steps, fit.beta_start, fit.beta_end);
    auto eval_loss = [&](const DenoiserParams& p) {
        // Residual over the deterministic field, standardized as in training.
        PmField target = local.target;
        for (std::size_t k = 0; k < target.values.size(); ++k)
            target.values[k] = (target.values[k] - det.values[k] - p.target_mean[k % 3]) / p.target_scale[k % 3];
        Rng rng(99);
        double sum = 0.0;
        int n = 0;
        for (int i = 1; i <= fit.n_train_steps; ++i)
            for (int rep = 0; rep < 4; ++rep, ++n) {
                const NoisedField nf = forward_noise(target, i, schedule, rng);
                sum += denoiser_loss_and_grad(p, nf.x, local.cond, i, nf.eps, nullptr);
            }
        return sum / n;
    };
    DenoiserParams start = DenoiserParams::init(local.cond.channels, fit.hidden_channels, fit.time_embed_dim, fit.seed);
    set_target_stats(start, {local}, fit);
    const DeeResult r = train_dee({local}, fit);
    const double first = eval_loss(start), last = eval_loss(r.params);
    MESSAGE("denoiser loss " << first << " -> " << last);
    CHECK(last < 0.1 * first);
}

TEST_CASE("sampler: step grid, closed-form drift, determinism") {
    CHECK(sample_steps(1000, 50).front() == 981);
    CHECK(sample_steps(1000, 50).back() == 1);
    CHECK(sample_steps(10, 10) == std::vector<int>{10, 9, 8, 7, 6, 5, 4, 3, 2, 1});
    CHECK_THROWS_AS(sample_steps(10, 11), Error);

    // Zero predicted noise on the full step grid: each step divides by
    // sqrt(1 - beta_t), so the output is x_N / sqrt(abar_N).
    const NoiseSchedule s = NoiseSchedule::linear(100, 1e-3, 5e-2);
    const NoisePredictor zero = [](const PmField& x, int) { return PmField::zeros(x.n_lat, x.n_lon); };
    const PmField out = ancestral_sample(zero, 3, 3, s, sample_steps(100, 100), 11, false);
    Rng rng(11);
    for (double v : out.values) {
        double expect = rng.normal();
        for (int t = 100; t >= 1; --t) expect /= std::sqrt(1.0 - s.beta[t]);
        CHECK(v == doctest::Approx(expect).epsilon(1e-12));
    }

    // Reverse variance is nonnegative everywhere on a strided grid.
    const auto steps = sample_steps(100, 7);
    for (std::size_t k = 0; k < steps.size(); ++k) {
        const int t = steps[k];
        const int p = k + 1 < steps.size() ? steps[k + 1] : 0;
        const double be = 1.0 - s.alpha_bar[t] / s.alpha_bar[p];
        CHECK(be * (1.0 - s.alpha_bar[p]) / (1.0 - s.alpha_bar[t]) >= 0.0);
    }

    // An exact predictor for a single-point data distribution returns it.
    const PmField target = random_pm(4, 4, 21);
    const NoisePredictor exact = [&](const PmField& x, int t) {
        PmField e = x;
        for (std::size_t k = 0; k < e.values.size(); ++k)
            e.values[k] = (x.values[k] - std::sqrt(s.alpha_bar[t]) * target.values[k]) / std::sqrt(1.0 - s.alpha_bar[t]);
        return e;
    };
    for (std::uint64_t seed : {1u, 2u}) {
        const PmField r = ancestral_sample(exact, 4, 4, s, sample_steps(100, 10), seed);
        double se = 0.0;
        for (std::size_t k = 0; k < r.values.size(); ++k) se += std::pow(r.values[k] - target.values[k], 2);
        CHECK(std::sqrt(se / r.values.size()) <= 0.05);
    }

    const NoisePredictor blowup = [](const PmField& x, int t) {
        PmField e = x;
        if (t < 50) e.values[0] = NAN;
        return e;
    };
    try {
        ancestral_sample(blowup, 2, 2, s, sample_steps(100, 10), 3);
        FAIL("expected a sampling failure");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::SamplingFailure);
        CHECK(e.index() == 41);
    }
}

TEST_CASE("trained denoiser samples: determinism and seed sensitivity") {
    const GridSpec g = small_grid(6, 6);
    const ConditioningPack c = ConditioningPack::build(random_state(g, 1, 4));
    const DiffusionConfig cfg = tiny_diffusion();
    const DenoiserParams p = DenoiserParams::init(c.channels, cfg.hidden_channels, cfg.time_embed_dim, 1);
    const PmField a = denoise_sample(c, p, cfg, 5);
    CHECK(a == denoise_sample(c, p, cfg, 5));
    CHECK_FALSE(a == denoise_sample(c, p, cfg, 6));
    for (double v : a.values) CHECK(std::isfinite(v));
}

TEST_CASE("climatology: constant, alternating, single bucket, empty bucket") {
    const GridSpec g = small_grid(2, 3);
    {
        const Climatology c = build_climatology(pm_series(g, std::vector<double>(8, 2e-8)), 4, 2);
        for (int b = 0; b < 2; ++b)
            for (std::size_t k = 0; k < g.cells() * 3; ++k) {
                CHECK(c.mean[b][k] == static_cast<double>(static_cast<float>(2e-8 * (k % 3 + 1))));
                CHECK(c.spread[b][k] == 0.0);
            }
    }
    {
        // Period 4, 4 buckets; bucket 1 sees t = 1, 5, 9, 13 with values 1, 3, 1, 3.
        std::vector<double> v(16);
        for (int t = 0; t < 16; ++t) v[t] = (t % 4 == 1) ? ((t / 4) % 2 ? 3.0 : 1.0) : 0.5;
        const Climatology c = build_climatology(pm_series(g, v), 4, 4);
        CHECK(c.mean[1][0] == 2.0);
        CHECK(c.spread[1][0] == 1.0);
        CHECK(c.mean[1][2] == 6.0);  // third PM channel carries 3x
        CHECK(c.spread[1][2] == 3.0);
        CHECK(c.mean[0][0] == 0.5);
        CHECK(c.spread[0][0] == 0.0);
    }
    {
        const std::vector<double> v{1.0, 2.0, 4.0, 8.0, 16.0};
        const Climatology c = build_climatology(pm_series(g, v), 5, 1);
        CHECK(c.mean[0][0] == doctest::Approx(31.0 / 5).epsilon(1e-15));
        double sq = 0.0;
        for (double x : v) sq += (x - 6.2) * (x - 6.2);
        CHECK(c.spread[0][0] == doctest::Approx(std::sqrt(sq / 5)).epsilon(1e-12));
    }
    {
        // Timestamps 0, 2, 4, 6 never reach the odd buckets.
        auto s = pm_series(g, {1, 1, 1, 1});
        for (std::size_t t = 0; t < s.size(); ++t) s[t].timestamp = static_cast<std::int64_t>(2 * t);
        try {
            build_climatology(s, 4, 4);
            FAIL("expected insufficient data");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::InsufficientData);
            CHECK(std::string(e.what()).find("bucket 1") != std::string::npos);
        }
    }
    CHECK_THROWS_AS(build_climatology(pm_series(g, {1, 2}), 4, 1), Error);
}

TEST_CASE("climatology file round trip") {
    const GridSpec g = small_grid(3, 4);
    std::vector<double> v;
    for (int t = 0; t < 12; ++t) v.push_back(1e-8 * (1 + t % 5));
    const Climatology c = build_climatology(pm_series(g, v), 6, 3);
    const auto path = std::filesystem::temp_directory_path() / "syncast_clim_test.scg";
    write_climatology(c, path);
    const Climatology r = read_climatology(path);
    CHECK(r.period_hours == 6);
    CHECK(r.buckets == 3);
    CHECK(r.grid == c.grid);
    for (int b = 0; b < 3; ++b)
        for (std::size_t k = 0; k < c.mean[b].size(); ++k) {
            CHECK(r.mean[b][k] == static_cast<double>(static_cast<float>(c.mean[b][k])));
            CHECK(r.spread[b][k] == static_cast<double>(static_cast<float>(c.spread[b][k])));
        }
    std::filesystem::remove(path);
}

TEST_CASE("gate: else-branch exactness, single pixel, monotone in delta, idempotent") {
    const GridSpec g = small_grid(4, 4);
    Climatology clim;
    clim.grid = g;
    clim.period_hours = 1;
    clim.buckets = 1;
    clim.mean.assign(1, std::vector<double>(g.cells() * 3, 1.0));
    clim.spread.assign(1, std::vector<double>(g.cells() * 3, 0.5));

    AtmosphericState pred = random_state(g, 1, 1, 0.1);
    for (std::size_t k = 0; k < g.cells(); ++k)
        for (int v = 0; v < 3; ++v) pred.surface[k * kSurfaceVars + kPmOffset + v] = 0.9f;
    AtmosphericState refined = pred;
    for (std::size_t k = 0; k < g.cells(); ++k)
        for (int v = 0; v < 3; ++v) refined.surface[k * kSurfaceVars + kPmOffset + v] = 7.0f;

    const GateResult none = climatology_gate(pred, refined, clim, 0.0);
    CHECK(none.state == pred);
    CHECK(none.refined_values == 0);

    AtmosphericState one = pred;
    one.sfc(2, 3, kPmOffset + 1) = 1.2f;  // above 1 + 0 * 0.5
    const GateResult hit = climatology_gate(one, refined, clim, 0.0);
    CHECK(hit.refined_values == 1);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            CHECK(hit.cell[i * 4 + j] == (i == 2 && j == 3 ? 1 : 0));
            for (int v = 0; v < kSurfaceVars; ++v)
                CHECK((hit.state.sfc(i, j, v) != one.sfc(i, j, v)) == (i == 2 && j == 3 && v == kPmOffset + 1));
        }
    CHECK(hit.state.upper == one.upper);

    Rng rng(4);
    AtmosphericState wide = pred;
    for (std::size_t k = 0; k < g.cells(); ++k)
        for (int v = 0; v < 3; ++v) wide.surface[k * kSurfaceVars + kPmOffset + v] = static_cast<float>(0.5 + 2.0 * rng.uniform());
    std::size_t prev = g.cells() * 3 + 1;
    std::vector<std::uint8_t> prev_cells(g.cells(), 1);
    for (double d : {0.0, 0.5, 1.0, 2.0, HUGE_VAL}) {
        const GateResult r = climatology_gate(wide, refined, clim, d);
        CHECK(r.refined_values <= prev);
        for (std::size_t k = 0; k < g.cells(); ++k) CHECK(r.cell[k] <= prev_cells[k]);
        prev = r.refined_values;
        prev_cells = r.cell;
        // Gating again with the same inputs leaves the output unchanged.
        CHECK(climatology_gate(r.state, refined, clim, d).state == r.state);
    }
    CHECK(prev == 0);
    CHECK(climatology_gate(wide, refined, clim, INFINITY).state == wide);

    Climatology other = clim;
    other.grid = small_grid(4, 5);
    CHECK_THROWS_AS(climatology_gate(pred, refined, other, 1.0), Error);
}
