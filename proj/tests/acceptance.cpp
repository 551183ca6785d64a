// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metric_oracles.hpp"
#include "syncast/commands.hpp"
#include "syncast/datagen.hpp"
#include "syncast/diffusion.hpp"
#include "syncast/grid_file.hpp"
#include "syncast/metrics.hpp"
#include "syncast/pipeline.hpp"
#include "syncast/regrid.hpp"
#include "syncast/training.hpp"
#include "test_util.hpp"

using namespace syncast;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> lognormal_field(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = std::exp(rng.normal());
    return v;
}

Verdict metric_oracles() {
    const auto t0 = std::chrono::steady_clock::now();
    const GridSpec g = small_grid(8, 8, 50.0);
    Rng rng(2024);
    double worst = 0.0;
    bool tables = true;
    for (int trial = 0; trial < 200; ++trial) {
        const auto o = lognormal_field(rng, 64);
        auto p = lognormal_field(rng, 64);
        for (std::size_t k = 0; k < 64; ++k) p[k] = 0.5 * p[k] + 0.7 * o[k];
        worst = std::max(worst, std::abs(lat_weighted_rmse(p, o, g) - oracle::lat_rmse(p, o, g)));
        worst = std::max(worst, std::abs(rqe(p, o, high_quantile_set()) - oracle::rqe(p, o, high_quantile_set())));
        worst = std::max(worst, std::abs(rqe(p, o, quartile_set()) - oracle::rqe(p, o, quartile_set())));
        for (double pct : {50.0, 90.0, 99.0}) {
            const double thr = oracle::quantile(o, pct / 100.0);
            const oracle::Table bt = oracle::contingency(p, o, thr);
            tables = tables && contingency(p, o, thr) == ContingencyTable{bt.a, bt.b, bt.c, bt.d};
            worst = std::max(worst, std::abs(sedi_at_percentile(p, o, pct) - oracle::sedi(bt)));
        }
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-10 && tables && secs < 10.0,
            fmt("200 fields, max |diff| %.3g, tables %s, %.2f s", worst, tables ? "equal" : "DIFFER", secs)};
}

Verdict sedi_properties() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(8);
    int antisym_fail = 0, equal_fail = 0;
    for (int k = 0; k < 1000; ++k) {
        const ContingencyTable t{static_cast<long>(rng.below(50)), static_cast<long>(rng.below(50)),
                                 1 + static_cast<long>(rng.below(50)), 1 + static_cast<long>(rng.below(50))};
        const double h = static_cast<double>(t.a) / (t.a + t.c), f = static_cast<double>(t.b) / (t.b + t.d);
        if (sedi_from_rates(f, h) != -sedi_from_rates(h, f)) ++antisym_fail;
        if (sedi_from_rates(h, h) != 0.0) ++equal_fail;
    }
    const double perfect = sedi_from_rates(1.0, 0.0);
    const double secs = seconds_since(t0);
    return {antisym_fail == 0 && equal_fail == 0 && perfect >= 0.99 && secs < 5.0,
            fmt("antisymmetry failures %d/1000, H=F nonzero %d, perfect %.6f, %.3f s", antisym_fail, equal_fail, perfect,
                secs)};
}

Verdict pm_transform() {
    double worst = 0.0;
    for (double e = -11.0; e <= -5.0 + 1e-12; e += 0.001) {
        const double x = std::pow(10.0, e);
        worst = std::max(worst, std::abs(pm_log_inverse(pm_log_forward(x)) / x - 1.0));
    }
    const double a0 = std::abs(pm_log_forward(1e-11) - 0.0), a1 = std::abs(pm_log_forward(1e-9) - 0.5),
                 a2 = std::abs(pm_log_forward(1e-7) - 1.0);
    const double anchor = std::max({a0, a1, a2});
    return {worst <= 1e-9 && anchor <= 1e-12, fmt("round trip max rel %.3g, anchor max |err| %.3g", worst, anchor)};
}

Verdict gradient_check() {
    const auto t0 = std::chrono::steady_clock::now();
    const GridSpec g = small_grid(8, 8);
    ModelConfig cfg = micro_config(8, 8, 2, 8, 1);
    cfg.decoder_depth = 1;
    const ModelParams params = ModelParams::init(cfg, 5);
    const TrainingPair pair{random_state(g, 2, 11), random_state(g, 2, 12)};
    const GradCheckResult r = grad_check(params, pair, TrainConfig{}, 1e-5);
    const double secs = seconds_since(t0);
    return {r.checked == params.parameter_count() && r.max_rel_error <= 1e-4 && secs < 120.0,
            fmt("%zu parameters, max rel err %.3g at %s, %.1f s", r.checked, r.max_rel_error, r.worst.c_str(), secs)};
}

Verdict lora_contracts() {
    const auto t0 = std::chrono::steady_clock::now();
    const GridSpec g = small_grid(8, 16);
    const ModelParams p = ModelParams::init(micro_config(8, 16, 2, 8, 2), 12);
    const AtmosphericState x = random_state(g, 2, 13);
    const LoraAdapterSet fresh = LoraAdapterSet::init(p, {}, 14);
    const double zero_change = max_abs_diff(forward(x, p, &fresh), forward(x, p));

    // Fine-tune on a few pairs, then check the base and the merge.
    ModelParams base = p;
    base.frozen = true;
    const ModelParams snapshot = base;
    std::vector<TrainingPair> pairs;
    for (int k = 0; k < 3; ++k) pairs.push_back({random_state(g, 2, 20 + k), random_state(g, 2, 30 + k)});
    const RegionSpec region = RegionSpec::from_indices(g, 0, 8, 0, 16, true);
    TrainConfig ft;
    ft.learning_rate = 1e-2;
    ft.epochs = 5;
    const auto tuned = finetune_lora(base, fresh, pairs, region, ft);
    const bool base_same = base == snapshot;

    const AtmosphericState ya = forward(x, base, &tuned.adapters);
    const AtmosphericState ym = forward(x, merge_lora(base, tuned.adapters));
    double merged = 0.0;
    for (std::size_t k = 0; k < ya.surface.size(); ++k)
        merged = std::max(merged, std::abs(ya.surface[k] - ym.surface[k]) / std::max(1e-3, std::abs(1.0 * ya.surface[k])));
    for (std::size_t k = 0; k < ya.upper.size(); ++k)
        merged = std::max(merged, std::abs(ya.upper[k] - ym.upper[k]) / std::max(1e-3, std::abs(1.0 * ya.upper[k])));
    const double moved = max_abs_diff(ya, forward(x, base));
    const double secs = seconds_since(t0);
    return {zero_change <= 1e-6 && base_same && merged <= 1e-5 && moved > 0.0 && secs < 60.0,
            fmt("zero-init change %.3g, base %s, merged rel %.3g (adapters move output by %.3g), %.1f s", zero_change,
                base_same ? "bit-identical" : "CHANGED", merged, moved, secs)};
}

double dataset_loss(const std::vector<TrainingPair>& pairs, const ModelParams& p, const TrainConfig& tc,
                    const LoraAdapterSet* a = nullptr, const RegionSpec* r = nullptr) {
    double s = 0.0;
    for (const auto& pr : pairs) s += weighted_forecast_loss(forward(pr.input, p, a, r), pr.target, tc);
    return s / static_cast<double>(pairs.size());
}

Verdict overfit() {
    const auto t0 = std::chrono::steady_clock::now();
    SyntheticConfig sc;
    sc.seed = 3;
    sc.grid = GridSpec::regular(45.0, 0.0, 16, 16, 0.25);
    sc.levels = 4;
    sc.n_steps = 9;
    const auto seq = gen_synthetic_sequence(sc);
    const NormalizationStats stats = compute_stats(seq);
    const auto pairs = normalized_pairs(seq, stats, 1);
    ModelConfig mc = micro_config(16, 16, 4, 16, 1);
    mc.decoder_depth = 1;
    TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.epochs = 1000;
    tc.max_steps = 500;
    const double l0 = dataset_loss(pairs, ModelParams::init(mc, tc.seed), tc);
    const auto trained = train_backbone(pairs, mc, tc);
    const double l1 = dataset_loss(pairs, trained.params, tc);
    const double bb_secs = seconds_since(t0);
    const double bb_red = 1.0 - l1 / l0;

    // Regional fine-tune on a shifted regime.
    SyntheticConfig shifted = sc;
    shifted.seed = 11;
    shifted.emission_rate = 6e-10;
    shifted.mean_zonal_wind = -3.0;
    const RegionSpec region = RegionSpec::from_indices(sc.grid, 4, 8, 4, 8, true);
    const auto rp = normalized_pairs(gen_synthetic_sequence(shifted), stats, 1, &region);
    ModelParams base = trained.params;
    base.frozen = true;
    LoraConfig lc;
    lc.rank = 4;
    lc.alpha = 8.0;
    lc.dropout = 0.0;
    const auto adapters = LoraAdapterSet::init(base, lc, 5);
    TrainConfig ft = tc;
    ft.learning_rate = 3e-3;
    const double r0 = dataset_loss(rp, base, ft, &adapters, &region);
    const auto tuned = finetune_lora(base, adapters, rp, region, ft);
    const double r1 = dataset_loss(rp, base, ft, &tuned.adapters, &region);
    const double lora_red = 1.0 - r1 / r0;
    const bool frozen = base == trained.params;
    return {pairs.size() == 8 && bb_red >= 0.95 && bb_secs < 300.0 && lora_red >= 0.90 && frozen,
            fmt("backbone %zu pairs %.4g -> %.4g (%.1f%%, %.1f s); regional adapters %.4g -> %.4g (%.1f%%), base %s",
                pairs.size(), l0, l1, 100 * bb_red, bb_secs, r0, r1, 100 * lora_red,
                frozen ? "bit-identical" : "CHANGED")};
}

struct DeeOutcome {
    bool rmse_ok = false, rqe_better = false, sedi_better = false;
    std::string line;
};

DeeOutcome dee_seed(std::uint64_t seed) {
    const int lead = 6;
    SyntheticConfig sc;
    sc.seed = seed;
    sc.grid = GridSpec::regular(45.0, 0.0, 16, 16, 0.25);
    sc.levels = 4;
    sc.n_steps = 800;
    const auto seq = gen_synthetic_sequence(sc);
    const auto split = split_sequence(seq, 0.7, 0.1);
    const NormalizationStats stats = compute_stats(split.train);
    const auto train = normalized_pairs(split.train, stats, lead);
    const auto test = normalized_pairs(split.test, stats, lead);

    ModelConfig mc = micro_config(16, 16, 4, 16, 1);
    mc.decoder_depth = 1;
    mc.lead_hours = lead;
    TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.epochs = 1000;
    tc.max_steps = 2000;
    tc.seed = seed;
    ModelParams base = train_backbone(train, mc, tc).params;
    base.frozen = true;

    DiffusionConfig dc;
    dc.n_train_steps = 200;
    dc.beta_start = 1e-4;
    dc.beta_end = 0.05;
    dc.n_sample_steps = 20;
    dc.learning_rate = 1e-3;
    dc.epochs = 1000;
    dc.max_steps = 5000;
    dc.hidden_channels = 32;
    dc.seed = seed;
    dc.ensemble_size = 8;
    dc.gate_on_mean = true;
    const auto dee = train_dee(denoise_pairs(train, base), dc);
    const Climatology clim = build_climatology(split.train, 24, 4);

    std::vector<AtmosphericState> det, gated, truth;
    for (std::size_t k = 0; k < test.size(); ++k) {
        const AtmosphericState pred = forward(test[k].input, base);
        const auto rf = refine_forecast(pred, stats, dee.params, dc, clim, 1.0, 1000 + k);
        det.push_back(denormalize_state(pred, stats));
        gated.push_back(rf.gated.state);
        truth.push_back(denormalize_state(test[k].target, stats));
    }
    EvalOptions o;
    o.variables = {"pm1", "pm2p5", "pm10"};
    o.quantiles = {0.99};
    o.quartile_rqe = false;
    const MetricReport rd = evaluate({{lead, det}}, truth, {}, o), rg = evaluate({{lead, gated}}, truth, {}, o);
    DeeOutcome out;
    out.rmse_ok = true;
    double qd = 0, qg = 0, sd = 0, sg = 0, worst_ratio = 0;
    for (const auto& v : o.variables) {
        qd += std::abs(rd.value(v, lead, "all", "rqe")) / 3;
        qg += std::abs(rg.value(v, lead, "all", "rqe")) / 3;
        sd += rd.value(v, lead, "all", "sedi_p90") / 3;
        sg += rg.value(v, lead, "all", "sedi_p90") / 3;
        const double ratio = rg.value(v, lead, "all", "lat_rmse") / rd.value(v, lead, "all", "lat_rmse");
        worst_ratio = std::max(worst_ratio, ratio);
        out.rmse_ok = out.rmse_ok && ratio <= 1.02;
    }
    out.rqe_better = qg < qd;
    out.sedi_better = sg > sd;
    out.line = fmt("seed %llu: rmse ratio max %.4f, |RQE@.99| %.4f -> %.4f, SEDI@90 %.4f -> %.4f",
                   static_cast<unsigned long long>(seed), worst_ratio, qd, qg, sd, sg);
    return out;
}

Verdict dee_direction() {
    const auto t0 = std::chrono::steady_clock::now();
    int good = 0;
    bool rmse_all = true;
    std::string lines;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const DeeOutcome d = dee_seed(seed);
        std::printf("    %s\n", d.line.c_str());
        std::fflush(stdout);
        rmse_all = rmse_all && d.rmse_ok;
        good += d.rmse_ok && d.rqe_better && d.sedi_better;
    }
    const double secs = seconds_since(t0);
    return {good >= 3 && secs < 900.0,
            fmt("%d/4 seeds improve |RQE| and SEDI within the RMSE bound (rmse bound held on all: %s), %.0f s", good,
                rmse_all ? "yes" : "no", secs)};
}

Verdict gate_exactness() {
    const GridSpec g = small_grid(8, 8);
    SyntheticConfig sc;
    sc.seed = 5;
    sc.grid = g;
    sc.levels = 2;
    sc.n_steps = 96;
    const auto seq = gen_synthetic_sequence(sc);
    const Climatology clim = build_climatology(seq, 24, 4);
    Rng rng(6);

    // A forecast below every threshold.
    AtmosphericState calm = seq[40];
    const auto& mean = clim.mean[clim.bucket_of(calm.timestamp)];
    for (std::size_t k = 0; k < g.cells(); ++k)
        for (int v = 0; v < 3; ++v) calm.surface[k * kSurfaceVars + kPmOffset + v] = static_cast<float>(0.9 * mean[k * 3 + v]);
    AtmosphericState refined = calm;
    for (auto& x : refined.surface) x = static_cast<float>(x * (1.5 + rng.uniform()));
    const GateResult none = climatology_gate(calm, refined, clim, 0.0);
    const bool else_exact = none.state == calm && none.refined_values == 0;

    // Monotone shrinkage over delta on a field with a spread of exceedances.
    AtmosphericState wild = seq[41];
    for (std::size_t k = 0; k < g.cells(); ++k)
        for (int v = 0; v < 3; ++v) {
            const std::size_t c = k * 3 + v;
            const double spread = clim.spread[clim.bucket_of(wild.timestamp)][c];
            const double m = clim.mean[clim.bucket_of(wild.timestamp)][c];
            wild.surface[k * kSurfaceVars + kPmOffset + v] = static_cast<float>(m + 3.0 * spread * rng.uniform());
        }
    AtmosphericState wild_refined = wild;
    for (auto& x : wild_refined.surface) x = static_cast<float>(x * 1.25);
    bool nested = true;
    std::vector<std::size_t> counts;
    std::vector<std::uint8_t> prev(g.cells(), 1);
    for (double d : {0.0, 0.5, 1.0, 2.0, HUGE_VAL}) {
        const GateResult r = climatology_gate(wild, wild_refined, clim, d);
        for (std::size_t k = 0; k < g.cells(); ++k) nested = nested && r.cell[k] <= prev[k];
        prev = r.cell;
        counts.push_back(r.refined_values);
    }
    const bool at_inf = climatology_gate(wild, wild_refined, clim, HUGE_VAL).state == wild;
    bool shrinking = counts.back() == 0;
    for (std::size_t k = 1; k < counts.size(); ++k) shrinking = shrinking && counts[k] <= counts[k - 1];
    return {else_exact && nested && shrinking && at_inf && counts.front() > 0,
            fmt("else-branch %s; refined values over delta {0,.5,1,2,inf}: %zu %zu %zu %zu %zu, nested %s",
                else_exact ? "bit-equal" : "DIFFERS", counts[0], counts[1], counts[2], counts[3], counts[4],
                nested ? "yes" : "no")};
}

Verdict harmonization() {
    const GridSpec src = GridSpec::regular(10.0, 0.0, 6, 8, 1.0);
    const GridSpec dst = GridSpec::regular(9.75, 0.5, 17, 25, 0.25);
    std::vector<double> f(src.cells());
    for (int i = 0; i < src.n_lat; ++i)
        for (int j = 0; j < src.n_lon; ++j) f[i * src.n_lon + j] = 2.0 * src.lat_deg[i] + 3.0 * src.lon_deg[j];
    const auto out = regrid_bilinear(f, src, dst);
    double affine = 0.0;
    for (int i = 0; i < dst.n_lat; ++i)
        for (int j = 0; j < dst.n_lon; ++j)
            affine = std::max(affine, std::abs(out[i * dst.n_lon + j] - (2.0 * dst.lat_deg[i] + 3.0 * dst.lon_deg[j])));

    const GridSpec fine = GridSpec::regular(60.0, 0.0, 16, 16, 0.25);
    const GridSpec coarse = coarsened_grid(fine, 4);
    Rng rng(2);
    std::vector<double> x(fine.cells());
    for (auto& v : x) v = rng.normal() + 3.0;
    auto weighted_mean = [](const std::vector<double>& v, const GridSpec& g) {
        const auto w = lat_weights(g);
        double num = 0, den = 0;
        for (int i = 0; i < g.n_lat; ++i)
            for (int j = 0; j < g.n_lon; ++j) {
                num += w[i] * v[i * g.n_lon + j];
                den += w[i];
            }
        return num / den;
    };
    const double mf = weighted_mean(x, fine);
    const double conserve = std::abs(weighted_mean(downsample_to_resolution(x, fine, coarse), coarse) - mf) / std::abs(mf);

    const GridSpec g = small_grid(3, 3);
    AtmosphericState a = random_state(g, 2, 1), b = random_state(g, 2, 2);
    a.timestamp = 0;
    b.timestamp = 6;
    const auto up = temporal_upsample_linear({a, b}, 6);
    const bool ends = up.size() == 7 && up.front() == a && up.back() == b;
    return {affine <= 1e-6 && conserve <= 1e-6 && ends,
            fmt("affine regrid max err %.3g, lat-weighted mean rel change %.3g, upsample endpoints %s", affine, conserve,
                ends ? "bit-exact" : "DIFFER")};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
    return files;
}

fs::path g_scratch;  // removed at exit once the command chain has run

struct ChainRuns {
    fs::path scratch;
    std::map<std::string, std::string> a, b;
    fs::path root_a, root_b;
};

RunConfig chain_config() {
    RunConfig c = load_run_config(SYNCAST_TINY_CONFIG);
    c.metrics.lead_steps = {1, 2, 3, 4, 5, 6};
    c.validate();
    return c;
}

// Runs every command twice into separate directories; shared by the
// reproducibility and rollout-report criteria.
const ChainRuns& chain_runs() {
    static ChainRuns runs = [] {
        ChainRuns r;
        r.scratch = fs::temp_directory_path() / ("syncast_acceptance_" + std::to_string(::getpid()));
        fs::remove_all(r.scratch);
        g_scratch = r.scratch;
        const RunConfig c = chain_config();
        for (const char* side : {"a", "b"}) {
            const RunPaths paths = run_paths(c, r.scratch / side);
            cmd_gen_data(c, paths);
            cmd_train(c, paths);
            cmd_finetune(c, paths);
            cmd_train_dee(c, paths);
            cmd_infer(c, paths);
            cmd_rollout(c, paths);
            cmd_evaluate(c, paths);
            cmd_plot(c, paths);
            (std::string(side) == "a" ? r.root_a : r.root_b) = paths.root;
        }
        r.a = tree(r.root_a);
        r.b = tree(r.root_b);
        return r;
    }();
    return runs;
}

Verdict reproducibility() {
    const auto t0 = std::chrono::steady_clock::now();
    const ChainRuns& r = chain_runs();
    std::size_t differing = 0, ppm = 0, ckpt = 0;
    for (const auto& [name, bytes] : r.a) {
        auto it = r.b.find(name);
        if (it == r.b.end() || it->second != bytes) ++differing;
        ppm += fs::path(name).extension() == ".ppm";
        ckpt += fs::path(name).extension() == ".sck";
    }
    const bool same_names = r.a.size() == r.b.size();
    return {same_names && differing == 0 && ppm > 0 && ckpt == 3,
            fmt("%zu files (%zu checkpoints, %zu images), %zu differ, %.1f s", r.a.size(), ckpt, ppm, differing,
                seconds_since(t0))};
}

Verdict rollout_consistency() {
    const GridSpec g = small_grid(8, 16);
    const ModelParams p = ModelParams::init(micro_config(8, 16, 2, 8, 1), 3);
    const AtmosphericState x = random_state(g, 2, 4);
    const auto one = rollout(x, p, 1);
    const bool bit_equal = one.size() == 1 && one[0] == forward(x, p);

    const ChainRuns& r = chain_runs();
    const std::string table = "reports/rollout_rmse.txt";
    const bool present = r.a.count(table) && r.b.count(table);
    const bool same = present && r.a.at(table) == r.b.at(table);
    int rows = 0;
    if (present) {
        std::istringstream in(r.a.at(table));
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line))
            if (!line.empty()) ++rows;
    }
    return {bit_equal && present && same && rows == 6,
            fmt("rollout(x,1) %s forward(x); lead table %s with %d lead rows, %s across reruns",
                bit_equal ? "bit-equals" : "DIFFERS from", present ? "written" : "MISSING", rows,
                same ? "identical" : "DIFFERENT")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
        {"metric oracle equivalence", metric_oracles},
        {"SEDI properties", sedi_properties},
        {"PM log transform", pm_transform},
        {"gradient check", gradient_check},
        {"LoRA contracts", lora_contracts},
        {"overfit (backbone and regional adapters)", overfit},
        {"DEE direction on heavy-tailed data", dee_direction},
        {"gate exactness and monotone delta", gate_exactness},
        {"harmonization exactness", harmonization},
        {"byte-identical reruns", reproducibility},
        {"rollout consistency and lead table", rollout_consistency},
    };
    std::set<int> only;
    for (int k = 1; k < argc; ++k) only.insert(std::atoi(argv[k]));

    int failed = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!only.empty() && !only.count(id)) continue;
        Verdict v;
        try {
            v = criteria[k].second();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        failed += !v.pass;
        std::printf("criterion %2d %s  %s: %s\n", id, v.pass ? "PASS" : "FAIL", criteria[k].first.c_str(),
                    v.detail.c_str());
        std::fflush(stdout);
    }
    if (!g_scratch.empty()) fs::remove_all(g_scratch);
    return failed == 0 ? 0 : 1;
}
