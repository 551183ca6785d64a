#include "syncast/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <optional>
#include <sstream>

#include "syncast/checkpoint.hpp"
#include "syncast/grid_file.hpp"
#include "syncast/pipeline.hpp"
#include "syncast/plot.hpp"
#include "syncast/rng.hpp"

namespace syncast {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* const kSplits[] = {"train", "val", "test"};

void write_text(const fs::path& path, const std::string& text) {
    write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text(const fs::path& path) {
    const auto bytes = read_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

std::string pretty(const json& j) { return j.dump(2) + "\n"; }

void begin(const RunConfig& c, const RunPaths& paths) {
    c.validate();
    write_text(paths.config(), pretty(to_json(c)));
}

std::optional<RegionSpec> region_of(const RunConfig& c) {
    if (!c.region.enabled) return std::nullopt;
    return c.region.resolve(c.data.synthetic.grid);
}

std::vector<AtmosphericState> load_split(const RunPaths& paths, const DatasetManifest& m, const std::string& split) {
    return read_grid_file(paths.root / "data" / m.files.at(split));
}

std::vector<AtmosphericState> cropped(std::vector<AtmosphericState> states, const std::optional<RegionSpec>& region) {
    if (region)
        for (auto& s : states) s = crop_region(s, *region);
    return states;
}

Checkpoint require_checkpoint(const RunPaths& paths, const std::string& kind, const std::string& producer) {
    const fs::path path = paths.checkpoint(kind);
    if (!fs::exists(path)) fail(ErrorCode::InvalidConfig, kind + " checkpoint missing at " + path.string() + "; run " + producer + " first");
    return read_checkpoint(path);
}

void check_model(const Checkpoint& ck, const RunConfig& c) {
    if (ck.config != to_json(c.model))
        fail(ErrorCode::InvalidConfig, "model: checkpoint was written for a different model configuration");
}

ModelParams load_base(const RunConfig& c, const RunPaths& paths) {
    const Checkpoint ck = require_checkpoint(paths, "backbone", "train");
    check_model(ck, c);
    ModelParams p = backbone_from_checkpoint(ck);
    p.frozen = true;
    return p;
}

LoraAdapterSet load_adapters(const RunPaths& paths, const ModelParams& base) {
    const Checkpoint ck = require_checkpoint(paths, "adapters", "finetune");
    if (ck.base_hash != file_hash(paths.checkpoint("backbone")))
        fail(ErrorCode::HeaderMismatch, "adapters were trained on a different backbone checkpoint");
    return adapters_from_checkpoint(ck, base);
}

// Loss logs keep only what is reproducible: wall time goes to stderr.
std::string log_line(const StepRecord& r) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%ld,%d,%.17g\n", r.step, r.epoch, r.loss);
    return buf;
}

void write_log(const fs::path& path, long resumed_from, const std::vector<StepRecord>& records) {
    std::string out = "step,epoch,loss\n";
    if (resumed_from > 0 && fs::exists(path)) {
        std::istringstream in(read_text(path));
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (std::stol(line.substr(0, line.find(','))) < resumed_from) out += line + "\n";
        }
    }
    for (const auto& r : records) out += log_line(r);
    write_text(path, out);
}

long stop_at(long total, const CommandOptions& opts) {
    if (opts.stop_step < 0) fail(ErrorCode::InvalidConfig, "stop step must be >= 0");
    return opts.stop_step > 0 ? std::min(opts.stop_step, total) : total;
}

void report_progress(const char* what, long step, long total, const std::vector<StepRecord>& log) {
    if (log.empty()) {
        std::fprintf(stderr, "%s: already at step %ld of %ld\n", what, step, total);
        return;
    }
    std::fprintf(stderr, "%s: step %ld of %ld, loss %.6g, %.1f s\n", what, step, total, log.back().loss,
                 log.back().wall_seconds);
}

// Everything needed to turn an input state into a forecast file entry.
struct Forecaster {
    const RunConfig* c = nullptr;
    NormalizationStats stats;
    ModelParams base;
    std::optional<LoraAdapterSet> adapters;
    std::optional<RegionSpec> region;
    DenoiserParams denoiser;
    Climatology clim;

    const LoraAdapterSet* adapter_ptr() const { return adapters ? &*adapters : nullptr; }
    const RegionSpec* region_ptr() const { return region ? &*region : nullptr; }
};

Forecaster load_forecaster(const RunConfig& c, const RunPaths& paths, const DatasetManifest& m) {
    Forecaster f;
    f.c = &c;
    f.stats = m.stats;
    f.base = load_base(c, paths);
    f.region = region_of(c);
    if (f.region) f.adapters = load_adapters(paths, f.base);
    if (c.dee) {
        f.denoiser = denoiser_from_checkpoint(require_checkpoint(paths, "denoiser", "train-dee"));
        if (!fs::exists(paths.climatology()))
            fail(ErrorCode::InvalidConfig, "climatology missing at " + paths.climatology().string() + "; run train-dee first");
        f.clim = read_climatology(paths.climatology());
    }
    return f;
}

struct FinalForecast {
    AtmosphericState physical;
    std::vector<std::uint8_t> gate;
};

FinalForecast finalize(const Forecaster& f, const AtmosphericState& pred_norm, int lead_hours) {
    if (!f.c->dee) return {denormalize_state(pred_norm, f.stats), std::vector<std::uint8_t>(pred_norm.grid.cells(), 0)};
    const std::uint64_t seed = Rng({f.c->diffusion.seed, static_cast<std::uint64_t>(pred_norm.timestamp),
                                    static_cast<std::uint64_t>(lead_hours), 0x494e4652u})
                                   .next();
    RefinedForecast r = refine_forecast(pred_norm, f.stats, f.denoiser, f.c->diffusion, f.clim, f.c->climatology.delta, seed);
    return {std::move(r.gated.state), std::move(r.gated.cell)};
}

void write_forecast(const fs::path& path, const std::vector<FinalForecast>& forecasts, const DatasetManifest& m,
                    int lead_hours, bool dee) {
    std::vector<AtmosphericState> states;
    for (const auto& f : forecasts) states.push_back(f.physical);
    GridContainer g = states_to_container(states, VariableCatalog::standard(m.levels), m.step_hours);
    g.surface_vars.push_back(kProvenanceChannel);
    for (std::size_t t = 0; t < g.frames.size(); ++t) {
        const auto& src = g.frames[t].surface;
        std::vector<float> out;
        out.reserve(src.size() / kSurfaceVars * (kSurfaceVars + 1));
        for (std::size_t k = 0; k < forecasts[t].gate.size(); ++k) {
            out.insert(out.end(), src.begin() + static_cast<long>(k * kSurfaceVars),
                       src.begin() + static_cast<long>((k + 1) * kSurfaceVars));
            out.push_back(static_cast<float>(forecasts[t].gate[k]));
        }
        g.frames[t].surface = std::move(out);
    }
    g.extra["lead_hours"] = lead_hours;
    g.extra["dee"] = dee;
    write_grid_container(g, path);
}

LeadForecasts read_forecast(const fs::path& path) {
    if (!fs::exists(path)) fail(ErrorCode::InvalidConfig, "forecast file missing: " + path.string());
    const GridContainer g = read_grid_container(path);
    if (!g.extra.contains("lead_hours") || !g.extra.at("lead_hours").is_number_integer())
        fail(ErrorCode::HeaderMismatch, path.string() + " is not a forecast file (no lead_hours)");
    return {g.extra.at("lead_hours").get<int>(), container_to_states(g)};
}

void write_report(const RunPaths& paths, const std::string& stem, const MetricReport& report) {
    write_text(paths.report(stem + ".csv"), report.to_csv());
    write_text(paths.report(stem + ".json"), report.to_json().dump(2) + "\n");
}

}  // namespace

RunPaths run_paths(const RunConfig& c, const fs::path& out_dir) { return {out_dir / config_hash(c)}; }

DatasetManifest read_manifest(const RunPaths& paths) {
    const fs::path path = paths.manifest();
    if (!fs::exists(path)) fail(ErrorCode::InvalidConfig, "dataset manifest missing at " + path.string() + "; run gen-data first");
    DatasetManifest m;
    try {
        const json j = json::parse(read_text(path));
        m.config_hash = j.at("config_hash").get<std::string>();
        m.grid = grid_from_json(j.at("grid"));
        m.levels = j.at("levels").get<int>();
        m.step_hours = j.at("step_hours").get<int>();
        m.lead_hours = j.at("lead_hours").get<int>();
        m.files = j.at("files").get<std::map<std::string, std::string>>();
        m.spans = j.at("spans").get<std::map<std::string, std::vector<std::int64_t>>>();
        m.stats = stats_from_json(j.at("stats"));
    } catch (const json::exception& e) {
        fail(ErrorCode::Io, "dataset manifest " + path.string() + " is unreadable: " + e.what());
    }
    for (const char* split : kSplits)
        if (!m.files.count(split)) fail(ErrorCode::Io, std::string("dataset manifest lists no ") + split + " file");
    return m;
}

void cmd_gen_data(const RunConfig& c, const RunPaths& paths) {
    begin(c, paths);
    const SyntheticConfig& sc = c.data.synthetic;
    const auto seq = gen_synthetic_sequence(sc);
    const DatasetSplits splits = split_sequence(seq, c.data.train_fraction, c.data.val_fraction);
    const std::vector<AtmosphericState>* parts[] = {&splits.train, &splits.val, &splits.test};
    const std::size_t lead_steps = static_cast<std::size_t>(c.data.lead_hours / sc.step_hours);
    for (int k = 0; k < 3; ++k)
        if (parts[k]->size() <= lead_steps)
            fail(ErrorCode::InvalidConfig, std::string("data.synthetic.n_steps: the ") + kSplits[k] +
                                               " split is too short for a " + std::to_string(c.data.lead_hours) + " h lead");
    const NormalizationStats stats = compute_stats(splits.train);
    const VariableCatalog catalog = VariableCatalog::standard(sc.levels);

    json files = json::object(), spans = json::object();
    for (int k = 0; k < 3; ++k) {
        write_grid_file(*parts[k], paths.data(kSplits[k]), catalog, sc.step_hours);
        files[kSplits[k]] = std::string(kSplits[k]) + ".scg";
        spans[kSplits[k]] = {parts[k]->front().timestamp, parts[k]->back().timestamp,
                             static_cast<std::int64_t>(parts[k]->size())};
    }
    const json manifest = {{"config_hash", config_hash(c)}, {"grid", to_json(sc.grid)},  {"levels", sc.levels},
                           {"step_hours", sc.step_hours},   {"lead_hours", c.data.lead_hours}, {"files", files},
                           {"spans", spans},                {"stats", to_json(stats)}};
    write_text(paths.manifest(), pretty(manifest));
}

void cmd_train(const RunConfig& c, const RunPaths& paths, const CommandOptions& opts) {
    begin(c, paths);
    const DatasetManifest m = read_manifest(paths);
    const auto pairs = normalized_pairs(load_split(paths, m, "train"), m.stats, c.data.lead_hours);
    const long total = total_steps(pairs.size(), c.train);

    BackboneRun run = start_backbone_run(c.model, c.train);
    if (fs::exists(paths.checkpoint("backbone"))) {
        const Checkpoint ck = read_checkpoint(paths.checkpoint("backbone"));
        check_model(ck, c);
        run = BackboneRun{backbone_from_checkpoint(ck), optimizer_from_checkpoint(ck, {c.train.learning_rate}), ck.step, {}};
    }
    const long resumed = run.step;
    const long stop = stop_at(total, opts);
    if (run.step < stop) {
        continue_backbone(run, pairs, c.train, stop);
        write_checkpoint(backbone_checkpoint(run.params, &run.optimizer, run.step), paths.checkpoint("backbone"));
        write_log(paths.log("train"), resumed, run.log);
    }
    report_progress("train", run.step, total, run.log);
}

void cmd_finetune(const RunConfig& c, const RunPaths& paths, const CommandOptions& opts) {
    begin(c, paths);
    const DatasetManifest m = read_manifest(paths);
    const ModelParams base = load_base(c, paths);
    const std::string base_hash = file_hash(paths.checkpoint("backbone"));
    const RegionSpec region = c.region.resolve(m.grid);
    const auto pairs = normalized_pairs(load_split(paths, m, "train"), m.stats, c.data.lead_hours, &region);
    const long total = total_steps(pairs.size(), c.finetune);

    LoraRun run{LoraAdapterSet::init(base, c.lora, c.finetune.seed), Adam({c.finetune.learning_rate}), 0, {}};
    if (fs::exists(paths.checkpoint("adapters"))) {
        const Checkpoint ck = read_checkpoint(paths.checkpoint("adapters"));
        if (ck.base_hash != base_hash)
            fail(ErrorCode::HeaderMismatch, "adapters checkpoint was trained on a different backbone checkpoint");
        run = LoraRun{adapters_from_checkpoint(ck, base), optimizer_from_checkpoint(ck, {c.finetune.learning_rate}),
                      ck.step, {}};
    }
    const long resumed = run.step;
    const long stop = stop_at(total, opts);
    if (run.step < stop) {
        continue_lora(run, base, pairs, region, c.finetune, stop);
        write_checkpoint(adapter_checkpoint(run.adapters, &run.optimizer, run.step, base_hash), paths.checkpoint("adapters"));
        write_log(paths.log("finetune"), resumed, run.log);
    }
    report_progress("finetune", run.step, total, run.log);
}

void cmd_train_dee(const RunConfig& c, const RunPaths& paths, const CommandOptions& opts) {
    begin(c, paths);
    const DatasetManifest m = read_manifest(paths);
    const ModelParams base = load_base(c, paths);
    const std::optional<RegionSpec> region = region_of(c);
    std::optional<LoraAdapterSet> adapters;
    if (region) adapters = load_adapters(paths, base);
    const RegionSpec* rp = region ? &*region : nullptr;

    const auto train = load_split(paths, m, "train");
    const auto pairs = normalized_pairs(train, m.stats, c.data.lead_hours, rp);
    const auto dpairs = denoise_pairs(pairs, base, adapters ? &*adapters : nullptr, rp);
    if (dpairs.empty()) fail(ErrorCode::EmptyDataset, "no denoising pairs in the train split");
    const long total = dee_total_steps(dpairs.size(), c.diffusion);

    DeeRun run = start_dee_run(dpairs.front().cond.channels, c.diffusion);
    set_target_stats(run.params, dpairs, c.diffusion);
    if (fs::exists(paths.checkpoint("denoiser"))) {
        const Checkpoint ck = read_checkpoint(paths.checkpoint("denoiser"));
        run = DeeRun{denoiser_from_checkpoint(ck), optimizer_from_checkpoint(ck, {c.diffusion.learning_rate}), ck.step, {}};
    }
    const long resumed = run.step;
    const long stop = stop_at(total, opts);
    if (run.step < stop) {
        continue_dee(run, dpairs, c.diffusion, stop);
        write_checkpoint(denoiser_checkpoint(run.params, &run.optimizer, run.step), paths.checkpoint("denoiser"));
        write_log(paths.log("dee"), resumed, run.log);
    }
    write_climatology(build_climatology(cropped(train, region), c.climatology.period_hours, c.climatology.buckets),
                      paths.climatology());
    report_progress("train-dee", run.step, total, run.log);
}

void cmd_infer(const RunConfig& c, const RunPaths& paths) {
    begin(c, paths);
    const DatasetManifest m = read_manifest(paths);
    const Forecaster f = load_forecaster(c, paths, m);
    const auto pairs = normalized_pairs(load_split(paths, m, "test"), m.stats, c.data.lead_hours, f.region_ptr());
    std::vector<FinalForecast> out;
    for (const auto& pair : pairs)
        out.push_back(finalize(f, forward(pair.input, f.base, f.adapter_ptr(), f.region_ptr()), c.data.lead_hours));
    write_forecast(paths.infer_forecast(), out, m, c.data.lead_hours, c.dee);
    std::fprintf(stderr, "infer: %zu forecasts at %d h\n", out.size(), c.data.lead_hours);
}

void cmd_rollout(const RunConfig& c, const RunPaths& paths, const CommandOptions& opts) {
    begin(c, paths);
    const DatasetManifest m = read_manifest(paths);
    const Forecaster f = load_forecaster(c, paths, m);
    const int n = opts.rollout_steps > 0 ? opts.rollout_steps
                                         : *std::max_element(c.metrics.lead_steps.begin(), c.metrics.lead_steps.end());
    const auto truth = cropped(load_split(paths, m, "test"), f.region);
    const std::size_t per_lead = static_cast<std::size_t>(c.data.lead_hours / m.step_hours);
    const std::size_t span = per_lead * static_cast<std::size_t>(n);
    if (truth.size() <= span)
        fail(ErrorCode::InvalidConfig, "metrics.lead_steps: the test split is too short for " + std::to_string(n) + " steps");

    std::map<int, std::vector<FinalForecast>> by_step;
    for (std::size_t i = 0; i + span < truth.size(); ++i) {
        const auto preds = rollout(normalize_state(truth[i], m.stats), f.base, n, &m.stats, f.adapter_ptr(), f.region_ptr());
        for (int k : c.metrics.lead_steps)
            if (k <= n) by_step[k].push_back(finalize(f, preds[static_cast<std::size_t>(k - 1)], k * c.data.lead_hours));
    }
    std::vector<LeadForecasts> leads;
    for (const auto& [k, forecasts] : by_step) {
        const int hours = k * c.data.lead_hours;
        write_forecast(paths.rollout_forecast(hours), forecasts, m, hours, c.dee);
        LeadForecasts lf{hours, {}};
        for (const auto& fc : forecasts) lf.states.push_back(fc.physical);
        leads.push_back(std::move(lf));
    }
    const MetricReport report = evaluate(leads, truth, {}, c.metrics.options());
    write_report(paths, "rollout", report);
    write_text(paths.report("rollout_rmse.txt"), report.lead_rmse_table());
    std::fprintf(stderr, "rollout: %zu leads\n", leads.size());
}

void cmd_evaluate(const RunConfig& c, const RunPaths& paths, const CommandOptions& opts) {
    begin(c, paths);
    const DatasetManifest m = read_manifest(paths);
    const std::vector<fs::path> files = opts.forecast_files.empty() ? std::vector<fs::path>{paths.infer_forecast()}
                                                                    : opts.forecast_files;
    std::map<int, LeadForecasts> by_lead;
    for (const auto& file : files) {
        LeadForecasts lf = read_forecast(file);
        auto& slot = by_lead[lf.lead_hours];
        slot.lead_hours = lf.lead_hours;
        slot.states.insert(slot.states.end(), lf.states.begin(), lf.states.end());
    }
    std::vector<LeadForecasts> forecasts;
    for (auto& [lead, lf] : by_lead) forecasts.push_back(std::move(lf));
    const auto truth = cropped(load_split(paths, m, "test"), region_of(c));
    write_report(paths, "eval", evaluate(forecasts, truth, {}, c.metrics.options()));
}

std::vector<fs::path> cmd_plot(const RunConfig& c, const RunPaths& paths, const CommandOptions& opts) {
    begin(c, paths);
    const DatasetManifest m = read_manifest(paths);
    const fs::path file = opts.plot_file.empty() ? paths.infer_forecast() : opts.plot_file;
    if (!fs::exists(file)) fail(ErrorCode::InvalidConfig, "plot input missing: " + file.string());
    const auto states = container_to_states(read_grid_container(file));
    const std::string var = opts.plot_variable.empty() ? c.plot.variable : opts.plot_variable;
    const VariableRef ref = resolve_variable(var, m.levels);

    std::map<std::int64_t, AtmosphericState> truth;
    if (opts.difference)
        for (const char* split : kSplits)
            for (auto& s : cropped(load_split(paths, m, split), region_of(c))) truth.emplace(s.timestamp, std::move(s));

    std::vector<fs::path> written;
    for (int t : opts.timesteps) {
        if (t < 0 || static_cast<std::size_t>(t) >= states.size())
            fail(ErrorCode::Index, "timestep " + std::to_string(t) + " outside " + file.string(), t);
        const AtmosphericState& s = states[static_cast<std::size_t>(t)];
        const auto field = extract_variable(s, ref);
        const std::string stem = file.stem().string() + "_" + var + "_t" + std::to_string(t);
        const fs::path img = paths.plots() / (stem + ".ppm");
        write_bytes(img, render_field_ppm(field, s.grid.n_lat, s.grid.n_lon, c.plot.vmin, c.plot.vmax, c.plot.scale));
        written.push_back(img);
        if (!opts.difference) continue;
        const auto it = truth.find(s.timestamp);
        if (it == truth.end() || !(it->second.grid == s.grid))
            fail(ErrorCode::Alignment, "no truth state on this grid at time " + std::to_string(s.timestamp));
        const fs::path diff = paths.plots() / (stem + "_diff.ppm");
        write_bytes(diff, render_difference_ppm(field, extract_variable(it->second, ref), s.grid.n_lat, s.grid.n_lon,
                                                c.plot.diff_range, c.plot.scale));
        written.push_back(diff);
    }
    return written;
}

int exit_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidConfig:
        case ErrorCode::InvalidGrid:
        case ErrorCode::InvalidRegion:
        case ErrorCode::InvalidStats:
        case ErrorCode::InvalidValue:
        case ErrorCode::HeaderMismatch:
        case ErrorCode::Index:
        case ErrorCode::EmptyDataset:
        case ErrorCode::InsufficientData:
            return 2;
        case ErrorCode::Io:
        case ErrorCode::MagicMismatch:
        case ErrorCode::TruncatedPayload:
        case ErrorCode::ChecksumMismatch:
            return 3;
        case ErrorCode::TrainingDiverged:
        case ErrorCode::NumericFailure:
        case ErrorCode::SamplingFailure:
            return 4;
        default:
            return 1;
    }
}

}  // namespace syncast
