#include "syncast/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "syncast/checkpoint.hpp"

namespace syncast {

using nlohmann::json;

namespace {

// Reads known keys from one JSON object and rejects the rest.
class Section {
public:
    Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) fail(ErrorCode::InvalidConfig, where_ + ": expected an object");
    }

    template <class T>
    void get(const std::string& key, T& out) {
        known_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            fail(ErrorCode::InvalidConfig, path(key) + ": wrong type (" + it->dump() + ")");
        }
    }

    const json* child(const std::string& key) {
        known_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string path(const std::string& key) const { return where_ + "." + key; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!known_.count(it.key())) fail(ErrorCode::InvalidConfig, "unknown key '" + path(it.key()) + "'");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> known_;
};

// Validation messages name the field; prefix them with the section.
template <class Fn>
void in_section(const std::string& where, Fn&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        if (e.code() != ErrorCode::InvalidConfig && e.code() != ErrorCode::InvalidGrid &&
            e.code() != ErrorCode::InvalidRegion && e.code() != ErrorCode::InvalidStats)
            throw;
        const std::string what = e.what();
        const auto colon = what.find(": ");
        fail(ErrorCode::InvalidConfig, where + "." + (colon == std::string::npos ? what : what.substr(colon + 2)));
    }
}

SyntheticConfig synthetic_from_json(const json& j, const std::string& where) {
    SyntheticConfig c;
    Section s(j, where);
    if (const json* g = s.child("grid")) c.grid = grid_from_json(*g, s.path("grid"));
    s.get("seed", c.seed);
    s.get("levels", c.levels);
    s.get("n_steps", c.n_steps);
    s.get("step_hours", c.step_hours);
    s.get("t0_hours", c.t0_hours);
    s.get("spinup_steps", c.spinup_steps);
    s.get("emission_rate", c.emission_rate);
    s.get("emission_tail_index", c.emission_tail_index);
    s.get("spike_events_per_step", c.spike_events_per_step);
    s.get("point_sources", c.point_sources);
    s.get("advection_gain", c.advection_gain);
    s.get("diffusion_coeff", c.diffusion_coeff);
    s.get("deposition_rate", c.deposition_rate);
    s.get("initial_pm", c.initial_pm);
    s.get("wind_speed", c.wind_speed);
    s.get("mean_zonal_wind", c.mean_zonal_wind);
    s.get("met_modes", c.met_modes);
    s.finish();
    return c;
}

TrainConfig train_from_json(const json& j, const std::string& where) {
    TrainConfig c;
    Section s(j, where);
    s.get("learning_rate", c.learning_rate);
    s.get("epochs", c.epochs);
    s.get("batch_size", c.batch_size);
    s.get("smooth_l1_delta", c.smooth_l1_delta);
    s.get("surface_var_weights", c.surface_var_weights);
    s.get("upper_var_weights", c.upper_var_weights);
    s.get("seed", c.seed);
    s.get("max_steps", c.max_steps);
    s.finish();
    return c;
}

}  // namespace

void DataConfig::validate() const {
    synthetic.validate();
    if (!(train_fraction > 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction < 1.0))
        fail(ErrorCode::InvalidConfig, "train_fraction/val_fraction: need train > 0, val >= 0, train + val < 1");
    if (lead_hours < 1) fail(ErrorCode::InvalidConfig, "lead_hours: must be >= 1");
}

RegionSpec RegionConfig::resolve(const GridSpec& parent) const {
    if (!enabled) return RegionSpec::full(parent);
    return RegionSpec::from_indices(parent, i0, height, j0, width, true);
}

void ClimatologyConfig::validate() const {
    if (period_hours < 1) fail(ErrorCode::InvalidConfig, "period_hours: must be >= 1");
    if (buckets < 1 || buckets > period_hours) fail(ErrorCode::InvalidConfig, "buckets: must lie in [1, period_hours]");
    if (std::isnan(delta)) fail(ErrorCode::InvalidConfig, "delta: must not be NaN");
}

EvalOptions MetricConfig::options() const {
    EvalOptions o;
    o.variables = variables;
    o.quantiles = quantiles;
    o.quartile_rqe = quartile_rqe;
    o.sedi_percentiles = sedi_percentiles;
    return o;
}

void MetricConfig::validate() const {
    if (variables.empty()) fail(ErrorCode::InvalidConfig, "variables: must not be empty");
    if (quantiles.empty()) fail(ErrorCode::InvalidConfig, "quantiles: must not be empty");
    for (double q : quantiles)
        if (!(q >= 0.0 && q <= 1.0)) fail(ErrorCode::InvalidConfig, "quantiles: entries must lie in [0, 1]");
    for (double p : sedi_percentiles)
        if (!(p > 0.0 && p < 100.0)) fail(ErrorCode::InvalidConfig, "sedi_percentiles: entries must lie in (0, 100)");
    for (int n : lead_steps)
        if (n < 1) fail(ErrorCode::InvalidConfig, "lead_steps: entries must be >= 1");
}

void PlotConfig::validate() const {
    if (!(vmax > vmin)) fail(ErrorCode::InvalidConfig, "vmax: must exceed vmin");
    if (!(diff_range > 0.0)) fail(ErrorCode::InvalidConfig, "diff_range: must be positive");
    if (scale < 1 || scale > 64) fail(ErrorCode::InvalidConfig, "scale: must lie in [1, 64]");
}

void RunConfig::validate() const {
    if (version != kConfigVersion)
        fail(ErrorCode::InvalidConfig, "version: unsupported config version " + std::to_string(version));
    in_section("data", [&] { data.validate(); });
    in_section("model", [&] { model.validate(); });
    if (model.levels != data.synthetic.levels)
        fail(ErrorCode::InvalidConfig, "model.levels: must equal data.synthetic.levels");
    if (model.grid_lat != data.synthetic.grid.n_lat || model.grid_lon != data.synthetic.grid.n_lon)
        fail(ErrorCode::InvalidConfig, "model.grid_lat: model grid must equal data.synthetic.grid");
    if (model.lead_hours != data.lead_hours)
        fail(ErrorCode::InvalidConfig, "model.lead_hours: must equal data.lead_hours");
    in_section("train", [&] { train.validate(); });
    in_section("finetune", [&] { finetune.validate(); });
    in_section("lora", [&] {
        if (lora.rank < 1) fail(ErrorCode::InvalidConfig, "rank: must be >= 1");
        if (!(lora.dropout >= 0.0 && lora.dropout < 1.0)) fail(ErrorCode::InvalidConfig, "dropout: must lie in [0, 1)");
    });
    in_section("region", [&] { (void)region.resolve(data.synthetic.grid); });
    in_section("diffusion", [&] { diffusion.validate(); });
    in_section("climatology", [&] { climatology.validate(); });
    in_section("metrics", [&] { metrics.validate(); });
    in_section("plot", [&] { plot.validate(); });
}

json to_json(const GridSpec& g) {
    const bool descending = g.n_lat > 1 && g.lat_deg[1] < g.lat_deg[0];
    return json{{"lat0", g.lat_deg.front()}, {"lon0", g.lon_deg.front()}, {"n_lat", g.n_lat},
                {"n_lon", g.n_lon},          {"resolution_deg", g.resolution_deg}, {"descending", descending}};
}

GridSpec grid_from_json(const json& j, const std::string& where) {
    double lat0 = 45.0, lon0 = 0.0, res = 0.25;
    int n_lat = 32, n_lon = 64;
    bool descending = true;
    Section s(j, where);
    s.get("lat0", lat0);
    s.get("lon0", lon0);
    s.get("n_lat", n_lat);
    s.get("n_lon", n_lon);
    s.get("resolution_deg", res);
    s.get("descending", descending);
    s.finish();
    GridSpec g;
    in_section(where, [&] { g = GridSpec::regular(lat0, lon0, n_lat, n_lon, res, descending); });
    return g;
}

json to_json(const SyntheticConfig& c) {
    return json{{"seed", c.seed},
                {"grid", to_json(c.grid)},
                {"levels", c.levels},
                {"n_steps", c.n_steps},
                {"step_hours", c.step_hours},
                {"t0_hours", c.t0_hours},
                {"spinup_steps", c.spinup_steps},
                {"emission_rate", c.emission_rate},
                {"emission_tail_index", c.emission_tail_index},
                {"spike_events_per_step", c.spike_events_per_step},
                {"point_sources", c.point_sources},
                {"advection_gain", c.advection_gain},
                {"diffusion_coeff", c.diffusion_coeff},
                {"deposition_rate", c.deposition_rate},
                {"initial_pm", c.initial_pm},
                {"wind_speed", c.wind_speed},
                {"mean_zonal_wind", c.mean_zonal_wind},
                {"met_modes", c.met_modes}};
}

json to_json(const ModelConfig& c) {
    return json{{"embed_dim", c.embed_dim},
                {"encoder_depth", c.encoder_depth},
                {"decoder_depth", c.decoder_depth},
                {"heads", c.heads},
                {"window", {c.window.levels, c.window.lat, c.window.lon}},
                {"mlp_ratio", c.mlp_ratio},
                {"drop_rate", c.drop_rate},
                {"levels", c.levels},
                {"grid_lat", c.grid_lat},
                {"grid_lon", c.grid_lon},
                {"bias_origin_lat", c.bias_origin_lat},
                {"bias_origin_lon", c.bias_origin_lon},
                {"lead_hours", c.lead_hours},
                {"shift_windows", c.shift_windows},
                {"residual", c.residual}};
}

ModelConfig model_config_from_json(const json& j, const std::string& where) {
    ModelConfig c;
    Section s(j, where);
    s.get("embed_dim", c.embed_dim);
    s.get("encoder_depth", c.encoder_depth);
    s.get("decoder_depth", c.decoder_depth);
    s.get("heads", c.heads);
    std::array<int, 3> w{c.window.levels, c.window.lat, c.window.lon};
    s.get("window", w);
    c.window = {w[0], w[1], w[2]};
    s.get("mlp_ratio", c.mlp_ratio);
    s.get("drop_rate", c.drop_rate);
    s.get("levels", c.levels);
    s.get("grid_lat", c.grid_lat);
    s.get("grid_lon", c.grid_lon);
    s.get("bias_origin_lat", c.bias_origin_lat);
    s.get("bias_origin_lon", c.bias_origin_lon);
    s.get("lead_hours", c.lead_hours);
    s.get("shift_windows", c.shift_windows);
    s.get("residual", c.residual);
    s.finish();
    return c;
}

json to_json(const TrainConfig& c) {
    return json{{"learning_rate", c.learning_rate},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"smooth_l1_delta", c.smooth_l1_delta},
                {"surface_var_weights", c.surface_var_weights},
                {"upper_var_weights", c.upper_var_weights},
                {"seed", c.seed},
                {"max_steps", c.max_steps}};
}

json to_json(const LoraConfig& c) {
    return json{{"rank", c.rank}, {"alpha", c.alpha}, {"dropout", c.dropout}, {"scale_enabled", c.scale_enabled}};
}

LoraConfig lora_config_from_json(const json& j, const std::string& where) {
    LoraConfig c;
    Section s(j, where);
    s.get("rank", c.rank);
    s.get("alpha", c.alpha);
    s.get("dropout", c.dropout);
    s.get("scale_enabled", c.scale_enabled);
    s.finish();
    return c;
}

json to_json(const DiffusionConfig& c) {
    return json{{"n_train_steps", c.n_train_steps},
                {"beta_start", c.beta_start},
                {"beta_end", c.beta_end},
                {"n_sample_steps", c.n_sample_steps},
                {"learning_rate", c.learning_rate},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"max_steps", c.max_steps},
                {"seed", c.seed},
                {"hidden_channels", c.hidden_channels},
                {"time_embed_dim", c.time_embed_dim},
                {"residual_target", c.residual_target},
                {"ensemble_size", c.ensemble_size},
                {"gate_on_mean", c.gate_on_mean}};
}

DiffusionConfig diffusion_config_from_json(const json& j, const std::string& where) {
    DiffusionConfig c;
    Section s(j, where);
    s.get("n_train_steps", c.n_train_steps);
    s.get("beta_start", c.beta_start);
    s.get("beta_end", c.beta_end);
    s.get("n_sample_steps", c.n_sample_steps);
    s.get("learning_rate", c.learning_rate);
    s.get("epochs", c.epochs);
    s.get("batch_size", c.batch_size);
    s.get("max_steps", c.max_steps);
    s.get("seed", c.seed);
    s.get("hidden_channels", c.hidden_channels);
    s.get("time_embed_dim", c.time_embed_dim);
    s.get("residual_target", c.residual_target);
    s.get("ensemble_size", c.ensemble_size);
    s.get("gate_on_mean", c.gate_on_mean);
    s.finish();
    return c;
}

json to_json(const NormalizationStats& s) {
    return json{{"upper_mean", s.upper_mean},   {"upper_std", s.upper_std},
                {"surface_mean", s.surface_mean}, {"surface_std", s.surface_std},
                {"pm_floor", s.pm_floor},       {"pm_span_decades", s.pm_span_decades}};
}

NormalizationStats stats_from_json(const json& j) {
    NormalizationStats st;
    Section s(j, "stats");
    s.get("upper_mean", st.upper_mean);
    s.get("upper_std", st.upper_std);
    s.get("surface_mean", st.surface_mean);
    s.get("surface_std", st.surface_std);
    s.get("pm_floor", st.pm_floor);
    s.get("pm_span_decades", st.pm_span_decades);
    s.finish();
    st.validate();
    return st;
}

json to_json(const RunConfig& c) {
    return json{
        {"version", c.version},
        {"data",
         {{"synthetic", to_json(c.data.synthetic)},
          {"train_fraction", c.data.train_fraction},
          {"val_fraction", c.data.val_fraction},
          {"lead_hours", c.data.lead_hours}}},
        {"model", to_json(c.model)},
        {"train", to_json(c.train)},
        {"finetune", to_json(c.finetune)},
        {"lora", to_json(c.lora)},
        {"region",
         {{"enabled", c.region.enabled},
          {"i0", c.region.i0},
          {"height", c.region.height},
          {"j0", c.region.j0},
          {"width", c.region.width}}},
        {"diffusion", to_json(c.diffusion)},
        {"climatology",
         {{"period_hours", c.climatology.period_hours},
          {"buckets", c.climatology.buckets},
          {"delta", c.climatology.delta}}},
        {"metrics",
         {{"variables", c.metrics.variables},
          {"quantiles", c.metrics.quantiles},
          {"quartile_rqe", c.metrics.quartile_rqe},
          {"sedi_percentiles", c.metrics.sedi_percentiles},
          {"lead_steps", c.metrics.lead_steps}}},
        {"plot",
         {{"variable", c.plot.variable},
          {"vmin", c.plot.vmin},
          {"vmax", c.plot.vmax},
          {"diff_range", c.plot.diff_range},
          {"scale", c.plot.scale}}},
        {"dee", c.dee},
    };
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    Section s(j, "config");
    if (!j.is_object() || !j.contains("version")) fail(ErrorCode::InvalidConfig, "config.version: missing");
    s.get("version", c.version);
    if (c.version != kConfigVersion)
        fail(ErrorCode::InvalidConfig, "config.version: unsupported version " + std::to_string(c.version));
    if (const json* d = s.child("data")) {
        Section ds(*d, "data");
        if (const json* syn = ds.child("synthetic")) c.data.synthetic = synthetic_from_json(*syn, "data.synthetic");
        ds.get("train_fraction", c.data.train_fraction);
        ds.get("val_fraction", c.data.val_fraction);
        ds.get("lead_hours", c.data.lead_hours);
        ds.finish();
    }
    if (const json* m = s.child("model")) c.model = model_config_from_json(*m);
    if (const json* t = s.child("train")) c.train = train_from_json(*t, "train");
    if (const json* t = s.child("finetune")) c.finetune = train_from_json(*t, "finetune");
    if (const json* l = s.child("lora")) c.lora = lora_config_from_json(*l);
    if (const json* r = s.child("region")) {
        Section rs(*r, "region");
        rs.get("enabled", c.region.enabled);
        rs.get("i0", c.region.i0);
        rs.get("height", c.region.height);
        rs.get("j0", c.region.j0);
        rs.get("width", c.region.width);
        rs.finish();
    }
    if (const json* d = s.child("diffusion")) c.diffusion = diffusion_config_from_json(*d);
    if (const json* cl = s.child("climatology")) {
        Section cs(*cl, "climatology");
        cs.get("period_hours", c.climatology.period_hours);
        cs.get("buckets", c.climatology.buckets);
        cs.get("delta", c.climatology.delta);
        cs.finish();
    }
    if (const json* m = s.child("metrics")) {
        Section ms(*m, "metrics");
        ms.get("variables", c.metrics.variables);
        ms.get("quantiles", c.metrics.quantiles);
        ms.get("quartile_rqe", c.metrics.quartile_rqe);
        ms.get("sedi_percentiles", c.metrics.sedi_percentiles);
        ms.get("lead_steps", c.metrics.lead_steps);
        ms.finish();
    }
    if (const json* p = s.child("plot")) {
        Section ps(*p, "plot");
        ps.get("variable", c.plot.variable);
        ps.get("vmin", c.plot.vmin);
        ps.get("vmax", c.plot.vmax);
        ps.get("diff_range", c.plot.diff_range);
        ps.get("scale", c.plot.scale);
        ps.finish();
    }
    s.get("dee", c.dee);
    s.finish();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::Io, "cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        fail(ErrorCode::InvalidConfig, "config " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

std::string config_hash(const RunConfig& c) {
    const std::string text = to_json(c).dump();
    return sha256_hex(text.data(), text.size()).substr(0, 16);
}

}  // namespace syncast
