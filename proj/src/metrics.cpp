#include "syncast/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

namespace syncast {

WeightedSquares lat_weighted_squares(const std::vector<double>& pred, const std::vector<double>& obs,
                                     const GridSpec& grid, const CellMask* mask) {
    if (pred.size() != obs.size() || pred.size() != grid.cells())
        fail(ErrorCode::Shape, "field sizes " + std::to_string(pred.size()) + "/" + std::to_string(obs.size()) +
                                   " do not match the grid (" + std::to_string(grid.cells()) + " cells)");
    if (mask && mask->size() != grid.cells()) fail(ErrorCode::Shape, "mask size does not match the grid");
    const auto w = lat_weights(grid);
    WeightedSquares out;
    for (int i = 0; i < grid.n_lat; ++i)
        for (int j = 0; j < grid.n_lon; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * grid.n_lon + j;
            if (mask && !(*mask)[k]) continue;
            const double e = pred[k] - obs[k];
            out.sse += w[i] * e * e;
            out.weight += w[i];
        }
    return out;
}

double lat_weighted_rmse(const std::vector<double>& pred, const std::vector<double>& obs, const GridSpec& grid,
                         const CellMask* mask) {
    const WeightedSquares s = lat_weighted_squares(pred, obs, grid, mask);
    if (!(s.weight > 0.0)) fail(ErrorCode::DivisionByZero, "no cells with positive latitude weight");
    return std::sqrt(s.sse / s.weight);
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) fail(ErrorCode::InsufficientData, "quantile of an empty sample");
    if (!(q >= 0.0 && q <= 1.0)) fail(ErrorCode::InvalidConfig, "quantile level must lie in [0, 1]");
    std::sort(values.begin(), values.end());
    const double h = (static_cast<double>(values.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

std::vector<double> high_quantile_set() { return {0.90, 0.95, 0.99, 0.999, 0.9999}; }
std::vector<double> quartile_set() { return {0.25, 0.5, 0.75}; }

double rqe(const std::vector<double>& pred, const std::vector<double>& obs, const std::vector<double>& qs) {
    if (qs.empty()) fail(ErrorCode::InvalidConfig, "quantile set is empty");
    std::vector<double> p = pred, o = obs;
    std::sort(p.begin(), p.end());
    std::sort(o.begin(), o.end());
    double sum = 0.0;
    for (double q : qs) {
        const double qo = quantile(o, q);
        if (qo == 0.0) {
            std::ostringstream msg;
            msg << "observed quantile q=" << q << " is zero";
            fail(ErrorCode::DivisionByZero, msg.str());
        }
        sum += (quantile(p, q) - qo) / qo;
    }
    return sum / static_cast<double>(qs.size());
}

ContingencyTable contingency(const std::vector<double>& pred, const std::vector<double>& obs, double threshold) {
    if (pred.size() != obs.size()) fail(ErrorCode::Shape, "prediction and observation lengths differ");
    ContingencyTable t;
    for (std::size_t k = 0; k < pred.size(); ++k) {
        const bool p = pred[k] > threshold, o = obs[k] > threshold;
        if (p && o) ++t.a;
        else if (p) ++t.b;
        else if (o) ++t.c;
        else ++t.d;
    }
    return t;
}

double sedi_from_rates(double hit_rate, double false_alarm_rate) {
    const double h = std::clamp(hit_rate, kSediClamp, 1.0 - kSediClamp);
    const double f = std::clamp(false_alarm_rate, kSediClamp, 1.0 - kSediClamp);
    const double lf = std::log(f), lh = std::log(h), l1f = std::log1p(-f), l1h = std::log1p(-h);
    // Grouped so that swapping h and f negates the result bit-exactly.
    return ((lf - lh) + (l1h - l1f)) / ((lf + lh) + (l1f + l1h));
}

double sedi(const ContingencyTable& t) {
    if (t.a + t.c == 0) fail(ErrorCode::UndefinedRate, "hit rate undefined: no observed events (a + c = 0)");
    if (t.b + t.d == 0) fail(ErrorCode::UndefinedRate, "false-alarm rate undefined: no observed non-events (b + d = 0)");
    return sedi_from_rates(static_cast<double>(t.a) / static_cast<double>(t.a + t.c),
                           static_cast<double>(t.b) / static_cast<double>(t.b + t.d));
}

double sedi_at_percentile(const std::vector<double>& pred, const std::vector<double>& obs, double p) {
    if (!(p > 0.0 && p < 100.0)) fail(ErrorCode::InvalidConfig, "percentile must lie in (0, 100)");
    return sedi(contingency(pred, obs, quantile(obs, p / 100.0)));
}

// ---------------------------------------------------------------------------

double MetricReport::value(const std::string& variable, int lead_hours, const std::string& mask,
                           const std::string& metric) const {
    for (const auto& r : rows)
        if (r.variable == variable && r.lead_hours == lead_hours && r.mask == mask && r.metric == metric) return r.value;
    fail(ErrorCode::Index, "no metric " + metric + " for " + variable + " lead " + std::to_string(lead_hours) +
                               " mask " + mask);
}

namespace {

std::string format_value(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string format_level(double p) {
    std::ostringstream s;
    s << p;
    return s.str();
}

}  // namespace

std::string MetricReport::to_csv() const {
    std::string out = "variable,lead_hours,mask,metric,value\n";
    for (const auto& r : rows)
        out += r.variable + "," + std::to_string(r.lead_hours) + "," + r.mask + "," + r.metric + "," +
               format_value(r.value) + "\n";
    return out;
}

nlohmann::ordered_json MetricReport::to_json() const {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
        nlohmann::ordered_json o;
        o["variable"] = r.variable;
        o["lead_hours"] = r.lead_hours;
        o["mask"] = r.mask;
        o["metric"] = r.metric;
        if (std::isnan(r.value)) o["value"] = nullptr;
        else o["value"] = r.value;
        arr.push_back(std::move(o));
    }
    nlohmann::ordered_json doc;
    doc["columns"] = {"variable", "lead_hours", "mask", "metric", "value"};
    doc["rows"] = std::move(arr);
    return doc;
}

std::string MetricReport::lead_rmse_table(const std::string& mask) const {
    std::vector<std::string> vars;
    std::vector<int> leads;
    for (const auto& r : rows) {
        if (r.mask != mask || r.metric != "lat_rmse") continue;
        if (std::find(vars.begin(), vars.end(), r.variable) == vars.end()) vars.push_back(r.variable);
        if (std::find(leads.begin(), leads.end(), r.lead_hours) == leads.end()) leads.push_back(r.lead_hours);
    }
    std::sort(leads.begin(), leads.end());
    std::string out = "lead_hours";
    for (const auto& v : vars) out += "," + v;
    out += "\n";
    for (int lead : leads) {
        out += std::to_string(lead);
        for (const auto& v : vars) out += "," + format_value(value(v, lead, mask, "lat_rmse"));
        out += "\n";
    }
    return out;
}

VariableRef resolve_variable(const std::string& name, int levels) {
    static const std::vector<std::string> surface{"msl", "u10", "v10", "t2m", "pm1", "pm2p5", "pm10"};
    static const std::vector<std::string> upper{"z", "q", "u", "v", "t"};
    for (std::size_t k = 0; k < surface.size(); ++k)
        if (name == surface[k]) return {false, 0, static_cast<int>(k)};
    const auto at = name.find('@');
    if (at != std::string::npos) {
        const std::string base = name.substr(0, at);
        int level = -1;
        try {
            level = std::stoi(name.substr(at + 1));
        } catch (const std::exception&) {
        }
        for (std::size_t k = 0; k < upper.size(); ++k)
            if (base == upper[k] && level >= 0 && level < levels) return {true, level, static_cast<int>(k)};
    }
    fail(ErrorCode::Index, "unknown variable '" + name + "'");
}

std::vector<double> extract_variable(const AtmosphericState& s, const VariableRef& ref) {
    std::vector<double> out(s.grid.cells());
    for (int i = 0; i < s.grid.n_lat; ++i)
        for (int j = 0; j < s.grid.n_lon; ++j)
            out[static_cast<std::size_t>(i) * s.grid.n_lon + j] =
                ref.upper ? s.up(ref.level, i, j, ref.channel) : s.sfc(i, j, ref.channel);
    return out;
}

MetricReport evaluate(const std::vector<LeadForecasts>& forecasts, const std::vector<AtmosphericState>& truth,
                      const std::vector<NamedMask>& masks, const EvalOptions& options) {
    std::map<std::int64_t, const AtmosphericState*> by_time;
    for (const auto& t : truth) by_time[t.timestamp] = &t;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    auto guarded = [&](auto&& fn) {
        try {
            return fn();
        } catch (const Error& e) {
            if (e.code() == ErrorCode::DivisionByZero || e.code() == ErrorCode::UndefinedRate ||
                e.code() == ErrorCode::InsufficientData)
                return nan;
            throw;
        }
    };

    MetricReport report;
    for (const auto& lead : forecasts) {
        if (lead.states.empty()) continue;
        const GridSpec& grid = lead.states.front().grid;
        std::vector<const AtmosphericState*> matched;
        for (const auto& f : lead.states) {
            auto it = by_time.find(f.timestamp);
            if (it == by_time.end())
                fail(ErrorCode::Alignment, "no truth state at valid time " + std::to_string(f.timestamp) + " (lead " +
                                               std::to_string(lead.lead_hours) + " h)");
            if (!f.same_layout(*it->second) || !(f.grid == grid))
                fail(ErrorCode::Shape, "forecast and truth grids differ at time " + std::to_string(f.timestamp));
            matched.push_back(it->second);
        }
        std::vector<NamedMask> all_masks{{"all", {}}};
        for (const auto& m : masks) {
            if (m.cells.size() != grid.cells()) fail(ErrorCode::Shape, "mask '" + m.name + "' does not match the grid");
            all_masks.push_back(m);
        }
        for (const auto& var : options.variables) {
            const VariableRef ref = resolve_variable(var, lead.states.front().levels);
            std::vector<std::vector<double>> preds, obs;
            for (std::size_t k = 0; k < lead.states.size(); ++k) {
                preds.push_back(extract_variable(lead.states[k], ref));
                obs.push_back(extract_variable(*matched[k], ref));
            }
            for (const auto& m : all_masks) {
                const CellMask* mp = m.cells.empty() ? nullptr : &m.cells;
                WeightedSquares acc;
                std::vector<double> pp, oo;
                for (std::size_t k = 0; k < preds.size(); ++k) {
                    const auto s = lat_weighted_squares(preds[k], obs[k], grid, mp);
                    acc.sse += s.sse;
                    acc.weight += s.weight;
                    for (std::size_t c = 0; c < grid.cells(); ++c)
                        if (!mp || (*mp)[c]) {
                            pp.push_back(preds[k][c]);
                            oo.push_back(obs[k][c]);
                        }
                }
                auto add = [&](const std::string& metric, double v) {
                    report.rows.push_back({var, lead.lead_hours, m.name, metric, v});
                };
                add("lat_rmse", acc.weight > 0.0 ? std::sqrt(acc.sse / acc.weight) : nan);
                add("rqe", guarded([&] { return rqe(pp, oo, options.quantiles); }));
                if (options.quartile_rqe) add("rqe_quartile", guarded([&] { return rqe(pp, oo, quartile_set()); }));
                for (double p : options.sedi_percentiles)
                    add("sedi_p" + format_level(p), guarded([&] { return sedi_at_percentile(pp, oo, p); }));
            }
        }
    }
    return report;
}

}  // namespace syncast
