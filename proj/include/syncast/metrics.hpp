#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "syncast/grid.hpp"

namespace syncast {

/// Optional per-cell selection of a [lat, lon] field (nonzero = included).
using CellMask = std::vector<std::uint8_t>;

struct WeightedSquares {
    double sse = 0.0;     // sum of w_i * err^2
    double weight = 0.0;  // sum of w_i
};

/// cos(lat)-weighted squared-error sums over the (masked) cells of one field.
WeightedSquares lat_weighted_squares(const std::vector<double>& pred, const std::vector<double>& obs,
                                     const GridSpec& grid, const CellMask* mask = nullptr);

double lat_weighted_rmse(const std::vector<double>& pred, const std::vector<double>& obs, const GridSpec& grid,
                         const CellMask* mask = nullptr);

/// Linear interpolation between order statistics (type 7).
double quantile(std::vector<double> values, double q);

std::vector<double> high_quantile_set();  // 0.90 .. 0.9999
std::vector<double> quartile_set();       // 0.25, 0.5, 0.75

/// Mean over q of (Q_q(pred) - Q_q(obs)) / Q_q(obs).
double rqe(const std::vector<double>& pred, const std::vector<double>& obs, const std::vector<double>& qs);

struct ContingencyTable {
    long a = 0;  // hits
    long b = 0;  // false alarms
    long c = 0;  // misses
    long d = 0;  // correct negatives

    long total() const { return a + b + c + d; }
    bool operator==(const ContingencyTable&) const = default;
};

ContingencyTable contingency(const std::vector<double>& pred, const std::vector<double>& obs, double threshold);

inline constexpr double kSediClamp = 1e-9;

/// SEDI from hit rate H and false-alarm rate F, both clamped to [eps, 1 - eps].
double sedi_from_rates(double hit_rate, double false_alarm_rate);
double sedi(const ContingencyTable& t);

/// Threshold at the p-th percentile of `obs`.
double sedi_at_percentile(const std::vector<double>& pred, const std::vector<double>& obs, double p);

struct MetricRow {
    std::string variable;
    int lead_hours = 0;
    std::string mask;
    std::string metric;
    double value = 0.0;  // NaN when the metric is undefined for the data
};

struct MetricReport {
    std::vector<MetricRow> rows;

    /// Throws Index if no such row exists.
    double value(const std::string& variable, int lead_hours, const std::string& mask, const std::string& metric) const;

    /// Columns: variable,lead_hours,mask,metric,value.
    std::string to_csv() const;
    nlohmann::ordered_json to_json() const;

    /// Lead-time table of lat-RMSE: one row per lead, one column per variable.
    std::string lead_rmse_table(const std::string& mask = "all") const;
};

struct NamedMask {
    std::string name;
    CellMask cells;
};

struct LeadForecasts {
    int lead_hours = 0;
    std::vector<AtmosphericState> states;  // physical units, stamped with the valid time
};

struct EvalOptions {
    std::vector<std::string> variables{"msl", "u10", "v10", "t2m", "pm1", "pm2p5", "pm10"};
    std::vector<double> quantiles = high_quantile_set();
    bool quartile_rqe = true;
    std::vector<double> sedi_percentiles{90.0};
};

/// Metrics per variable x lead x mask ("all" plus any named masks), pooled
/// over every forecast at a lead. Forecasts are matched to truth by
/// timestamp; a forecast without truth is an Alignment error.
MetricReport evaluate(const std::vector<LeadForecasts>& forecasts, const std::vector<AtmosphericState>& truth,
                      const std::vector<NamedMask>& masks = {}, const EvalOptions& options = {});

/// Surface variable name -> channel index, or upper "name@level" -> flat
/// (level, var) index with `upper` set. Throws Index for unknown names.
struct VariableRef {
    bool upper = false;
    int level = 0;
    int channel = 0;
};
VariableRef resolve_variable(const std::string& name, int levels);

std::vector<double> extract_variable(const AtmosphericState& s, const VariableRef& ref);

}  // namespace syncast
