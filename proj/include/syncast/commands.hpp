#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "syncast/config.hpp"
#include "syncast/error.hpp"

namespace syncast {

/// Layout of one run directory, `<out_dir>/<config hash>`.
struct RunPaths {
    std::filesystem::path root;

    std::filesystem::path config() const { return root / "config.json"; }
    std::filesystem::path manifest() const { return root / "data" / "manifest.json"; }
    std::filesystem::path data(const std::string& split) const { return root / "data" / (split + ".scg"); }
    std::filesystem::path checkpoint(const std::string& kind) const { return root / "checkpoints" / (kind + ".sck"); }
    std::filesystem::path climatology() const { return root / "checkpoints" / "climatology.scg"; }
    std::filesystem::path log(const std::string& name) const { return root / "logs" / (name + ".csv"); }
    std::filesystem::path infer_forecast() const { return root / "forecasts" / "infer.scg"; }
    std::filesystem::path rollout_forecast(int lead_hours) const {
        return root / "forecasts" / ("rollout_lead" + std::to_string(lead_hours) + ".scg");
    }
    std::filesystem::path report(const std::string& file) const { return root / "reports" / file; }
    std::filesystem::path plots() const { return root / "plots"; }
};

RunPaths run_paths(const RunConfig& c, const std::filesystem::path& out_dir);

/// Written by gen-data after the split files, so its presence means the
/// data set is complete.
struct DatasetManifest {
    std::string config_hash;
    GridSpec grid;
    int levels = 0;
    int step_hours = 1;
    int lead_hours = 1;
    std::map<std::string, std::string> files;  // split -> path relative to the data directory
    std::map<std::string, std::vector<std::int64_t>> spans;  // split -> {first, last, count}
    NormalizationStats stats;  // from the train split
};

/// Missing or unreadable manifest is an InvalidConfig error (run gen-data first).
DatasetManifest read_manifest(const RunPaths& paths);

/// Per-invocation settings that do not enter the config hash.
struct CommandOptions {
    long stop_step = 0;  // train, finetune, train-dee: stop early; a later call resumes
    int rollout_steps = 0;  // 0: largest of metrics.lead_steps
    std::vector<std::filesystem::path> forecast_files;  // evaluate; empty: the infer output
    std::filesystem::path plot_file;  // empty: the infer output
    std::string plot_variable;        // empty: plot.variable
    std::vector<int> timesteps{0};
    bool difference = true;  // plot: also render forecast minus truth
};

// Every command first writes the resolved config to the run directory.
void cmd_gen_data(const RunConfig& c, const RunPaths& paths);
void cmd_train(const RunConfig& c, const RunPaths& paths, const CommandOptions& opts = {});
void cmd_finetune(const RunConfig& c, const RunPaths& paths, const CommandOptions& opts = {});
void cmd_train_dee(const RunConfig& c, const RunPaths& paths, const CommandOptions& opts = {});
void cmd_infer(const RunConfig& c, const RunPaths& paths);
void cmd_rollout(const RunConfig& c, const RunPaths& paths, const CommandOptions& opts = {});
void cmd_evaluate(const RunConfig& c, const RunPaths& paths, const CommandOptions& opts = {});
/// Returns the image files written.
std::vector<std::filesystem::path> cmd_plot(const RunConfig& c, const RunPaths& paths, const CommandOptions& opts = {});

/// 2 for configuration and input errors, 3 for I/O and file-format errors,
/// 4 for divergence and other numeric failures, 1 otherwise.
int exit_code_for(ErrorCode code);

/// Name of the extra surface channel in forecast files: 1 where the gate
/// took the refined PM value.
inline constexpr const char* kProvenanceChannel = "gate";

}  // namespace syncast
