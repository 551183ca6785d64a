#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "syncast/commands.hpp"

using namespace syncast;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "runs";
    std::string region;
    std::optional<int> lead_hours;
    std::string dee;
    std::optional<double> delta;
};

RegionConfig parse_region(const std::string& text) {
    RegionConfig r;
    r.enabled = true;
    std::istringstream in(text);
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(in >> r.i0 >> c1 >> r.height >> c2 >> r.j0 >> c3 >> r.width) || c1 != ',' || c2 != ',' || c3 != ',' ||
        !in.eof())
        fail(ErrorCode::InvalidConfig, "--region: expected i0,height,j0,width");
    return r;
}

RunConfig resolve(const Globals& g) {
    RunConfig c = g.config.empty() ? RunConfig{} : load_run_config(g.config);
    if (g.seed) {
        c.data.synthetic.seed = *g.seed;
        c.train.seed = *g.seed;
        c.finetune.seed = *g.seed;
        c.diffusion.seed = *g.seed;
    }
    if (!g.region.empty()) c.region = parse_region(g.region);
    if (g.lead_hours) {
        c.data.lead_hours = *g.lead_hours;
        c.model.lead_hours = *g.lead_hours;
    }
    if (!g.dee.empty()) c.dee = g.dee == "on";
    if (g.delta) c.climatology.delta = *g.delta;
    c.validate();
    return c;
}

void apply_thread_cap() {
    const char* env = std::getenv("SYNCAST_THREADS");
    if (!env) return;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) fail(ErrorCode::InvalidConfig, "SYNCAST_THREADS must be a positive integer");
    Eigen::setNbThreads(static_cast<int>(n));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale weather and PM forecasting pipeline"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "JSON run config (defaults apply to missing keys)");
    app.add_option("--seed", g.seed, "Seed for data, training, fine-tuning and diffusion");
    app.add_option("--out-dir", g.out_dir, "Parent of the run directories")->capture_default_str();
    app.add_option("--region", g.region, "Regional window i0,height,j0,width in grid indices");
    app.add_option("--lead-hours", g.lead_hours, "Forecast lead time in hours");
    app.add_option("--dee", g.dee, "Refine PM forecasts with the denoiser")->check(CLI::IsMember({"on", "off"}));
    app.add_option("--delta", g.delta, "Gate margin in climatological spread units");

    CommandOptions opts;
    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic data set and its manifest");
    auto* train = app.add_subcommand("train", "Train the backbone (resumes from its checkpoint)");
    auto* finetune = app.add_subcommand("finetune", "Train regional low-rank adapters on the frozen backbone");
    auto* dee = app.add_subcommand("train-dee", "Train the denoiser and build the climatology");
    for (auto* sub : {train, finetune, dee})
        sub->add_option("--stop-step", opts.stop_step, "Stop after this optimizer step; a later call resumes");
    auto* infer = app.add_subcommand("infer", "Forecast every test input at the lead time");
    auto* roll = app.add_subcommand("rollout", "Autoregressive forecasts and the lead-time report");
    roll->add_option("--steps", opts.rollout_steps, "Rollout length (default: largest metrics.lead_steps)");
    auto* eval = app.add_subcommand("evaluate", "Score forecast files against the test split");
    eval->add_option("--forecast", opts.forecast_files, "Forecast files (default: the infer output)");
    auto* plot = app.add_subcommand("plot", "Render PPM images of a forecast or data file");
    plot->add_option("--file", opts.plot_file, "Input file (default: the infer output)");
    plot->add_option("--variable", opts.plot_variable, "Variable name, e.g. pm2p5 or t@500");
    plot->add_option("--timestep", opts.timesteps, "Frame indices to render")->capture_default_str();
    bool no_diff = false;
    plot->add_flag("--no-diff", no_diff, "Skip the forecast-minus-truth image");
    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    opts.difference = !no_diff;

    try {
        apply_thread_cap();
        const RunConfig c = resolve(g);
        const RunPaths paths = run_paths(c, g.out_dir);
        if (gen->parsed()) cmd_gen_data(c, paths);
        else if (train->parsed()) cmd_train(c, paths, opts);
        else if (finetune->parsed()) cmd_finetune(c, paths, opts);
        else if (dee->parsed()) cmd_train_dee(c, paths, opts);
        else if (infer->parsed()) cmd_infer(c, paths);
        else if (roll->parsed()) cmd_rollout(c, paths, opts);
        else if (eval->parsed()) cmd_evaluate(c, paths, opts);
        else if (plot->parsed())
            for (const auto& f : cmd_plot(c, paths, opts)) std::fprintf(stderr, "wrote %s\n", f.string().c_str());
        std::printf("%s\n", paths.root.string().c_str());
        return 0;
    } catch (const Error& e) {
        std::fprintf(stderr, "syncast: %s\n", e.what());
        return exit_code_for(e.code());
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "syncast: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "syncast: %s\n", e.what());
        return 1;
    }
}
