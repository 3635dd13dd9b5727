#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dtl/config.hpp"
#include "dtl/errors.hpp"
#include "dtl/runner.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInputError = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitDegenerateGradient = 4;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::int64_t seed = -1;
    std::string out_dir;
    int workers = -1;
    int chunks = -1;
    double lambda = -1.0;
    std::string unlearn;
    std::string retain;
    bool freeze_source_head = false;
    bool freeze_trunk = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Run config JSON (defaults to the built-in benchmark)");
    cmd->add_option("--set", args.overrides, "KEY=VALUE config override (repeatable)");
    cmd->add_option("--seed", args.seed, "Master seed for the built-in benchmark config");
    cmd->add_option("--out", args.out_dir, "Output directory override");
    cmd->add_option("--workers", args.workers, "Simulated gc-engine worker count");
    cmd->add_option("--chunks", args.chunks, "GC chunk count c");
    cmd->add_option("--lambda", args.lambda, "Unlearning weight in [0,1]");
    cmd->add_option("--unlearn", args.unlearn, "gc|ngc|rand|unif|neg");
    cmd->add_option("--retain", args.retain, "src-kd|tgt-kd|tgt-ce|tgt-a-gem");
    cmd->add_flag("--freeze-source-head", args.freeze_source_head,
                  "Freeze the source classification head during disposal");
    cmd->add_flag("--freeze-trunk", args.freeze_trunk, "Freeze the trunk during disposal");
}

dtl::config::RunConfig resolve(const CommonArgs& args) {
    dtl::config::RunConfig cfg =
        args.config_path.empty()
            ? dtl::config::default_benchmark(args.seed >= 0 ? static_cast<std::uint64_t>(args.seed) : 0)
            : dtl::config::load(args.config_path);
    for (const auto& kv : args.overrides) cfg = dtl::config::apply_override(cfg, kv);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    if (args.workers > 0) cfg.dispose.gc_workers = args.workers;
    if (args.chunks > 0) cfg.dispose.dtl.chunks = args.chunks;
    if (args.lambda >= 0.0) cfg.dispose.dtl.lambda = args.lambda;
    if (!args.unlearn.empty()) cfg.dispose.dtl.unlearn = dtl::losses::parse_unlearn_kind(args.unlearn);
    if (!args.retain.empty()) cfg.dispose.dtl.retain = dtl::losses::parse_retain_kind(args.retain);
    if (args.freeze_source_head) cfg.dispose.freeze_source_head = true;
    if (args.freeze_trunk) cfg.dispose.freeze_trunk = true;
    return cfg;
}

std::vector<double> parse_grid(const std::string& csv) {
    std::vector<double> grid;
    std::stringstream ss(csv);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        if (!cell.empty()) grid.push_back(std::stod(cell));
    }
    if (grid.empty()) throw dtl::ContractViolation("sweep: empty lambda grid");
    return grid;
}

std::vector<dtl::losses::UnlearnKind> parse_kinds(const std::string& csv) {
    std::vector<dtl::losses::UnlearnKind> kinds;
    std::stringstream ss(csv);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        if (!cell.empty()) kinds.push_back(dtl::losses::parse_unlearn_kind(cell));
    }
    if (kinds.empty()) throw dtl::ContractViolation("sweep: no unlearning kinds");
    return kinds;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Disposable transfer learning toolkit"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string lambda_grid = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1";
    std::string kinds = "gc,rand,unif,neg";
    std::string report_dir;

    CLI::App* pretrain = app.add_subcommand("pretrain", "Train the source task from scratch");
    CLI::App* finetune = app.add_subcommand("finetune", "Fine-tune the target task from the pretrain checkpoint");
    CLI::App* dispose = app.add_subcommand("dispose", "Run the knowledge disposal stage");
    CLI::App* piggyback = app.add_subcommand("piggyback", "Fine-tune the disposed model on the piggyback task");
    CLI::App* sweep = app.add_subcommand("sweep", "Dispose + evaluate over a lambda grid per unlearning loss");
    CLI::App* report = app.add_subcommand("report", "Aggregate metric records of a run directory");
    for (CLI::App* cmd : {pretrain, finetune, dispose, piggyback, sweep}) add_common(cmd, args);
    sweep->add_option("--lambda-grid", lambda_grid, "Comma-separated lambda values");
    sweep->add_option("--unlearn-kinds", kinds, "Comma-separated unlearning losses");
    report->add_option("dir", report_dir, "Run directory containing manifest.json")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (pretrain->parsed()) {
            dtl::runner::run_pretrain(resolve(args));
        } else if (finetune->parsed()) {
            dtl::runner::run_finetune(resolve(args));
        } else if (dispose->parsed()) {
            dtl::runner::run_dispose(resolve(args));
        } else if (piggyback->parsed()) {
            dtl::runner::run_piggyback(resolve(args));
        } else if (sweep->parsed()) {
            dtl::runner::run_sweep(resolve(args), parse_grid(lambda_grid), parse_kinds(kinds));
        } else if (report->parsed()) {
            std::cout << dtl::runner::run_report(report_dir);
        }
    } catch (const dtl::DegenerateGradientError& e) {
        std::cerr << "degenerate gradient: " << e.what() << "\n";
        return kExitDegenerateGradient;
    } catch (const dtl::DivergedRunError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const dtl::AbortedComputationError& e) {
        std::cerr << "aborted: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInputError;
    }
    return kExitOk;
}
