#pragma once

#include <string>
#include <vector>

#include "dtl/config.hpp"
#include "dtl/eval.hpp"
#include "dtl/pipeline.hpp"

namespace dtl::runner {

// Stage drivers shared by the command-line tool and the test suites. Each
// writes its checkpoint, streams run records, appends metric records, and
// refreshes the run manifest; all outputs are deterministic functions of the
// config, so re-runs are byte-identical.

struct MetricRecord {
    std::string model;    // pretrain | tl | tgt | dtl | pl | ...
    std::string metric;   // acc_s | acc_t | acc_pl | mia_* | tr_h | ...
    std::string dataset;
    double gamma = 1.0;
    std::uint64_t seed = 0;
    double value = 0.0;
};

std::string to_jsonl(const MetricRecord& rec);

void run_pretrain(const config::RunConfig& cfg);
void run_finetune(const config::RunConfig& cfg);
void run_dispose(const config::RunConfig& cfg);
void run_piggyback(const config::RunConfig& cfg);

struct SweepPoint {
    std::string unlearn;
    double lambda = 0.0;
    bool diverged = false;
    double acc_t = 0.0;
    double acc_s = 0.0;
    double acc_pl = 0.0;
};

// Dispose + evaluation over a lambda grid per unlearning kind; returns the
// (acc_t, acc_pl) frontier rows and writes the table plus per-kind plot data.
std::vector<SweepPoint> run_sweep(const config::RunConfig& cfg,
                                  const std::vector<double>& lambda_grid,
                                  const std::vector<losses::UnlearnKind>& kinds);

// Aggregates metric records in a manifest directory into plain-text tables
// and two-column plot files. Returns the rendered report text.
std::string run_report(const std::string& manifest_dir);

// The effective dispose scheme for a kind (NEG may carry its own).
nn::TrainScheme dispose_scheme_for(const config::RunConfig& cfg, losses::UnlearnKind kind);

}  // namespace dtl::runner
