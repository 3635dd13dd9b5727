#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dtl/data.hpp"
#include "dtl/losses.hpp"
#include "dtl/nn.hpp"

namespace dtl::config {

// One dataset binding: a Gaussian generator or a CSV pair, plus an optional
// class-balanced subsample of the train split.
struct DatasetConfig {
    std::string kind = "gaussian";  // gaussian | csv
    data::GaussianTaskSpec gaussian;
    std::string csv_train;
    std::string csv_test;
    double subsample_gamma = 1.0;
    std::uint64_t subsample_seed = 0;
};

struct PiggybackConfig {
    std::string base = "source";  // source | target | extra dataset name
    double gamma = 0.10;
    std::uint64_t subsample_seed = 0;
    bool fresh_head = false;
    nn::TrainScheme scheme;
};

struct StageConfig {
    nn::TrainScheme scheme;
    std::string input_checkpoint;   // empty -> fresh init (pretrain only)
    std::string output_checkpoint;
};

struct DisposeStageConfig : StageConfig {
    losses::DtlConfig dtl;
    int gc_workers = 1;
    bool freeze_source_head = false;
    bool freeze_trunk = false;
    // NEG runs hot; without normalization layers it needs a gentler scheme.
    std::optional<nn::TrainScheme> neg_scheme;
};

struct RunConfig {
    std::uint64_t seed = 0;  // master seed the defaults were derived from
    std::string out_dir = "runs/bench";
    nn::ModelSpec model;
    std::uint64_t init_seed = 400;
    std::uint64_t scratch_init_seed = 420;
    DatasetConfig source;
    DatasetConfig target;
    PiggybackConfig piggyback;
    StageConfig pretrain;
    StageConfig finetune;
    DisposeStageConfig dispose;

    void validate() const;
};

// The desk-scale benchmark every seed of the acceptance suite runs on.
RunConfig default_benchmark(std::uint64_t master_seed);

RunConfig load(const std::string& path);
void save(const RunConfig& cfg, const std::string& path);
std::string dump(const RunConfig& cfg);
RunConfig parse(const std::string& json_text);

// KEY=VALUE override with dotted paths, e.g. "dispose.dtl.lambda=0.5".
RunConfig apply_override(const RunConfig& cfg, const std::string& key_value);

// Materialized datasets of a run.
struct BenchData {
    data::Dataset source_train, source_test;
    data::Dataset target_train, target_test;  // target_train already subsampled
    data::Dataset piggyback_train;
    bool piggyback_from_source = true;

    const data::Dataset& piggyback_test() const {
        return piggyback_from_source ? source_test : target_test;
    }
};

BenchData build_datasets(const RunConfig& cfg);

}  // namespace dtl::config
