#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dtl/data.hpp"
#include "dtl/losses.hpp"
#include "dtl/nn.hpp"

namespace dtl::pipeline {

struct RunRecord {
    std::string stage;
    int epoch = 0;
    std::int64_t step = 0;  // global step within the stage
    double loss = 0.0;
    double retain_component = 0.0;   // (1 - lambda) * retain
    double unlearn_component = 0.0;  // lambda * unlearn
    double lr = 0.0;
    double wall_ms = 0.0;  // informational; not part of the reproducibility surface
};

using RecordSink = std::function<void(const RunRecord&)>;

// Train_A: seeded minibatch SGD with cross-entropy on one dataset.
// Momentum buffers are created fresh here, so every stage starts clean.
std::vector<RunRecord> fit_ce(nn::Model& model, int task, const data::Dataset& train,
                              const nn::TrainScheme& scheme, const std::string& stage_name,
                              const RecordSink& sink = nullptr);

struct DisposeOptions {
    losses::DtlConfig dtl;
    nn::TrainScheme scheme;
    int gc_workers = 1;
    bool freeze_source_head = false;
    bool freeze_trunk = false;
};

// Knowledge disposal stage: optimizes (1-lambda)*retain + lambda*unlearn per
// step. The teacher is the (frozen) input model for the KD retain kinds. GC
// unlearning gradients come from the gc engine; every other kind goes
// through ordinary autodiff.
std::vector<RunRecord> dispose(nn::Model& model, const nn::Model& teacher,
                               const data::Dataset& source, const data::Dataset* target,
                               const DisposeOptions& options, const RecordSink& sink = nullptr);

// A-GEM projection: drop the component of grad_dtl that conflicts with
// grad_retain. Returns grad_dtl unchanged when the inner product is
// non-negative.
std::vector<double> agem_update(const std::vector<double>& grad_dtl,
                                const std::vector<double>& grad_retain);

// Distills a freshly initialized student against the teacher's source-task
// predictions on source data. Heads for other tasks stay at their fresh
// initialization; the point of the recipe is that target performance does
// not transfer this way.
nn::Model distill_to_fresh(const nn::Model& teacher, const nn::ModelSpec& student_spec,
                           std::uint64_t init_seed, const data::Dataset& source,
                           const nn::TrainScheme& scheme, int distill_task,
                           const RecordSink& sink = nullptr);

}  // namespace dtl::pipeline
