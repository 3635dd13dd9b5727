#include "dtl/pipeline.hpp"

#include <chrono>
#include <cmath>

#include "dtl/errors.hpp"
#include "dtl/gc_engine.hpp"
#include "dtl/rng.hpp"

namespace dtl::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double flat_norm(const std::vector<double>& v) {
    double s = 0.0;
    for (const double x : v) s += x * x;
    return std::sqrt(s);
}

void check_finite_loss(double loss, const std::string& stage, std::int64_t step) {
    if (!std::isfinite(loss) || std::abs(loss) > 1e6) {
        throw DivergedRunError("stage '" + stage + "' diverged at step " + std::to_string(step) +
                               " (loss = " + std::to_string(loss) + ")");
    }
}

// Cycles minibatches of a dataset across epochs with reshuffles.
class CyclingBatches {
public:
    CyclingBatches(const data::Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                   bool drop_tail)
        : ds_(ds), batch_size_(batch_size), seed_(seed), drop_tail_(drop_tail) {}

    data::Batch next() {
        while (true) {
            if (!iter_) {
                iter_.emplace(ds_, batch_size_, seed_, epoch_, drop_tail_);
            }
            if (auto b = iter_->next()) return std::move(*b);
            iter_.reset();
            ++epoch_;
        }
    }

private:
    const data::Dataset& ds_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    bool drop_tail_;
    std::uint64_t epoch_ = 0;
    std::optional<data::BatchIterator> iter_;
};

}  // namespace

std::vector<RunRecord> fit_ce(nn::Model& model, int task, const data::Dataset& train,
                              const nn::TrainScheme& scheme, const std::string& stage_name,
                              const RecordSink& sink) {
    const auto batch_size = static_cast<std::size_t>(scheme.batch_size);
    data::BatchIterator probe(train, batch_size, scheme.seed, 0, /*drop_tail=*/false);
    const std::int64_t steps_per_epoch = static_cast<std::int64_t>(probe.num_batches());
    const std::int64_t total_steps = steps_per_epoch * scheme.epochs;

    nn::SgdOptimizer opt(scheme, total_steps);
    std::vector<RunRecord> records;
    std::int64_t step = 0;
    const auto t0 = Clock::now();
    for (int epoch = 0; epoch < scheme.epochs; ++epoch) {
        data::BatchIterator batches(train, batch_size, scheme.seed,
                                    static_cast<std::uint64_t>(epoch), /*drop_tail=*/false);
        while (auto batch = batches.next()) {
            const ad::NodePtr loss =
                losses::cross_entropy(model.forward(task, batch->features), batch->labels);
            const double loss_val = loss->values()[0];
            check_finite_loss(loss_val, stage_name, step);
            const std::vector<double> g =
                ad::grad(loss, model.params(), /*build_graph=*/false).flat();
            opt.step(model, g, step);

            RunRecord rec{stage_name, epoch, step, loss_val, loss_val, 0.0,
                          opt.lr_at(step), ms_since(t0)};
            if (sink) sink(rec);
            records.push_back(std::move(rec));
            ++step;
        }
    }
    return records;
}

std::vector<double> agem_update(const std::vector<double>& grad_dtl,
                                const std::vector<double>& grad_retain) {
    if (grad_dtl.size() != grad_retain.size()) {
        throw ShapeError("agem_update: gradient lengths differ");
    }
    double inner = 0.0;
    double retain_sq = 0.0;
    double dtl_sq = 0.0;
    for (std::size_t i = 0; i < grad_dtl.size(); ++i) {
        inner += grad_dtl[i] * grad_retain[i];
        retain_sq += grad_retain[i] * grad_retain[i];
        dtl_sq += grad_dtl[i] * grad_dtl[i];
    }
    // Rounding residue after a projection must not re-project, so the
    // non-conflict branch absorbs it; this keeps the update idempotent.
    if (inner >= -1e-12 * std::sqrt(retain_sq * dtl_sq)) return grad_dtl;
    if (retain_sq == 0.0) {
        throw DegenerateGradientError("agem_update: zero retain gradient in projection branch");
    }
    const double coeff = inner / retain_sq;
    std::vector<double> out(grad_dtl.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = grad_dtl[i] - coeff * grad_retain[i];
    return out;
}

std::vector<RunRecord> dispose(nn::Model& model, const nn::Model& teacher,
                               const data::Dataset& source, const data::Dataset* target,
                               const DisposeOptions& options, const RecordSink& sink) {
    const losses::DtlConfig& cfg = options.dtl;
    cfg.validate();
    const bool needs_target = losses::retain_data_source(cfg.retain) == losses::RetainData::target;
    if (needs_target && target == nullptr) {
        throw ContractViolation("dispose: retain kind '" + losses::to_string(cfg.retain) +
                                "' needs target data");
    }
    const nn::TrainScheme& scheme = options.scheme;
    const auto batch_size = static_cast<std::size_t>(scheme.batch_size);
    const bool chunked = cfg.unlearn == losses::UnlearnKind::gc ||
                         cfg.unlearn == losses::UnlearnKind::ngc;
    if (chunked && batch_size % static_cast<std::size_t>(cfg.chunks) != 0) {
        throw ContractViolation("dispose: batch size must be divisible by chunk count");
    }

    // The relabeling for RAND is fixed once per stage.
    losses::RelabeledDataset relabeled;
    if (cfg.unlearn == losses::UnlearnKind::rand) {
        relabeled = losses::RelabeledDataset::make(source, mix_seed(scheme.seed, 0x7e1abe1ULL));
    }

    data::BatchIterator probe(source, batch_size, scheme.seed, 0, chunked);
    const std::int64_t steps_per_epoch = static_cast<std::int64_t>(probe.num_batches());
    if (steps_per_epoch == 0) throw ContractViolation("dispose: source smaller than one batch");
    const std::int64_t total_steps = steps_per_epoch * scheme.epochs;

    CyclingBatches retain_target(needs_target ? *target : source, batch_size,
                                 mix_seed(scheme.seed, 0x5e7a19ULL), /*drop_tail=*/false);
    CyclingBatches agem_ref(needs_target ? *target : source, batch_size,
                            mix_seed(scheme.seed, 0xa9e3ULL), /*drop_tail=*/false);

    std::vector<bool> trainable;
    if (options.freeze_source_head || options.freeze_trunk) {
        trainable.assign(model.param_count(), true);
        if (options.freeze_source_head) {
            const auto head = model.head_mask(cfg.source_task);
            for (std::size_t i = 0; i < trainable.size(); ++i) {
                if (head[i]) trainable[i] = false;
            }
        }
        if (options.freeze_trunk) {
            const auto trunk = model.trunk_mask();
            for (std::size_t i = 0; i < trainable.size(); ++i) {
                if (trunk[i]) trainable[i] = false;
            }
        }
    }

    const double initial_norm = flat_norm(model.flat_params());
    const bool neg_guard = cfg.unlearn == losses::UnlearnKind::neg;

    gc::GcOptions gc_options;
    gc_options.workers = options.gc_workers;

    nn::SgdOptimizer opt(scheme, total_steps);
    std::vector<RunRecord> records;
    std::int64_t step = 0;
    const auto t0 = Clock::now();
    for (int epoch = 0; epoch < scheme.epochs; ++epoch) {
        data::BatchIterator source_batches(source, batch_size, scheme.seed,
                                           static_cast<std::uint64_t>(epoch), chunked);
        while (auto unlearn_batch = source_batches.next()) {
            const std::size_t n = model.param_count();
            std::vector<double> total_grad(n, 0.0);
            double retain_val = 0.0;
            double unlearn_val = 0.0;

            if (cfg.lambda < 1.0) {
                const data::Batch retain_batch =
                    needs_target ? retain_target.next() : *unlearn_batch;
                const ad::NodePtr retain =
                    losses::retain_loss(cfg, model, teacher, retain_batch);
                retain_val = retain->values()[0];
                const std::vector<double> g =
                    ad::grad(retain, model.params(), /*build_graph=*/false).flat();
                for (std::size_t i = 0; i < n; ++i) total_grad[i] += (1.0 - cfg.lambda) * g[i];
            }
            if (cfg.lambda > 0.0) {
                if (cfg.unlearn == losses::UnlearnKind::gc) {
                    const gc::GcResult r =
                        gc::gc_grad_parallel(model, cfg.source_task, *unlearn_batch, cfg.chunks,
                                             gc_options);
                    unlearn_val = r.loss;
                    for (std::size_t i = 0; i < n; ++i) total_grad[i] += cfg.lambda * r.grad[i];
                } else {
                    losses::DtlBatches batches;
                    batches.unlearn = &*unlearn_batch;
                    batches.relabeled = &relabeled;
                    const ad::NodePtr unlearn = losses::unlearn_loss(cfg, model, batches);
                    unlearn_val = unlearn->values()[0];
                    const std::vector<double> g =
                        ad::grad(unlearn, model.params(), /*build_graph=*/false).flat();
                    for (std::size_t i = 0; i < n; ++i) total_grad[i] += cfg.lambda * g[i];
                }
            }

            if (cfg.retain == losses::RetainKind::tgt_a_gem) {
                const data::Batch ref_batch = agem_ref.next();
                const ad::NodePtr ref = losses::cross_entropy(
                    model.forward(cfg.target_task, ref_batch.features), ref_batch.labels);
                const std::vector<double> g_ref =
                    ad::grad(ref, model.params(), /*build_graph=*/false).flat();
                total_grad = agem_update(total_grad, g_ref);
            }

            const double weighted_retain = (1.0 - cfg.lambda) * retain_val;
            const double weighted_unlearn = cfg.lambda * unlearn_val;
            const double loss_val = weighted_retain + weighted_unlearn;
            if (neg_guard) {
                const double norm = flat_norm(model.flat_params());
                if (!std::isfinite(norm) || norm > 1e4 * initial_norm) {
                    throw DivergedRunError("stage 'dispose' diverged at step " +
                                           std::to_string(step) + " (parameter norm " +
                                           std::to_string(norm) + " exploded)");
                }
            } else {
                check_finite_loss(loss_val, "dispose", step);
            }

            if (trainable.empty()) {
                opt.step(model, total_grad, step);
            } else {
                opt.step_masked(model, total_grad, step, trainable);
            }

            RunRecord rec{"dispose", epoch, step, loss_val, weighted_retain, weighted_unlearn,
                          opt.lr_at(step), ms_since(t0)};
            if (sink) sink(rec);
            records.push_back(std::move(rec));
            ++step;
        }
    }
    return records;
}

nn::Model distill_to_fresh(const nn::Model& teacher, const nn::ModelSpec& student_spec,
                           std::uint64_t init_seed, const data::Dataset& source,
                           const nn::TrainScheme& scheme, int distill_task,
                           const RecordSink& sink) {
    nn::Model student = nn::Model::init(student_spec, init_seed);
    if (!student.has_task(distill_task)) {
        throw ContractViolation("distill_to_fresh: student spec lacks the distilled head");
    }
    const auto batch_size = static_cast<std::size_t>(scheme.batch_size);
    data::BatchIterator probe(source, batch_size, scheme.seed, 0, false);
    const std::int64_t total_steps = static_cast<std::int64_t>(probe.num_batches()) * scheme.epochs;

    nn::SgdOptimizer opt(scheme, total_steps);
    std::int64_t step = 0;
    const auto t0 = Clock::now();
    for (int epoch = 0; epoch < scheme.epochs; ++epoch) {
        data::BatchIterator batches(source, batch_size, scheme.seed,
                                    static_cast<std::uint64_t>(epoch), false);
        while (auto batch = batches.next()) {
            const ad::NodePtr loss = losses::kd_loss(student, teacher, distill_task, *batch);
            const double loss_val = loss->values()[0];
            check_finite_loss(loss_val, "distill", step);
            const std::vector<double> g =
                ad::grad(loss, student.params(), /*build_graph=*/false).flat();
            opt.step(student, g, step);
            if (sink) {
                sink(RunRecord{"distill", epoch, step, loss_val, loss_val, 0.0, opt.lr_at(step),
                               ms_since(t0)});
            }
            ++step;
        }
    }
    return student;
}

}  // namespace dtl::pipeline
