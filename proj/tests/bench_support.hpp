#pragma once

#include <map>
#include <memory>

#include "dtl/config.hpp"
#include "dtl/eval.hpp"
#include "dtl/nn.hpp"
#include "dtl/pipeline.hpp"
#include "dtl/runner.hpp"

namespace bench_support {

// One materialized benchmark seed: datasets plus the reference models every
// direction test compares against. Cached per seed within a test binary.
struct Bench {
    dtl::config::RunConfig cfg;
    dtl::config::BenchData data;
    dtl::nn::Model pretrained;
    dtl::nn::Model tl;
    dtl::nn::Model scratch_target;  // TGT: target-only from scratch

    dtl::eval::PlProtocol pl_protocol(bool fresh_head = false) const {
        dtl::eval::PlProtocol proto;
        proto.train = &data.piggyback_train;
        proto.test = &data.piggyback_test();
        proto.task = data.piggyback_train.task_id;
        proto.num_classes = data.piggyback_train.num_classes;
        proto.scheme = cfg.piggyback.scheme;
        proto.fresh_head = fresh_head;
        return proto;
    }

    double pl(const dtl::nn::Model& m, bool fresh_head = false) const {
        return dtl::eval::pl_accuracy(m, pl_protocol(fresh_head));
    }

    double acc_s(const dtl::nn::Model& m) const {
        return dtl::eval::accuracy(m, cfg.source.gaussian.task_id, data.source_test);
    }
    double acc_t(const dtl::nn::Model& m) const {
        return dtl::eval::accuracy(m, cfg.target.gaussian.task_id, data.target_test);
    }

    // Disposal with the benchmark schemes; NEG uses its gentler scheme.
    dtl::nn::Model dispose(dtl::losses::UnlearnKind kind, double lambda) const {
        dtl::nn::Model m = tl.clone();
        dtl::pipeline::DisposeOptions opt;
        opt.dtl = cfg.dispose.dtl;
        opt.dtl.unlearn = kind;
        opt.dtl.lambda = lambda;
        opt.scheme = dtl::runner::dispose_scheme_for(cfg, kind);
        opt.gc_workers = cfg.dispose.gc_workers;
        dtl::pipeline::dispose(m, tl, data.source_train, &data.target_train, opt);
        return m;
    }
};

inline const Bench& benchmark(std::uint64_t seed) {
    static std::map<std::uint64_t, std::unique_ptr<Bench>> cache;
    auto it = cache.find(seed);
    if (it != cache.end()) return *it->second;

    auto bench = std::make_unique<Bench>();
    bench->cfg = dtl::config::default_benchmark(seed);
    bench->data = dtl::config::build_datasets(bench->cfg);

    bench->pretrained = dtl::nn::Model::init(bench->cfg.model, bench->cfg.init_seed);
    dtl::pipeline::fit_ce(bench->pretrained, bench->cfg.source.gaussian.task_id,
                          bench->data.source_train, bench->cfg.pretrain.scheme, "pretrain");
    bench->tl = bench->pretrained.clone();
    dtl::pipeline::fit_ce(bench->tl, bench->cfg.target.gaussian.task_id, bench->data.target_train,
                          bench->cfg.finetune.scheme, "finetune");
    bench->scratch_target = dtl::nn::Model::init(bench->cfg.model, bench->cfg.scratch_init_seed);
    dtl::pipeline::fit_ce(bench->scratch_target, bench->cfg.target.gaussian.task_id,
                          bench->data.target_train, bench->cfg.finetune.scheme, "scratch");

    it = cache.emplace(seed, std::move(bench)).first;
    return *it->second;
}

}  // namespace bench_support
