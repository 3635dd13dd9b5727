// Microbenchmarks for the GC gradient paths: the HVP rearrangement is O(c)
// in backward work where the naive pairwise route is O(c^2).
#include <benchmark/benchmark.h>

#include "dtl/gc_engine.hpp"
#include "dtl/losses.hpp"
#include "dtl/nn.hpp"
#include "dtl/oracle.hpp"
#include "dtl/rng.hpp"

namespace {

using namespace dtl;

struct Fixture {
    nn::Model model;
    data::Batch batch;
};

Fixture make_fixture(std::size_t batch_size) {
    nn::ModelSpec spec;
    spec.input_dim = 16;
    spec.hidden = {32, 32};
    spec.tasks = {{0, 10}};
    Fixture f;
    f.model = nn::Model::init(spec, 1);
    Rng rng(2);
    std::vector<double> x(batch_size * 16);
    for (double& v : x) v = rng.normal();
    f.batch.features = ad::constant({batch_size, 16}, std::move(x));
    for (std::size_t i = 0; i < batch_size; ++i) {
        f.batch.labels.push_back(static_cast<int>(rng.uniform_index(10)));
        f.batch.rows.push_back(i);
    }
    return f;
}

void BM_gc_engine(benchmark::State& state) {
    const int chunks = static_cast<int>(state.range(0));
    const Fixture f = make_fixture(48);
    for (auto _ : state) {
        auto r = gc::gc_grad_sequential(f.model, 0, f.batch, chunks);
        benchmark::DoNotOptimize(r.grad.data());
    }
    state.SetLabel("hvp evals per step = c");
}

void BM_gc_naive(benchmark::State& state) {
    const int chunks = static_cast<int>(state.range(0));
    const Fixture f = make_fixture(48);
    for (auto _ : state) {
        auto g = oracle::naive_gc_grad(f.model, 0, f.batch, chunks);
        benchmark::DoNotOptimize(g.data());
    }
    state.SetLabel("pairwise sweeps per step = C(c,2)");
}

void BM_gc_parallel(benchmark::State& state) {
    const int workers = static_cast<int>(state.range(0));
    const Fixture f = make_fixture(48);
    gc::GcOptions opt;
    opt.workers = workers;
    for (auto _ : state) {
        auto r = gc::gc_grad_parallel(f.model, 0, f.batch, 8, opt);
        benchmark::DoNotOptimize(r.grad.data());
    }
}

void BM_grad(benchmark::State& state) {
    const Fixture f = make_fixture(48);
    for (auto _ : state) {
        const auto loss = losses::cross_entropy(f.model.forward(0, f.batch.features),
                                                f.batch.labels);
        auto g = ad::grad(loss, f.model.params(), false);
        benchmark::DoNotOptimize(&g);
    }
}

void BM_hvp(benchmark::State& state) {
    const Fixture f = make_fixture(48);
    const std::vector<double> v(f.model.param_count(), 0.5);
    for (auto _ : state) {
        const auto loss = losses::cross_entropy(f.model.forward(0, f.batch.features),
                                                f.batch.labels);
        auto hv = ad::hvp(loss, f.model.params(), v);
        benchmark::DoNotOptimize(hv.data());
    }
}

}  // namespace

BENCHMARK(BM_gc_engine)->Arg(2)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_gc_naive)->Arg(2)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_gc_parallel)->Arg(1)->Arg(2)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_grad)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_hvp)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
