// Acceptance suite: one test case per criterion, one PASS/FAIL line each.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "bench_support.hpp"
#include "dtl/config.hpp"
#include "dtl/gc_engine.hpp"
#include "dtl/oracle.hpp"
#include "dtl/runner.hpp"
#include "test_support.hpp"

using namespace dtl;
using bench_support::benchmark;
using test_support::make_mlp_case;
using test_support::max_abs_diff;
using test_support::max_rel_err;
using test_support::rel_inf_diff;

namespace {

using Clock = std::chrono::steady_clock;

struct Criterion {
    int number;
    Clock::time_point t0 = Clock::now();
    explicit Criterion(int n) : number(n) {}

    void report(bool pass, const std::string& detail) const {
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        std::printf("criterion %2d: %s  (%s; %.1f s)\n", number, pass ? "PASS" : "FAIL",
                    detail.c_str(), secs);
        std::fflush(stdout);
        CHECK_MESSAGE(pass, "criterion ", number, ": ", detail);
    }
};

std::string fmt(const char* format, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), format, args...);
    return std::string(buf);
}

// The random graph family for the differentiation criteria: MLPs under 500
// parameters with seed-dependent widths.
test_support::MlpCase family_case(std::uint64_t seed) {
    const int input = 4 + static_cast<int>(seed % 3);
    const int h1 = 8 + static_cast<int>(seed % 5);
    const int h2 = 5 + static_cast<int>(seed % 4);
    const int classes = 3 + static_cast<int>(seed % 2);
    // The finite-difference oracles need a relu kink margin wider than the
    // probe step, so the family is drawn from smooth evaluation points.
    return test_support::make_smooth_mlp_case(seed, input, {h1, h2}, classes, 6);
}

double mean(const std::vector<double>& v) {
    double s = 0;
    for (const double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("criterion 1: gradient vs central finite differences") {
    Criterion crit(1);
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto c = family_case(seed);
        REQUIRE(c.model.param_count() <= 500);
        const auto loss =
            losses::cross_entropy(c.model.forward(c.task, c.batch.features), c.batch.labels);
        const auto analytic = ad::grad(loss, c.model.params(), false).flat();
        const auto fd =
            oracle::fd_gradient(test_support::ce_loss_fn(c), c.model.flat_params(), 1e-5);
        worst = std::max(worst, max_rel_err(analytic, fd));
    }
    crit.report(worst < 1e-6, fmt("max rel err %.2e over 20 graphs", worst));
}

TEST_CASE("criterion 2: hvp vs finite differences of the gradient") {
    Criterion crit(2);
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto c = family_case(seed);
        const std::vector<double> theta = c.model.flat_params();
        Rng rng(mix_seed(seed, 0x42ULL));
        std::vector<double> v(theta.size());
        for (double& x : v) x = rng.uniform(-1.0, 1.0);

        const auto loss =
            losses::cross_entropy(c.model.forward(c.task, c.batch.features), c.batch.labels);
        const auto hv = ad::hvp(loss, c.model.params(), v);

        const double eps = 1e-4;
        auto grad_fn = test_support::ce_grad_fn(c);
        std::vector<double> up = theta, down = theta;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            up[i] += eps * v[i];
            down[i] -= eps * v[i];
        }
        const auto gu = grad_fn(up);
        const auto gd = grad_fn(down);
        std::vector<double> fd(theta.size());
        for (std::size_t i = 0; i < fd.size(); ++i) fd[i] = (gu[i] - gd[i]) / (2 * eps);
        worst = std::max(worst, max_rel_err(hv, fd));
    }
    crit.report(worst < 1e-4, fmt("max rel err %.2e over 20 graphs", worst));
}

TEST_CASE("criterion 3: HVP rearrangement equals the naive pairwise gradient") {
    Criterion crit(3);
    double worst = 0.0;
    bool counters_ok = true;
    for (const int chunks : {2, 3, 4, 8}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const auto c = make_mlp_case(seed + 300, 5, {8, 6}, 4, 24);
            gc::reset_op_counters();
            const auto engine = gc::gc_grad_sequential(c.model, 0, c.batch, chunks);
            const auto after_engine = gc::op_counters();
            counters_ok &= after_engine.hvp_evals == static_cast<std::uint64_t>(chunks);

            gc::reset_op_counters();
            const auto naive = oracle::naive_gc_grad(c.model, 0, c.batch, chunks);
            const auto after_naive = gc::op_counters();
            const auto pairs = static_cast<std::uint64_t>(chunks * (chunks - 1) / 2);
            counters_ok &= after_naive.hvp_evals == 0;
            counters_ok &=
                after_naive.reverse_sweeps == static_cast<std::uint64_t>(chunks) + pairs;

            worst = std::max(worst, rel_inf_diff(engine.grad, naive));
        }
    }
    crit.report(worst < 1e-8 && counters_ok,
                fmt("max rel err %.2e; counters %s (c HVPs vs C(c,2) sweeps)", worst,
                    counters_ok ? "exact" : "WRONG"));
}

TEST_CASE("criterion 4: parallel schedule matches sequential within 1e-12") {
    Criterion crit(4);
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const int chunks = (seed % 2 == 0) ? 4 : 8;
        const auto c = make_mlp_case(seed + 500, 6, {10, 8}, 4, 24);
        REQUIRE(c.model.param_count() <= 2000);
        const auto seq = gc::gc_grad_sequential(c.model, 0, c.batch, chunks);
        gc::GcOptions opt;
        opt.workers = chunks;
        const auto par = gc::gc_grad_parallel(c.model, 0, c.batch, chunks, opt);
        worst = std::max(worst, max_abs_diff(par.grad, seq.grad));
    }
    crit.report(worst < 1e-12, fmt("max abs diff %.2e over 20 seeds, k = c", worst));
}

TEST_CASE("criterion 5: diagonal-quadratic closed form") {
    Criterion crit(5);
    const auto theta = ad::leaf({2}, {0.7, -1.3}, true);
    const std::vector<ad::NodePtr> params{theta};
    const std::vector<std::array<double, 2>> diags{{2, 1}, {0.5, 3}, {1.5, -2}, {4, 0.25}};
    double worst = 0.0;
    for (const int c : {2, 3, 4}) {
        gc::ChunkLoss loss = [&](int m) {
            const auto& d = diags[static_cast<std::size_t>(m)];
            const auto a = ad::constant({2, 2}, {d[0], 0, 0, d[1]});
            return ad::scale(ad::dot(theta, ad::matmul(a, ad::reshape(theta, {2, 1}))), 0.5);
        };
        // Hand formula (1/C(c,2)) sum_m A_m (sum_{n != m} A_n theta).
        std::vector<double> hand(2, 0.0);
        for (int m = 0; m < c; ++m) {
            for (int n = 0; n < c; ++n) {
                if (n == m) continue;
                for (int j = 0; j < 2; ++j) {
                    hand[static_cast<std::size_t>(j)] +=
                        diags[static_cast<std::size_t>(m)][static_cast<std::size_t>(j)] *
                        diags[static_cast<std::size_t>(n)][static_cast<std::size_t>(j)] *
                        theta->values()[static_cast<std::size_t>(j)];
                }
            }
        }
        const double w = 2.0 / (static_cast<double>(c) * static_cast<double>(c - 1));
        for (double& x : hand) x *= w;
        worst = std::max(worst, max_abs_diff(gc::gc_grad_sequential(params, loss, c).grad, hand));
        gc::GcOptions opt;
        opt.workers = c;
        worst = std::max(worst, max_abs_diff(gc::gc_grad_parallel(params, loss, c, opt).grad, hand));
    }
    crit.report(worst < 1e-10, fmt("max abs diff to hand formula %.2e", worst));
}

namespace {

struct KindRun {
    bool stable = true;
    std::vector<double> acc_t, acc_pl;
    double mean_t() const { return mean(acc_t); }
    double mean_pl() const { return mean(acc_pl); }
};

// One lambda of one unlearning kind across the five benchmark seeds.
KindRun run_kind(losses::UnlearnKind kind, double lambda) {
    KindRun out;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto& bench = benchmark(seed);
        try {
            const nn::Model m = bench.dispose(kind, lambda);
            out.acc_t.push_back(bench.acc_t(m));
            out.acc_pl.push_back(bench.pl(m));
        } catch (const DivergedRunError&) {
            out.stable = false;
            return out;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("criterion 6: GC disposal direction on the Gaussian benchmark") {
    Criterion crit(6);
    std::vector<double> tl_t, tl_pl;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto& bench = benchmark(seed);
        tl_t.push_back(bench.acc_t(bench.tl));
        tl_pl.push_back(bench.pl(bench.tl));
    }
    const double tl_mean_t = mean(tl_t), tl_mean_pl = mean(tl_pl);

    // GC operating point: the per-benchmark tuned lambda, i.e. the grid
    // point that survives every seed, keeps mean target accuracy within 3
    // points of TL, and unlearns hardest.
    std::map<double, KindRun> gc_runs;
    double gc_lambda = -1;
    for (const double lam : {0.3, 0.4, 0.5}) {
        gc_runs[lam] = run_kind(losses::UnlearnKind::gc, lam);
        const KindRun& r = gc_runs[lam];
        if (r.stable && r.mean_t() >= tl_mean_t - 0.03) {
            if (gc_lambda < 0 || r.mean_pl() < gc_runs[gc_lambda].mean_pl()) gc_lambda = lam;
        }
    }
    REQUIRE(gc_lambda > 0);
    const KindRun& gc = gc_runs[gc_lambda];

    // Baselines: per-kind lambda tuned the same way, matched to GC's mean
    // target accuracy within 2 points (closest point as fallback), then the
    // lowest-PL qualifier — the choice most favorable to the baseline.
    struct Pick {
        double lambda = -1;
        double pl = 1e9;
        double t = 0;
        bool matched = false;
    };
    std::map<losses::UnlearnKind, Pick> picks;
    for (const auto kind :
         {losses::UnlearnKind::rand, losses::UnlearnKind::unif, losses::UnlearnKind::neg}) {
        Pick best;
        Pick closest;
        double closest_gap = 1e9;
        for (const double lam : {0.3, 0.5, 0.7, 0.9}) {
            const KindRun r = run_kind(kind, lam);
            if (!r.stable) continue;
            const double gap = std::abs(r.mean_t() - gc.mean_t());
            if (gap <= 0.02 && r.mean_pl() < best.pl) {
                best = {lam, r.mean_pl(), r.mean_t(), true};
            }
            if (gap < closest_gap) {
                closest_gap = gap;
                closest = {lam, r.mean_pl(), r.mean_t(), false};
            }
        }
        picks[kind] = best.matched ? best : closest;
    }

    const double target_gap = gc.mean_t() - tl_mean_t;
    const double pl_drop = tl_mean_pl - gc.mean_pl();
    const bool a = target_gap >= -0.03;
    const bool b = pl_drop >= 0.10;
    const bool c = gc.mean_pl() < picks[losses::UnlearnKind::rand].pl &&
                   gc.mean_pl() < picks[losses::UnlearnKind::unif].pl &&
                   gc.mean_pl() < picks[losses::UnlearnKind::neg].pl;
    crit.report(a && b && c,
                fmt("gc lam=%.1f: acc_t gap %+.1f pts (>= -3), PL drop %.1f pts (>= 10), "
                    "PL %.3f vs rand %.3f / unif %.3f / neg %.3f",
                    gc_lambda, target_gap * 100, pl_drop * 100, gc.mean_pl(),
                    picks[losses::UnlearnKind::rand].pl, picks[losses::UnlearnKind::unif].pl,
                    picks[losses::UnlearnKind::neg].pl));
}

TEST_CASE("criterion 7: head fooling dissociates source accuracy from PL accuracy") {
    Criterion crit(7);
    const auto& bench = benchmark(0);

    // Freeze everything except the source head and train it onto cyclically
    // shifted labels: a pure last-layer fooling that leaves features intact.
    nn::Model fooled = bench.tl.clone();
    data::Dataset shifted = bench.data.source_train;
    for (int& y : shifted.labels) y = (y + 1) % shifted.num_classes;

    std::vector<bool> trainable = fooled.head_mask(0);
    nn::TrainScheme scheme{0.01, 0.9, 1e-4, 15, 64, nn::Schedule::cosine, 808};
    data::BatchIterator probe(shifted, 64, scheme.seed, 0, false);
    const auto total = static_cast<std::int64_t>(probe.num_batches()) * scheme.epochs;
    nn::SgdOptimizer opt(scheme, total);
    std::int64_t step = 0;
    for (int epoch = 0; epoch < scheme.epochs; ++epoch) {
        data::BatchIterator batches(shifted, 64, scheme.seed, static_cast<std::uint64_t>(epoch),
                                    false);
        while (auto batch = batches.next()) {
            const auto loss =
                losses::cross_entropy(fooled.forward(0, batch->features), batch->labels);
            opt.step_masked(fooled, ad::grad(loss, fooled.params(), false).flat(), step++,
                            trainable);
        }
    }

    const double acc_s = bench.acc_s(fooled);
    // Fresh-head piggybacking reads out feature knowledge, not head state.
    const double pl_fooled = bench.pl(fooled, /*fresh_head=*/true);
    const double pl_tl = bench.pl(bench.tl, /*fresh_head=*/true);
    const bool pass = acc_s < 0.05 && std::abs(pl_fooled - pl_tl) <= 0.03;
    crit.report(pass, fmt("acc_s %.3f (< 0.05) with PL %.3f vs TL %.3f (within 3 pts)", acc_s,
                          pl_fooled, pl_tl));
}

TEST_CASE("criterion 8: lambda sweep frontier dominance") {
    Criterion crit(8);
    const auto& bench = benchmark(4);

    struct Point {
        double lambda, t, pl;
        bool diverged;
    };
    std::map<losses::UnlearnKind, std::vector<Point>> frontiers;
    const std::vector<double> grid{0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    for (const auto kind : {losses::UnlearnKind::gc, losses::UnlearnKind::rand,
                            losses::UnlearnKind::unif, losses::UnlearnKind::neg}) {
        for (const double lam : grid) {
            Point p{lam, 0, 0, false};
            try {
                const nn::Model m = bench.dispose(kind, lam);
                p.t = bench.acc_t(m);
                p.pl = bench.pl(m);
            } catch (const DivergedRunError&) {
                p.diverged = true;
            }
            frontiers[kind].push_back(p);
        }
    }

    // A GC grid point weakly dominates a baseline frontier when no baseline
    // point beats it in one coordinate without losing the other.
    const auto strictly_dominates = [](const Point& b, const Point& g) {
        return (b.t >= g.t && b.pl < g.pl) || (b.t > g.t && b.pl <= g.pl);
    };
    int undominated_interior = 0;
    std::string detail;
    for (const Point& g : frontiers[losses::UnlearnKind::gc]) {
        if (g.diverged || g.lambda <= 0.0 || g.lambda >= 1.0) continue;
        bool dominated = false;
        for (const auto kind :
             {losses::UnlearnKind::rand, losses::UnlearnKind::unif, losses::UnlearnKind::neg}) {
            for (const Point& b : frontiers[kind]) {
                if (!b.diverged && strictly_dominates(b, g)) dominated = true;
            }
        }
        if (!dominated) {
            ++undominated_interior;
            detail += fmt(" %.1f", g.lambda);
        }
    }
    crit.report(undominated_interior >= 3,
                fmt("%d interior GC points undominated by every baseline (lambdas:%s)",
                    undominated_interior, detail.c_str()));
}

TEST_CASE("criterion 9: A-GEM projection property") {
    Criterion crit(9);
    Rng rng(99);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> g(16), r(16);
        for (double& x : g) x = rng.normal();
        for (double& x : r) x = rng.normal();
        const auto out = pipeline::agem_update(g, r);
        double inner = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) inner += out[i] * r[i];
        worst = std::min(worst, inner);
    }
    // Analytic endpoints: orthogonality passes through, anti-parallel
    // projects to zero.
    const std::vector<double> g{1, 0, 2};
    const bool orth_ok = pipeline::agem_update(g, {0, 3, 0}) == g;
    std::vector<double> neg(g);
    for (double& x : neg) x = -x;
    bool zero_ok = true;
    for (const double x : pipeline::agem_update(g, neg)) zero_ok &= std::abs(x) < 1e-15;

    crit.report(worst >= -1e-12 && orth_ok && zero_ok,
                fmt("min <projected, retain> = %.2e over 1000 pairs; endpoints ok", worst));
}

TEST_CASE("criterion 10: MIA threshold readout sanity") {
    Criterion crit(10);
    data::GaussianTaskSpec spec;
    spec.k = 4;
    spec.d = 16;
    spec.n_train_per_class = 100;
    spec.n_test_per_class = 100;
    spec.separation = 1.0;
    spec.seed = 42;
    const auto [members, nonmembers] = make_gaussian_task(spec);
    nn::ModelSpec ms;
    ms.input_dim = 16;
    ms.hidden = {64, 64};
    ms.tasks = {{0, 4}};
    const nn::Model scratch = nn::Model::init(ms, 7);

    bool scratch_ok = true;
    std::string detail = "scratch auroc";
    for (const auto strat : {eval::MiaStrategy::softmax, eval::MiaStrategy::mentr,
                             eval::MiaStrategy::loss, eval::MiaStrategy::gradnorm}) {
        const auto score = eval::mia_scores(scratch, 0, members, nonmembers, strat);
        scratch_ok &= score.auroc >= 0.45 && score.auroc <= 0.55;
        detail += fmt(" %s=%.3f", eval::to_string(strat).c_str(), score.auroc);
    }

    data::GaussianTaskSpec tight = spec;
    tight.d = 32;
    tight.n_train_per_class = 40;
    tight.n_test_per_class = 40;
    tight.separation = 0.5;
    const auto [m2, n2] = make_gaussian_task(tight);
    nn::ModelSpec wide;
    wide.input_dim = 32;
    wide.hidden = {96, 96};
    wide.tasks = {{0, 4}};
    nn::Model overfit = nn::Model::init(wide, 7);
    pipeline::fit_ce(overfit, 0, m2, {0.05, 0.9, 0.0, 600, 160, nn::Schedule::cosine, 3},
                     "overfit");
    const auto loss_score = eval::mia_scores(overfit, 0, m2, n2, eval::MiaStrategy::loss);
    detail += fmt("; overfit loss auroc=%.3f", loss_score.auroc);

    crit.report(scratch_ok && loss_score.auroc > 0.9, detail);
}

TEST_CASE("criterion 11: GC training raises the Hessian trace monotonically") {
    Criterion crit(11);
    // Estimator validation on a <= 50-parameter model first.
    const auto c = make_mlp_case(4, 2, {3}, 2, 6);
    REQUIRE(c.model.param_count() <= 50);
    data::Dataset small;
    small.dim = 2;
    small.num_classes = 2;
    small.features = c.batch.features->values();
    small.labels = c.batch.labels;
    const auto exact =
        oracle::exact_hessian(test_support::ce_grad_fn(c), c.model.flat_params(), 1e-5);
    const double estimate = eval::hessian_trace(c.model, 0, small, 1000, 33);
    const bool estimator_ok = std::abs(estimate - exact.trace()) <= 0.05 * std::abs(exact.trace());

    // Identical source/target training at lambda 0, 0.10, 0.15.
    data::GaussianTaskSpec spec;
    spec.k = 4;
    spec.d = 8;
    spec.n_train_per_class = 25;
    spec.n_test_per_class = 50;
    spec.separation = 2.0;
    spec.seed = 21;
    const auto [train, test] = make_gaussian_task(spec);
    std::vector<double> traces;
    bool all_fit = true;
    for (const double lam : {0.0, 0.10, 0.15}) {
        nn::ModelSpec ms;
        ms.input_dim = 8;
        ms.hidden = {16, 16};
        ms.tasks = {{0, 4}};
        nn::Model m = nn::Model::init(ms, 5);
        pipeline::DisposeOptions opt;
        opt.dtl.lambda = lam;
        opt.dtl.unlearn = losses::UnlearnKind::gc;
        opt.dtl.retain = losses::RetainKind::tgt_ce;
        opt.dtl.chunks = 4;
        opt.dtl.source_task = 0;
        opt.dtl.target_task = 0;
        opt.scheme = {0.05, 0.9, 1e-4, 150, 20, nn::Schedule::cosine, 9};
        pipeline::dispose(m, m.clone(), train, &train, opt);
        all_fit &= eval::accuracy(m, 0, train) == 1.0;
        traces.push_back(eval::hessian_trace(m, 0, train, 500, 17));
    }
    const bool ordered = traces[0] < traces[1] && traces[1] < traces[2];
    crit.report(estimator_ok && all_fit && ordered,
                fmt("hutchinson %.3f vs exact %.3f; tr(H) %.2f -> %.2f -> %.2f at lambda 0/.10/.15",
                    estimate, exact.trace(), traces[0], traces[1], traces[2]));
}

TEST_CASE("criterion 12: pipeline re-runs from the manifest bitwise") {
    Criterion crit(12);
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "dtl_acceptance_repro";
    fs::remove_all(root);
    fs::create_directories(root);

    config::RunConfig cfg = config::default_benchmark(3);
    cfg.out_dir = (root / "a").string();
    cfg.source.gaussian.n_train_per_class = 60;
    cfg.source.gaussian.n_test_per_class = 20;
    cfg.target.gaussian.n_train_per_class = 50;
    cfg.target.subsample_gamma = 0.2;
    cfg.piggyback.gamma = 0.25;
    cfg.piggyback.scheme.epochs = 4;
    cfg.pretrain.scheme.epochs = 5;
    cfg.finetune.scheme.epochs = 4;
    cfg.dispose.scheme.epochs = 2;

    auto full_run = [](const config::RunConfig& c) {
        runner::run_pretrain(c);
        runner::run_finetune(c);
        runner::run_dispose(c);
        runner::run_piggyback(c);
    };
    full_run(cfg);

    // Re-run from the manifest's embedded config into a fresh directory.
    std::ifstream min(fs::path(cfg.out_dir) / "manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(min);
    config::RunConfig replay = config::parse(manifest.at("config").dump());
    replay.out_dir = (root / "b").string();
    full_run(replay);

    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    bool identical = true;
    for (const char* f :
         {"pretrain.ckpt", "tl.ckpt", "dtl.ckpt", "pl.ckpt", "metrics.jsonl"}) {
        identical &= slurp(root / "a" / f) == slurp(root / "b" / f);
    }
    fs::remove_all(root);
    crit.report(identical, "checkpoints and metric records identical across re-runs");
}
