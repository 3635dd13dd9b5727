#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dtl/data.hpp"
#include "dtl/losses.hpp"
#include "dtl/nn.hpp"
#include "dtl/pipeline.hpp"
#include "test_support.hpp"

using namespace dtl;
using test_support::make_mlp_case;

TEST_CASE("cross_entropy: uniform, hand case, margin limit, label range") {
    const auto uniform = ad::constant({2, 4}, std::vector<double>(8, 0.0));
    CHECK(losses::cross_entropy(uniform, {0, 3})->values()[0] ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));

    const auto hand = ad::constant({1, 3}, {2, 0, 0});
    CHECK(losses::cross_entropy(hand, {0})->values()[0] ==
          doctest::Approx(0.2395447662218845).epsilon(1e-12));

    // One-hot-correct logits: loss -> 0 as the margin grows.
    double prev = 10.0;
    for (const double margin : {2.0, 5.0, 10.0, 20.0}) {
        const auto logits = ad::constant({1, 3}, {margin, 0, 0});
        const double loss = losses::cross_entropy(logits, {0})->values()[0];
        CHECK(loss < prev);
        prev = loss;
    }
    CHECK(prev < 1e-8);

    CHECK_THROWS_AS(losses::cross_entropy(hand, {3}), InvalidLabelError);
    CHECK_THROWS_AS(losses::cross_entropy(hand, {-1}), InvalidLabelError);
}

TEST_CASE("kd_loss: zero at teacher, non-negative, hand case") {
    const auto c = make_mlp_case(5, 3, {8}, 4, 6);

    CHECK(losses::kd_loss(c.model, c.model, 0, c.batch)->values()[0] ==
          doctest::Approx(0.0).epsilon(1e-14));

    const auto teacher = make_mlp_case(6, 3, {8}, 4, 6);
    const double kl = losses::kd_loss(c.model, teacher.model, 0, c.batch)->values()[0];
    CHECK(kl >= 0.0);

    // Hand case p=[0.5,0.5], q=[0.9,0.1] via logits chosen to produce p and q.
    nn::ModelSpec spec;
    spec.input_dim = 2;
    spec.hidden = {};
    spec.tasks = {{0, 2}};
    nn::Model teacher2 = nn::Model::init(spec, 0);
    nn::Model student2 = nn::Model::init(spec, 0);
    teacher2.set_flat_params({0, 0, 0, 0, 0, 0});          // logits (0,0) -> p = (.5,.5)
    const double a = std::log(9.0);                        // softmax(a,0) = (.9,.1)
    student2.set_flat_params({0, 0, 0, 0, a, 0});          // bias-only logits
    data::Batch one;
    one.features = ad::constant({1, 2}, {0.0, 0.0});
    one.labels = {0};
    one.rows = {0};
    CHECK(losses::kd_loss(student2, teacher2, 0, one)->values()[0] ==
          doctest::Approx(0.5108256237659907).epsilon(1e-12));

    // Gradient vanishes at theta == teacher.
    const auto g = ad::grad(losses::kd_loss(c.model, c.model, 0, c.batch), c.model.params(), false)
                       .flat();
    for (const double v : g) CHECK(std::abs(v) < 1e-10);
}

TEST_CASE("rand_loss: fixed relabeling, coincidence case") {
    const auto c = make_mlp_case(8, 4, {6}, 3, 5);
    data::Dataset ds;
    ds.dim = 4;
    ds.num_classes = 3;
    ds.features = c.batch.features->values();
    ds.labels = c.batch.labels;

    const auto relabeled = losses::RelabeledDataset::make(ds, 42);
    const auto again = losses::RelabeledDataset::make(ds, 42);
    CHECK(relabeled.labels == again.labels);

    const double l1 = losses::rand_loss(c.model, 0, relabeled, c.batch)->values()[0];
    const double l2 = losses::rand_loss(c.model, 0, relabeled, c.batch)->values()[0];
    CHECK(l1 == l2);

    // If the random labels coincide with the true ones, rand == plain CE.
    losses::RelabeledDataset coincide;
    coincide.base = &ds;
    coincide.labels = ds.labels;
    const double ce =
        losses::cross_entropy(c.model.forward(0, c.batch.features), c.batch.labels)->values()[0];
    CHECK(losses::rand_loss(c.model, 0, coincide, c.batch)->values()[0] == ce);
}

TEST_CASE("rand_loss: minimizing drives accuracy toward the relabel agreement rate") {
    data::GaussianTaskSpec gspec;
    gspec.k = 2;
    gspec.d = 4;
    gspec.n_train_per_class = 20;
    gspec.n_test_per_class = 5;
    gspec.separation = 6.0;
    gspec.seed = 9;
    auto [train, test] = make_gaussian_task(gspec);

    nn::ModelSpec spec;
    spec.input_dim = 4;
    spec.hidden = {32, 32};
    spec.tasks = {{0, 2}};
    nn::Model model = nn::Model::init(spec, 2);

    const auto relabeled = losses::RelabeledDataset::make(train, 31);
    double agreement = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
        if (relabeled.labels[i] == train.labels[i]) agreement += 1.0;
    }
    agreement /= static_cast<double>(train.size());

    nn::TrainScheme scheme;
    scheme.eta0 = 0.05;
    scheme.epochs = 200;
    scheme.batch_size = 40;
    scheme.seed = 3;
    data::Dataset relabeled_train = train;
    relabeled_train.labels = relabeled.labels;
    // Memorize the fixed random labels, then compare against the true ones.
    pipeline::fit_ce(model, 0, relabeled_train, scheme, "rand-memorize");

    std::size_t match_true = 0;
    const auto logits = model.forward(0, train.feature_node());
    for (std::size_t i = 0; i < train.size(); ++i) {
        const double* row = logits->values().data() + i * 2;
        const int pred = row[1] > row[0] ? 1 : 0;
        if (pred == train.labels[i]) ++match_true;
    }
    const double acc_vs_true = static_cast<double>(match_true) / static_cast<double>(train.size());
    CHECK(std::abs(acc_vs_true - agreement) < 0.15);
}

TEST_CASE("unif_loss: zero at uniform, non-negative, hand case") {
    nn::ModelSpec spec;
    spec.input_dim = 3;
    spec.hidden = {};
    spec.tasks = {{0, 3}};
    nn::Model m = nn::Model::init(spec, 0);
    m.set_flat_params(std::vector<double>(m.param_count(), 0.0));
    data::Batch b;
    b.features = ad::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    b.labels = {0, 1};
    b.rows = {0, 1};
    CHECK(losses::unif_loss(m, 0, b)->values()[0] == doctest::Approx(0.0).epsilon(1e-12));

    const auto c = make_mlp_case(4, 3, {6}, 4, 5);
    CHECK(losses::unif_loss(c.model, 0, c.batch)->values()[0] >= 0.0);

    // logits (2,0,0): brute-force KL(U||q) cross-check plus the frozen value.
    nn::Model hand = nn::Model::init(spec, 0);
    hand.set_flat_params({0, 0, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0});  // bias = (2,0,0)
    data::Batch one;
    one.features = ad::constant({1, 3}, {0, 0, 0});
    one.labels = {0};
    one.rows = {0};
    const double got = losses::unif_loss(hand, 0, one)->values()[0];
    const double e2 = std::exp(2.0);
    const double z = e2 + 2.0;
    const double q[3] = {e2 / z, 1.0 / z, 1.0 / z};
    double brute = 0.0;
    for (const double qi : q) brute += (1.0 / 3.0) * std::log((1.0 / 3.0) / qi);
    CHECK(got == doctest::Approx(brute).epsilon(1e-12));
    CHECK(got == doctest::Approx(0.4742658108871081).epsilon(1e-10));
}

TEST_CASE("neg_loss equals negated cross-entropy, gradient included") {
    const auto c = make_mlp_case(10, 4, {6}, 3, 6);
    const auto ce = losses::cross_entropy(c.model.forward(0, c.batch.features), c.batch.labels);
    const auto neg = losses::neg_loss(c.model, 0, c.batch);
    CHECK(neg->values()[0] == -ce->values()[0]);

    const auto g_ce = ad::grad(ce, c.model.params(), false).flat();
    const auto g_neg = ad::grad(neg, c.model.params(), false).flat();
    for (std::size_t i = 0; i < g_ce.size(); ++i) CHECK(g_neg[i] == -g_ce[i]);
}

TEST_CASE("one sgd step on neg_loss increases cross-entropy") {
    auto c = make_mlp_case(12, 4, {8}, 3, 6);
    const double before =
        losses::cross_entropy(c.model.forward(0, c.batch.features), c.batch.labels)->values()[0];
    const auto g = ad::grad(losses::neg_loss(c.model, 0, c.batch), c.model.params(), false).flat();
    nn::TrainScheme s;
    s.eta0 = 1e-3;
    s.momentum = 0.0;
    s.weight_decay = 0.0;
    s.schedule = nn::Schedule::constant;
    nn::SgdOptimizer opt(s, 1);
    opt.step(c.model, g, 0);
    const double after =
        losses::cross_entropy(c.model.forward(0, c.batch.features), c.batch.labels)->values()[0];
    CHECK(after > before);
}

TEST_CASE("gc_loss_full: hand cases and identical-sample identity") {
    // Hand-computed pairwise means on given per-sample gradients.
    // grads [1,0] and [0,1] -> mean pairwise inner product 0.
    // grads [1,0] and [2,2] -> 2.
    {
        const auto c = make_mlp_case(3, 4, {5}, 3, 2);
        data::Dataset two;
        two.dim = 4;
        two.num_classes = 3;
        two.features = c.batch.features->values();
        two.labels = c.batch.labels;

        // Two identical samples: loss equals |grad|^2 of the shared sample.
        data::Dataset dup = two;
        std::copy(dup.features.begin(), dup.features.begin() + 4, dup.features.begin() + 4);
        dup.labels[1] = dup.labels[0];
        const auto x = dup.feature_node(0, 1);
        const auto g = ad::grad(losses::cross_entropy(c.model.forward(0, x), {dup.labels[0]}),
                                c.model.params(), false)
                           .flat();
        double sq = 0.0;
        for (const double v : g) sq += v * v;
        CHECK(losses::gc_loss_full(c.model, 0, dup) == doctest::Approx(sq).epsilon(1e-12));

        data::Dataset one = two;
        one.features.resize(4);
        one.labels.resize(1);
        CHECK_THROWS_AS(losses::gc_loss_full(c.model, 0, one), ContractViolation);
    }
}

TEST_CASE("gc_loss_stochastic: duplicate chunks, sign case, c=N equals full") {
    const auto c = make_mlp_case(6, 4, {6}, 3, 8);

    SUBCASE("duplicate chunks give |mean grad|^2 >= 0") {
        data::Batch dup;
        std::vector<double> x = c.batch.features->values();
        std::copy(x.begin(), x.begin() + 4 * 4, x.begin() + 4 * 4);
        dup.features = ad::constant({8, 4}, std::move(x));
        dup.labels = c.batch.labels;
        std::copy(dup.labels.begin(), dup.labels.begin() + 4, dup.labels.begin() + 4);
        dup.rows = c.batch.rows;
        const double v = losses::gc_loss_stochastic(c.model, 0, dup, 2)->values()[0];
        CHECK(v >= 0.0);
    }

    SUBCASE("c = N reproduces gc_loss_full") {
        data::Dataset ds;
        ds.dim = 4;
        ds.num_classes = 3;
        ds.features = c.batch.features->values();
        ds.labels = c.batch.labels;
        const double full = losses::gc_loss_full(c.model, 0, ds);
        const double stoch = losses::gc_loss_stochastic(c.model, 0, c.batch, 8)->values()[0];
        CHECK(test_support::rel_err(stoch, full) < 1e-10);
    }

    SUBCASE("indivisible batch rejected") {
        CHECK_THROWS_AS(losses::gc_loss_stochastic(c.model, 0, c.batch, 3), ContractViolation);
    }

    SUBCASE("permuting samples within a chunk leaves the loss unchanged") {
        const double before = losses::gc_loss_stochastic(c.model, 0, c.batch, 2)->values()[0];
        data::Batch permuted = c.batch;
        std::vector<double> x = c.batch.features->values();
        // Swap rows 0 and 3 (both inside chunk 0 of 2).
        for (std::size_t j = 0; j < 4; ++j) std::swap(x[j], x[3 * 4 + j]);
        permuted.features = ad::constant({8, 4}, std::move(x));
        std::swap(permuted.labels[0], permuted.labels[3]);
        const double after = losses::gc_loss_stochastic(c.model, 0, permuted, 2)->values()[0];
        CHECK(test_support::rel_err(after, before) < 1e-12);
    }
}

TEST_CASE("ngc_loss: identical chunks, scale invariance, degenerate error") {
    const auto c = make_mlp_case(14, 4, {6}, 3, 8);

    SUBCASE("identical chunks give +1") {
        data::Batch dup;
        std::vector<double> x = c.batch.features->values();
        std::copy(x.begin(), x.begin() + 4 * 4, x.begin() + 4 * 4);
        dup.features = ad::constant({8, 4}, std::move(x));
        dup.labels = c.batch.labels;
        std::copy(dup.labels.begin(), dup.labels.begin() + 4, dup.labels.begin() + 4);
        dup.rows = c.batch.rows;
        CHECK(losses::ngc_loss(c.model, 0, dup, 2)->values()[0] == doctest::Approx(1.0));
    }

    SUBCASE("bounded in [-1, 1]") {
        for (const int chunks : {2, 4}) {
            const double v = losses::ngc_loss(c.model, 0, c.batch, chunks)->values()[0];
            CHECK(v >= -1.0);
            CHECK(v <= 1.0);
        }
    }

    SUBCASE("zero-norm chunk gradient raises degenerate-gradient") {
        // Zero inputs, zero weights and chunk-balanced labels make every
        // chunk gradient exactly zero.
        nn::ModelSpec spec;
        spec.input_dim = 2;
        spec.hidden = {4};
        spec.tasks = {{0, 2}};
        nn::Model zero = nn::Model::init(spec, 0);
        zero.set_flat_params(std::vector<double>(zero.param_count(), 0.0));
        data::Batch b;
        b.features = ad::constant({4, 2}, std::vector<double>(8, 0.0));
        b.labels = {0, 1, 0, 1};
        b.rows = {0, 1, 2, 3};
        CHECK_THROWS_AS(losses::ngc_loss(zero, 0, b, 2), DegenerateGradientError);
    }
}

TEST_CASE("dtl_loss: endpoints and missing-batch contract") {
    const auto c = make_mlp_case(20, 4, {6}, 3, 8);
    const auto teacher = make_mlp_case(21, 4, {6}, 3, 8);

    losses::DtlConfig cfg;
    cfg.unlearn = losses::UnlearnKind::unif;
    cfg.retain = losses::RetainKind::src_kd;
    cfg.source_task = 0;
    cfg.target_task = 0;  // single-head toy model
    cfg.chunks = 2;

    losses::DtlBatches batches;
    batches.retain = &c.batch;
    batches.unlearn = &c.batch;

    cfg.lambda = 0.0;
    const double retain_only = losses::dtl_loss(cfg, c.model, teacher.model, batches)->values()[0];
    const double kd = losses::kd_loss(c.model, teacher.model, 0, c.batch)->values()[0];
    CHECK(retain_only == doctest::Approx(kd).epsilon(1e-15));

    cfg.lambda = 1.0;
    const double unlearn_only = losses::dtl_loss(cfg, c.model, teacher.model, batches)->values()[0];
    const double unif = losses::unif_loss(c.model, 0, c.batch)->values()[0];
    CHECK(unlearn_only == doctest::Approx(unif).epsilon(1e-15));

    cfg.lambda = 0.5;
    losses::DtlBatches missing;
    missing.unlearn = &c.batch;
    CHECK_THROWS_AS(losses::dtl_loss(cfg, c.model, teacher.model, missing), ContractViolation);

    cfg.lambda = 1.5;
    CHECK_THROWS_AS(losses::dtl_loss(cfg, c.model, teacher.model, batches), ContractViolation);

    // The default chunk/lambda operating point used by the benchmark configs.
    const losses::DtlConfig defaults;
    CHECK(defaults.lambda == 0.3);
    CHECK(defaults.chunks == 4);
}

TEST_CASE("mean pairwise inner products on hand gradients") {
    // Linear-regression hand cases for the pairwise aggregation rule:
    // gradients [1,0] and [0,1] collide to 0; [1,0] and [2,2] give 2.
    auto mean_pairwise = [](const std::vector<std::vector<double>>& gs) {
        double acc = 0.0;
        std::size_t pairs = 0;
        for (std::size_t m = 0; m < gs.size(); ++m) {
            for (std::size_t n = m + 1; n < gs.size(); ++n) {
                for (std::size_t j = 0; j < gs[m].size(); ++j) acc += gs[m][j] * gs[n][j];
                ++pairs;
            }
        }
        return acc / static_cast<double>(pairs);
    };
    CHECK(mean_pairwise({{1, 0}, {0, 1}}) == 0.0);
    CHECK(mean_pairwise({{1, 0}, {2, 2}}) == 2.0);
    // Opposing one-parameter gradients +a / -a give -a^2.
    CHECK(mean_pairwise({{1.5}, {-1.5}}) == -2.25);
}
