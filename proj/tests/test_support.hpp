#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "dtl/data.hpp"
#include "dtl/losses.hpp"
#include "dtl/nn.hpp"
#include "dtl/oracle.hpp"
#include "dtl/rng.hpp"

namespace test_support {

inline double rel_err(double got, double want) {
    return std::abs(got - want) / (1.0 + std::abs(want));
}

inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want) {
    double e = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) e = std::max(e, rel_err(got[i], want[i]));
    return e;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double e = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) e = std::max(e, std::abs(a[i] - b[i]));
    return e;
}

// Relative infinity-norm difference, 1 + |ref| in the denominator.
inline double rel_inf_diff(const std::vector<double>& got, const std::vector<double>& ref) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        num = std::max(num, std::abs(got[i] - ref[i]));
        den = std::max(den, std::abs(ref[i]));
    }
    return num / (1.0 + den);
}

// Small random MLP with a single head plus a random batch, the graph family
// used by the finite-difference checks.
struct MlpCase {
    dtl::nn::Model model;
    dtl::data::Batch batch;
    int task = 0;
};

inline MlpCase make_mlp_case(std::uint64_t seed, int input_dim, std::vector<int> hidden,
                             int classes, std::size_t batch_size) {
    MlpCase c;
    dtl::nn::ModelSpec spec;
    spec.input_dim = input_dim;
    spec.hidden = std::move(hidden);
    spec.tasks = {{0, classes}};
    c.model = dtl::nn::Model::init(spec, seed);

    dtl::Rng rng(dtl::mix_seed(seed, 0xbadcafeULL));
    std::vector<double> x(batch_size * static_cast<std::size_t>(input_dim));
    for (double& v : x) v = rng.normal();
    c.batch.features = dtl::ad::constant({batch_size, static_cast<std::size_t>(input_dim)},
                                         std::move(x));
    for (std::size_t i = 0; i < batch_size; ++i) {
        c.batch.labels.push_back(static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(classes))));
        c.batch.rows.push_back(i);
    }
    return c;
}

// Smallest |pre-activation| feeding any relu in the graph. Finite-difference
// probes are only valid when this margin exceeds the probe step, otherwise
// the piecewise-linear kink flips inside the stencil.
inline double relu_margin(const dtl::ad::NodePtr& root) {
    double margin = std::numeric_limits<double>::infinity();
    std::vector<const dtl::ad::Node*> stack{root.get()};
    std::vector<const dtl::ad::Node*> seen;
    while (!stack.empty()) {
        const auto* n = stack.back();
        stack.pop_back();
        if (std::find(seen.begin(), seen.end(), n) != seen.end()) continue;
        seen.push_back(n);
        if (n->op() == dtl::ad::Op::relu) {
            for (const double v : n->parents()[0]->values()) {
                margin = std::min(margin, std::abs(v));
            }
        }
        for (const auto& p : n->parents()) stack.push_back(p.get());
    }
    return margin;
}

// Regenerates until the case is safely differentiable at its parameters.
inline MlpCase make_smooth_mlp_case(std::uint64_t seed, int input_dim, std::vector<int> hidden,
                                    int classes, std::size_t batch_size, double margin = 1e-3) {
    for (std::uint64_t attempt = 0;; ++attempt) {
        MlpCase c = make_mlp_case(dtl::mix_seed(seed, attempt), input_dim, hidden, classes,
                                  batch_size);
        const auto logits = c.model.forward(c.task, c.batch.features);
        if (relu_margin(logits) > margin) return c;
    }
}

// Cross-entropy of the case's model at parameters theta, as a plain function
// of the flat vector (for finite-difference oracles).
inline dtl::oracle::LossFn ce_loss_fn(const MlpCase& c) {
    return [&c](const std::vector<double>& theta) {
        dtl::nn::Model probe = c.model.clone();
        probe.set_flat_params(theta);
        const auto loss =
            dtl::losses::cross_entropy(probe.forward(c.task, c.batch.features), c.batch.labels);
        return loss->values()[0];
    };
}

inline dtl::oracle::GradFn ce_grad_fn(const MlpCase& c) {
    return [&c](const std::vector<double>& theta) {
        dtl::nn::Model probe = c.model.clone();
        probe.set_flat_params(theta);
        const auto loss =
            dtl::losses::cross_entropy(probe.forward(c.task, c.batch.features), c.batch.labels);
        return dtl::ad::grad(loss, probe.params(), false).flat();
    };
}

}  // namespace test_support
