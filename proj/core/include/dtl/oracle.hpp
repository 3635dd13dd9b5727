#pragma once

#include <functional>
#include <vector>

#include "dtl/data.hpp"
#include "dtl/nn.hpp"

namespace dtl::oracle {

// Deliberately slow, simple references used by tests and acceptance checks.
// None of these share a code path with the gc engine's HVP route beyond the
// primitive autodiff layer.

using LossFn = std::function<double(const std::vector<double>&)>;
using GradFn = std::function<std::vector<double>(const std::vector<double>&)>;

// Central finite differences per coordinate.
std::vector<double> fd_gradient(const LossFn& loss, const std::vector<double>& theta, double step);

// Gradient of the stochastic GC loss by building every pairwise chunk
// gradient dot product as a graph and differentiating each pair separately:
// the O(c^2) route, c first-order sweeps plus C(c,2) pairwise sweeps.
std::vector<double> naive_gc_grad(const nn::Model& model, int task, const data::Batch& batch,
                                  int chunks);

struct ExactHessian {
    std::size_t n = 0;
    std::vector<double> values;  // row-major (n, n), symmetrized
    double raw_defect = 0.0;     // max |H_ij - H_ji| before symmetrization

    double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
    double trace() const;
};

// Finite differences of autodiff gradients, symmetrized. Parameter count
// capped at 64.
ExactHessian exact_hessian(const GradFn& grad, const std::vector<double>& theta, double step);

}  // namespace dtl::oracle
