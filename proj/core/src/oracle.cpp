#include "dtl/oracle.hpp"

#include <cmath>

#include "dtl/errors.hpp"
#include "dtl/losses.hpp"

namespace dtl::oracle {

std::vector<double> fd_gradient(const LossFn& loss, const std::vector<double>& theta,
                                double step) {
    if (step <= 0.0) throw ContractViolation("fd_gradient: step must be positive");
    std::vector<double> g(theta.size());
    std::vector<double> probe = theta;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        probe[i] = theta[i] + step;
        const double up = loss(probe);
        probe[i] = theta[i] - step;
        const double down = loss(probe);
        probe[i] = theta[i];
        g[i] = (up - down) / (2.0 * step);
    }
    return g;
}

std::vector<double> naive_gc_grad(const nn::Model& model, int task, const data::Batch& batch,
                                  int chunks) {
    if (chunks < 2) throw ContractViolation("naive_gc_grad: chunk count must be >= 2");
    if (batch.size() == 0 || batch.size() % static_cast<std::size_t>(chunks) != 0) {
        throw ContractViolation("naive_gc_grad: batch size not divisible by chunk count");
    }
    std::vector<ad::GradientMap> grads;
    grads.reserve(static_cast<std::size_t>(chunks));
    for (int m = 0; m < chunks; ++m) {
        const data::Batch chunk = losses::chunk_of(batch, m, chunks);
        const ad::NodePtr loss =
            losses::cross_entropy(model.forward(task, chunk.features), chunk.labels);
        grads.push_back(ad::grad(loss, model.params(), /*build_graph=*/true));
    }

    const std::size_t n = model.param_count();
    std::vector<double> acc(n, 0.0);
    // One reverse sweep per pair, the combinatorial cost the engine avoids.
    for (int m = 0; m < chunks; ++m) {
        for (int k = m + 1; k < chunks; ++k) {
            ad::NodePtr pair;
            for (std::size_t p = 0; p < model.params().size(); ++p) {
                const ad::NodePtr term = ad::dot(grads[static_cast<std::size_t>(m)].grads()[p],
                                                 grads[static_cast<std::size_t>(k)].grads()[p]);
                pair = pair ? ad::add(pair, term) : term;
            }
            const std::vector<double> g =
                ad::grad(pair, model.params(), /*build_graph=*/false).flat();
            for (std::size_t i = 0; i < n; ++i) acc[i] += g[i];
        }
    }
    const double w = 2.0 / (static_cast<double>(chunks) * static_cast<double>(chunks - 1));
    for (double& x : acc) x *= w;
    return acc;
}

double ExactHessian::trace() const {
    double t = 0.0;
    for (std::size_t i = 0; i < n; ++i) t += at(i, i);
    return t;
}

ExactHessian exact_hessian(const GradFn& grad, const std::vector<double>& theta, double step) {
    const std::size_t n = theta.size();
    if (n > 64) throw ContractViolation("exact_hessian: parameter count capped at 64");
    if (step <= 0.0) throw ContractViolation("exact_hessian: step must be positive");

    std::vector<std::vector<double>> columns(n);
    std::vector<double> probe = theta;
    for (std::size_t j = 0; j < n; ++j) {
        probe[j] = theta[j] + step;
        const std::vector<double> up = grad(probe);
        probe[j] = theta[j] - step;
        const std::vector<double> down = grad(probe);
        probe[j] = theta[j];
        columns[j].resize(n);
        for (std::size_t i = 0; i < n; ++i) columns[j][i] = (up[i] - down[i]) / (2.0 * step);
    }

    ExactHessian h;
    h.n = n;
    h.values.resize(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            h.values[i * n + j] = 0.5 * (columns[j][i] + columns[i][j]);
            h.raw_defect = std::max(h.raw_defect, std::abs(columns[j][i] - columns[i][j]));
        }
    }
    return h;
}

}  // namespace dtl::oracle
