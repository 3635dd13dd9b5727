#include "dtl/losses.hpp"

#include <cmath>

#include "dtl/errors.hpp"
#include "dtl/rng.hpp"

namespace dtl::losses {

UnlearnKind parse_unlearn_kind(const std::string& s) {
    if (s == "gc") return UnlearnKind::gc;
    if (s == "ngc") return UnlearnKind::ngc;
    if (s == "rand") return UnlearnKind::rand;
    if (s == "unif") return UnlearnKind::unif;
    if (s == "neg") return UnlearnKind::neg;
    throw ContractViolation("unknown unlearning loss '" + s + "'");
}

RetainKind parse_retain_kind(const std::string& s) {
    if (s == "src-kd") return RetainKind::src_kd;
    if (s == "tgt-kd") return RetainKind::tgt_kd;
    if (s == "tgt-ce") return RetainKind::tgt_ce;
    if (s == "tgt-a-gem") return RetainKind::tgt_a_gem;
    throw ContractViolation("unknown retaining loss '" + s + "'");
}

std::string to_string(UnlearnKind k) {
    switch (k) {
        case UnlearnKind::gc: return "gc";
        case UnlearnKind::ngc: return "ngc";
        case UnlearnKind::rand: return "rand";
        case UnlearnKind::unif: return "unif";
        case UnlearnKind::neg: return "neg";
    }
    return "?";
}

std::string to_string(RetainKind k) {
    switch (k) {
        case RetainKind::src_kd: return "src-kd";
        case RetainKind::tgt_kd: return "tgt-kd";
        case RetainKind::tgt_ce: return "tgt-ce";
        case RetainKind::tgt_a_gem: return "tgt-a-gem";
    }
    return "?";
}

RetainData retain_data_source(RetainKind k) {
    return k == RetainKind::src_kd ? RetainData::source : RetainData::target;
}

void DtlConfig::validate() const {
    if (lambda < 0.0 || lambda > 1.0) throw ContractViolation("dtl: lambda must be in [0, 1]");
    if (chunks < 2) throw ContractViolation("dtl: chunk count must be >= 2");
}

RelabeledDataset RelabeledDataset::make(const data::Dataset& base, std::uint64_t seed) {
    RelabeledDataset out;
    out.base = &base;
    out.seed = seed;
    Rng rng(seed);
    out.labels.reserve(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        out.labels.push_back(static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(base.num_classes))));
    }
    return out;
}

std::vector<int> RelabeledDataset::labels_for(const std::vector<std::size_t>& rows) const {
    std::vector<int> out;
    out.reserve(rows.size());
    for (const std::size_t r : rows) out.push_back(labels.at(r));
    return out;
}

ad::NodePtr cross_entropy(const ad::NodePtr& logits, const std::vector<int>& labels) {
    if (logits->rank() != 2 || logits->rows() != labels.size()) {
        throw ShapeError("cross_entropy: logits/label shape mismatch");
    }
    std::vector<std::size_t> idx;
    idx.reserve(labels.size());
    for (const int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= logits->cols()) {
            throw InvalidLabelError("cross_entropy: label " + std::to_string(y) +
                                    " out of range for " + std::to_string(logits->cols()) +
                                    " classes");
        }
        idx.push_back(static_cast<std::size_t>(y));
    }
    return ad::neg(ad::mean(ad::gather(ad::log_softmax(logits), idx)));
}

ad::NodePtr kd_loss(const nn::Model& student, const nn::Model& teacher, int task,
                    const data::Batch& batch) {
    if (student.num_classes(task) != teacher.num_classes(task)) {
        throw ContractViolation("kd_loss: head widths differ between student and teacher");
    }
    const ad::NodePtr t_logits = teacher.forward(task, batch.features);
    const std::size_t m = t_logits->rows(), n = t_logits->cols();

    // Teacher side is constant: detach log-probs and probs numerically.
    const ad::NodePtr t_logp = ad::detach(ad::log_softmax(t_logits));
    std::vector<double> probs(t_logp->values().size());
    for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = std::exp(t_logp->values()[i]);
    const ad::NodePtr t_p = ad::constant({m, n}, std::move(probs));

    const ad::NodePtr s_logp = ad::log_softmax(student.forward(task, batch.features));
    // KL(p||q) = sum p * (log p - log q), mean over the batch.
    const ad::NodePtr per_row = ad::sum_axis1(ad::mul(t_p, ad::sub(t_logp, s_logp)));
    return ad::mean(per_row);
}

ad::NodePtr rand_loss(const nn::Model& model, int task, const RelabeledDataset& relabeled,
                      const data::Batch& batch) {
    return cross_entropy(model.forward(task, batch.features), relabeled.labels_for(batch.rows));
}

ad::NodePtr unif_loss(const nn::Model& model, int task, const data::Batch& batch) {
    const ad::NodePtr logp = ad::log_softmax(model.forward(task, batch.features));
    const auto k = static_cast<double>(logp->cols());
    // KL(U||q) = -ln k - (1/k) * sum_y log q_y, mean over the batch.
    const ad::NodePtr mean_logp = ad::scale(ad::mean(ad::sum_axis1(logp)), 1.0 / k);
    return ad::add(ad::scalar(-std::log(k)), ad::neg(mean_logp));
}

ad::NodePtr neg_loss(const nn::Model& model, int task, const data::Batch& batch) {
    return ad::neg(cross_entropy(model.forward(task, batch.features), batch.labels));
}

namespace {

std::vector<double> sample_gradient(const nn::Model& model, int task, const data::Dataset& ds,
                                    std::size_t row) {
    const ad::NodePtr x = ds.feature_node(row, row + 1);
    const ad::NodePtr loss = cross_entropy(model.forward(task, x), {ds.labels[row]});
    return ad::grad(loss, model.params(), /*build_graph=*/false).flat();
}

// Chunk-averaged cross-entropy gradients as differentiable nodes.
std::vector<ad::GradientMap> chunk_gradients(const nn::Model& model, int task,
                                             const data::Batch& batch, int chunks) {
    if (chunks < 2) throw ContractViolation("gc: chunk count must be >= 2");
    if (batch.size() == 0 || batch.size() % static_cast<std::size_t>(chunks) != 0) {
        throw ContractViolation("gc: batch size " + std::to_string(batch.size()) +
                                " not divisible by chunk count " + std::to_string(chunks));
    }
    std::vector<ad::GradientMap> grads;
    grads.reserve(static_cast<std::size_t>(chunks));
    for (int m = 0; m < chunks; ++m) {
        const data::Batch chunk = chunk_of(batch, m, chunks);
        const ad::NodePtr loss = cross_entropy(model.forward(task, chunk.features), chunk.labels);
        grads.push_back(ad::grad(loss, model.params(), /*build_graph=*/true));
    }
    return grads;
}

ad::NodePtr pair_dot(const ad::GradientMap& a, const ad::GradientMap& b) {
    ad::NodePtr acc;
    for (std::size_t p = 0; p < a.keys().size(); ++p) {
        const ad::NodePtr term = ad::dot(a.grads()[p], b.grads()[p]);
        acc = acc ? ad::add(acc, term) : term;
    }
    return acc;
}

double pairs(int c) { return 0.5 * static_cast<double>(c) * static_cast<double>(c - 1); }

}  // namespace

data::Batch chunk_of(const data::Batch& batch, int chunk, int chunks) {
    const std::size_t sz = batch.size() / static_cast<std::size_t>(chunks);
    const std::size_t begin = static_cast<std::size_t>(chunk) * sz;
    data::Batch out;
    out.rows.assign(batch.rows.begin() + static_cast<std::ptrdiff_t>(begin),
                    batch.rows.begin() + static_cast<std::ptrdiff_t>(begin + sz));
    out.labels.assign(batch.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      batch.labels.begin() + static_cast<std::ptrdiff_t>(begin + sz));
    const std::size_t dim = batch.features->cols();
    std::vector<double> x(batch.features->values().begin() + static_cast<std::ptrdiff_t>(begin * dim),
                          batch.features->values().begin() + static_cast<std::ptrdiff_t>((begin + sz) * dim));
    out.features = ad::constant({sz, dim}, std::move(x));
    return out;
}

double gc_loss_full(const nn::Model& model, int task, const data::Dataset& ds) {
    const std::size_t n = ds.size();
    if (n < 2) throw ContractViolation("gc_loss_full: need at least two samples");
    std::vector<std::vector<double>> grads;
    grads.reserve(n);
    for (std::size_t i = 0; i < n; ++i) grads.push_back(sample_gradient(model, task, ds, i));

    double acc = 0.0;
    for (std::size_t m = 0; m < n; ++m) {
        for (std::size_t k = m + 1; k < n; ++k) {
            double d = 0.0;
            for (std::size_t j = 0; j < grads[m].size(); ++j) d += grads[m][j] * grads[k][j];
            acc += d;
        }
    }
    return acc / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

ad::NodePtr gc_loss_stochastic(const nn::Model& model, int task, const data::Batch& batch,
                               int chunks) {
    const auto grads = chunk_gradients(model, task, batch, chunks);
    ad::NodePtr acc;
    for (int m = 0; m < chunks; ++m) {
        for (int k = m + 1; k < chunks; ++k) {
            const ad::NodePtr term = pair_dot(grads[static_cast<std::size_t>(m)], grads[static_cast<std::size_t>(k)]);
            acc = acc ? ad::add(acc, term) : term;
        }
    }
    return ad::scale(acc, 1.0 / pairs(chunks));
}

ad::NodePtr ngc_loss(const nn::Model& model, int task, const data::Batch& batch, int chunks) {
    const auto grads = chunk_gradients(model, task, batch, chunks);
    std::vector<ad::NodePtr> norms;
    norms.reserve(grads.size());
    for (const auto& g : grads) {
        const ad::NodePtr sq = pair_dot(g, g);
        if (sq->values()[0] == 0.0) {
            throw DegenerateGradientError("ngc: a chunk gradient collapsed to zero norm");
        }
        norms.push_back(ad::sqrt(sq));
    }
    ad::NodePtr acc;
    for (int m = 0; m < chunks; ++m) {
        for (int k = m + 1; k < chunks; ++k) {
            const auto mu = static_cast<std::size_t>(m), ku = static_cast<std::size_t>(k);
            const ad::NodePtr cosine =
                ad::divide(pair_dot(grads[mu], grads[ku]), ad::mul(norms[mu], norms[ku]));
            acc = acc ? ad::add(acc, cosine) : cosine;
        }
    }
    return ad::scale(acc, 1.0 / pairs(chunks));
}

ad::NodePtr retain_loss(const DtlConfig& config, const nn::Model& model, const nn::Model& teacher,
                        const data::Batch& batch) {
    switch (config.retain) {
        case RetainKind::src_kd:
        case RetainKind::tgt_kd:
            return kd_loss(model, teacher, config.target_task, batch);
        case RetainKind::tgt_ce:
        case RetainKind::tgt_a_gem:
            return cross_entropy(model.forward(config.target_task, batch.features), batch.labels);
    }
    throw ContractViolation("retain_loss: unreachable");
}

ad::NodePtr unlearn_loss(const DtlConfig& config, const nn::Model& model,
                         const DtlBatches& batches) {
    if (batches.unlearn == nullptr) {
        throw ContractViolation("dtl_loss: unlearning batch (source data) missing");
    }
    const data::Batch& b = *batches.unlearn;
    switch (config.unlearn) {
        case UnlearnKind::gc:
            return gc_loss_stochastic(model, config.source_task, b, config.chunks);
        case UnlearnKind::ngc:
            return ngc_loss(model, config.source_task, b, config.chunks);
        case UnlearnKind::rand:
            if (batches.relabeled == nullptr) {
                throw ContractViolation("dtl_loss: rand unlearning needs a relabeled dataset");
            }
            return rand_loss(model, config.source_task, *batches.relabeled, b);
        case UnlearnKind::unif:
            return unif_loss(model, config.source_task, b);
        case UnlearnKind::neg:
            return neg_loss(model, config.source_task, b);
    }
    throw ContractViolation("unlearn_loss: unreachable");
}

ad::NodePtr dtl_loss(const DtlConfig& config, const nn::Model& model, const nn::Model& teacher,
                     const DtlBatches& batches) {
    config.validate();
    if (batches.retain == nullptr) {
        throw ContractViolation("dtl_loss: retaining batch missing");
    }
    const ad::NodePtr retain = retain_loss(config, model, teacher, *batches.retain);
    const ad::NodePtr unlearn = unlearn_loss(config, model, batches);
    return ad::add(ad::scale(retain, 1.0 - config.lambda), ad::scale(unlearn, config.lambda));
}

}  // namespace dtl::losses
