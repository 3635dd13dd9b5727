#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtl/autodiff.hpp"
#include "dtl/data.hpp"
#include "dtl/nn.hpp"

namespace dtl::losses {

enum class UnlearnKind : std::uint8_t { gc, ngc, rand, unif, neg };
enum class RetainKind : std::uint8_t { src_kd, tgt_kd, tgt_ce, tgt_a_gem };
enum class RetainData : std::uint8_t { source, target };

UnlearnKind parse_unlearn_kind(const std::string& s);
RetainKind parse_retain_kind(const std::string& s);
std::string to_string(UnlearnKind k);
std::string to_string(RetainKind k);
RetainData retain_data_source(RetainKind k);

struct DtlConfig {
    double lambda = 0.3;
    UnlearnKind unlearn = UnlearnKind::gc;
    RetainKind retain = RetainKind::src_kd;
    int chunks = 4;       // c >= 2
    int source_task = 0;
    int target_task = 1;

    void validate() const;
};

// Fixed random relabeling of a dataset over its own label space, drawn once
// from the given seed (collisions with true labels allowed).
struct RelabeledDataset {
    const data::Dataset* base = nullptr;
    std::vector<int> labels;
    std::uint64_t seed = 0;

    static RelabeledDataset make(const data::Dataset& base, std::uint64_t seed);
    std::vector<int> labels_for(const std::vector<std::size_t>& rows) const;
};

// Mean over the batch of -log softmax(logits)[label].
ad::NodePtr cross_entropy(const ad::NodePtr& logits, const std::vector<int>& labels);

// KL(teacher || student) on the task head, temperature 1, teacher detached.
ad::NodePtr kd_loss(const nn::Model& student, const nn::Model& teacher, int task,
                    const data::Batch& batch);

ad::NodePtr rand_loss(const nn::Model& model, int task, const RelabeledDataset& relabeled,
                      const data::Batch& batch);

// Mean KL(U(y) || P(y|x)).
ad::NodePtr unif_loss(const nn::Model& model, int task, const data::Batch& batch);

// Negated cross-entropy; unbounded below.
ad::NodePtr neg_loss(const nn::Model& model, int task, const data::Batch& batch);

// Mean inner product over all sample pairs; evaluation-only reference.
double gc_loss_full(const nn::Model& model, int task, const data::Dataset& ds);

// Mean inner product over chunk-averaged gradient pairs, as a differentiable
// node (the naive O(c^2) graph; training uses the gc engine instead).
ad::NodePtr gc_loss_stochastic(const nn::Model& model, int task, const data::Batch& batch,
                               int chunks);

// Mean pairwise cosine similarity of chunk gradients, in [-1, 1].
ad::NodePtr ngc_loss(const nn::Model& model, int task, const data::Batch& batch, int chunks);

struct DtlBatches {
    const data::Batch* retain = nullptr;   // from D_s for src-kd, else from D_t
    const data::Batch* unlearn = nullptr;  // always from D_s
    const RelabeledDataset* relabeled = nullptr;  // required for rand
};

ad::NodePtr retain_loss(const DtlConfig& config, const nn::Model& model, const nn::Model& teacher,
                        const data::Batch& batch);
ad::NodePtr unlearn_loss(const DtlConfig& config, const nn::Model& model,
                         const DtlBatches& batches);

// (1 - lambda) * retain + lambda * unlearn.
ad::NodePtr dtl_loss(const DtlConfig& config, const nn::Model& model, const nn::Model& teacher,
                     const DtlBatches& batches);

// Contiguous row slice of a batch: chunk m of c.
data::Batch chunk_of(const data::Batch& batch, int chunk, int chunks);

}  // namespace dtl::losses
