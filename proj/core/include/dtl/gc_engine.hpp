#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "dtl/data.hpp"
#include "dtl/losses.hpp"
#include "dtl/nn.hpp"

namespace dtl::gc {

// Summation order for the reduce barrier; fixed so parallel output is
// reproducible despite floating-point non-associativity.
struct ReduceSchedule {
    std::vector<int> order;

    static ReduceSchedule ascending(int workers);
    void validate(int workers) const;
};

struct GcOptions {
    int workers = 1;
    ReduceSchedule schedule;        // empty -> ascending
    std::ostream* trace = nullptr;  // per-step event log, line-delimited
};

struct GcResult {
    std::vector<double> grad;      // gradient of the stochastic GC loss, flat
    double loss = 0.0;             // GC loss value on the batch
    std::vector<double> gathered;  // summed detached chunk gradients
};

// Builds the scalar loss of one chunk; must be safe to call concurrently for
// distinct chunks (workers call it for the chunks they own).
using ChunkLoss = std::function<ad::NodePtr(int chunk)>;

// Reference single-threaded gradient of the stochastic GC loss via the HVP
// form: (1/C(c,2)) sum_m hvp(chunk loss m, total - own). Exactly c HVPs.
GcResult gc_grad_sequential(std::span<const ad::NodePtr> params, const ChunkLoss& chunk_loss,
                            int chunks);

// Simulated data-parallel schedule: k workers each own c/k chunks, chunk
// gradients are detached and gathered, each worker back-propagates its
// dot(own grad, total - own) and partials are reduced in schedule order.
// Result equals gc_grad_sequential.
GcResult gc_grad_parallel(std::span<const ad::NodePtr> params, const ChunkLoss& chunk_loss,
                          int chunks, const GcOptions& options);

// Chunked cross-entropy of a model on a minibatch, the training form.
GcResult gc_grad_sequential(const nn::Model& model, int task, const data::Batch& batch,
                            int chunks);
GcResult gc_grad_parallel(const nn::Model& model, int task, const data::Batch& batch, int chunks,
                          const GcOptions& options);

ad::OpCounts op_counters();
void reset_op_counters();

}  // namespace dtl::gc
