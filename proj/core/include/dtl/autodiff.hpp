#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtl/errors.hpp"

namespace dtl::ad {

// Reverse-mode engine over dense f64 arrays. Derivative rules are expressed
// in the same primitive set, so the output of grad() is itself a
// differentiable expression (backward-on-backward, the mechanism behind HVPs).
//
// Rank 0 (scalar), 1 (vector) and 2 (row-major matrix) tensors only.

enum class Op : std::uint8_t {
    leaf,
    add,
    scale,        // multiply by a compile-time double
    mul,          // elementwise
    divide,       // elementwise
    matmul,
    transpose,
    relu,
    heaviside,    // 0/1 mask of (x > 0); zero derivative everywhere
    exp,
    sqrt,
    log_softmax,  // rowwise over a matrix
    gather,       // out[i] = in[i, idx[i]]
    scatter,      // adjoint of gather
    sum_all,      // -> scalar
    sum_axis0,    // column sums -> vector(n)
    sum_axis1,    // row sums    -> vector(m)
    bcast_scalar, // scalar -> given shape
    bcast_rows,   // vector(n) replicated over m rows -> (m, n)
    bcast_cols,   // vector(m) replicated over n cols -> (m, n)
    reshape,
};

class Node;
using NodePtr = std::shared_ptr<Node>;

class Node {
public:
    Node(std::vector<std::size_t> shape, std::vector<double> values, Op op,
         std::vector<NodePtr> parents, bool requires_grad);

    const std::vector<std::size_t>& shape() const { return shape_; }
    const std::vector<double>& values() const { return values_; }
    // Leaf parameters are the single mutable surface: the optimizer rewrites
    // them between graph builds. Derived nodes are never mutated.
    std::vector<double>& mutable_values();
    std::size_t size() const { return values_.size(); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.at(1); }
    Op op() const { return op_; }
    const std::vector<NodePtr>& parents() const { return parents_; }
    bool requires_grad() const { return requires_grad_; }
    bool is_leaf() const { return op_ == Op::leaf; }
    std::uint64_t id() const { return id_; }

    // Per-op payload.
    std::vector<std::size_t> index_aux;  // gather/scatter indices, reshape/bcast target dims
    double scalar_aux = 0.0;             // scale factor

private:
    std::vector<std::size_t> shape_;
    std::vector<double> values_;
    Op op_;
    std::vector<NodePtr> parents_;
    bool requires_grad_;
    std::uint64_t id_;
};

// Construction -------------------------------------------------------------

NodePtr leaf(std::vector<std::size_t> shape, std::vector<double> values, bool requires_grad);
NodePtr constant(std::vector<std::size_t> shape, std::vector<double> values);
NodePtr scalar(double v);
NodePtr zeros_like(const Node& ref);

// Returns a constant leaf sharing the node's values; gradients do not flow
// through it.
NodePtr detach(const NodePtr& x);

// Primitives ---------------------------------------------------------------

NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr scale(const NodePtr& a, double c);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr divide(const NodePtr& a, const NodePtr& b);
NodePtr matmul(const NodePtr& a, const NodePtr& b);
NodePtr transpose(const NodePtr& a);
NodePtr relu(const NodePtr& a);
NodePtr heaviside(const NodePtr& a);
NodePtr exp(const NodePtr& a);
NodePtr sqrt(const NodePtr& a);
NodePtr log_softmax(const NodePtr& logits);
NodePtr gather(const NodePtr& m, const std::vector<std::size_t>& idx);
NodePtr scatter(const NodePtr& v, const std::vector<std::size_t>& idx, std::size_t ncols);
NodePtr sum(const NodePtr& a);
NodePtr sum_axis0(const NodePtr& m);
NodePtr sum_axis1(const NodePtr& m);
NodePtr bcast_scalar(const NodePtr& s, std::vector<std::size_t> shape);
NodePtr bcast_rows(const NodePtr& v, std::size_t nrows);
NodePtr bcast_cols(const NodePtr& v, std::size_t ncols);
NodePtr reshape(const NodePtr& a, std::vector<std::size_t> shape);

// Sugar built from primitives.
NodePtr neg(const NodePtr& a);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mean(const NodePtr& a);
NodePtr dot(const NodePtr& a, const NodePtr& b);  // flattened inner product -> scalar
NodePtr bias_add(const NodePtr& m, const NodePtr& bias);

// Differentiation ----------------------------------------------------------

// Gradient of a scalar node per requested leaf. Unreachable leaves map to
// explicit zeros of matching shape.
class GradientMap {
public:
    GradientMap(std::vector<NodePtr> keys, std::vector<NodePtr> grads);

    const std::vector<NodePtr>& keys() const { return keys_; }
    const NodePtr& at(const NodePtr& key) const;
    const std::vector<NodePtr>& grads() const { return grads_; }
    std::size_t total_size() const;

    // Concatenation of all gradient values in key order.
    std::vector<double> flat() const;

private:
    std::vector<NodePtr> keys_;
    std::vector<NodePtr> grads_;
    std::unordered_map<const Node*, std::size_t> index_;
};

// When build_graph is set the returned nodes are derived and can themselves
// be differentiated; otherwise they are detached constants.
GradientMap grad(const NodePtr& output, std::span<const NodePtr> wrt, bool build_graph);

// Hessian-vector product: differentiate dot(grad(loss, build_graph=true), v)
// with v held constant.
std::vector<double> hvp(const NodePtr& loss, std::span<const NodePtr> params,
                        std::span<const double> v);

// Second half of hvp for callers that already hold a graph-building gradient
// (the chunk-gradient reuse in the distributed schedule).
std::vector<double> hvp_from_grad(const GradientMap& g, std::span<const NodePtr> params,
                                  std::span<const double> v);

// Operation counters -------------------------------------------------------

struct OpCounts {
    std::uint64_t forward_passes = 0;
    std::uint64_t reverse_sweeps = 0;
    std::uint64_t hvp_evals = 0;
};

OpCounts op_counts();
void reset_op_counts();
void count_forward_pass();

}  // namespace dtl::ad
