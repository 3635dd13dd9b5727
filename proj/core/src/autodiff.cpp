#include "dtl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dtl::ad {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

std::atomic<std::uint64_t> g_forward_passes{0};
std::atomic<std::uint64_t> g_reverse_sweeps{0};
std::atomic<std::uint64_t> g_hvp_evals{0};

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (const std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

void require_same_shape(const NodePtr& a, const NodePtr& b, const char* op) {
    if (a->shape() != b->shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape()) +
                         " vs " + shape_str(b->shape()));
    }
}

void require_matrix(const NodePtr& a, const char* op) {
    if (a->rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got rank " +
                                         std::to_string(a->rank()));
}

void require_vector(const NodePtr& a, const char* op) {
    if (a->rank() != 1) throw ShapeError(std::string(op) + ": expected a vector, got rank " +
                                         std::to_string(a->rank()));
}

bool any_requires_grad(const std::vector<NodePtr>& parents) {
    for (const auto& p : parents)
        if (p->requires_grad()) return true;
    return false;
}

NodePtr make(std::vector<std::size_t> shape, std::vector<double> values, Op op,
             std::vector<NodePtr> parents) {
    const bool rg = any_requires_grad(parents);
    return std::make_shared<Node>(std::move(shape), std::move(values), op, std::move(parents), rg);
}

}  // namespace

Node::Node(std::vector<std::size_t> shape, std::vector<double> values, Op op,
           std::vector<NodePtr> parents, bool requires_grad)
    : shape_(std::move(shape)),
      values_(std::move(values)),
      op_(op),
      parents_(std::move(parents)),
      requires_grad_(requires_grad),
      id_(g_next_id.fetch_add(1, std::memory_order_relaxed)) {
    if (values_.size() != shape_numel(shape_)) {
        throw ShapeError("node: values length " + std::to_string(values_.size()) +
                         " does not match shape " + shape_str(shape_));
    }
}

std::vector<double>& Node::mutable_values() {
    if (!is_leaf()) throw ContractViolation("mutable_values: only leaf nodes may be rewritten");
    return values_;
}

NodePtr leaf(std::vector<std::size_t> shape, std::vector<double> values, bool requires_grad) {
    return std::make_shared<Node>(std::move(shape), std::move(values), Op::leaf,
                                  std::vector<NodePtr>{}, requires_grad);
}

NodePtr constant(std::vector<std::size_t> shape, std::vector<double> values) {
    return leaf(std::move(shape), std::move(values), false);
}

NodePtr scalar(double v) { return constant({}, {v}); }

NodePtr zeros_like(const Node& ref) {
    return constant(ref.shape(), std::vector<double>(ref.size(), 0.0));
}

NodePtr detach(const NodePtr& x) { return constant(x->shape(), x->values()); }

NodePtr add(const NodePtr& a, const NodePtr& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->values()[i] + b->values()[i];
    return make(a->shape(), std::move(out), Op::add, {a, b});
}

NodePtr scale(const NodePtr& a, double c) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->values()[i] * c;
    auto n = make(a->shape(), std::move(out), Op::scale, {a});
    n->scalar_aux = c;
    return n;
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->values()[i] * b->values()[i];
    return make(a->shape(), std::move(out), Op::mul, {a, b});
}

NodePtr divide(const NodePtr& a, const NodePtr& b) {
    require_same_shape(a, b, "divide");
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->values()[i] / b->values()[i];
    return make(a->shape(), std::move(out), Op::divide, {a, b});
}

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a->rows(), k = a->cols(), n = b->cols();
    if (b->rows() != k) {
        throw ShapeError("matmul: inner dimensions " + shape_str(a->shape()) + " x " +
                         shape_str(b->shape()));
    }
    std::vector<double> out(m * n, 0.0);
    const double* av = a->values().data();
    const double* bv = b->values().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        const double* arow = av + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double aik = arow[p];
            const double* brow = bv + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    return make({m, n}, std::move(out), Op::matmul, {a, b});
}

NodePtr transpose(const NodePtr& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a->rows(), n = a->cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a->values()[i * n + j];
    return make({n, m}, std::move(out), Op::transpose, {a});
}

NodePtr relu(const NodePtr& a) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->values()[i] > 0.0 ? a->values()[i] : 0.0;
    return make(a->shape(), std::move(out), Op::relu, {a});
}

NodePtr heaviside(const NodePtr& a) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->values()[i] > 0.0 ? 1.0 : 0.0;
    return make(a->shape(), std::move(out), Op::heaviside, {a});
}

NodePtr exp(const NodePtr& a) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a->values()[i]);
    return make(a->shape(), std::move(out), Op::exp, {a});
}

NodePtr sqrt(const NodePtr& a) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a->values()[i]);
    return make(a->shape(), std::move(out), Op::sqrt, {a});
}

NodePtr log_softmax(const NodePtr& logits) {
    require_matrix(logits, "log_softmax");
    const std::size_t m = logits->rows(), n = logits->cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = logits->values().data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lse;
    }
    return make({m, n}, std::move(out), Op::log_softmax, {logits});
}

NodePtr gather(const NodePtr& m, const std::vector<std::size_t>& idx) {
    require_matrix(m, "gather");
    if (idx.size() != m->rows()) {
        throw ShapeError("gather: need one index per row, got " + std::to_string(idx.size()) +
                         " for " + std::to_string(m->rows()) + " rows");
    }
    const std::size_t n = m->cols();
    std::vector<double> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= n) throw ShapeError("gather: index " + std::to_string(idx[i]) +
                                          " out of range for " + std::to_string(n) + " columns");
        out[i] = m->values()[i * n + idx[i]];
    }
    auto node = make({idx.size()}, std::move(out), Op::gather, {m});
    node->index_aux = idx;
    return node;
}

NodePtr scatter(const NodePtr& v, const std::vector<std::size_t>& idx, std::size_t ncols) {
    require_vector(v, "scatter");
    if (idx.size() != v->size()) throw ShapeError("scatter: index/value length mismatch");
    std::vector<double> out(v->size() * ncols, 0.0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= ncols) throw ShapeError("scatter: index out of range");
        out[i * ncols + idx[i]] = v->values()[i];
    }
    auto node = make({v->size(), ncols}, std::move(out), Op::scatter, {v});
    node->index_aux = idx;
    return node;
}

NodePtr sum(const NodePtr& a) {
    double s = 0.0;
    for (const double x : a->values()) s += x;
    return make({}, {s}, Op::sum_all, {a});
}

NodePtr sum_axis0(const NodePtr& m) {
    require_matrix(m, "sum_axis0");
    const std::size_t r = m->rows(), n = m->cols();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += m->values()[i * n + j];
    return make({n}, std::move(out), Op::sum_axis0, {m});
}

NodePtr sum_axis1(const NodePtr& m) {
    require_matrix(m, "sum_axis1");
    const std::size_t r = m->rows(), n = m->cols();
    std::vector<double> out(r, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i] += m->values()[i * n + j];
    return make({r}, std::move(out), Op::sum_axis1, {m});
}

NodePtr bcast_scalar(const NodePtr& s, std::vector<std::size_t> shape) {
    if (s->size() != 1) throw ShapeError("bcast_scalar: source must be scalar");
    std::vector<double> out(shape_numel(shape), s->values()[0]);
    auto node = make(std::move(shape), std::move(out), Op::bcast_scalar, {s});
    return node;
}

NodePtr bcast_rows(const NodePtr& v, std::size_t nrows) {
    require_vector(v, "bcast_rows");
    const std::size_t n = v->size();
    std::vector<double> out(nrows * n);
    for (std::size_t i = 0; i < nrows; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = v->values()[j];
    return make({nrows, n}, std::move(out), Op::bcast_rows, {v});
}

NodePtr bcast_cols(const NodePtr& v, std::size_t ncols) {
    require_vector(v, "bcast_cols");
    const std::size_t m = v->size();
    std::vector<double> out(m * ncols);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < ncols; ++j) out[i * ncols + j] = v->values()[i];
    return make({m, ncols}, std::move(out), Op::bcast_cols, {v});
}

NodePtr reshape(const NodePtr& a, std::vector<std::size_t> shape) {
    if (shape_numel(shape) != a->size()) {
        throw ShapeError("reshape: element count mismatch " + shape_str(a->shape()) + " -> " +
                         shape_str(shape));
    }
    return make(std::move(shape), a->values(), Op::reshape, {a});
}

NodePtr neg(const NodePtr& a) { return scale(a, -1.0); }

NodePtr sub(const NodePtr& a, const NodePtr& b) { return add(a, neg(b)); }

NodePtr mean(const NodePtr& a) {
    if (a->size() == 0) throw ShapeError("mean: empty operand");
    return scale(sum(a), 1.0 / static_cast<double>(a->size()));
}

NodePtr dot(const NodePtr& a, const NodePtr& b) {
    if (a->size() != b->size()) throw ShapeError("dot: operand lengths differ");
    const std::vector<std::size_t> flat{a->size()};
    return sum(mul(reshape(a, flat), reshape(b, flat)));
}

NodePtr bias_add(const NodePtr& m, const NodePtr& bias) {
    require_matrix(m, "bias_add");
    require_vector(bias, "bias_add");
    if (bias->size() != m->cols()) throw ShapeError("bias_add: bias width mismatch");
    return add(m, bcast_rows(bias, m->rows()));
}

// Differentiation ------------------------------------------------------------

GradientMap::GradientMap(std::vector<NodePtr> keys, std::vector<NodePtr> grads)
    : keys_(std::move(keys)), grads_(std::move(grads)) {
    for (std::size_t i = 0; i < keys_.size(); ++i) index_[keys_[i].get()] = i;
}

const NodePtr& GradientMap::at(const NodePtr& key) const {
    const auto it = index_.find(key.get());
    if (it == index_.end()) throw ContractViolation("GradientMap: unknown key");
    return grads_[it->second];
}

std::size_t GradientMap::total_size() const {
    std::size_t n = 0;
    for (const auto& g : grads_) n += g->size();
    return n;
}

std::vector<double> GradientMap::flat() const {
    std::vector<double> out;
    out.reserve(total_size());
    for (const auto& g : grads_) out.insert(out.end(), g->values().begin(), g->values().end());
    return out;
}

namespace {

// Reverse sweep in descending creation order; creation order is a topological
// order because parents always precede children. Fixing the accumulation
// order this way makes gradients bitwise reproducible.
class Backward {
public:
    void accumulate(const Node* node, NodePtr contrib) {
        auto it = adjoint_.find(node);
        if (it == adjoint_.end()) {
            adjoint_.emplace(node, std::move(contrib));
        } else {
            it->second = add(it->second, contrib);
        }
    }

    NodePtr* find(const Node* node) {
        auto it = adjoint_.find(node);
        return it == adjoint_.end() ? nullptr : &it->second;
    }

private:
    std::unordered_map<const Node*, NodePtr> adjoint_;
};

void collect_reachable(const NodePtr& root, std::vector<NodePtr>& out) {
    std::unordered_map<const Node*, bool> seen;
    std::vector<NodePtr> stack{root};
    while (!stack.empty()) {
        NodePtr n = std::move(stack.back());
        stack.pop_back();
        if (seen[n.get()]) continue;
        seen[n.get()] = true;
        // Gradients only flow into subtrees that contain a grad-requiring leaf.
        for (const auto& p : n->parents())
            if (p->requires_grad()) stack.push_back(p);
        out.push_back(std::move(n));
    }
    std::sort(out.begin(), out.end(),
              [](const NodePtr& a, const NodePtr& b) { return a->id() > b->id(); });
}

void propagate(const NodePtr& node, const NodePtr& g, Backward& bw) {
    const auto& parents = node->parents();
    // Skip contributions into constant subtrees.
    const auto wants = [&](std::size_t i) { return parents[i]->requires_grad(); };
    switch (node->op()) {
        case Op::leaf:
            break;
        case Op::add:
            if (wants(0)) bw.accumulate(parents[0].get(), g);
            if (wants(1)) bw.accumulate(parents[1].get(), g);
            break;
        case Op::scale:
            bw.accumulate(parents[0].get(), scale(g, node->scalar_aux));
            break;
        case Op::mul:
            if (wants(0)) bw.accumulate(parents[0].get(), mul(g, parents[1]));
            if (wants(1)) bw.accumulate(parents[1].get(), mul(g, parents[0]));
            break;
        case Op::divide: {
            // d(a/b)/da = 1/b, d(a/b)/db = -(a/b)/b
            if (wants(0)) bw.accumulate(parents[0].get(), divide(g, parents[1]));
            if (wants(1)) bw.accumulate(parents[1].get(), neg(divide(mul(g, node), parents[1])));
            break;
        }
        case Op::matmul:
            if (wants(0)) bw.accumulate(parents[0].get(), matmul(g, transpose(parents[1])));
            if (wants(1)) bw.accumulate(parents[1].get(), matmul(transpose(parents[0]), g));
            break;
        case Op::transpose:
            bw.accumulate(parents[0].get(), transpose(g));
            break;
        case Op::relu:
            bw.accumulate(parents[0].get(), mul(g, heaviside(parents[0])));
            break;
        case Op::heaviside:
            break;  // zero derivative almost everywhere
        case Op::exp:
            bw.accumulate(parents[0].get(), mul(g, node));
            break;
        case Op::sqrt:
            bw.accumulate(parents[0].get(), scale(divide(g, node), 0.5));
            break;
        case Op::log_softmax: {
            // dZ = g - softmax(Z) * rowsum(g)
            const NodePtr probs = exp(node);
            const NodePtr rowsum = sum_axis1(g);
            bw.accumulate(parents[0].get(), sub(g, mul(probs, bcast_cols(rowsum, node->cols()))));
            break;
        }
        case Op::gather:
            bw.accumulate(parents[0].get(), scatter(g, node->index_aux, parents[0]->cols()));
            break;
        case Op::scatter:
            bw.accumulate(parents[0].get(), gather(g, node->index_aux));
            break;
        case Op::sum_all:
            bw.accumulate(parents[0].get(), bcast_scalar(g, parents[0]->shape()));
            break;
        case Op::sum_axis0:
            bw.accumulate(parents[0].get(), bcast_rows(g, parents[0]->rows()));
            break;
        case Op::sum_axis1:
            bw.accumulate(parents[0].get(), bcast_cols(g, parents[0]->cols()));
            break;
        case Op::bcast_scalar:
            bw.accumulate(parents[0].get(), sum(g));
            break;
        case Op::bcast_rows:
            bw.accumulate(parents[0].get(), sum_axis0(g));
            break;
        case Op::bcast_cols:
            bw.accumulate(parents[0].get(), sum_axis1(g));
            break;
        case Op::reshape:
            bw.accumulate(parents[0].get(), reshape(g, parents[0]->shape()));
            break;
    }
}

}  // namespace

GradientMap grad(const NodePtr& output, std::span<const NodePtr> wrt, bool build_graph) {
    if (output->size() != 1 || output->rank() != 0) {
        throw ContractViolation("grad: output must be a scalar node");
    }
    for (const auto& w : wrt) {
        if (!w->is_leaf() || !w->requires_grad()) {
            throw ContractViolation("grad: wrt entries must be grad-requiring leaves");
        }
    }
    g_reverse_sweeps.fetch_add(1, std::memory_order_relaxed);

    std::vector<NodePtr> order;
    if (output->requires_grad()) collect_reachable(output, order);

    Backward bw;
    bw.accumulate(output.get(), scalar(1.0));
    for (const auto& node : order) {
        const NodePtr* a = bw.find(node.get());
        if (a == nullptr) continue;
        propagate(node, *a, bw);
    }

    std::vector<NodePtr> keys(wrt.begin(), wrt.end());
    std::vector<NodePtr> grads;
    grads.reserve(keys.size());
    for (const auto& key : keys) {
        const NodePtr* a = bw.find(key.get());
        if (a == nullptr) {
            grads.push_back(zeros_like(*key));
        } else {
            grads.push_back(build_graph ? *a : detach(*a));
        }
    }
    return GradientMap(std::move(keys), std::move(grads));
}

std::vector<double> hvp(const NodePtr& loss, std::span<const NodePtr> params,
                        std::span<const double> v) {
    const GradientMap g = grad(loss, params, /*build_graph=*/true);
    return hvp_from_grad(g, params, v);
}

std::vector<double> hvp_from_grad(const GradientMap& g, std::span<const NodePtr> params,
                                  std::span<const double> v) {
    if (v.size() != g.total_size()) {
        throw ShapeError("hvp: vector length " + std::to_string(v.size()) +
                         " does not match parameter count " + std::to_string(g.total_size()));
    }
    g_hvp_evals.fetch_add(1, std::memory_order_relaxed);

    NodePtr acc;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < g.keys().size(); ++i) {
        const NodePtr& gi = g.grads()[i];
        std::vector<double> slice(v.begin() + offset, v.begin() + offset + gi->size());
        offset += gi->size();
        const NodePtr term = dot(gi, constant(gi->shape(), std::move(slice)));
        acc = acc ? add(acc, term) : term;
    }
    return grad(acc, params, /*build_graph=*/false).flat();
}

OpCounts op_counts() {
    return OpCounts{g_forward_passes.load(), g_reverse_sweeps.load(), g_hvp_evals.load()};
}

void reset_op_counts() {
    g_forward_passes.store(0);
    g_reverse_sweeps.store(0);
    g_hvp_evals.store(0);
}

void count_forward_pass() { g_forward_passes.fetch_add(1, std::memory_order_relaxed); }

}  // namespace dtl::ad
