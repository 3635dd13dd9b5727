#include "dtl/gc_engine.hpp"

#include <algorithm>
#include <atomic>
#include <barrier>
#include <cmath>
#include <mutex>
#include <ostream>
#include <thread>

#include "dtl/errors.hpp"

namespace dtl::gc {

ReduceSchedule ReduceSchedule::ascending(int workers) {
    ReduceSchedule s;
    s.order.resize(static_cast<std::size_t>(workers));
    for (int i = 0; i < workers; ++i) s.order[static_cast<std::size_t>(i)] = i;
    return s;
}

void ReduceSchedule::validate(int workers) const {
    if (static_cast<int>(order.size()) != workers) {
        throw ContractViolation("reduce schedule: order length must equal worker count");
    }
    std::vector<bool> seen(static_cast<std::size_t>(workers), false);
    for (const int w : order) {
        if (w < 0 || w >= workers || seen[static_cast<std::size_t>(w)]) {
            throw ContractViolation("reduce schedule: order must be a permutation of worker ids");
        }
        seen[static_cast<std::size_t>(w)] = true;
    }
}

namespace {

double pairs(int c) { return 0.5 * static_cast<double>(c) * static_cast<double>(c - 1); }

std::size_t total_param_size(std::span<const ad::NodePtr> params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p->size();
    return n;
}

double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (const double x : v) s += x * x;
    return std::sqrt(s);
}

void add_into(std::vector<double>& acc, const std::vector<double>& v) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
}

// GC loss from detached chunk gradients:
// sum_{m<n} g_m . g_n = (|sum g|^2 - sum |g_m|^2) / 2.
double loss_from_flats(const std::vector<std::vector<double>>& flats,
                       const std::vector<double>& total, int chunks) {
    double total_sq = 0.0;
    for (const double x : total) total_sq += x * x;
    double own_sq = 0.0;
    for (const auto& g : flats)
        for (const double x : g) own_sq += x * x;
    return 0.5 * (total_sq - own_sq) / pairs(chunks);
}

class Tracer {
public:
    explicit Tracer(std::ostream* out) : out_(out) {}

    void event(int worker, const char* phase, double norm) {
        if (out_ == nullptr) return;
        const std::scoped_lock lock(mu_);
        *out_ << "worker=" << worker << " phase=" << phase << " norm=" << norm << "\n";
    }

private:
    std::ostream* out_;
    std::mutex mu_;
};

ChunkLoss ce_chunk_loss(const nn::Model& model, int task, const data::Batch& batch, int chunks) {
    if (chunks < 2) throw ContractViolation("gc engine: chunk count must be >= 2");
    if (batch.size() == 0 || batch.size() % static_cast<std::size_t>(chunks) != 0) {
        throw ContractViolation("gc engine: batch size " + std::to_string(batch.size()) +
                                " not divisible by chunk count " + std::to_string(chunks));
    }
    return [&model, task, &batch, chunks](int m) {
        const data::Batch chunk = losses::chunk_of(batch, m, chunks);
        return losses::cross_entropy(model.forward(task, chunk.features), chunk.labels);
    };
}

}  // namespace

GcResult gc_grad_sequential(std::span<const ad::NodePtr> params, const ChunkLoss& chunk_loss,
                            int chunks) {
    if (chunks < 2) throw ContractViolation("gc engine: chunk count must be >= 2");
    const std::size_t n_params = total_param_size(params);

    std::vector<ad::GradientMap> grads;
    std::vector<std::vector<double>> flats;
    grads.reserve(static_cast<std::size_t>(chunks));
    flats.reserve(static_cast<std::size_t>(chunks));
    for (int m = 0; m < chunks; ++m) {
        grads.push_back(ad::grad(chunk_loss(m), params, /*build_graph=*/true));
        flats.push_back(grads.back().flat());
    }

    std::vector<double> total(n_params, 0.0);
    for (const auto& g : flats) add_into(total, g);

    std::vector<double> acc(n_params, 0.0);
    for (int m = 0; m < chunks; ++m) {
        std::vector<double> rest(total);
        for (std::size_t i = 0; i < n_params; ++i) rest[i] -= flats[static_cast<std::size_t>(m)][i];
        const std::vector<double> h =
            ad::hvp_from_grad(grads[static_cast<std::size_t>(m)], params, rest);
        add_into(acc, h);
    }
    const double w = 1.0 / pairs(chunks);
    for (double& x : acc) x *= w;
    const double loss = loss_from_flats(flats, total, chunks);
    return GcResult{std::move(acc), loss, std::move(total)};
}

GcResult gc_grad_parallel(std::span<const ad::NodePtr> params, const ChunkLoss& chunk_loss,
                          int chunks, const GcOptions& options) {
    if (chunks < 2) throw ContractViolation("gc engine: chunk count must be >= 2");
    const int k = options.workers;
    if (k < 1 || chunks % k != 0) {
        throw ContractViolation("gc engine: worker count " + std::to_string(k) +
                                " must divide chunk count " + std::to_string(chunks));
    }
    ReduceSchedule schedule =
        options.schedule.order.empty() ? ReduceSchedule::ascending(k) : options.schedule;
    schedule.validate(k);

    const std::size_t n_params = total_param_size(params);
    const int per_worker = chunks / k;
    Tracer tracer(options.trace);

    // Shared slots; workers touch only their own entries between barriers.
    std::vector<std::vector<double>> flats(static_cast<std::size_t>(chunks));
    std::vector<std::vector<double>> partials(static_cast<std::size_t>(k));
    std::vector<double> total(n_params, 0.0);
    std::vector<std::exception_ptr> failures(static_cast<std::size_t>(k));
    std::atomic<bool> aborted{false};

    // Gather: one arrival callback sums the detached chunk gradients in
    // ascending chunk order, identical to the sequential reference.
    auto on_gather = [&]() noexcept {
        if (aborted.load()) return;
        for (const auto& g : flats) add_into(total, g);
        tracer.event(-1, "gather", norm2(total));
    };
    std::barrier gather_barrier(k, on_gather);
    std::barrier reduce_barrier(k);

    auto worker_body = [&](int w) {
        std::vector<ad::GradientMap> own_grads;
        try {
            for (int m = w * per_worker; m < (w + 1) * per_worker; ++m) {
                own_grads.push_back(ad::grad(chunk_loss(m), params, /*build_graph=*/true));
                flats[static_cast<std::size_t>(m)] = own_grads.back().flat();
                tracer.event(w, "grad", norm2(flats[static_cast<std::size_t>(m)]));
            }
        } catch (...) {
            failures[static_cast<std::size_t>(w)] = std::current_exception();
            aborted.store(true);
        }
        gather_barrier.arrive_and_wait();
        try {
            if (!aborted.load()) {
                std::vector<double> partial(n_params, 0.0);
                for (int j = 0; j < per_worker; ++j) {
                    const int m = w * per_worker + j;
                    std::vector<double> rest(total);
                    for (std::size_t i = 0; i < n_params; ++i) {
                        rest[i] -= flats[static_cast<std::size_t>(m)][i];
                    }
                    const std::vector<double> h =
                        ad::hvp_from_grad(own_grads[static_cast<std::size_t>(j)], params, rest);
                    add_into(partial, h);
                    tracer.event(w, "hvp", norm2(h));
                }
                partials[static_cast<std::size_t>(w)] = std::move(partial);
            }
        } catch (...) {
            failures[static_cast<std::size_t>(w)] = std::current_exception();
            aborted.store(true);
        }
        reduce_barrier.arrive_and_wait();
    };

    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(k));
    for (int w = 0; w < k; ++w) threads.emplace_back(worker_body, w);
    for (auto& t : threads) t.join();

    for (const auto& failure : failures) {
        if (failure) {
            try {
                std::rethrow_exception(failure);
            } catch (const std::exception& e) {
                throw AbortedComputationError(std::string("gc worker failed: ") + e.what());
            }
        }
    }

    std::vector<double> acc(n_params, 0.0);
    for (const int w : schedule.order) add_into(acc, partials[static_cast<std::size_t>(w)]);
    tracer.event(-1, "reduce", norm2(acc));
    const double weight = 1.0 / pairs(chunks);
    for (double& x : acc) x *= weight;
    const double loss = loss_from_flats(flats, total, chunks);
    return GcResult{std::move(acc), loss, std::move(total)};
}

GcResult gc_grad_sequential(const nn::Model& model, int task, const data::Batch& batch,
                            int chunks) {
    return gc_grad_sequential(model.params(), ce_chunk_loss(model, task, batch, chunks), chunks);
}

GcResult gc_grad_parallel(const nn::Model& model, int task, const data::Batch& batch, int chunks,
                          const GcOptions& options) {
    return gc_grad_parallel(model.params(), ce_chunk_loss(model, task, batch, chunks), chunks,
                            options);
}

ad::OpCounts op_counters() { return ad::op_counts(); }

void reset_op_counters() { ad::reset_op_counts(); }

}  // namespace dtl::gc
