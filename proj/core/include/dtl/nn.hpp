#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dtl/autodiff.hpp"

namespace dtl::nn {

struct TaskSpec {
    int task_id = 0;
    int num_classes = 0;
};

struct ModelSpec {
    int input_dim = 0;
    std::vector<int> hidden;  // trunk widths, e.g. {64, 64}
    std::vector<TaskSpec> tasks;
};

enum class Schedule : std::uint8_t { cosine, constant };

struct TrainScheme {
    double eta0 = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int epochs = 30;
    int batch_size = 32;
    Schedule schedule = Schedule::cosine;
    std::uint64_t seed = 0;
};

// Learning rate at a given step of a run with total_steps steps.
double learning_rate(const TrainScheme& scheme, std::int64_t step, std::int64_t total_steps);

struct Affine {
    ad::NodePtr weight;  // (fan_in, fan_out)
    ad::NodePtr bias;    // (fan_out)
};

// Shared MLP trunk with one affine head per task. Parameters live in a
// registry whose order (trunk first, then heads by ascending task id) is the
// layout of every flat vector in the toolkit and of the checkpoint file.
class Model {
public:
    Model() = default;
    static Model init(const ModelSpec& spec, std::uint64_t seed);

    // Differentiable w.r.t. the trunk and the selected head only.
    ad::NodePtr forward(int task, const ad::NodePtr& batch) const;

    const ModelSpec& spec() const { return spec_; }
    int num_classes(int task) const;
    bool has_task(int task) const;

    // Adds a freshly initialized head (replacing any existing one for that id).
    void attach_head(const TaskSpec& task, std::uint64_t seed);

    const std::vector<ad::NodePtr>& params() const { return registry_; }
    const std::vector<std::string>& param_names() const { return names_; }
    std::size_t param_count() const;

    std::vector<double> flat_params() const;
    void set_flat_params(const std::vector<double>& flat);

    // True for registry slots belonging to the trunk / to a given head.
    std::vector<bool> trunk_mask() const;
    std::vector<bool> head_mask(int task) const;

    Model clone() const;

    void save(const std::string& path) const;
    static Model load(const std::string& path);

private:
    void rebuild_registry();

    ModelSpec spec_;
    std::vector<Affine> trunk_;
    std::map<int, Affine> heads_;
    std::vector<ad::NodePtr> registry_;
    std::vector<std::string> names_;
};

// Momentum SGD with coupled L2 decay. Buffers persist across steps and are
// reset at stage boundaries by constructing a fresh optimizer.
class SgdOptimizer {
public:
    SgdOptimizer(TrainScheme scheme, std::int64_t total_steps);

    // theta <- theta - lr(step) * (momentum*buf + grad + wd*theta)
    void step(Model& model, const std::vector<double>& grads, std::int64_t step_index);

    // Gradient entries where mask is false are dropped before the update.
    void step_masked(Model& model, const std::vector<double>& grads, std::int64_t step_index,
                     const std::vector<bool>& trainable);

    double lr_at(std::int64_t step_index) const;

private:
    TrainScheme scheme_;
    std::int64_t total_steps_;
    std::vector<double> buffer_;
};

}  // namespace dtl::nn
