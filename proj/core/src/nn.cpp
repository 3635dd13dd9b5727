#include "dtl/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "dtl/errors.hpp"
#include "dtl/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian f64");

namespace dtl::nn {

using nlohmann::json;

double learning_rate(const TrainScheme& scheme, std::int64_t step, std::int64_t total_steps) {
    if (scheme.schedule == Schedule::constant || total_steps <= 0) return scheme.eta0;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return scheme.eta0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

Affine init_affine(int fan_in, int fan_out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> w(static_cast<std::size_t>(fan_in) * fan_out);
    for (double& x : w) x = rng.uniform(-bound, bound);
    std::vector<double> b(static_cast<std::size_t>(fan_out), 0.0);
    return Affine{
        ad::leaf({static_cast<std::size_t>(fan_in), static_cast<std::size_t>(fan_out)},
                 std::move(w), true),
        ad::leaf({static_cast<std::size_t>(fan_out)}, std::move(b), true),
    };
}

void validate_spec(const ModelSpec& spec) {
    if (spec.input_dim <= 0) throw ContractViolation("model: input_dim must be positive");
    for (const int w : spec.hidden)
        if (w <= 0) throw ContractViolation("model: hidden widths must be positive");
    for (const auto& t : spec.tasks)
        if (t.num_classes <= 0) throw ContractViolation("model: num_classes must be positive");
}

}  // namespace

Model Model::init(const ModelSpec& spec, std::uint64_t seed) {
    validate_spec(spec);
    Model m;
    m.spec_ = spec;
    Rng rng(seed);
    int width = spec.input_dim;
    for (const int next : spec.hidden) {
        m.trunk_.push_back(init_affine(width, next, rng));
        width = next;
    }
    for (const auto& task : spec.tasks) {
        m.heads_.emplace(task.task_id, init_affine(width, task.num_classes, rng));
    }
    m.rebuild_registry();
    return m;
}

void Model::rebuild_registry() {
    registry_.clear();
    names_.clear();
    for (std::size_t i = 0; i < trunk_.size(); ++i) {
        registry_.push_back(trunk_[i].weight);
        names_.push_back("trunk." + std::to_string(i) + ".weight");
        registry_.push_back(trunk_[i].bias);
        names_.push_back("trunk." + std::to_string(i) + ".bias");
    }
    for (const auto& [task, head] : heads_) {
        registry_.push_back(head.weight);
        names_.push_back("head." + std::to_string(task) + ".weight");
        registry_.push_back(head.bias);
        names_.push_back("head." + std::to_string(task) + ".bias");
    }
}

ad::NodePtr Model::forward(int task, const ad::NodePtr& batch) const {
    const auto it = heads_.find(task);
    if (it == heads_.end()) {
        throw MissingHeadError("forward: no head for task " + std::to_string(task));
    }
    if (batch->rank() != 2 || batch->cols() != static_cast<std::size_t>(spec_.input_dim)) {
        throw ShapeError("forward: batch width does not match trunk input width");
    }
    ad::count_forward_pass();
    ad::NodePtr h = batch;
    for (const auto& layer : trunk_) {
        h = ad::relu(ad::bias_add(ad::matmul(h, layer.weight), layer.bias));
    }
    return ad::bias_add(ad::matmul(h, it->second.weight), it->second.bias);
}

int Model::num_classes(int task) const {
    for (const auto& t : spec_.tasks)
        if (t.task_id == task) return t.num_classes;
    throw MissingHeadError("num_classes: no head for task " + std::to_string(task));
}

bool Model::has_task(int task) const { return heads_.count(task) > 0; }

void Model::attach_head(const TaskSpec& task, std::uint64_t seed) {
    if (task.num_classes <= 0) throw ContractViolation("attach_head: num_classes must be positive");
    const int fan_in = spec_.hidden.empty() ? spec_.input_dim : spec_.hidden.back();
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(task.task_id)));
    heads_[task.task_id] = init_affine(fan_in, task.num_classes, rng);
    bool known = false;
    for (auto& t : spec_.tasks) {
        if (t.task_id == task.task_id) {
            t.num_classes = task.num_classes;
            known = true;
        }
    }
    if (!known) spec_.tasks.push_back(task);
    rebuild_registry();
}

std::size_t Model::param_count() const {
    std::size_t n = 0;
    for (const auto& p : registry_) n += p->size();
    return n;
}

std::vector<double> Model::flat_params() const {
    std::vector<double> out;
    out.reserve(param_count());
    for (const auto& p : registry_) out.insert(out.end(), p->values().begin(), p->values().end());
    return out;
}

void Model::set_flat_params(const std::vector<double>& flat) {
    if (flat.size() != param_count()) throw ShapeError("set_flat_params: length mismatch");
    std::size_t offset = 0;
    for (const auto& p : registry_) {
        std::copy(flat.begin() + offset, flat.begin() + offset + p->size(),
                  p->mutable_values().begin());
        offset += p->size();
    }
}

std::vector<bool> Model::trunk_mask() const {
    std::vector<bool> mask(param_count(), false);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < registry_.size(); ++i) {
        const bool in_trunk = names_[i].rfind("trunk.", 0) == 0;
        for (std::size_t j = 0; j < registry_[i]->size(); ++j) mask[offset + j] = in_trunk;
        offset += registry_[i]->size();
    }
    return mask;
}

std::vector<bool> Model::head_mask(int task) const {
    const std::string prefix = "head." + std::to_string(task) + ".";
    std::vector<bool> mask(param_count(), false);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < registry_.size(); ++i) {
        const bool in_head = names_[i].rfind(prefix, 0) == 0;
        for (std::size_t j = 0; j < registry_[i]->size(); ++j) mask[offset + j] = in_head;
        offset += registry_[i]->size();
    }
    return mask;
}

Model Model::clone() const {
    Model copy;
    copy.spec_ = spec_;
    for (const auto& layer : trunk_) {
        copy.trunk_.push_back(Affine{ad::leaf(layer.weight->shape(), layer.weight->values(), true),
                                     ad::leaf(layer.bias->shape(), layer.bias->values(), true)});
    }
    for (const auto& [task, head] : heads_) {
        copy.heads_.emplace(task,
                            Affine{ad::leaf(head.weight->shape(), head.weight->values(), true),
                                   ad::leaf(head.bias->shape(), head.bias->values(), true)});
    }
    copy.rebuild_registry();
    return copy;
}

// Checkpoint layout: magic "DTLCKPT1", u64 header length, JSON header
// (version, model spec, parameter names in registry order), then each
// parameter's raw little-endian f64 values in registry order.
void Model::save(const std::string& path) const {
    json header;
    header["version"] = 1;
    header["input_dim"] = spec_.input_dim;
    header["hidden"] = spec_.hidden;
    header["tasks"] = json::array();
    for (const auto& t : spec_.tasks) {
        header["tasks"].push_back({{"id", t.task_id}, {"classes", t.num_classes}});
    }
    header["params"] = names_;
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save: cannot open " + path);
    out.write("DTLCKPT1", 8);
    const std::uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& p : registry_) {
        out.write(reinterpret_cast<const char*>(p->values().data()),
                  static_cast<std::streamsize>(p->size() * sizeof(double)));
    }
    if (!out) throw IoError("save: write failed for " + path);
}

Model Model::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "DTLCKPT1", 8) != 0) {
        throw ParseError("load: bad checkpoint magic in " + path);
    }
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw ParseError("load: truncated header in " + path);

    json header = json::parse(hs, nullptr, false);
    if (header.is_discarded()) throw ParseError("load: malformed header in " + path);
    if (header.at("version").get<int>() != 1) throw ParseError("load: unsupported version");

    ModelSpec spec;
    spec.input_dim = header.at("input_dim").get<int>();
    spec.hidden = header.at("hidden").get<std::vector<int>>();
    for (const auto& t : header.at("tasks")) {
        spec.tasks.push_back(TaskSpec{t.at("id").get<int>(), t.at("classes").get<int>()});
    }
    Model m = Model::init(spec, 0);
    if (header.at("params").get<std::vector<std::string>>() != m.names_) {
        throw ParseError("load: parameter registry mismatch in " + path);
    }
    for (const auto& p : m.registry_) {
        in.read(reinterpret_cast<char*>(p->mutable_values().data()),
                static_cast<std::streamsize>(p->size() * sizeof(double)));
    }
    if (!in) throw ParseError("load: truncated parameter payload in " + path);
    return m;
}

SgdOptimizer::SgdOptimizer(TrainScheme scheme, std::int64_t total_steps)
    : scheme_(scheme), total_steps_(total_steps) {}

double SgdOptimizer::lr_at(std::int64_t step_index) const {
    return learning_rate(scheme_, step_index, total_steps_);
}

void SgdOptimizer::step(Model& model, const std::vector<double>& grads, std::int64_t step_index) {
    step_masked(model, grads, step_index, {});
}

void SgdOptimizer::step_masked(Model& model, const std::vector<double>& grads,
                               std::int64_t step_index, const std::vector<bool>& trainable) {
    const std::size_t n = model.param_count();
    if (grads.size() != n) throw ShapeError("sgd_step: gradient length mismatch");
    if (!trainable.empty() && trainable.size() != n) {
        throw ShapeError("sgd_step: mask length mismatch");
    }
    if (buffer_.empty()) buffer_.assign(n, 0.0);
    const double lr = lr_at(step_index);

    std::size_t offset = 0;
    for (const auto& p : model.params()) {
        auto& theta = p->mutable_values();
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const std::size_t k = offset + j;
            if (!trainable.empty() && !trainable[k]) continue;
            const double g = grads[k] + scheme_.weight_decay * theta[j];
            buffer_[k] = scheme_.momentum * buffer_[k] + g;
            theta[j] -= lr * buffer_[k];
        }
        offset += theta.size();
    }
}

}  // namespace dtl::nn
