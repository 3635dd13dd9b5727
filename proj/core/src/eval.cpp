#include "dtl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dtl/errors.hpp"
#include "dtl/losses.hpp"
#include "dtl/pipeline.hpp"
#include "dtl/rng.hpp"

namespace dtl::eval {

namespace {

constexpr std::size_t kEvalBatch = 256;

// Rowwise softmax probabilities of a dataset slice.
std::vector<double> probabilities(const nn::Model& model, int task, const data::Dataset& ds,
                                  std::size_t begin, std::size_t end) {
    const ad::NodePtr logits = model.forward(task, ds.feature_node(begin, end));
    const ad::NodePtr logp = ad::log_softmax(logits);
    std::vector<double> p(logp->values().size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(logp->values()[i]);
    return p;
}

}  // namespace

double accuracy(const nn::Model& model, int task, const data::Dataset& ds) {
    if (ds.size() == 0) throw ContractViolation("accuracy: empty dataset");
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < ds.size(); begin += kEvalBatch) {
        const std::size_t end = std::min(ds.size(), begin + kEvalBatch);
        const ad::NodePtr logits = model.forward(task, ds.feature_node(begin, end));
        const std::size_t n = logits->cols();
        for (std::size_t i = 0; i < end - begin; ++i) {
            const double* row = logits->values().data() + i * n;
            std::size_t best = 0;
            for (std::size_t j = 1; j < n; ++j) {
                if (row[j] > row[best]) best = j;
            }
            if (static_cast<int>(best) == ds.labels[begin + i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

double pl_accuracy(const nn::Model& base, const PlProtocol& protocol) {
    if (protocol.train == nullptr || protocol.test == nullptr) {
        throw ContractViolation("pl_accuracy: piggyback splits missing");
    }
    nn::Model piggy = base.clone();
    if (!piggy.has_task(protocol.task) || protocol.fresh_head) {
        piggy.attach_head(nn::TaskSpec{protocol.task, protocol.num_classes},
                          protocol.scheme.seed);
    }
    pipeline::fit_ce(piggy, protocol.task, *protocol.train, protocol.scheme, "piggyback");
    return accuracy(piggy, protocol.task, *protocol.test);
}

MiaStrategy parse_mia_strategy(const std::string& s) {
    if (s == "softmax") return MiaStrategy::softmax;
    if (s == "mentr") return MiaStrategy::mentr;
    if (s == "loss") return MiaStrategy::loss;
    if (s == "gradnorm") return MiaStrategy::gradnorm;
    throw ContractViolation("unknown MIA strategy '" + s + "'");
}

std::string to_string(MiaStrategy s) {
    switch (s) {
        case MiaStrategy::softmax: return "softmax";
        case MiaStrategy::mentr: return "mentr";
        case MiaStrategy::loss: return "loss";
        case MiaStrategy::gradnorm: return "gradnorm";
    }
    return "?";
}

namespace {

double clamp_prob(double p) { return std::min(1.0 - 1e-12, std::max(1e-12, p)); }

// Modified prediction entropy (Song & Mittal). Members score low, so the
// returned value is negated to keep "higher = member-like".
double mentr_score(const double* probs, std::size_t k, int label) {
    double ent = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        const double p = clamp_prob(probs[j]);
        if (static_cast<int>(j) == label) {
            ent += -(1.0 - p) * std::log(p);
        } else {
            ent += -p * std::log(1.0 - p);
        }
    }
    return -ent;
}

std::vector<double> per_sample_scores(const nn::Model& model, int task, const data::Dataset& ds,
                                      MiaStrategy strategy) {
    std::vector<double> scores;
    scores.reserve(ds.size());
    if (strategy == MiaStrategy::gradnorm) {
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const ad::NodePtr x = ds.feature_node(i, i + 1);
            const ad::NodePtr loss =
                losses::cross_entropy(model.forward(task, x), {ds.labels[i]});
            const std::vector<double> g =
                ad::grad(loss, model.params(), /*build_graph=*/false).flat();
            double sq = 0.0;
            for (const double v : g) sq += v * v;
            scores.push_back(-std::sqrt(sq));
        }
        return scores;
    }
    for (std::size_t begin = 0; begin < ds.size(); begin += kEvalBatch) {
        const std::size_t end = std::min(ds.size(), begin + kEvalBatch);
        const std::vector<double> probs = probabilities(model, task, ds, begin, end);
        const auto k = static_cast<std::size_t>(model.num_classes(task));
        for (std::size_t i = 0; i < end - begin; ++i) {
            const double* row = probs.data() + i * k;
            const int label = ds.labels[begin + i];
            switch (strategy) {
                case MiaStrategy::softmax:
                    scores.push_back(*std::max_element(row, row + k));
                    break;
                case MiaStrategy::mentr:
                    scores.push_back(mentr_score(row, k, label));
                    break;
                case MiaStrategy::loss:
                    scores.push_back(std::log(clamp_prob(row[static_cast<std::size_t>(label)])));
                    break;
                case MiaStrategy::gradnorm:
                    break;  // handled above
            }
        }
    }
    return scores;
}

}  // namespace

double auroc(const std::vector<double>& member_scores,
             const std::vector<double>& nonmember_scores) {
    const std::size_t m = member_scores.size(), n = nonmember_scores.size();
    if (m == 0 || n == 0) throw ContractViolation("auroc: empty split");
    struct Entry {
        double score;
        bool member;
    };
    std::vector<Entry> pool;
    pool.reserve(m + n);
    for (const double s : member_scores) pool.push_back({s, true});
    for (const double s : nonmember_scores) pool.push_back({s, false});
    std::sort(pool.begin(), pool.end(),
              [](const Entry& a, const Entry& b) { return a.score < b.score; });

    // Mann-Whitney rank sum over members, ties averaged.
    double rank_sum = 0.0;
    std::size_t i = 0;
    while (i < pool.size()) {
        std::size_t j = i;
        while (j < pool.size() && pool[j].score == pool[i].score) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (std::size_t t = i; t < j; ++t) {
            if (pool[t].member) rank_sum += avg_rank;
        }
        i = j;
    }
    const double u = rank_sum - 0.5 * static_cast<double>(m) * static_cast<double>(m + 1);
    return u / (static_cast<double>(m) * static_cast<double>(n));
}

double best_threshold_accuracy(const std::vector<double>& member_scores,
                               const std::vector<double>& nonmember_scores) {
    const std::size_t m = member_scores.size(), n = nonmember_scores.size();
    if (m == 0 || n == 0) throw ContractViolation("best_threshold_accuracy: empty split");
    struct Entry {
        double score;
        bool member;
    };
    std::vector<Entry> pool;
    pool.reserve(m + n);
    for (const double s : member_scores) pool.push_back({s, true});
    for (const double s : nonmember_scores) pool.push_back({s, false});
    std::sort(pool.begin(), pool.end(),
              [](const Entry& a, const Entry& b) { return a.score < b.score; });

    // Sweep thresholds between distinct scores; predict member when
    // score >= threshold. Start with everything classified member.
    std::size_t tp = m, tn = 0;
    double best = static_cast<double>(tp + tn) / static_cast<double>(m + n);
    std::size_t i = 0;
    while (i < pool.size()) {
        std::size_t j = i;
        while (j < pool.size() && pool[j].score == pool[i].score) ++j;
        for (std::size_t t = i; t < j; ++t) {
            if (pool[t].member) {
                --tp;
            } else {
                ++tn;
            }
        }
        best = std::max(best, static_cast<double>(tp + tn) / static_cast<double>(m + n));
        i = j;
    }
    return best;
}

MiaScore mia_scores(const nn::Model& model, int task, const data::Dataset& members,
                    const data::Dataset& nonmembers, MiaStrategy strategy) {
    if (members.size() == 0 || nonmembers.size() == 0) {
        throw ContractViolation("mia_scores: empty member or nonmember split");
    }
    MiaScore out;
    out.strategy = strategy;
    out.member_scores = per_sample_scores(model, task, members, strategy);
    out.nonmember_scores = per_sample_scores(model, task, nonmembers, strategy);
    out.auroc = auroc(out.member_scores, out.nonmember_scores);
    out.best_accuracy = best_threshold_accuracy(out.member_scores, out.nonmember_scores);
    return out;
}

double hessian_trace(const nn::Model& model, int task, const data::Dataset& ds, int probes,
                     std::uint64_t seed) {
    if (probes < 1) throw ContractViolation("hessian_trace: need at least one probe");
    const ad::NodePtr loss =
        losses::cross_entropy(model.forward(task, ds.feature_node()), ds.labels);
    const ad::GradientMap g = ad::grad(loss, model.params(), /*build_graph=*/true);
    const std::size_t n = model.param_count();

    Rng rng(seed);
    double acc = 0.0;
    std::vector<double> v(n);
    for (int p = 0; p < probes; ++p) {
        for (double& x : v) x = rng.rademacher();
        const std::vector<double> hv = ad::hvp_from_grad(g, model.params(), v);
        double quad = 0.0;
        for (std::size_t i = 0; i < n; ++i) quad += v[i] * hv[i];
        acc += quad;
    }
    return acc / static_cast<double>(probes);
}

}  // namespace dtl::eval
