#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtl/data.hpp"
#include "dtl/nn.hpp"

namespace dtl::eval {

// Fraction of argmax-correct predictions.
double accuracy(const nn::Model& model, int task, const data::Dataset& ds);

struct PlProtocol {
    const data::Dataset* train = nullptr;
    const data::Dataset* test = nullptr;
    int task = 0;
    int num_classes = 0;
    nn::TrainScheme scheme;
    // Force a fresh head even if the base model already owns one for the
    // task; with the flag clear an existing head (e.g. the published source
    // head) is reused.
    bool fresh_head = false;
};

// Piggyback learning accuracy: fine-tune a copy of the base model on the
// piggyback train split, report test accuracy. The base model is untouched.
double pl_accuracy(const nn::Model& base, const PlProtocol& protocol);

enum class MiaStrategy : std::uint8_t { softmax, mentr, loss, gradnorm };

MiaStrategy parse_mia_strategy(const std::string& s);
std::string to_string(MiaStrategy s);

struct MiaScore {
    MiaStrategy strategy = MiaStrategy::softmax;
    std::vector<double> member_scores;     // higher = more member-like
    std::vector<double> nonmember_scores;
    double auroc = 0.5;
    double best_accuracy = 0.5;
};

// Threshold readouts over per-sample scores. AUROC is the Mann-Whitney rank
// statistic with ties averaged; best_accuracy maximizes over thresholds.
MiaScore mia_scores(const nn::Model& model, int task, const data::Dataset& members,
                    const data::Dataset& nonmembers, MiaStrategy strategy);

// Helper shared with tests: AUROC of pooled scores.
double auroc(const std::vector<double>& member_scores, const std::vector<double>& nonmember_scores);
double best_threshold_accuracy(const std::vector<double>& member_scores,
                               const std::vector<double>& nonmember_scores);

// Hutchinson trace estimate (1/P) sum v' (H v) of the mean cross-entropy
// Hessian, with Rademacher probes.
double hessian_trace(const nn::Model& model, int task, const data::Dataset& ds, int probes,
                     std::uint64_t seed);

}  // namespace dtl::eval
