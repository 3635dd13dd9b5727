#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dtl/autodiff.hpp"

namespace dtl::data {

enum class Split : std::uint8_t { train, test };

struct Dataset {
    std::vector<double> features;  // row-major (n, dim)
    std::vector<int> labels;       // in [0, num_classes)
    std::size_t dim = 0;
    int num_classes = 0;
    int task_id = 0;
    Split split = Split::train;
    std::string provenance;

    std::size_t size() const { return labels.size(); }
    void validate() const;

    // Features of rows [begin, end) as a constant graph node.
    ad::NodePtr feature_node(std::size_t begin, std::size_t end) const;
    ad::NodePtr feature_node() const { return feature_node(0, size()); }
};

struct SubsampleSpec {
    double ratio = 1.0;  // in (0, 1]
    std::uint64_t seed = 0;
};

// Gaussian clusters with unit covariance. Means sit on a sphere of radius
// sqrt(2) * separation (an orthonormal frame when k fits the space), so
// `separation` is the per-class margin in noise units. When subspace_dim > 0
// the means live in a shared latent subspace drawn from family_seed, so
// tasks from the same family share geometry and transfer between them is
// informative.
struct GaussianTaskSpec {
    int k = 2;
    int d = 2;
    int n_train_per_class = 100;
    int n_test_per_class = 100;
    double separation = 3.0;
    std::uint64_t seed = 0;
    int subspace_dim = 0;
    std::uint64_t family_seed = 0;
    int task_id = 0;
};

std::pair<Dataset, Dataset> make_gaussian_task(const GaussianTaskSpec& spec);

// Class-balanced subsample without replacement; gamma == 1 is the identity.
Dataset subsample(const Dataset& ds, const SubsampleSpec& spec);

struct Batch {
    ad::NodePtr features;     // constant node (m, dim)
    std::vector<int> labels;  // length m
    std::vector<std::size_t> rows;  // source row indices in the dataset
    std::size_t size() const { return labels.size(); }
};

// Minibatches over a seeded per-epoch shuffle. With drop_tail set, a final
// short batch is dropped (GC chunking needs divisible batches).
class BatchIterator {
public:
    BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                  std::uint64_t epoch, bool drop_tail);

    std::optional<Batch> next();
    std::size_t num_batches() const;
    const std::vector<std::size_t>& order() const { return order_; }

private:
    const Dataset& ds_;
    std::size_t batch_size_;
    bool drop_tail_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

// Numeric CSV, final column an integer label. Non-contiguous labels are
// remapped to 0..k-1; the map is recorded in `relabel` (old -> new).
struct CsvDataset {
    Dataset dataset;
    std::vector<std::pair<int, int>> relabel;
};

CsvDataset load_csv(const std::string& path);

struct FeatureStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

FeatureStats feature_stats(const Dataset& ds);
void standardize(Dataset& ds, const FeatureStats& stats);

// Train file defines the standardization statistics, test reuses them.
std::pair<Dataset, Dataset> load_csv_task(const std::string& train_path,
                                          const std::string& test_path, int task_id);

}  // namespace dtl::data
