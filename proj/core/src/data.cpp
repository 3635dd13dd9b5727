#include "dtl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "dtl/errors.hpp"
#include "dtl/rng.hpp"

namespace dtl::data {

void Dataset::validate() const {
    if (features.size() != size() * dim) throw ShapeError("dataset: feature matrix size mismatch");
    for (const double x : features) {
        if (!std::isfinite(x)) throw ContractViolation("dataset: non-finite feature value");
    }
    std::vector<bool> seen(static_cast<std::size_t>(num_classes), false);
    for (const int y : labels) {
        if (y < 0 || y >= num_classes) throw InvalidLabelError("dataset: label out of range");
        seen[static_cast<std::size_t>(y)] = true;
    }
    if (split == Split::train) {
        for (int c = 0; c < num_classes; ++c) {
            if (!seen[static_cast<std::size_t>(c)]) {
                throw ContractViolation("dataset: class " + std::to_string(c) +
                                        " missing from train split");
            }
        }
    }
}

ad::NodePtr Dataset::feature_node(std::size_t begin, std::size_t end) const {
    if (begin > end || end > size()) throw ContractViolation("feature_node: bad row range");
    std::vector<double> block(features.begin() + static_cast<std::ptrdiff_t>(begin * dim),
                              features.begin() + static_cast<std::ptrdiff_t>(end * dim));
    return ad::constant({end - begin, dim}, std::move(block));
}

namespace {

// Orthonormal columns (d x r) via Gram-Schmidt over seeded Gaussian draws.
std::vector<std::vector<double>> orthonormal_basis(int d, int r, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> basis;
    while (static_cast<int>(basis.size()) < r) {
        std::vector<double> v(static_cast<std::size_t>(d));
        for (double& x : v) x = rng.normal();
        for (const auto& u : basis) {
            double proj = 0.0;
            for (int i = 0; i < d; ++i) proj += v[i] * u[i];
            for (int i = 0; i < d; ++i) v[i] -= proj * u[i];
        }
        double norm = 0.0;
        for (const double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-8) continue;  // redraw a degenerate direction
        for (double& x : v) x /= norm;
        basis.push_back(std::move(v));
    }
    return basis;
}

// Class means sit on a sphere of radius sqrt(2) * separation. With k <= r
// the directions form a seeded orthonormal frame, so every pair of means is
// exactly 2 * separation apart and `separation` is the per-class margin in
// noise units; for k > r the directions are random unit vectors.
std::vector<std::vector<double>> class_means(const GaussianTaskSpec& spec) {
    const int r = spec.subspace_dim > 0 ? spec.subspace_dim : spec.d;
    const double radius = std::numbers::sqrt2 * spec.separation;
    std::vector<std::vector<double>> means;
    if (spec.k <= r) {
        means = orthonormal_basis(r, spec.k, spec.seed);
        for (auto& m : means)
            for (double& x : m) x *= radius;
    } else {
        Rng rng(spec.seed);
        for (int c = 0; c < spec.k; ++c) {
            std::vector<double> z(static_cast<std::size_t>(r));
            double norm = 0.0;
            do {
                norm = 0.0;
                for (double& x : z) {
                    x = rng.normal();
                    norm += x * x;
                }
                norm = std::sqrt(norm);
            } while (norm < 1e-8);
            for (double& x : z) x *= radius / norm;
            means.push_back(std::move(z));
        }
    }
    if (spec.subspace_dim > 0) {
        const auto basis = orthonormal_basis(spec.d, r, spec.family_seed);
        for (auto& m : means) {
            std::vector<double> lifted(static_cast<std::size_t>(spec.d), 0.0);
            for (int j = 0; j < r; ++j)
                for (int i = 0; i < spec.d; ++i) lifted[i] += m[static_cast<std::size_t>(j)] * basis[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
            m = std::move(lifted);
        }
    }
    return means;
}

Dataset sample_split(const GaussianTaskSpec& spec,
                     const std::vector<std::vector<double>>& means, int per_class, Split split,
                     Rng& rng) {
    Dataset ds;
    ds.dim = static_cast<std::size_t>(spec.d);
    ds.num_classes = spec.k;
    ds.task_id = spec.task_id;
    ds.split = split;
    std::ostringstream prov;
    prov << "gaussian(k=" << spec.k << ",d=" << spec.d << ",sep=" << spec.separation
         << ",seed=" << spec.seed << ",subspace=" << spec.subspace_dim
         << ",family=" << spec.family_seed << ")";
    ds.provenance = prov.str();
    for (int c = 0; c < spec.k; ++c) {
        for (int i = 0; i < per_class; ++i) {
            for (int j = 0; j < spec.d; ++j) {
                ds.features.push_back(means[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] + rng.normal());
            }
            ds.labels.push_back(c);
        }
    }
    return ds;
}

}  // namespace

std::pair<Dataset, Dataset> make_gaussian_task(const GaussianTaskSpec& spec) {
    if (spec.k < 2 || spec.d < 2) throw ContractViolation("gaussian task: need k >= 2 and d >= 2");
    if (spec.subspace_dim > spec.d) throw ContractViolation("gaussian task: subspace_dim > d");
    const auto means = class_means(spec);
    Rng rng(mix_seed(spec.seed, 0xda7aULL));
    Dataset train = sample_split(spec, means, spec.n_train_per_class, Split::train, rng);
    Dataset test = sample_split(spec, means, spec.n_test_per_class, Split::test, rng);
    return {std::move(train), std::move(test)};
}

Dataset subsample(const Dataset& ds, const SubsampleSpec& spec) {
    if (spec.ratio <= 0.0 || spec.ratio > 1.0) {
        throw ContractViolation("subsample: ratio must be in (0, 1]");
    }
    if (spec.ratio == 1.0) {
        Dataset out = ds;
        out.provenance += " | subsample(1)";
        return out;
    }
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
    }
    Rng rng(spec.seed);
    std::vector<std::size_t> keep;
    for (int c = 0; c < ds.num_classes; ++c) {
        auto& rows = by_class[static_cast<std::size_t>(c)];
        const double want = spec.ratio * static_cast<double>(rows.size());
        if (want < 1.0) {
            throw ContractViolation("subsample: ratio leaves class " + std::to_string(c) +
                                    " empty");
        }
        const auto m = static_cast<std::size_t>(std::llround(want));
        rng.shuffle(rows);
        keep.insert(keep.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(m));
    }
    std::sort(keep.begin(), keep.end());

    Dataset out;
    out.dim = ds.dim;
    out.num_classes = ds.num_classes;
    out.task_id = ds.task_id;
    out.split = ds.split;
    out.provenance = ds.provenance + " | subsample(" + std::to_string(spec.ratio) + ",seed=" +
                     std::to_string(spec.seed) + ")";
    for (const std::size_t i : keep) {
        out.features.insert(out.features.end(), ds.features.begin() + static_cast<std::ptrdiff_t>(i * ds.dim),
                            ds.features.begin() + static_cast<std::ptrdiff_t>((i + 1) * ds.dim));
        out.labels.push_back(ds.labels[i]);
    }
    return out;
}

BatchIterator::BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                             std::uint64_t epoch, bool drop_tail)
    : ds_(ds), batch_size_(batch_size), drop_tail_(drop_tail) {
    if (batch_size_ == 0) throw ContractViolation("batches: batch size must be positive");
    order_.resize(ds.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(mix_seed(seed, epoch));
    rng.shuffle(order_);
}

std::size_t BatchIterator::num_batches() const {
    return drop_tail_ ? order_.size() / batch_size_
                      : (order_.size() + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> BatchIterator::next() {
    const std::size_t remaining = order_.size() - cursor_;
    if (remaining == 0) return std::nullopt;
    if (drop_tail_ && remaining < batch_size_) return std::nullopt;
    const std::size_t take = std::min(batch_size_, remaining);

    Batch b;
    b.rows.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                  order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
    std::vector<double> x;
    x.reserve(take * ds_.dim);
    for (const std::size_t i : b.rows) {
        x.insert(x.end(), ds_.features.begin() + static_cast<std::ptrdiff_t>(i * ds_.dim),
                 ds_.features.begin() + static_cast<std::ptrdiff_t>((i + 1) * ds_.dim));
        b.labels.push_back(ds_.labels[i]);
    }
    b.features = ad::constant({take, ds_.dim}, std::move(x));
    cursor_ += take;
    return b;
}

CsvDataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_csv: cannot open " + path);

    std::vector<std::vector<double>> rows;
    std::vector<int> raw_labels;
    std::string line;
    std::size_t lineno = 0;
    std::size_t width = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<double> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t used = 0;
                const double v = std::stod(cell, &used);
                while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
                if (used != cell.size()) throw std::invalid_argument(cell);
                cells.push_back(v);
            } catch (const std::exception&) {
                throw ParseError("load_csv: malformed value '" + cell + "' at " + path + ":" +
                                 std::to_string(lineno));
            }
        }
        if (cells.size() < 2) {
            throw ParseError("load_csv: need at least one feature and a label at " + path + ":" +
                             std::to_string(lineno));
        }
        if (width == 0) width = cells.size();
        if (cells.size() != width) {
            throw ParseError("load_csv: inconsistent column count at " + path + ":" +
                             std::to_string(lineno));
        }
        const double raw = cells.back();
        cells.pop_back();
        if (raw != std::floor(raw)) {
            throw ParseError("load_csv: non-integer label at " + path + ":" +
                             std::to_string(lineno));
        }
        raw_labels.push_back(static_cast<int>(raw));
        rows.push_back(std::move(cells));
    }
    if (rows.empty()) throw ParseError("load_csv: no data rows in " + path);

    std::map<int, int> relabel;
    for (const int y : raw_labels) relabel.emplace(y, 0);
    int next = 0;
    for (auto& [old_label, new_label] : relabel) new_label = next++;

    CsvDataset out;
    out.dataset.dim = width - 1;
    out.dataset.num_classes = next;
    out.dataset.provenance = "csv(" + path + ")";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.dataset.features.insert(out.dataset.features.end(), rows[i].begin(), rows[i].end());
        out.dataset.labels.push_back(relabel.at(raw_labels[i]));
    }
    bool contiguous = true;
    for (const auto& [old_label, new_label] : relabel) {
        if (old_label != new_label) contiguous = false;
    }
    if (!contiguous) {
        out.relabel.assign(relabel.begin(), relabel.end());
    }
    return out;
}

FeatureStats feature_stats(const Dataset& ds) {
    FeatureStats stats;
    stats.mean.assign(ds.dim, 0.0);
    stats.stddev.assign(ds.dim, 0.0);
    const auto n = static_cast<double>(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t j = 0; j < ds.dim; ++j) stats.mean[j] += ds.features[i * ds.dim + j];
    for (double& m : stats.mean) m /= n;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.dim; ++j) {
            const double dlt = ds.features[i * ds.dim + j] - stats.mean[j];
            stats.stddev[j] += dlt * dlt;
        }
    }
    for (double& s : stats.stddev) {
        s = std::sqrt(s / n);
        if (s < 1e-12) s = 1.0;  // constant column: leave centered values at zero
    }
    return stats;
}

void standardize(Dataset& ds, const FeatureStats& stats) {
    if (stats.mean.size() != ds.dim) throw ShapeError("standardize: stats width mismatch");
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.dim; ++j) {
            ds.features[i * ds.dim + j] = (ds.features[i * ds.dim + j] - stats.mean[j]) / stats.stddev[j];
        }
    }
}

std::pair<Dataset, Dataset> load_csv_task(const std::string& train_path,
                                          const std::string& test_path, int task_id) {
    CsvDataset train = load_csv(train_path);
    CsvDataset test = load_csv(test_path);
    train.dataset.task_id = task_id;
    train.dataset.split = Split::train;
    test.dataset.task_id = task_id;
    test.dataset.split = Split::test;
    test.dataset.num_classes = std::max(test.dataset.num_classes, train.dataset.num_classes);
    const FeatureStats stats = feature_stats(train.dataset);
    standardize(train.dataset, stats);
    standardize(test.dataset, stats);
    train.dataset.validate();
    test.dataset.validate();
    return {std::move(train.dataset), std::move(test.dataset)};
}

}  // namespace dtl::data
