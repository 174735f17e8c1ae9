#pragma once

// Evidence layer: brute-force oracle, synthetic datasets, result
// verification and benchmark reports.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tierkd/core.hpp"
#include "tierkd/random.hpp"
#include "tierkd/worker_pool.hpp"

namespace tierkd {

/// Linear scan: the k nearest points of `points` with squared distance < sq_radius.
inline KnnResult brute_force_knn(const PointSet& points, PointView q, std::size_t k, double sq_radius = kInfinity,
                                 std::uint64_t query_id = 0) {
    if (k == 0) throw InvalidInput("k must be >= 1");
    if (q.size() != points.dims()) throw InvalidInput("query dimensionality does not match dataset");
    KnnResult out;
    out.query_id = query_id;
    std::vector<double> row(points.dims());
    std::vector<Neighbor> all;
    all.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        points.copy_row(i, row);
        const double d = squared_distance(q, row);
        if (d < sq_radius) all.push_back(Neighbor{d, points.id(i), 0});
    }
    const std::size_t keep = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), neighbor_less);
    all.resize(keep);
    out.neighbors = std::move(all);
    out.finalize(k);
    return out;
}

/// Oracle over many queries, parallel over queries when a pool is given.
inline std::vector<KnnResult> brute_force_batch(const PointSet& points, const std::vector<std::vector<double>>& queries,
                                                std::size_t k, WorkerPool* pool = nullptr) {
    std::vector<KnnResult> out(queries.size());
    auto body = [&](std::size_t i) { out[i] = brute_force_knn(points, queries[i], k, kInfinity, i); };
    if (pool == nullptr) {
        for (std::size_t i = 0; i < queries.size(); ++i) body(i);
    } else {
        pool->run_chunks(queries.size(), [&](std::size_t, std::size_t b, std::size_t e) {
            for (std::size_t i = b; i < e; ++i) body(i);
        });
    }
    return out;
}

enum class DatasetKind { kUniform, kGaussianClusters, kDuplicateHeavy, kAnisotropic };

inline std::string_view to_string(DatasetKind kind) noexcept {
    switch (kind) {
        case DatasetKind::kUniform: return "uniform";
        case DatasetKind::kGaussianClusters: return "gaussian-clusters";
        case DatasetKind::kDuplicateHeavy: return "duplicate-heavy";
        case DatasetKind::kAnisotropic: return "anisotropic";
    }
    return "unknown";
}

inline std::optional<DatasetKind> parse_dataset_kind(std::string_view s) noexcept {
    for (auto k : {DatasetKind::kUniform, DatasetKind::kGaussianClusters, DatasetKind::kDuplicateHeavy,
                   DatasetKind::kAnisotropic}) {
        if (s == to_string(k)) return k;
    }
    return std::nullopt;
}

inline constexpr std::size_t kClusterCenters = 4;
inline constexpr double kClusterSpread = 0.02;
inline constexpr double kDuplicateFraction = 0.4;
inline constexpr std::size_t kDuplicateSites = 3;

/// Cluster centers used by the gaussian-clusters generator for `seed`.
inline std::vector<std::vector<double>> cluster_centers(std::size_t dims, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xce17));
    std::vector<std::vector<double>> centers(kClusterCenters, std::vector<double>(dims));
    for (auto& c : centers) {
        for (auto& v : c) v = rng.uniform(0.1, 0.9);
    }
    return centers;
}

/// Deterministic synthetic data; ids are 0..n-1.
///   uniform:           [0,1)^D
///   gaussian-clusters: 4 isotropic clusters (sigma 0.02) at random centers
///   duplicate-heavy:   40% of points on 3 shared sites, the rest uniform
///   anisotropic:       uniform with dimension 0 stretched to [0,100)
inline PointSet generate_dataset(DatasetKind kind, std::size_t n, std::size_t dims, std::uint64_t seed) {
    if (dims == 0) throw InvalidInput("dataset needs at least one dimension");
    std::vector<std::vector<double>> cols(dims, std::vector<double>(n));
    std::vector<PointId> ids(n);
    Rng rng(seed);
    const auto centers = kind == DatasetKind::kGaussianClusters ? cluster_centers(dims, seed)
                                                                 : std::vector<std::vector<double>>{};
    std::vector<std::vector<double>> sites;
    if (kind == DatasetKind::kDuplicateHeavy) {
        Rng site_rng(derive_seed(seed, 0xd0b));
        sites.assign(kDuplicateSites, std::vector<double>(dims));
        for (auto& s : sites) {
            for (auto& v : s) v = site_rng.uniform();
        }
    }
    const auto duplicates = static_cast<std::size_t>(std::ceil(kDuplicateFraction * static_cast<double>(n)));
    for (std::size_t i = 0; i < n; ++i) {
        ids[i] = i;
        switch (kind) {
            case DatasetKind::kUniform:
                for (std::size_t d = 0; d < dims; ++d) cols[d][i] = rng.uniform();
                break;
            case DatasetKind::kAnisotropic:
                for (std::size_t d = 0; d < dims; ++d) cols[d][i] = rng.uniform() * (d == 0 ? 100.0 : 1.0);
                break;
            case DatasetKind::kGaussianClusters: {
                const auto& c = centers[rng.below(centers.size())];
                for (std::size_t d = 0; d < dims; ++d) cols[d][i] = c[d] + kClusterSpread * rng.normal();
                break;
            }
            case DatasetKind::kDuplicateHeavy:
                // shared sites are interleaved with uniform points
                if (i % 5 < 2 && i / 5 * 2 + i % 5 < duplicates) {
                    const auto& s = sites[i % sites.size()];
                    for (std::size_t d = 0; d < dims; ++d) cols[d][i] = s[d];
                } else {
                    for (std::size_t d = 0; d < dims; ++d) cols[d][i] = rng.uniform();
                }
                break;
        }
    }
    return PointSet::from_columns(std::move(cols), std::move(ids));
}

/// Every row of `points` whose index falls in a deterministic `fraction` sample.
inline std::vector<std::vector<double>> sample_queries(const PointSet& points, double fraction, std::uint64_t seed) {
    const auto m = static_cast<std::uint64_t>(std::llround(fraction * static_cast<double>(points.size())));
    std::vector<std::vector<double>> out;
    for (auto i : sample_indices(points.size(), m, derive_seed(seed, 0x9e7))) out.push_back(points.row(i));
    return out;
}

struct Mismatch {
    std::size_t index = 0;
    std::uint64_t query_id = 0;
    std::string detail;
};

struct VerifyReport {
    std::size_t compared = 0;
    std::size_t mismatched = 0;
    std::optional<Mismatch> first;

    [[nodiscard]] bool passed() const noexcept { return mismatched == 0; }
};

inline std::string describe_distances(const std::vector<double>& d) {
    std::ostringstream s;
    s.precision(17);
    s << '[';
    for (std::size_t i = 0; i < d.size(); ++i) s << (i ? ", " : "") << d[i];
    s << ']';
    return s.str();
}

/// Compares per-query sorted squared-distance lists for exact equality.
/// `tolerance` is an absolute per-entry slack; 0 demands bit equality.
inline VerifyReport verify_run(const std::vector<KnnResult>& engine, const std::vector<KnnResult>& oracle,
                               double tolerance = 0.0) {
    VerifyReport report;
    const std::size_t n = std::max(engine.size(), oracle.size());
    for (std::size_t i = 0; i < n; ++i) {
        ++report.compared;
        std::string why;
        std::uint64_t qid = i < engine.size() ? engine[i].query_id : oracle[i].query_id;
        if (i >= engine.size() || i >= oracle.size()) {
            why = "query missing from " + std::string(i >= engine.size() ? "engine" : "oracle") + " results";
        } else {
            auto a = engine[i].distances();
            auto b = oracle[i].distances();
            std::sort(a.begin(), a.end());
            std::sort(b.begin(), b.end());
            if (engine[i].query_id != oracle[i].query_id) {
                why = "query id " + std::to_string(engine[i].query_id) + " vs " + std::to_string(oracle[i].query_id);
            } else if (a.size() != b.size()) {
                why = "neighbor count " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                      ": engine " + describe_distances(a) + " oracle " + describe_distances(b);
            } else {
                for (std::size_t j = 0; j < a.size(); ++j) {
                    if (!(std::abs(a[j] - b[j]) <= tolerance)) {
                        why = "distance " + std::to_string(j) + " differs: engine " + describe_distances(a) +
                              " oracle " + describe_distances(b);
                        break;
                    }
                }
            }
        }
        if (!why.empty()) {
            ++report.mismatched;
            if (!report.first) report.first = Mismatch{i, qid, std::move(why)};
        }
    }
    return report;
}

/// One timed phase or counter of a run.
struct ReportEntry {
    std::string kind;  // "phase" | "counter" | "env"
    std::string name;
    double value = 0.0;
};

/// Phase timings, counters and environment of a build or query run.
class BenchReport {
  public:
    void phase(std::string name, double seconds) { entries_.push_back({"phase", std::move(name), seconds}); }
    void counter(std::string name, double value) { entries_.push_back({"counter", std::move(name), value}); }
    void env(std::string name, double value) { entries_.push_back({"env", std::move(name), value}); }
    void append(const BenchReport& other) { entries_.insert(entries_.end(), other.entries_.begin(), other.entries_.end()); }

    [[nodiscard]] const std::vector<ReportEntry>& entries() const noexcept { return entries_; }

    [[nodiscard]] std::optional<double> get(std::string_view kind, std::string_view name) const {
        for (const auto& e : entries_) {
            if (e.kind == kind && e.name == name) return e.value;
        }
        return std::nullopt;
    }

    /// Human-readable table; phases also show their share of the phase total
    /// within the same prefix ("construct." or "query.").
    void write_text(std::ostream& os) const {
        auto prefix_total = [&](const std::string& name) {
            const auto dot = name.find('.');
            const auto prefix = name.substr(0, dot);
            double t = 0.0;
            for (const auto& e : entries_) {
                if (e.kind == "phase" && e.name.substr(0, e.name.find('.')) == prefix) t += e.value;
            }
            return t;
        };
        for (const auto& e : entries_) {
            std::ostringstream line;
            line.precision(6);
            if (e.kind == "phase") {
                const double total = prefix_total(e.name);
                line << std::fixed << "  " << e.name << ": " << e.value << " s";
                if (total > 0) line << " (" << std::setprecision(1) << 100.0 * e.value / total << "%)";
            } else {
                line << "  " << e.name << ": " << e.value;
            }
            os << line.str() << '\n';
        }
    }

    /// One JSON object per line.
    void write_records(std::ostream& os, const nlohmann::json& tags = nlohmann::json::object()) const {
        for (const auto& e : entries_) {
            nlohmann::json rec = tags;
            rec["kind"] = e.kind;
            rec["name"] = e.name;
            rec["value"] = e.value;
            os << rec.dump() << '\n';
        }
    }

  private:
    std::vector<ReportEntry> entries_;
};

/// Median of a non-empty sample (mean of the middle pair for even sizes).
inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace tierkd
