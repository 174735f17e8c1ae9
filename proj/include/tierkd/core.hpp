#pragma once

// Geometry primitives, columnar point storage and k-NN result types shared by
// the local tree, the simulated cluster and the query protocol.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace tierkd {

using PointId = std::uint64_t;
using RankId = std::uint32_t;

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// Thrown when input data or configuration violates a precondition.
class InvalidInput : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when an internal invariant is observed to be broken.
class InvariantViolation : public std::logic_error {
  public:
    using std::logic_error::logic_error;
};

/// A point stored as a contiguous row of coordinates (used for queries).
using PointView = std::span<const double>;

/// Squared Euclidean distance, summed in dimension order.
///
/// Every distance in the library goes through this summation order so that
/// the tree search and the brute-force oracle produce bit-identical values.
inline double squared_distance(PointView a, PointView b) noexcept {
    double sum = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) {
        const double diff = a[d] - b[d];
        sum += diff * diff;
    }
    return sum;
}

/// Columnar store of `count` points in `dims` dimensions with stable ids.
///
/// Coordinates for dimension d occupy `column(d)`; the point at row i has id
/// `ids()[i]`. Ingestion rejects non-finite values.
class PointSet {
  public:
    PointSet() = default;

    explicit PointSet(std::size_t dims) : dims_(dims), columns_(dims) {
        if (dims == 0) throw InvalidInput("PointSet needs at least one dimension");
    }

    /// Builds from a row-major buffer of `ids.size() * dims` values.
    static PointSet from_rows(std::size_t dims, std::span<const double> rows, std::span<const PointId> ids) {
        if (dims == 0) throw InvalidInput("PointSet needs at least one dimension");
        if (rows.size() != ids.size() * dims) throw InvalidInput("row buffer size does not match id count");
        PointSet out(dims);
        out.reserve(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) out.push_back(ids[i], rows.subspan(i * dims, dims));
        return out;
    }

    /// Builds from per-dimension columns; every column must have `ids.size()` entries.
    static PointSet from_columns(std::vector<std::vector<double>> columns, std::vector<PointId> ids) {
        if (columns.empty()) throw InvalidInput("PointSet needs at least one dimension");
        for (const auto& col : columns) {
            if (col.size() != ids.size()) throw InvalidInput("column length does not match id count");
            for (double v : col) {
                if (!std::isfinite(v)) throw InvalidInput("non-finite coordinate");
            }
        }
        PointSet out;
        out.dims_ = columns.size();
        out.columns_ = std::move(columns);
        out.ids_ = std::move(ids);
        return out;
    }

    [[nodiscard]] std::size_t dims() const noexcept { return dims_; }
    [[nodiscard]] std::size_t size() const noexcept { return ids_.size(); }
    [[nodiscard]] bool empty() const noexcept { return ids_.empty(); }

    [[nodiscard]] std::span<const double> column(std::size_t d) const noexcept { return columns_[d]; }
    [[nodiscard]] std::span<const PointId> ids() const noexcept { return ids_; }
    [[nodiscard]] double coord(std::size_t row, std::size_t d) const noexcept { return columns_[d][row]; }
    [[nodiscard]] PointId id(std::size_t row) const noexcept { return ids_[row]; }

    /// Copies row `row` into `out` (which must hold `dims()` values).
    void copy_row(std::size_t row, std::span<double> out) const noexcept {
        for (std::size_t d = 0; d < dims_; ++d) out[d] = columns_[d][row];
    }

    [[nodiscard]] std::vector<double> row(std::size_t row) const {
        std::vector<double> out(dims_);
        copy_row(row, out);
        return out;
    }

    void reserve(std::size_t n) {
        ids_.reserve(n);
        for (auto& col : columns_) col.reserve(n);
    }

    void push_back(PointId id, PointView coords) {
        if (coords.size() != dims_) throw InvalidInput("point dimensionality mismatch");
        for (double v : coords) {
            if (!std::isfinite(v)) throw InvalidInput("non-finite coordinate");
        }
        for (std::size_t d = 0; d < dims_; ++d) columns_[d].push_back(coords[d]);
        ids_.push_back(id);
    }

    /// Appends row `row` of `other` (same dimensionality, already validated).
    void append_row(const PointSet& other, std::size_t row) {
        for (std::size_t d = 0; d < dims_; ++d) columns_[d].push_back(other.columns_[d][row]);
        ids_.push_back(other.ids_[row]);
    }

    /// Returns a new set holding rows `order[0], order[1], ...` of this set.
    [[nodiscard]] PointSet gather(std::span<const std::uint32_t> order) const {
        PointSet out;
        out.dims_ = dims_;
        out.columns_.resize(dims_);
        for (std::size_t d = 0; d < dims_; ++d) {
            auto& dst = out.columns_[d];
            dst.resize(order.size());
            const auto& src = columns_[d];
            for (std::size_t i = 0; i < order.size(); ++i) dst[i] = src[order[i]];
        }
        out.ids_.resize(order.size());
        for (std::size_t i = 0; i < order.size(); ++i) out.ids_[i] = ids_[order[i]];
        return out;
    }

    [[nodiscard]] bool has_unique_ids() const {
        std::unordered_set<PointId> seen(ids_.begin(), ids_.end());
        return seen.size() == ids_.size();
    }

    friend bool operator==(const PointSet&, const PointSet&) = default;

  private:
    std::size_t dims_ = 0;
    std::vector<std::vector<double>> columns_;
    std::vector<PointId> ids_;
};

/// Axis-aligned split: points with coord[dim] < value go left, the rest right.
struct SplitPlane {
    std::uint32_t dim = 0;
    double value = 0.0;

    [[nodiscard]] bool goes_left(double coord) const noexcept { return coord < value; }
    friend bool operator==(const SplitPlane&, const SplitPlane&) = default;
};

/// Axis-aligned box whose faces may be at infinity.
struct Box {
    std::vector<double> lower;
    std::vector<double> upper;

    static Box everything(std::size_t dims) {
        return Box{std::vector<double>(dims, -kInfinity), std::vector<double>(dims, kInfinity)};
    }

    [[nodiscard]] std::size_t dims() const noexcept { return lower.size(); }
    friend bool operator==(const Box&, const Box&) = default;
};

/// Squared distance from `q` to the closest point of `region`; 0 inside.
inline double min_sq_dist_to_region(PointView q, const Box& region) noexcept {
    double sum = 0.0;
    for (std::size_t d = 0; d < q.size(); ++d) {
        double off = 0.0;
        if (q[d] < region.lower[d]) {
            off = region.lower[d] - q[d];
        } else if (q[d] > region.upper[d]) {
            off = q[d] - region.upper[d];
        }
        sum += off * off;
    }
    return sum;
}

struct Neighbor {
    double sq_dist = 0.0;
    PointId point_id = 0;
    RankId rank = 0;

    friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Total order used everywhere: distance first, then id.
inline bool neighbor_less(const Neighbor& a, const Neighbor& b) noexcept {
    if (a.sq_dist != b.sq_dist) return a.sq_dist < b.sq_dist;
    return a.point_id < b.point_id;
}

struct KnnResult {
    std::uint64_t query_id = 0;
    std::vector<Neighbor> neighbors;  // ascending by (sq_dist, point_id)
    double r_prime = kInfinity;       // k-th squared distance when full

    /// Sorts neighbors and recomputes `r_prime` for the given k.
    void finalize(std::size_t k) {
        std::sort(neighbors.begin(), neighbors.end(), neighbor_less);
        if (neighbors.size() > k) neighbors.resize(k);
        r_prime = neighbors.size() == k && k > 0 ? neighbors.back().sq_dist : kInfinity;
    }

    [[nodiscard]] std::vector<double> distances() const {
        std::vector<double> out;
        out.reserve(neighbors.size());
        for (const auto& n : neighbors) out.push_back(n.sq_dist);
        return out;
    }

    friend bool operator==(const KnnResult&, const KnnResult&) = default;
};

}  // namespace tierkd
