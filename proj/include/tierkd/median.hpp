#pragma once

// Sampled-histogram approximate median.
//
// A sample of coordinate values becomes a set of non-uniform bin boundaries;
// every value is then binned (with a two-level strided scan instead of a
// binary search) and the boundary whose cumulative count is closest to half
// of the total is taken as the split value.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "tierkd/random.hpp"
#include "tierkd/worker_pool.hpp"

namespace tierkd {

inline constexpr std::size_t kGlobalSampleSize = 256;
inline constexpr std::size_t kLocalSampleSize = 1024;
inline constexpr std::size_t kDefaultStride = 32;

/// Raised when a histogram has no mass, i.e. no split can be proposed.
class DegenerateSplit : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Sorted, deduplicated boundaries plus every `stride`-th boundary.
struct IntervalSet {
    std::vector<double> boundaries;
    std::vector<double> stride_index;
    std::size_t stride = kDefaultStride;

    [[nodiscard]] bool empty() const noexcept { return boundaries.empty(); }
    [[nodiscard]] std::size_t bin_count() const noexcept { return boundaries.size() + 1; }
};

/// counts[b] holds values v with boundaries[b-1] <= v < boundaries[b].
struct Histogram {
    std::vector<std::uint64_t> counts;

    [[nodiscard]] std::uint64_t total() const noexcept {
        std::uint64_t sum = 0;
        for (auto c : counts) sum += c;
        return sum;
    }

    Histogram& operator+=(const Histogram& other) {
        if (counts.size() != other.counts.size()) throw std::invalid_argument("histogram shape mismatch");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
        return *this;
    }

    friend bool operator==(const Histogram&, const Histogram&) = default;
};

/// Up to m values drawn without replacement, returned in input order.
inline std::vector<double> sample_values(std::span<const double> values, std::size_t m, std::uint64_t seed) {
    std::vector<double> out;
    const auto picks = sample_indices(values.size(), m, seed);
    out.reserve(picks.size());
    for (auto i : picks) out.push_back(values[i]);
    return out;
}

inline IntervalSet build_intervals(std::vector<double> samples, std::size_t stride = kDefaultStride) {
    if (stride == 0) throw std::invalid_argument("stride must be positive");
    IntervalSet out;
    out.stride = stride;
    std::sort(samples.begin(), samples.end());
    samples.erase(std::unique(samples.begin(), samples.end()), samples.end());
    out.boundaries = std::move(samples);
    for (std::size_t j = 0; j < out.boundaries.size(); j += stride) out.stride_index.push_back(out.boundaries[j]);
    return out;
}

namespace detail {

// Branch-free count of entries <= v; the compiler vectorizes this loop.
inline std::size_t count_not_greater(const double* first, std::size_t n, double v) noexcept {
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) count += static_cast<std::size_t>(first[i] <= v);
    return count;
}

}  // namespace detail

/// Bin of `v`: the number of boundaries <= v.
///
/// Scans the stride index for the enclosing block, then the block itself.
/// Equivalent to `upper_bound(boundaries, v) - boundaries.begin()`.
inline std::size_t locate_bin(const IntervalSet& intervals, double v) noexcept {
    const std::size_t blocks = detail::count_not_greater(intervals.stride_index.data(), intervals.stride_index.size(), v);
    if (blocks == 0) return 0;
    const std::size_t begin = (blocks - 1) * intervals.stride;
    const std::size_t len = std::min(intervals.stride, intervals.boundaries.size() - begin);
    return begin + detail::count_not_greater(intervals.boundaries.data() + begin, len, v);
}

inline void accumulate_histogram(std::span<const double> values, const IntervalSet& intervals, Histogram& into) {
    for (double v : values) ++into.counts[locate_bin(intervals, v)];
}

/// Histogram of `values`; with a pool, workers fill private counts over
/// disjoint slices which are then summed.
inline Histogram histogram_values(std::span<const double> values, const IntervalSet& intervals,
                                  WorkerPool* pool = nullptr) {
    Histogram out{std::vector<std::uint64_t>(intervals.bin_count(), 0)};
    if (pool == nullptr || pool->size() == 1 || values.size() < 4096) {
        accumulate_histogram(values, intervals, out);
        return out;
    }
    std::vector<Histogram> partial(pool->size(), out);
    pool->run_chunks(values.size(), [&](std::size_t c, std::size_t b, std::size_t e) {
        accumulate_histogram(values.subspan(b, e - b), intervals, partial[c]);
    });
    for (const auto& h : partial) out += h;
    return out;
}

/// Index of the boundary whose cumulative fraction (values strictly below
/// it) is closest to one half; ties go to the lower boundary.
inline std::size_t approximate_median_index(const IntervalSet& intervals, const Histogram& h) {
    const std::uint64_t total = h.total();
    if (total == 0 || intervals.empty()) throw DegenerateSplit("empty histogram: no split value available");
    std::size_t best = 0;
    std::uint64_t best_gap = UINT64_MAX;
    std::uint64_t below = 0;
    for (std::size_t b = 0; b < intervals.boundaries.size(); ++b) {
        below += h.counts[b];
        // |below/total - 1/2| compared as |2*below - total|
        const std::uint64_t twice = 2 * below;
        const std::uint64_t gap = twice > total ? twice - total : total - twice;
        if (gap < best_gap) {
            best_gap = gap;
            best = b;
        }
    }
    return best;
}

inline double approximate_median(const IntervalSet& intervals, const Histogram& h) {
    return intervals.boundaries[approximate_median_index(intervals, h)];
}

/// Number of histogrammed values strictly below boundaries[b].
inline std::uint64_t count_below_boundary(const Histogram& h, std::size_t b) noexcept {
    std::uint64_t below = 0;
    for (std::size_t i = 0; i <= b; ++i) below += h.counts[i];
    return below;
}

}  // namespace tierkd
