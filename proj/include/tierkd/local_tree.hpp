#pragma once

// Per-rank kd-tree construction.
//
// Splits choose the dimension of largest sampled variance and an approximate
// median from a sampled histogram. The upper levels are built breadth-first
// with every worker cooperating on each node; once the frontier is wide
// enough each worker builds whole subtrees depth-first. Finally the points
// are reordered so each leaf bucket is a contiguous block of rows.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "tierkd/core.hpp"
#include "tierkd/median.hpp"
#include "tierkd/random.hpp"
#include "tierkd/timing.hpp"
#include "tierkd/worker_pool.hpp"

namespace tierkd {

struct BuildConfig {
    std::size_t bucket_size = 32;
    std::size_t local_sample_m = kLocalSampleSize;
    std::size_t variance_sample = 1024;
    std::size_t branch_factor_per_worker = 10;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    std::size_t stride = kDefaultStride;

    void validate() const {
        if (bucket_size == 0) throw InvalidInput("bucket_size must be >= 1");
        if (local_sample_m == 0 || variance_sample == 0) throw InvalidInput("sample sizes must be >= 1");
        if (branch_factor_per_worker == 0) throw InvalidInput("branch_factor_per_worker must be >= 1");
        if (workers == 0) throw InvalidInput("workers must be >= 1");
        if (stride == 0) throw InvalidInput("stride must be >= 1");
    }
};

/// Child reference: >= 0 is an interior node index, < 0 is leaf `~ref`.
using NodeRef = std::int64_t;

inline constexpr bool is_leaf_ref(NodeRef ref) noexcept { return ref < 0; }
inline constexpr std::size_t leaf_index(NodeRef ref) noexcept { return static_cast<std::size_t>(~ref); }
inline constexpr NodeRef leaf_ref(std::size_t leaf) noexcept { return ~static_cast<NodeRef>(leaf); }

struct TreeNode {
    SplitPlane plane;
    NodeRef left = 0;
    NodeRef right = 0;
    std::uint64_t count = 0;

    friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct Leaf {
    std::uint64_t offset = 0;
    std::uint64_t length = 0;

    friend bool operator==(const Leaf&, const Leaf&) = default;
};

/// Immutable kd-tree over packed points. Interior nodes and leaves are both
/// stored in preorder; leaf b covers rows [offset, offset + length).
struct LocalTree {
    std::vector<TreeNode> nodes;
    std::vector<Leaf> leaves;
    PointSet points;
    NodeRef root = 0;
    std::uint32_t depth = 0;

    [[nodiscard]] bool empty() const noexcept { return leaves.empty(); }
    [[nodiscard]] std::size_t size() const noexcept { return points.size(); }
    [[nodiscard]] std::size_t dims() const noexcept { return points.dims(); }

    friend bool operator==(const LocalTree&, const LocalTree&) = default;
};

namespace detail {

inline std::vector<double> sampled_variances(const PointSet& points, std::span<const std::uint32_t> rows,
                                             std::size_t sample, std::uint64_t seed) {
    const auto picks = sample_indices(rows.size(), sample, seed);
    std::vector<double> variances(points.dims(), 0.0);
    if (picks.empty()) return variances;
    const double count = static_cast<double>(picks.size());
    for (std::size_t d = 0; d < points.dims(); ++d) {
        const auto col = points.column(d);
        double mean = 0.0;
        for (auto i : picks) mean += col[rows[i]];
        mean /= count;
        double ss = 0.0;
        for (auto i : picks) {
            const double diff = col[rows[i]] - mean;
            ss += diff * diff;
        }
        variances[d] = ss / count;
    }
    return variances;
}

/// Dimensions by descending variance, ties by ascending index.
inline std::vector<std::uint32_t> order_by_variance(const std::vector<double>& variances) {
    std::vector<std::uint32_t> order(variances.size());
    std::iota(order.begin(), order.end(), 0U);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return variances[a] > variances[b]; });
    return order;
}

inline std::vector<std::uint32_t> identity_rows(std::size_t n) {
    std::vector<std::uint32_t> rows(n);
    std::iota(rows.begin(), rows.end(), 0U);
    return rows;
}

}  // namespace detail

/// Dimension with the largest variance over a deterministic sample of `rows`.
inline std::uint32_t choose_split_dimension(const PointSet& points, std::span<const std::uint32_t> rows,
                                            std::size_t sample, std::uint64_t seed) {
    if (rows.empty()) throw InvalidInput("choose_split_dimension on empty point range");
    return detail::order_by_variance(detail::sampled_variances(points, rows, sample, seed)).front();
}

inline std::uint32_t choose_split_dimension(const PointSet& points, std::size_t sample, std::uint64_t seed) {
    const auto rows = detail::identity_rows(points.size());
    return choose_split_dimension(points, rows, sample, seed);
}

/// Stable in-place partition of `rows`: coord < plane.value first.
/// With a pool the partition runs in parallel and gives the same order.
inline std::pair<std::span<std::uint32_t>, std::span<std::uint32_t>> partition_indices(
    const PointSet& points, std::span<std::uint32_t> rows, const SplitPlane& plane, WorkerPool* pool = nullptr) {
    const auto col = points.column(plane.dim);
    std::vector<std::uint32_t> scratch(rows.size());
    std::size_t left = 0;
    if (pool == nullptr || pool->size() == 1 || rows.size() < 8192) {
        std::size_t right = 0;
        for (auto r : rows) {
            if (plane.goes_left(col[r])) {
                rows[left++] = r;
            } else {
                scratch[right++] = r;
            }
        }
        std::copy_n(scratch.begin(), right, rows.begin() + static_cast<std::ptrdiff_t>(left));
    } else {
        const std::size_t chunks = pool->size();
        std::vector<std::size_t> left_counts(chunks, 0);
        pool->run_chunks(rows.size(), [&](std::size_t c, std::size_t b, std::size_t e) {
            std::size_t cnt = 0;
            for (std::size_t i = b; i < e; ++i) cnt += static_cast<std::size_t>(plane.goes_left(col[rows[i]]));
            left_counts[c] = cnt;
        });
        const std::size_t total_left = std::accumulate(left_counts.begin(), left_counts.end(), std::size_t{0});
        std::vector<std::size_t> left_start(chunks), right_start(chunks);
        std::size_t lacc = 0, racc = total_left;
        for (std::size_t c = 0; c < chunks; ++c) {
            const std::size_t b = rows.size() * c / chunks, e = rows.size() * (c + 1) / chunks;
            left_start[c] = lacc;
            right_start[c] = racc;
            lacc += left_counts[c];
            racc += (e - b) - left_counts[c];
        }
        pool->run_chunks(rows.size(), [&](std::size_t c, std::size_t b, std::size_t e) {
            std::size_t l = left_start[c], r = right_start[c];
            for (std::size_t i = b; i < e; ++i) {
                const auto row = rows[i];
                scratch[plane.goes_left(col[row]) ? l++ : r++] = row;
            }
        });
        std::copy(scratch.begin(), scratch.end(), rows.begin());
        left = total_left;
    }
    return {rows.first(left), rows.subspan(left)};
}

struct PackedBuckets {
    PointSet points;
    std::vector<Leaf> leaves;
};

/// Reorders points so bucket b is the contiguous row block of leaves[b].
/// `order` lists rows bucket by bucket; `lengths` gives each bucket's size.
inline PackedBuckets pack_buckets(const PointSet& points, std::span<const std::uint32_t> order,
                                  std::span<const std::uint64_t> lengths) {
    const std::uint64_t total = std::accumulate(lengths.begin(), lengths.end(), std::uint64_t{0});
    if (total != order.size() || order.size() != points.size())
        throw InvalidInput("bucket lengths do not cover every point exactly once");
    PackedBuckets out{points.gather(order), {}};
    out.leaves.reserve(lengths.size());
    std::uint64_t offset = 0;
    for (auto len : lengths) {
        out.leaves.push_back(Leaf{offset, len});
        offset += len;
    }
    return out;
}

inline PackedBuckets pack_buckets(const PointSet& points, const std::vector<std::vector<std::uint32_t>>& buckets) {
    std::vector<std::uint32_t> order;
    std::vector<std::uint64_t> lengths;
    for (const auto& b : buckets) {
        order.insert(order.end(), b.begin(), b.end());
        lengths.push_back(b.size());
    }
    std::vector<bool> seen(points.size(), false);
    for (auto r : order) {
        if (r >= points.size() || seen[r]) throw InvalidInput("bucket rows must assign each point exactly once");
        seen[r] = true;
    }
    return pack_buckets(points, order, lengths);
}

namespace detail {

struct SkeletonNode {
    SplitPlane plane;
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
    std::int32_t child[2] = {-1, -1};
    std::int32_t subtree = -1;  // top-level frontier node finished in subtrees[subtree]
    bool leaf = false;
};

struct Skeleton {
    std::vector<SkeletonNode> nodes;
};

struct PendingNode {
    std::int32_t node = 0;
    std::uint64_t key = 0;
};

/// Chooses a split for rows[begin, end) and partitions them. Returns the
/// plane and the left count, or nothing when every dimension is constant.
class NodeSplitter {
  public:
    NodeSplitter(const PointSet& points, const BuildConfig& cfg) : points_(points), cfg_(cfg) {}

    std::optional<std::pair<SplitPlane, std::size_t>> split(std::span<std::uint32_t> rows, std::uint64_t key,
                                                            WorkerPool* pool) {
        const std::size_t n = rows.size();
        const auto order = order_by_variance(sampled_variances(points_, rows, cfg_.variance_sample, derive_seed(key, 1)));
        for (auto dim : order) {
            gather(rows, dim, pool);
            const auto value = split_value(std::span<const double>(values_), key, dim, pool);
            if (!value) continue;
            SplitPlane plane{dim, *value};
            auto [left, right] = partition_indices(points_, rows, plane, pool);
            if (left.empty() || left.size() == n) throw InvariantViolation("split produced an empty side");
            return std::pair{plane, left.size()};
        }
        return std::nullopt;
    }

  private:
    void gather(std::span<const std::uint32_t> rows, std::uint32_t dim, WorkerPool* pool) {
        const auto col = points_.column(dim);
        values_.resize(rows.size());
        if (pool != nullptr && pool->size() > 1 && rows.size() >= 8192) {
            pool->run_chunks(rows.size(), [&](std::size_t, std::size_t b, std::size_t e) {
                for (std::size_t i = b; i < e; ++i) values_[i] = col[rows[i]];
            });
        } else {
            for (std::size_t i = 0; i < rows.size(); ++i) values_[i] = col[rows[i]];
        }
    }

    // Approximate median first; if it leaves a side empty, the exact median;
    // if that still does, the smallest value above the minimum.
    std::optional<double> split_value(std::span<const double> values, std::uint64_t key, std::uint32_t dim,
                                      WorkerPool* pool) {
        const std::size_t n = values.size();
        auto intervals = build_intervals(sample_values(values, cfg_.local_sample_m, derive_seed(key, 2 + dim)),
                                         cfg_.stride);
        const auto hist = histogram_values(values, intervals, pool);
        const auto b = approximate_median_index(intervals, hist);
        const auto below = count_below_boundary(hist, b);
        if (below > 0 && below < n) return intervals.boundaries[b];

        scratch_.assign(values.begin(), values.end());
        const auto mid = scratch_.begin() + static_cast<std::ptrdiff_t>(n / 2);
        std::nth_element(scratch_.begin(), mid, scratch_.end());
        const double median = *mid;
        const auto below_median = static_cast<std::size_t>(
            std::count_if(values.begin(), values.end(), [&](double v) { return v < median; }));
        if (below_median > 0) return median;

        const double lowest = *std::min_element(values.begin(), values.end());
        std::optional<double> next;
        for (double v : values) {
            if (v > lowest && (!next || v < *next)) next = v;
        }
        return next;
    }

    const PointSet& points_;
    const BuildConfig& cfg_;
    std::vector<double> values_;
    std::vector<double> scratch_;
};

// Depth-first construction of one subtree rooted at rows[begin, end).
inline void build_subtree(Skeleton& sk, std::span<std::uint32_t> rows, std::uint32_t begin, std::uint32_t end,
                          std::uint64_t key, NodeSplitter& splitter, std::size_t bucket_size) {
    sk.nodes.push_back(SkeletonNode{{}, begin, end, {-1, -1}, -1, false});
    std::vector<PendingNode> stack{{0, key}};
    while (!stack.empty()) {
        const auto item = stack.back();
        stack.pop_back();
        auto node = sk.nodes[static_cast<std::size_t>(item.node)];
        const auto range = rows.subspan(node.begin, node.end - node.begin);
        if (range.size() <= bucket_size) {
            sk.nodes[static_cast<std::size_t>(item.node)].leaf = true;
            continue;
        }
        const auto split = splitter.split(range, item.key, nullptr);
        if (!split) {
            sk.nodes[static_cast<std::size_t>(item.node)].leaf = true;
            continue;
        }
        const auto mid = node.begin + static_cast<std::uint32_t>(split->second);
        const auto left = static_cast<std::int32_t>(sk.nodes.size());
        sk.nodes.push_back(SkeletonNode{{}, node.begin, mid, {-1, -1}, -1, false});
        sk.nodes.push_back(SkeletonNode{{}, mid, node.end, {-1, -1}, -1, false});
        auto& parent = sk.nodes[static_cast<std::size_t>(item.node)];
        parent.plane = split->first;
        parent.child[0] = left;
        parent.child[1] = left + 1;
        stack.push_back({left + 1, derive_seed(item.key, 2)});
        stack.push_back({left, derive_seed(item.key, 1)});
    }
}

}  // namespace detail

struct LocalBuildTimings {
    double split_seconds = 0.0;
    double pack_seconds = 0.0;
};

/// Builds the per-rank tree. The result depends only on the points and
/// cfg.seed, not on cfg.workers.
inline LocalTree build_local_tree(const PointSet& points, const BuildConfig& cfg, WorkerPool* shared_pool = nullptr,
                                  LocalBuildTimings* timings = nullptr) {
    cfg.validate();
    Stopwatch clock;
    LocalTree tree;
    if (points.empty()) {
        tree.points = points;
        return tree;
    }
    if (points.size() > UINT32_MAX) throw InvalidInput("local tree supports at most 2^32-1 points per rank");

    std::optional<WorkerPool> own_pool;
    WorkerPool* pool = shared_pool;
    if (pool == nullptr) pool = &own_pool.emplace(cfg.workers);

    auto rows = detail::identity_rows(points.size());
    const std::span<std::uint32_t> all(rows);
    detail::Skeleton top;
    std::vector<detail::Skeleton> subtrees;
    top.nodes.push_back(detail::SkeletonNode{{}, 0, static_cast<std::uint32_t>(rows.size()), {-1, -1}, -1, false});

    // Breadth-first, data-parallel levels.
    detail::NodeSplitter shared_splitter(points, cfg);
    const std::size_t wide_enough = pool->size() * cfg.branch_factor_per_worker;
    std::vector<detail::PendingNode> frontier{{0, derive_seed(cfg.seed, 0x5eed)}};
    while (!frontier.empty() && frontier.size() < wide_enough) {
        std::vector<detail::PendingNode> next;
        for (const auto& item : frontier) {
            const auto node = top.nodes[static_cast<std::size_t>(item.node)];
            const auto range = all.subspan(node.begin, node.end - node.begin);
            if (range.size() <= cfg.bucket_size) {
                top.nodes[static_cast<std::size_t>(item.node)].leaf = true;
                continue;
            }
            const auto split = shared_splitter.split(range, item.key, pool);
            if (!split) {
                top.nodes[static_cast<std::size_t>(item.node)].leaf = true;
                continue;
            }
            const auto mid = node.begin + static_cast<std::uint32_t>(split->second);
            const auto left = static_cast<std::int32_t>(top.nodes.size());
            top.nodes.push_back(detail::SkeletonNode{{}, node.begin, mid, {-1, -1}, -1, false});
            top.nodes.push_back(detail::SkeletonNode{{}, mid, node.end, {-1, -1}, -1, false});
            auto& parent = top.nodes[static_cast<std::size_t>(item.node)];
            parent.plane = split->first;
            parent.child[0] = left;
            parent.child[1] = left + 1;
            next.push_back({left, derive_seed(item.key, 1)});
            next.push_back({left + 1, derive_seed(item.key, 2)});
        }
        frontier = std::move(next);
    }

    // Depth-first, one whole subtree per task.
    subtrees.resize(frontier.size());
    for (std::size_t i = 0; i < frontier.size(); ++i) top.nodes[static_cast<std::size_t>(frontier[i].node)].subtree = static_cast<std::int32_t>(i);
    pool->run(frontier.size(), [&](std::size_t i) {
        const auto& node = top.nodes[static_cast<std::size_t>(frontier[i].node)];
        detail::NodeSplitter splitter(points, cfg);
        detail::build_subtree(subtrees[i], all, node.begin, node.end, frontier[i].key, splitter, cfg.bucket_size);
    });

    // Canonical preorder numbering, then bucket packing.
    struct Visit {
        const detail::Skeleton* sk;
        std::int32_t node;
        std::int64_t parent;
        int side;
        std::uint32_t depth;
    };
    std::vector<Visit> stack{{&top, 0, -1, 0, 0}};
    std::vector<std::uint64_t> lengths;
    while (!stack.empty()) {
        auto v = stack.back();
        stack.pop_back();
        const auto* sn = &v.sk->nodes[static_cast<std::size_t>(v.node)];
        if (sn->subtree >= 0) {
            v.sk = &subtrees[static_cast<std::size_t>(sn->subtree)];
            v.node = 0;
            sn = &v.sk->nodes[0];
        }
        NodeRef ref = 0;
        if (sn->leaf) {
            ref = leaf_ref(lengths.size());
            lengths.push_back(sn->end - sn->begin);
            tree.depth = std::max(tree.depth, v.depth);
        } else {
            ref = static_cast<NodeRef>(tree.nodes.size());
            tree.nodes.push_back(TreeNode{sn->plane, 0, 0, sn->end - sn->begin});
            stack.push_back({v.sk, sn->child[1], ref, 1, v.depth + 1});
            stack.push_back({v.sk, sn->child[0], ref, 0, v.depth + 1});
        }
        if (v.parent < 0) {
            tree.root = ref;
        } else if (v.side == 0) {
            tree.nodes[static_cast<std::size_t>(v.parent)].left = ref;
        } else {
            tree.nodes[static_cast<std::size_t>(v.parent)].right = ref;
        }
    }

    if (timings != nullptr) timings->split_seconds = clock.lap();
    auto packed = pack_buckets(points, rows, lengths);
    if (timings != nullptr) timings->pack_seconds = clock.lap();
    tree.points = std::move(packed.points);
    tree.leaves = std::move(packed.leaves);
    return tree;
}

}  // namespace tierkd
