#pragma once

// Simulated cluster: a replicated global kd-tree of log2(P) levels whose
// leaves assign disjoint regions of space to ranks, built by sampled global
// medians and point redistribution, plus a local tree per rank.
//
// Every rank runs on its own thread and talks to the others only through a
// Transport, so the protocol below is exactly what a networked backend would
// execute.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tierkd/core.hpp"
#include "tierkd/local_tree.hpp"
#include "tierkd/median.hpp"
#include "tierkd/random.hpp"
#include "tierkd/timing.hpp"
#include "tierkd/transport.hpp"

namespace tierkd {

/// A rank group whose points cannot be separated by any axis-aligned plane.
class UnsplittableGroup : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct ClusterConfig {
    std::uint32_t ranks = 1;
    std::size_t global_sample_m = kGlobalSampleSize;
    BuildConfig local;
    /// When set, an unsplittable group sends all of its points to the upper
    /// half instead of failing; the lower-half ranks end up empty.
    bool allow_empty_ranks = false;

    void validate() const {
        if (ranks == 0 || !std::has_single_bit(ranks)) throw InvalidInput("rank count must be a power of two");
        if (global_sample_m == 0) throw InvalidInput("global sample size must be >= 1");
        local.validate();
    }
};

/// Complete binary tree of split planes, replicated on every rank.
/// Heap numbering: node h (1-based) has children 2h and 2h+1; the leaf for
/// rank r is h = P + r, and planes[h - 1] is node h's plane.
struct GlobalTree {
    std::uint32_t ranks = 1;
    std::uint32_t dims = 1;
    std::vector<SplitPlane> planes;

    [[nodiscard]] std::uint32_t levels() const noexcept { return static_cast<std::uint32_t>(std::countr_zero(ranks)); }

    [[nodiscard]] const SplitPlane& plane(std::size_t heap_index) const { return planes[heap_index - 1]; }

    /// Region owned by `rank`: lower bounds inclusive, upper exclusive.
    [[nodiscard]] Box region(RankId rank) const {
        Box box = Box::everything(dims);
        const auto depth = levels();
        std::size_t h = 1;
        for (std::uint32_t level = 0; level < depth; ++level) {
            const auto& p = plane(h);
            const bool right = ((rank >> (depth - 1 - level)) & 1U) != 0;
            if (right) {
                box.lower[p.dim] = std::max(box.lower[p.dim], p.value);
            } else {
                box.upper[p.dim] = std::min(box.upper[p.dim], p.value);
            }
            h = 2 * h + (right ? 1 : 0);
        }
        return box;
    }

    [[nodiscard]] std::vector<Box> regions() const {
        std::vector<Box> out;
        out.reserve(ranks);
        for (RankId r = 0; r < ranks; ++r) out.push_back(region(r));
        return out;
    }

    friend bool operator==(const GlobalTree&, const GlobalTree&) = default;
};

/// Half-open membership test for a rank region (lower <= x < upper).
inline bool region_contains(const Box& region, PointView p) noexcept {
    for (std::size_t d = 0; d < p.size(); ++d) {
        if (!(p[d] >= region.lower[d] && p[d] < region.upper[d])) return false;
    }
    return true;
}

/// Rank whose region contains q; coordinates equal to a plane go right.
inline RankId owner_of(const GlobalTree& gt, PointView q) noexcept {
    std::size_t h = 1;
    for (std::uint32_t level = 0; level < gt.levels(); ++level) {
        const auto& p = gt.plane(h);
        h = 2 * h + (p.goes_left(q[p.dim]) ? 0 : 1);
    }
    return static_cast<RankId>(h - gt.ranks);
}

namespace detail {

inline void ranks_within_rec(const GlobalTree& gt, PointView q, double sq_radius, std::size_t h,
                             std::vector<double>& sq_offsets, RankId owner, std::vector<RankId>& out) {
    if (h >= gt.ranks) {
        const auto rank = static_cast<RankId>(h - gt.ranks);
        if (rank != owner) out.push_back(rank);
        return;
    }
    const auto& p = gt.plane(h);
    const double diff = q[p.dim] - p.value;
    const double far_sq = diff * diff;
    const bool left_is_near = diff < 0.0;
    // near child keeps the current offsets
    const std::size_t near = 2 * h + (left_is_near ? 0 : 1);
    const std::size_t far = 2 * h + (left_is_near ? 1 : 0);
    const std::size_t lo = std::min(near, far);
    auto visit = [&](std::size_t child) {
        if (child == near) {
            ranks_within_rec(gt, q, sq_radius, child, sq_offsets, owner, out);
            return;
        }
        double bound = 0.0;
        for (std::size_t d = 0; d < sq_offsets.size(); ++d) bound += d == p.dim ? far_sq : sq_offsets[d];
        if (!(bound < sq_radius)) return;
        const double saved = sq_offsets[p.dim];
        sq_offsets[p.dim] = far_sq;
        ranks_within_rec(gt, q, sq_radius, child, sq_offsets, owner, out);
        sq_offsets[p.dim] = saved;
    };
    visit(lo);
    visit(lo + 1);
}

}  // namespace detail

/// Ranks other than owner_of(q) whose region lies at squared distance
/// < sq_radius from q, ascending.
inline std::vector<RankId> ranks_within(const GlobalTree& gt, PointView q, double sq_radius) {
    std::vector<RankId> out;
    if (!(sq_radius > 0.0)) return out;
    std::vector<double> sq_offsets(gt.dims, 0.0);
    detail::ranks_within_rec(gt, q, sq_radius, 1, sq_offsets, owner_of(gt, q), out);
    return out;
}

/// Contiguous chunks of `points`, one per rank (input distribution before
/// the global build).
inline std::vector<PointSet> split_into_ranks(const PointSet& points, std::uint32_t ranks) {
    std::vector<PointSet> out;
    out.reserve(ranks);
    const std::size_t n = points.size();
    for (std::uint32_t r = 0; r < ranks; ++r) {
        const std::size_t b = n * r / ranks, e = n * (r + 1) / ranks;
        std::vector<std::uint32_t> rows(e - b);
        std::iota(rows.begin(), rows.end(), static_cast<std::uint32_t>(b));
        out.push_back(points.gather(rows));
    }
    return out;
}

struct RedistributeStats {
    std::uint64_t points_sent = 0;
    std::uint64_t points_received = 0;
};

namespace detail {

struct Transfer {
    RankId from;
    RankId to;
    std::uint64_t first;  // offset into the sender's outgoing list for that half
    std::uint64_t count;
};

// Greedy plan for one half: senders (group rank order) hand their outgoing
// points to receivers with a deficit, filling receivers in rank order.
inline std::vector<Transfer> plan_half(RankGroup group, RankGroup half, const std::vector<std::uint64_t>& side_counts,
                                       std::vector<std::uint64_t>& kept) {
    const std::uint64_t total = std::accumulate(side_counts.begin(), side_counts.end(), std::uint64_t{0});
    std::vector<std::uint64_t> deficit(half.count, 0);
    for (std::uint32_t i = 0; i < half.count; ++i) {
        const std::uint64_t target = total / half.count + (i < total % half.count ? 1 : 0);
        const auto member = half.first + i - group.first;
        kept[member] = std::min(side_counts[member], target);
        deficit[i] = target - kept[member];
    }
    std::vector<Transfer> plan;
    std::uint32_t recv = 0;
    for (RankId s = group.first; s < group.first + group.count; ++s) {
        const auto member = s - group.first;
        const std::uint64_t keep = half.contains(s) ? kept[member] : 0;
        std::uint64_t offset = 0;
        std::uint64_t surplus = side_counts[member] - keep;
        while (surplus > 0) {
            while (recv < half.count && deficit[recv] == 0) ++recv;
            if (recv == half.count) throw InvariantViolation("redistribution plan ran out of receivers");
            const std::uint64_t n = std::min(surplus, deficit[recv]);
            plan.push_back(Transfer{s, half.first + recv, offset, n});
            deficit[recv] -= n;
            surplus -= n;
            offset += n;
        }
    }
    return plan;
}

}  // namespace detail

/// Moves points so the lower half of `group` holds every point with
/// coord[dim] < value and the upper half the rest, balanced exactly within
/// each half. Collective over `group`.
inline PointSet redistribute(Communicator& comm, RankGroup group, const PointSet& local, const SplitPlane& plane,
                             RedistributeStats* stats = nullptr) {
    const std::uint32_t half_size = group.count / 2;
    const RankGroup lower{group.first, half_size};
    const RankGroup upper{group.first + half_size, half_size};

    std::vector<std::uint32_t> left_rows, right_rows;
    const auto col = local.column(plane.dim);
    for (std::uint32_t i = 0; i < local.size(); ++i) (plane.goes_left(col[i]) ? left_rows : right_rows).push_back(i);

    ByteWriter w;
    w.u64(left_rows.size());
    w.u64(right_rows.size());
    const auto gathered = comm.all_gather(group, w.view());
    std::vector<std::uint64_t> left_counts(group.count), right_counts(group.count);
    for (std::uint32_t i = 0; i < group.count; ++i) {
        ByteReader r(gathered[i]);
        left_counts[i] = r.u64();
        right_counts[i] = r.u64();
    }

    std::vector<std::uint64_t> kept_left(group.count, 0), kept_right(group.count, 0);
    const auto plan_left = detail::plan_half(group, lower, left_counts, kept_left);
    const auto plan_right = detail::plan_half(group, upper, right_counts, kept_right);

    const RankId me = comm.rank();
    const auto member = me - group.first;
    const bool in_lower = lower.contains(me);
    const auto& own_rows = in_lower ? left_rows : right_rows;
    const std::uint64_t keep = in_lower ? kept_left[member] : kept_right[member];

    // Outgoing list for a half: rows beyond the kept prefix (own half) or
    // every row on that side (other half).
    auto outgoing = [&](bool lower_half) -> std::span<const std::uint32_t> {
        const auto& rows = lower_half ? left_rows : right_rows;
        const std::uint64_t skip = (lower_half == in_lower) ? keep : 0;
        return std::span<const std::uint32_t>(rows).subspan(skip);
    };

    // One message per (sender, receiver) pair, built in plan order.
    std::vector<std::vector<std::uint32_t>> to_send(group.count);
    for (bool lower_half : {true, false}) {
        const auto out = outgoing(lower_half);
        for (const auto& t : lower_half ? plan_left : plan_right) {
            if (t.from != me) continue;
            auto& dst = to_send[t.to - group.first];
            dst.insert(dst.end(), out.begin() + static_cast<std::ptrdiff_t>(t.first),
                       out.begin() + static_cast<std::ptrdiff_t>(t.first + t.count));
        }
    }
    std::uint64_t sent = 0;
    for (std::uint32_t i = 0; i < group.count; ++i) {
        if (to_send[i].empty()) continue;
        ByteWriter pw;
        write_point_block(pw, local, to_send[i]);
        comm.send(group.first + i, MessageKind::kPoints, pw.view());
        sent += to_send[i].size();
    }

    PointSet result(local.dims());
    result.reserve(own_rows.size() + 16);
    for (std::uint64_t i = 0; i < keep; ++i) result.append_row(local, own_rows[i]);

    std::vector<RankId> senders;
    for (const auto& t : in_lower ? plan_left : plan_right) {
        if (t.to == me && (senders.empty() || senders.back() != t.from)) senders.push_back(t.from);
    }
    std::uint64_t received = 0;
    for (auto s : senders) {
        const auto msg = comm.receive(s, MessageKind::kPoints);
        ByteReader r(msg.payload);
        const auto block = read_point_block(r);
        r.expect_done("point block");
        if (block.dims() != local.dims()) throw DecodeError("point block dimensionality mismatch");
        for (std::size_t i = 0; i < block.size(); ++i) result.append_row(block, i);
        received += block.size();
    }
    if (stats != nullptr) {
        stats->points_sent += sent;
        stats->points_received += received;
    }
    return result;
}

namespace detail {

inline double local_min(std::span<const double> values) {
    double m = kInfinity;
    for (double v : values) m = std::min(m, v);
    return m;
}

inline double gather_min(Communicator& comm, RankGroup group, double mine) {
    ByteWriter w;
    w.f64(mine);
    double out = kInfinity;
    for (const auto& b : comm.all_gather(group, w.view())) {
        ByteReader r(b);
        out = std::min(out, r.f64());
    }
    return out;
}

}  // namespace detail

/// Sample-variance split dimensions for a group, descending (ties by
/// index). Collective: every member returns the same order.
inline std::vector<std::uint32_t> global_dimension_order(Communicator& comm, RankGroup group, const PointSet& local,
                                                         std::size_t sample, std::uint64_t key) {
    const auto picks = sample_indices(local.size(), sample, derive_seed(key, 0x100 + comm.rank()));
    std::vector<std::uint32_t> rows(picks.begin(), picks.end());
    ByteWriter w;
    write_point_block(w, local, rows);
    PointSet pooled(local.dims());
    for (const auto& b : comm.all_gather(group, w.view())) {
        ByteReader r(b);
        const auto block = read_point_block(r);
        for (std::size_t i = 0; i < block.size(); ++i) pooled.append_row(block, i);
    }
    if (pooled.empty()) {
        std::vector<std::uint32_t> order(local.dims());
        std::iota(order.begin(), order.end(), 0U);
        return order;
    }
    const auto all = detail::identity_rows(pooled.size());
    return detail::order_by_variance(detail::sampled_variances(pooled, all, pooled.size(), 0));
}

inline std::uint32_t choose_global_split_dimension(Communicator& comm, RankGroup group, const PointSet& local,
                                                   std::size_t sample, std::uint64_t key) {
    return global_dimension_order(comm, group, local, sample, key).front();
}

/// Agrees on a split plane for `group` (collective). Each member samples m
/// values along the chosen dimension; the pooled samples are the histogram
/// boundaries, member histograms are summed and the boundary nearest the
/// 50% mark is the split.
inline std::optional<SplitPlane> agree_global_split(Communicator& comm, RankGroup group, const PointSet& local,
                                                    const ClusterConfig& cfg, std::uint64_t key) {
    const auto order = global_dimension_order(comm, group, local, cfg.global_sample_m, key);
    const auto total_vec = comm.sum_reduce(group, std::vector<std::uint64_t>{local.size()});
    const std::uint64_t total = total_vec[0];
    if (total == 0) return std::nullopt;

    for (auto dim : order) {
        const auto values = local.column(dim);
        const auto mine = sample_values(values, cfg.global_sample_m, derive_seed(derive_seed(key, 0x200 + dim), comm.rank()));
        ByteWriter w;
        w.u64(mine.size());
        w.array(std::span<const double>(mine));
        std::vector<double> pooled;
        for (const auto& b : comm.all_gather(group, w.view())) {
            ByteReader r(b);
            const auto n = r.u64();
            const auto start = pooled.size();
            pooled.resize(start + n);
            r.array(std::span<double>(pooled).subspan(start));
        }
        const auto intervals = build_intervals(std::move(pooled), cfg.local.stride);
        const auto local_hist = histogram_values(values, intervals);
        const Histogram global{comm.sum_reduce(group, local_hist.counts)};
        const auto b = approximate_median_index(intervals, global);
        const auto below = count_below_boundary(global, b);
        if (below > 0 && below < total) return SplitPlane{dim, intervals.boundaries[b]};

        // The sampled median sits on the minimum: split just above it instead.
        const double lowest = detail::gather_min(comm, group, detail::local_min(values));
        double above = kInfinity;
        for (double v : values) {
            if (v > lowest) above = std::min(above, v);
        }
        const double next = detail::gather_min(comm, group, above);
        if (next < kInfinity) return SplitPlane{dim, next};
    }
    return std::nullopt;
}

struct ConstructTimings {
    double global_seconds = 0.0;
    double redistribute_seconds = 0.0;
    double local_seconds = 0.0;
    double pack_seconds = 0.0;

    ConstructTimings& max_with(const ConstructTimings& o) noexcept {
        global_seconds = std::max(global_seconds, o.global_seconds);
        redistribute_seconds = std::max(redistribute_seconds, o.redistribute_seconds);
        local_seconds = std::max(local_seconds, o.local_seconds);
        pack_seconds = std::max(pack_seconds, o.pack_seconds);
        return *this;
    }
};

struct RankState {
    RankId rank = 0;
    LocalTree tree;
    GlobalTree global;
    Box region;

    [[nodiscard]] const PointSet& points() const noexcept { return tree.points; }
};

namespace detail {

// Per-rank body of the global build. Returns the replicated tree and the
// rank's final points.
inline std::pair<GlobalTree, PointSet> rank_global_build(Communicator& comm, PointSet local, std::size_t dims,
                                                         const ClusterConfig& cfg, ConstructTimings& timings,
                                                         RedistributeStats& moved) {
    const std::uint32_t P = comm.size();
    const auto levels = static_cast<std::uint32_t>(std::countr_zero(P));
    const RankId me = comm.rank();
    GlobalTree gt{P, static_cast<std::uint32_t>(dims), std::vector<SplitPlane>(P - 1)};
    std::vector<std::pair<std::uint32_t, SplitPlane>> known;

    for (std::uint32_t level = 0; level < levels; ++level) {
        const std::uint32_t size = P >> level;
        const RankGroup group{me & ~(size - 1), size};
        const auto h = static_cast<std::uint32_t>((1U << level) + (me >> (levels - level)));
        Stopwatch clock;
        auto plane = agree_global_split(comm, group, local, cfg, derive_seed(cfg.local.seed, 0x6000 + h));
        if (!plane) {
            const std::uint64_t total = comm.sum_reduce(group, std::vector<std::uint64_t>{local.size()})[0];
            if (!cfg.allow_empty_ranks) {
                std::ostringstream msg;
                msg << "unsplittable rank group [" << group.first << ", " << group.first + group.count << ") with "
                    << total << " point(s): every coordinate is identical";
                throw UnsplittableGroup(msg.str());
            }
            // Everything goes right: value = shared coordinate (or 0 when empty).
            const double lowest = detail::gather_min(comm, group, detail::local_min(local.column(0)));
            plane = SplitPlane{0, lowest < kInfinity ? lowest : 0.0};
        }
        timings.global_seconds += clock.lap();
        local = redistribute(comm, group, local, *plane, &moved);
        timings.redistribute_seconds += clock.lap();
        if (me == group.first) known.emplace_back(h, *plane);
    }

    // Replicate: every group leader contributes the planes it agreed on.
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(known.size()));
    for (const auto& [h, p] : known) {
        w.u32(h);
        w.u32(p.dim);
        w.f64(p.value);
    }
    std::vector<bool> filled(gt.planes.size(), false);
    for (const auto& b : comm.all_gather(comm.world(), w.view())) {
        ByteReader r(b);
        const auto n = r.u32();
        for (std::uint32_t i = 0; i < n; ++i) {
            const auto h = r.u32();
            SplitPlane p{r.u32(), 0.0};
            p.value = r.f64();
            if (h == 0 || h > gt.planes.size()) throw DecodeError("global plane index out of range");
            if (filled[h - 1] && !(gt.planes[h - 1] == p)) throw InvariantViolation("ranks disagree on a global plane");
            gt.planes[h - 1] = p;
            filled[h - 1] = true;
        }
    }
    if (std::find(filled.begin(), filled.end(), false) != filled.end())
        throw InvariantViolation("global tree has unassigned planes");
    return {std::move(gt), std::move(local)};
}

inline std::size_t common_dims(const std::vector<PointSet>& inputs) {
    if (inputs.empty()) throw InvalidInput("no rank inputs");
    const auto dims = inputs.front().dims();
    if (dims == 0) throw InvalidInput("rank inputs need at least one dimension");
    for (const auto& p : inputs) {
        if (p.dims() != dims) throw InvalidInput("rank inputs disagree on dimensionality");
    }
    return dims;
}

}  // namespace detail

struct GlobalBuild {
    GlobalTree tree;
    std::vector<PointSet> points;  // per rank, after redistribution
    std::uint64_t points_moved = 0;
};

/// Builds the global tree over `inputs` (one PointSet per rank) and returns
/// the redistributed per-rank points.
inline GlobalBuild build_global_tree(Transport& transport, std::vector<PointSet> inputs, const ClusterConfig& cfg) {
    cfg.validate();
    if (inputs.size() != transport.rank_count() || inputs.size() != cfg.ranks)
        throw InvalidInput("need exactly one input point set per rank");
    const auto dims = detail::common_dims(inputs);
    std::size_t total = 0;
    for (const auto& p : inputs) total += p.size();
    if (total == 0) throw InvalidInput("empty dataset");

    GlobalBuild out;
    out.points.resize(inputs.size());
    std::vector<GlobalTree> trees(inputs.size());
    std::vector<RedistributeStats> moved(inputs.size());
    run_on_ranks(transport, [&](Communicator& comm) {
        ConstructTimings t;
        auto [gt, pts] = detail::rank_global_build(comm, std::move(inputs[comm.rank()]), dims, cfg, t, moved[comm.rank()]);
        trees[comm.rank()] = std::move(gt);
        out.points[comm.rank()] = std::move(pts);
    });
    for (const auto& t : trees) {
        if (!(t == trees.front())) throw InvariantViolation("global tree copies differ between ranks");
    }
    out.tree = std::move(trees.front());
    for (const auto& m : moved) out.points_moved += m.points_sent;
    return out;
}

struct Cluster {
    GlobalTree global;
    std::vector<RankState> ranks;
    ConstructTimings timings;  // per phase, slowest rank
    std::uint64_t points_moved = 0;

    [[nodiscard]] std::size_t total_points() const noexcept {
        std::size_t n = 0;
        for (const auto& r : ranks) n += r.tree.size();
        return n;
    }
    [[nodiscard]] std::size_t dims() const noexcept { return global.dims; }
};

/// Global build, redistribution and local tree construction on every rank.
inline Cluster build_cluster(Transport& transport, std::vector<PointSet> inputs, const ClusterConfig& cfg) {
    cfg.validate();
    if (inputs.size() != transport.rank_count() || inputs.size() != cfg.ranks)
        throw InvalidInput("need exactly one input point set per rank");
    const auto dims = detail::common_dims(inputs);
    std::size_t total = 0;
    for (const auto& p : inputs) total += p.size();
    if (total == 0) throw InvalidInput("empty dataset");

    Cluster cluster;
    cluster.ranks.resize(inputs.size());
    std::vector<ConstructTimings> timings(inputs.size());
    std::vector<RedistributeStats> moved(inputs.size());
    run_on_ranks(transport, [&](Communicator& comm) {
        const RankId me = comm.rank();
        auto& t = timings[me];
        auto [gt, pts] = detail::rank_global_build(comm, std::move(inputs[me]), dims, cfg, t, moved[me]);
        LocalBuildTimings lt;
        auto tree = build_local_tree(pts, cfg.local, nullptr, &lt);
        t.local_seconds = lt.split_seconds;
        t.pack_seconds = lt.pack_seconds;
        auto& state = cluster.ranks[me];
        state.rank = me;
        state.region = gt.region(me);
        state.global = std::move(gt);
        state.tree = std::move(tree);
    });
    cluster.global = cluster.ranks.front().global;
    for (const auto& r : cluster.ranks) {
        if (!(r.global == cluster.global)) throw InvariantViolation("global tree copies differ between ranks");
    }
    for (const auto& t : timings) cluster.timings.max_with(t);
    for (const auto& m : moved) cluster.points_moved += m.points_sent;
    return cluster;
}

inline Cluster build_cluster(const PointSet& dataset, const ClusterConfig& cfg) {
    cfg.validate();
    InMemoryTransport transport(cfg.ranks);
    return build_cluster(transport, split_into_ranks(dataset, cfg.ranks), cfg);
}

}  // namespace tierkd
