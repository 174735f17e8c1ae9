#pragma once

// Exact k-nearest-neighbor search over one LocalTree.
//
// Iterative traversal with an explicit stack and a bounded max-heap. Each
// stack entry carries a lower bound on the squared distance from the query to
// its subtree; a subtree is skipped once that bound can no longer beat the
// current k-th distance. The nearer child is pushed last so it is searched
// first.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "tierkd/core.hpp"
#include "tierkd/local_tree.hpp"

namespace tierkd {

struct VisitStats {
    std::uint64_t nodes_visited = 0;
    std::uint64_t buckets_scanned = 0;
    std::uint64_t points_compared = 0;

    VisitStats& operator+=(const VisitStats& o) noexcept {
        nodes_visited += o.nodes_visited;
        buckets_scanned += o.buckets_scanned;
        points_compared += o.points_compared;
        return *this;
    }
};

/// Traversal observer that does nothing; the default for `find_knn`.
struct NullObserver {
    void on_visit(NodeRef, double /*bound*/, double /*r_prime*/) noexcept {}
    void on_prune(NodeRef, double /*bound*/, double /*r_prime*/) noexcept {}
    void on_bucket(std::size_t /*leaf*/, double /*r_prime_after*/) noexcept {}
};

struct CountingObserver {
    VisitStats* stats;
    const LocalTree* tree;

    void on_visit(NodeRef, double, double) noexcept { ++stats->nodes_visited; }
    void on_prune(NodeRef, double, double) noexcept {}
    void on_bucket(std::size_t leaf, double) noexcept {
        ++stats->buckets_scanned;
        stats->points_compared += tree->leaves[leaf].length;
    }
};

/// Reusable search state (stack, offset slots, heap, distance buffer).
/// One instance per thread; `search` may be called any number of times.
class KnnSearcher {
  public:
    template <class Observer = NullObserver>
    KnnResult search(const LocalTree& tree, PointView q, std::size_t k, double sq_radius = kInfinity,
                     RankId rank = 0, Observer&& observer = Observer{}) {
        if (k == 0) throw InvalidInput("k must be >= 1");
        KnnResult result;
        if (tree.empty()) return result;
        if (q.size() != tree.dims()) throw InvalidInput("query dimensionality does not match tree");

        const std::size_t dims = tree.dims();
        const std::size_t slots = static_cast<std::size_t>(tree.depth) + 2;
        stack_.clear();
        stack_.reserve(slots);
        offsets_.assign(slots * dims, 0.0);
        heap_.clear();
        heap_.reserve(k);

        stack_.push_back(Frame{tree.root, 0.0});
        while (!stack_.empty()) {
            const std::size_t slot = stack_.size() - 1;
            const Frame frame = stack_.back();
            stack_.pop_back();

            const bool full = heap_.size() == k;
            const double r_prime = full ? heap_.front().sq_dist : sq_radius;
            if (frame.bound >= sq_radius || (full && frame.bound > r_prime)) {
                observer.on_prune(frame.node, frame.bound, r_prime);
                continue;
            }
            observer.on_visit(frame.node, frame.bound, r_prime);

            if (is_leaf_ref(frame.node)) {
                scan_bucket(tree, leaf_index(frame.node), q, k, sq_radius, rank);
                observer.on_bucket(leaf_index(frame.node),
                                   heap_.size() == k ? heap_.front().sq_dist : sq_radius);
                continue;
            }

            const TreeNode& node = tree.nodes[static_cast<std::size_t>(frame.node)];
            const double diff = q[node.plane.dim] - node.plane.value;
            const NodeRef near = diff < 0.0 ? node.left : node.right;
            const NodeRef far = diff < 0.0 ? node.right : node.left;

            // Far child: replace this dimension's offset and re-sum in
            // dimension order, which keeps the bound <= any computed distance.
            double* base = offsets_.data() + slot * dims;
            const double far_sq = diff * diff;
            double far_bound = 0.0;
            for (std::size_t d = 0; d < dims; ++d) far_bound += d == node.plane.dim ? far_sq : base[d];

            const bool still_full = heap_.size() == k;
            const double limit = still_full ? heap_.front().sq_dist : sq_radius;
            if (far_bound < sq_radius && !(still_full && far_bound > limit)) {
                std::copy_n(base, dims, base + dims);
                base[node.plane.dim] = far_sq;
                stack_.push_back(Frame{far, far_bound});
            } else {
                observer.on_prune(far, far_bound, limit);
            }
            stack_.push_back(Frame{near, frame.bound});
        }

        result.neighbors = std::move(heap_);
        heap_ = {};
        result.finalize(k);
        return result;
    }

  private:
    struct Frame {
        NodeRef node;
        double bound;
    };

    void scan_bucket(const LocalTree& tree, std::size_t leaf_idx, PointView q, std::size_t k, double sq_radius,
                     RankId rank) {
        const Leaf& leaf = tree.leaves[leaf_idx];
        const auto len = static_cast<std::size_t>(leaf.length);
        dist_.assign(len, 0.0);
        for (std::size_t d = 0; d < q.size(); ++d) {
            const double* col = tree.points.column(d).data() + leaf.offset;
            const double qd = q[d];
            double* out = dist_.data();
            for (std::size_t j = 0; j < len; ++j) {
                const double diff = qd - col[j];
                out[j] += diff * diff;
            }
        }
        const auto ids = tree.points.ids().subspan(leaf.offset, len);
        for (std::size_t j = 0; j < len; ++j) {
            const double d = dist_[j];
            if (!(d < sq_radius)) continue;
            const Neighbor candidate{d, ids[j], rank};
            if (heap_.size() < k) {
                heap_.push_back(candidate);
                std::push_heap(heap_.begin(), heap_.end(), neighbor_less);
            } else if (neighbor_less(candidate, heap_.front())) {
                std::pop_heap(heap_.begin(), heap_.end(), neighbor_less);
                heap_.back() = candidate;
                std::push_heap(heap_.begin(), heap_.end(), neighbor_less);
            }
        }
    }

    std::vector<Frame> stack_;
    std::vector<double> offsets_;
    std::vector<Neighbor> heap_;
    std::vector<double> dist_;
};

/// The k nearest points of `tree` to `q` with squared distance < sq_radius.
inline KnnResult find_knn(const LocalTree& tree, PointView q, std::size_t k, double sq_radius = kInfinity,
                          RankId rank = 0) {
    KnnSearcher searcher;
    return searcher.search(tree, q, k, sq_radius, rank);
}

/// Same traversal as `find_knn`, returning traversal counters.
inline VisitStats count_visited(const LocalTree& tree, PointView q, std::size_t k, double sq_radius = kInfinity) {
    VisitStats stats;
    KnnSearcher searcher;
    searcher.search(tree, q, k, sq_radius, 0, CountingObserver{&stats, &tree});
    return stats;
}

}  // namespace tierkd
