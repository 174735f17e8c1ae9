#include <gtest/gtest.h>

#include <algorithm>
#include <vector>

#include "test_util.hpp"
#include "tierkd/harness.hpp"
#include "tierkd/local_query.hpp"
#include "tierkd/local_tree.hpp"

using namespace tierkd;
using tierkd::testutil::as_pairs;
using tierkd::testutil::naive_knn;
using tierkd::testutil::random_points;
using tierkd::testutil::random_query;

namespace {

LocalTree build(const PointSet& p, std::size_t bucket = 32, std::uint64_t seed = 1) {
    BuildConfig c;
    c.bucket_size = bucket;
    c.seed = seed;
    return build_local_tree(p, c);
}

// Leaves are stored in preorder, so a subtree covers one contiguous row range.
std::pair<std::uint64_t, std::uint64_t> subtree_rows(const LocalTree& t, NodeRef ref) {
    NodeRef lo = ref, hi = ref;
    while (!is_leaf_ref(lo)) lo = t.nodes[static_cast<std::size_t>(lo)].left;
    while (!is_leaf_ref(hi)) hi = t.nodes[static_cast<std::size_t>(hi)].right;
    const auto& a = t.leaves[leaf_index(lo)];
    const auto& b = t.leaves[leaf_index(hi)];
    return {a.offset, b.offset + b.length};
}

double subtree_min_distance(const LocalTree& t, NodeRef ref, const std::vector<double>& q) {
    const auto [b, e] = subtree_rows(t, ref);
    double best = kInfinity;
    for (auto i = b; i < e; ++i) best = std::min(best, squared_distance(q, t.points.row(i)));
    return best;
}

struct RecordingObserver {
    const LocalTree* tree;
    const std::vector<double>* q;
    std::vector<double> r_after_bucket;
    std::vector<std::size_t> buckets;
    std::size_t bound_violations = 0;
    std::size_t prune_violations = 0;

    void on_visit(NodeRef ref, double bound, double) {
        if (bound > subtree_min_distance(*tree, ref, *q)) ++bound_violations;
    }
    void on_prune(NodeRef ref, double bound, double r_prime) {
        const double m = subtree_min_distance(*tree, ref, *q);
        if (bound > m) ++bound_violations;
        if (m < r_prime) ++prune_violations;
    }
    void on_bucket(std::size_t leaf, double r_prime) {
        buckets.push_back(leaf);
        r_after_bucket.push_back(r_prime);
    }
};

std::size_t containing_leaf(const LocalTree& t, const std::vector<double>& q) {
    NodeRef ref = t.root;
    while (!is_leaf_ref(ref)) {
        const auto& n = t.nodes[static_cast<std::size_t>(ref)];
        ref = n.plane.goes_left(q[n.plane.dim]) ? n.left : n.right;
    }
    return leaf_index(ref);
}

}  // namespace

TEST(FindKnn, SinglePointTree) {
    PointSet p(2);
    p.push_back(7, std::vector<double>{1, 1});
    const auto t = build(p);
    const std::vector<double> q{4, 5};
    const auto r = find_knn(t, q, 1);
    ASSERT_EQ(r.neighbors.size(), 1u);
    EXPECT_EQ(r.neighbors[0].point_id, 7u);
    EXPECT_EQ(r.neighbors[0].sq_dist, 25.0);
    EXPECT_EQ(r.r_prime, 25.0);
}

TEST(FindKnn, QueryOnExistingPointTiesById) {
    PointSet p(2);
    p.push_back(9, std::vector<double>{0.5, 0.5});
    p.push_back(3, std::vector<double>{0.5, 0.5});
    p.push_back(4, std::vector<double>{0.1, 0.5});
    const auto r = find_knn(build(p, 1), std::vector<double>{0.5, 0.5}, 1);
    ASSERT_EQ(r.neighbors.size(), 1u);
    EXPECT_EQ(r.neighbors[0].point_id, 3u);
    EXPECT_EQ(r.neighbors[0].sq_dist, 0.0);
}

TEST(FindKnn, ContractViolations) {
    const auto t = build(random_points(10, 2, 1));
    EXPECT_THROW(find_knn(t, std::vector<double>{0, 0}, 0), InvalidInput);
    EXPECT_THROW(find_knn(t, std::vector<double>{0, 0, 0}, 1), InvalidInput);
    EXPECT_TRUE(find_knn(build(PointSet(2)), std::vector<double>{0, 0}, 3).neighbors.empty());
}

TEST(FindKnn, MatchesOracleOnUniformWorkload) {
    const auto p = random_points(100000, 3, 2024);
    const auto t = build(p);
    Rng rng(99);
    KnnSearcher searcher;
    for (int i = 0; i < 1000; ++i) {
        const auto q = random_query(3, rng);
        const auto got = searcher.search(t, q, 5);
        ASSERT_EQ(as_pairs(got), naive_knn(p, q, 5)) << "query " << i;
        EXPECT_EQ(got.r_prime, got.neighbors.back().sq_dist);
    }
}

TEST(FindKnn, RadiusFiltersStrictly) {
    const auto p = random_points(100000, 3, 7);
    const auto t = build(p);
    Rng rng(5);
    std::size_t underfull = 0;
    for (int i = 0; i < 2000; ++i) {
        // the smaller radius holds fewer than k points on average
        const double r = i < 1000 ? 0.05 * 0.05 : 0.01 * 0.01;
        const auto q = random_query(3, rng);
        const auto got = find_knn(t, q, 5, r);
        const auto want = naive_knn(p, q, 5, r);
        ASSERT_EQ(as_pairs(got), want);
        for (const auto& n : got.neighbors) EXPECT_LT(n.sq_dist, r);
        if (got.neighbors.size() < 5) {
            ++underfull;
            EXPECT_EQ(got.r_prime, kInfinity);
        }
    }
    EXPECT_GT(underfull, 0u);
    // a point at exactly distance r is excluded
    PointSet line(1);
    line.push_back(0, std::vector<double>{0.0});
    line.push_back(1, std::vector<double>{2.0});
    const auto res = find_knn(build(line), std::vector<double>{0.0}, 2, 4.0);
    ASSERT_EQ(res.neighbors.size(), 1u);
    EXPECT_EQ(res.neighbors[0].point_id, 0u);
}

TEST(FindKnn, ExhaustiveSmallTreesIncludingTiesAndDuplicates) {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const std::size_t dims = 1 + seed % 4;
        const std::size_t n = 1 + (seed * 37) % 400;
        const auto p = seed % 2 == 0 ? tierkd::testutil::lattice_points(n, dims, seed, 3) : random_points(n, dims, seed);
        for (std::size_t bucket : {1u, 3u, 32u}) {
            const auto t = build(p, bucket, seed);
            Rng rng(seed + 100);
            for (int i = 0; i < 40; ++i) {
                std::vector<double> q = i % 2 == 0 ? p.row(rng.below(n)) : random_query(dims, rng, -0.5, 3.5);
                for (std::size_t k : {std::size_t{1}, std::size_t{3}, n, n + 2}) {
                    ASSERT_EQ(as_pairs(find_knn(t, q, k)), naive_knn(p, q, k))
                        << "seed " << seed << " bucket " << bucket << " k " << k;
                }
            }
        }
    }
}

TEST(FindKnn, RepeatedSplitDimensionKeepsBoundExact) {
    // 1D data splits dimension 0 on every level, the case where summed plane
    // offsets would overestimate the bound.
    PointSet p(2);
    Rng rng(8);
    for (PointId i = 0; i < 5000; ++i) p.push_back(i, std::vector<double>{rng.uniform(0, 1000), rng.uniform(0, 0.001)});
    const auto t = build(p, 4);
    for (int i = 0; i < 500; ++i) {
        const std::vector<double> q{rng.uniform(-50, 1050), rng.uniform(-1, 1)};
        ASSERT_EQ(as_pairs(find_knn(t, q, 7)), naive_knn(p, q, 7));
    }
}

TEST(FindKnn, BoundsAreSoundAndRPrimeMonotone) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto p = seed % 2 ? random_points(1500, 3, seed) : tierkd::testutil::lattice_points(1500, 2, seed, 6);
        const auto t = build(p, 8, seed);
        Rng rng(seed);
        for (int i = 0; i < 30; ++i) {
            const auto q = random_query(p.dims(), rng, -1, 6);
            RecordingObserver obs{&t, &q, {}, {}, 0, 0};
            KnnSearcher searcher;
            searcher.search(t, q, 1 + rng.below(10), kInfinity, 0, obs);
            EXPECT_EQ(obs.bound_violations, 0u);
            EXPECT_EQ(obs.prune_violations, 0u);
            EXPECT_TRUE(std::is_sorted(obs.r_after_bucket.rbegin(), obs.r_after_bucket.rend()));
        }
    }
}

TEST(FindKnn, NearChildIsSearchedFirst) {
    const auto p = random_points(20000, 3, 31);
    const auto t = build(p);
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const auto q = random_query(3, rng);
        RecordingObserver obs{&t, &q, {}, {}, 0, 0};
        KnnSearcher searcher;
        searcher.search(t, q, 1, kInfinity, 0, obs);
        ASSERT_FALSE(obs.buckets.empty());
        EXPECT_EQ(obs.buckets.front(), containing_leaf(t, q));
    }
}

TEST(FindKnn, RankIsStampedOnNeighbors) {
    const auto p = random_points(100, 2, 3);
    const auto r = find_knn(build(p), std::vector<double>{0.5, 0.5}, 4, kInfinity, 6);
    for (const auto& n : r.neighbors) EXPECT_EQ(n.rank, 6u);
}

TEST(CountVisited, SingleLeafTree) {
    const auto p = random_points(10, 2, 3);
    const auto s = count_visited(build(p), std::vector<double>{0.5, 0.5}, 1);
    EXPECT_EQ(s.nodes_visited, 1u);
    EXPECT_EQ(s.buckets_scanned, 1u);
    EXPECT_EQ(s.points_compared, 10u);
}

TEST(CountVisited, KEqualsNScansEveryBucket) {
    const auto p = random_points(3000, 3, 4);
    const auto t = build(p);
    const auto s = count_visited(t, std::vector<double>{0.5, 0.5, 0.5}, p.size());
    EXPECT_EQ(s.buckets_scanned, t.leaves.size());
    EXPECT_EQ(s.points_compared, p.size());
    EXPECT_EQ(s.nodes_visited, t.nodes.size() + t.leaves.size());
}

TEST(CountVisited, FewBucketsOnMillionPoints) {
    const auto p = generate_dataset(DatasetKind::kUniform, 1000000, 3, 3);
    const auto t = build(p);
    Rng rng(2);
    std::uint64_t scanned = 0;
    const int queries = 200;
    for (int i = 0; i < queries; ++i) scanned += count_visited(t, random_query(3, rng), 5).buckets_scanned;
    const double mean = static_cast<double>(scanned) / queries;
    EXPECT_LT(mean, 0.01 * static_cast<double>(t.leaves.size()));
}
