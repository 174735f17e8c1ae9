#include <gtest/gtest.h>

#include <algorithm>
#include <vector>

#include "test_util.hpp"
#include "tierkd/cluster.hpp"
#include "tierkd/harness.hpp"

using namespace tierkd;
using tierkd::testutil::cluster_points;
using tierkd::testutil::random_points;
using tierkd::testutil::rows_by_id;

namespace {

ClusterConfig cluster_config(std::uint32_t ranks, std::uint64_t seed = 1) {
    ClusterConfig c;
    c.ranks = ranks;
    c.local.seed = seed;
    return c;
}

// Random global tree whose planes stay inside their parent's region.
GlobalTree random_global_tree(std::uint32_t ranks, std::uint32_t dims, Rng& rng) {
    GlobalTree gt{ranks, dims, std::vector<SplitPlane>(ranks - 1)};
    struct Item {
        std::size_t h;
        std::vector<double> lo, hi;
    };
    std::vector<Item> stack{{1, std::vector<double>(dims, 0.0), std::vector<double>(dims, 1.0)}};
    while (!stack.empty()) {
        auto it = stack.back();
        stack.pop_back();
        if (it.h >= ranks) continue;
        const auto dim = static_cast<std::uint32_t>(rng.below(dims));
        const double value = rng.uniform(it.lo[dim], it.hi[dim]);
        gt.planes[it.h - 1] = SplitPlane{dim, value};
        auto left = it, right = it;
        left.h = 2 * it.h;
        left.hi[dim] = value;
        right.h = 2 * it.h + 1;
        right.lo[dim] = value;
        stack.push_back(left);
        stack.push_back(right);
    }
    return gt;
}

std::vector<RankId> ranks_within_oracle(const GlobalTree& gt, const std::vector<double>& q, double r) {
    std::vector<RankId> out;
    const auto owner = owner_of(gt, q);
    for (RankId rank = 0; rank < gt.ranks; ++rank) {
        if (rank != owner && min_sq_dist_to_region(q, gt.region(rank)) < r) out.push_back(rank);
    }
    return out;
}

void expect_region_soundness(const Cluster& c) {
    for (const auto& r : c.ranks) {
        for (std::size_t i = 0; i < r.points().size(); ++i) {
            const auto p = r.points().row(i);
            ASSERT_TRUE(region_contains(r.region, p));
            ASSERT_EQ(min_sq_dist_to_region(p, r.region), 0.0);
            ASSERT_EQ(owner_of(c.global, p), r.rank);
        }
    }
}

}  // namespace

TEST(OwnerOf, SingleRankOwnsEverything) {
    const GlobalTree gt{1, 2, {}};
    EXPECT_EQ(owner_of(gt, std::vector<double>{1e9, -3}), 0u);
}

TEST(OwnerOf, TieGoesToUpperRank) {
    const GlobalTree gt{2, 2, {SplitPlane{0, 5.0}}};
    EXPECT_EQ(owner_of(gt, std::vector<double>{5.0, 0.0}), 1u);
    EXPECT_EQ(owner_of(gt, std::vector<double>{4.999, 0.0}), 0u);
}

TEST(OwnerOf, RegionContainsQuery) {
    Rng rng(4);
    for (int t = 0; t < 50; ++t) {
        const auto gt = random_global_tree(8, 3, rng);
        for (int i = 0; i < 200; ++i) {
            const auto q = testutil::random_query(3, rng, -0.2, 1.2);
            const auto owner = owner_of(gt, q);
            EXPECT_EQ(min_sq_dist_to_region(q, gt.region(owner)), 0.0);
            EXPECT_TRUE(region_contains(gt.region(owner), q));
        }
    }
}

TEST(GlobalTreeRegions, DisjointAndCovering) {
    Rng rng(8);
    const auto gt = random_global_tree(16, 2, rng);
    for (int i = 0; i < 5000; ++i) {
        const auto q = testutil::random_query(2, rng, -0.5, 1.5);
        int containing = 0;
        for (const auto& box : gt.regions()) containing += region_contains(box, q) ? 1 : 0;
        EXPECT_EQ(containing, 1);
    }
}

TEST(RanksWithin, ZeroAndInfiniteRadius) {
    Rng rng(2);
    const auto gt = random_global_tree(8, 3, rng);
    const std::vector<double> q{0.3, 0.6, 0.1};
    EXPECT_TRUE(ranks_within(gt, q, 0.0).empty());
    const auto all = ranks_within(gt, q, kInfinity);
    EXPECT_EQ(all.size(), 7u);
    EXPECT_EQ(std::count(all.begin(), all.end(), owner_of(gt, q)), 0);
}

TEST(RanksWithin, MatchesPerRegionOracle) {
    Rng rng(3);
    for (std::uint32_t ranks : {1u, 2u, 4u, 8u, 16u, 32u}) {
        for (int t = 0; t < 20; ++t) {
            const std::uint32_t dims = 1 + static_cast<std::uint32_t>(rng.below(4));
            const auto gt = random_global_tree(ranks, dims, rng);
            for (int i = 0; i < 200; ++i) {
                const auto q = testutil::random_query(dims, rng, -0.3, 1.3);
                double r = rng.uniform(0, 0.3);
                r *= r;
                if (i % 4 == 0) {
                    // radius exactly equal to a region distance: that region is excluded
                    r = min_sq_dist_to_region(q, gt.region(static_cast<RankId>(rng.below(ranks))));
                }
                ASSERT_EQ(ranks_within(gt, q, r), ranks_within_oracle(gt, q, r));
            }
        }
    }
}

TEST(ChooseGlobalSplitDimension, AgreesAcrossRanks) {
    struct Case {
        PointSet data;
        std::uint32_t expected;
    };
    Rng rng(5);
    PointSet aniso(3);
    for (PointId i = 0; i < 4000; ++i)
        aniso.push_back(i, std::vector<double>{rng.uniform(), rng.uniform(0, 100), rng.uniform()});
    PointSet same(3);
    for (PointId i = 0; i < 400; ++i) same.push_back(i, std::vector<double>{2, 2, 2});
    std::vector<Case> cases{{aniso, 1}, {same, 0}, {random_points(1000, 1, 2), 0}};
    for (const auto& c : cases) {
        InMemoryTransport t(4);
        const auto parts = split_into_ranks(c.data, 4);
        std::vector<std::uint32_t> got(4);
        run_on_ranks(t, [&](Communicator& comm) {
            got[comm.rank()] = choose_global_split_dimension(comm, comm.world(), parts[comm.rank()], 256, 9);
        });
        for (auto g : got) EXPECT_EQ(g, c.expected);
    }
}

TEST(Redistribute, AlreadySeparatedDataMovesNothing) {
    InMemoryTransport t(2);
    PointSet low(1), high(1);
    for (PointId i = 0; i < 100; ++i) {
        low.push_back(i, std::vector<double>{static_cast<double>(i)});
        high.push_back(1000 + i, std::vector<double>{500.0 + static_cast<double>(i)});
    }
    std::vector<PointSet> in{low, high}, out(2);
    std::vector<RedistributeStats> stats(2);
    run_on_ranks(t, [&](Communicator& comm) {
        out[comm.rank()] = redistribute(comm, comm.world(), in[comm.rank()], SplitPlane{0, 250.0}, &stats[comm.rank()]);
    });
    EXPECT_EQ(stats[0].points_sent + stats[1].points_sent, 0u);
    EXPECT_EQ(out[0], low);
    EXPECT_EQ(out[1], high);
}

TEST(Redistribute, AllPointsOnOneRankHalfMove) {
    InMemoryTransport t(2);
    const auto p = random_points(10000, 2, 6);
    std::vector<PointSet> in{p, PointSet(2)}, out(2);
    std::vector<RedistributeStats> stats(2);
    run_on_ranks(t, [&](Communicator& comm) {
        out[comm.rank()] = redistribute(comm, comm.world(), in[comm.rank()], SplitPlane{0, 0.5}, &stats[comm.rank()]);
    });
    const auto moved = stats[0].points_sent;
    EXPECT_EQ(moved, out[1].size());
    EXPECT_NEAR(static_cast<double>(moved), 5000.0, 300.0);
    EXPECT_EQ(stats[1].points_received, moved);
    auto merged = testutil::concat({&out[0], &out[1]}, 2);
    EXPECT_EQ(rows_by_id(merged), rows_by_id(p));
}

TEST(Redistribute, BalancesExactlyWithinEachHalf) {
    InMemoryTransport t(4);
    // skewed: rank 0 holds most points
    const auto p = random_points(10001, 2, 7);
    std::vector<PointSet> in(4, PointSet(2));
    for (std::size_t i = 0; i < p.size(); ++i) in[i % 10 == 0 ? 1 + i % 3 : 0].append_row(p, i);
    std::vector<PointSet> out(4);
    const SplitPlane plane{1, 0.3};
    run_on_ranks(t, [&](Communicator& comm) {
        out[comm.rank()] = redistribute(comm, comm.world(), in[comm.rank()], plane);
    });
    for (RankId r = 0; r < 4; ++r) {
        for (std::size_t i = 0; i < out[r].size(); ++i) EXPECT_EQ(plane.goes_left(out[r].coord(i, 1)), r < 2);
    }
    EXPECT_LE(std::max(out[0].size(), out[1].size()) - std::min(out[0].size(), out[1].size()), 1u);
    EXPECT_LE(std::max(out[2].size(), out[3].size()) - std::min(out[2].size(), out[3].size()), 1u);
    EXPECT_EQ(rows_by_id(testutil::concat({&out[0], &out[1], &out[2], &out[3]}, 2)), rows_by_id(p));
}

TEST(BuildGlobalTree, SingleRankLeavesPointsUntouched) {
    const auto p = random_points(500, 3, 1);
    InMemoryTransport t(1);
    const auto g = build_global_tree(t, {p}, cluster_config(1));
    EXPECT_EQ(g.tree.levels(), 0u);
    EXPECT_TRUE(g.tree.planes.empty());
    EXPECT_EQ(g.points[0], p);
    EXPECT_EQ(g.points_moved, 0u);
}

TEST(BuildGlobalTree, TwoRanksSplitNearMedian) {
    int pass = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto p = random_points(20000, 1, 500 + seed);
        InMemoryTransport t(2);
        const auto g = build_global_tree(t, split_into_ranks(p, 2), cluster_config(2, seed));
        ASSERT_EQ(g.tree.planes.size(), 1u);
        const double frac = static_cast<double>(g.points[0].size()) / static_cast<double>(p.size());
        if (std::abs(g.tree.planes[0].value - 0.5) <= 0.05 && frac >= 0.4 && frac <= 0.6) ++pass;
    }
    EXPECT_GE(pass, 99);
}

TEST(BuildCluster, ConservationAndRegionSoundnessAtEightRanks) {
    const auto p = generate_dataset(DatasetKind::kUniform, 1000000, 3, 8);
    const auto c = build_cluster(p, cluster_config(8));
    ASSERT_EQ(c.ranks.size(), 8u);
    EXPECT_EQ(rows_by_id(cluster_points(c)), rows_by_id(p));
    expect_region_soundness(c);
    for (const auto& r : c.ranks) EXPECT_EQ(r.global, c.global);
}

TEST(BuildCluster, SkewedInputIsBalancedAcrossRanks) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = generate_dataset(DatasetKind::kGaussianClusters, 80000, 3, seed);
        // every point starts on rank 0
        std::vector<PointSet> in(8, PointSet(3));
        in[0] = p;
        InMemoryTransport t(8);
        const auto c = build_cluster(t, in, cluster_config(8, seed));
        for (const auto& r : c.ranks) EXPECT_NEAR(static_cast<double>(r.points().size()), 10000.0, 1000.0);
        EXPECT_EQ(rows_by_id(cluster_points(c)), rows_by_id(p));
    }
}

TEST(BuildCluster, DuplicateHeavyDataStaysSound) {
    for (std::uint32_t ranks : {2u, 4u, 8u}) {
        const auto p = generate_dataset(DatasetKind::kDuplicateHeavy, 5000, 2, ranks);
        const auto c = build_cluster(p, cluster_config(ranks));
        EXPECT_EQ(rows_by_id(cluster_points(c)), rows_by_id(p));
        expect_region_soundness(c);
    }
}

TEST(BuildCluster, DeterministicAcrossRunsAndWorkerCounts) {
    const auto p = generate_dataset(DatasetKind::kGaussianClusters, 50000, 3, 4);
    auto cfg = cluster_config(4, 3);
    const auto a = build_cluster(p, cfg);
    cfg.local.workers = 3;
    const auto b = build_cluster(p, cfg);
    EXPECT_EQ(a.global, b.global);
    for (std::size_t r = 0; r < 4; ++r) EXPECT_TRUE(a.ranks[r].tree == b.ranks[r].tree);
}

TEST(BuildCluster, ConfigurationErrors) {
    const auto p = random_points(100, 2, 1);
    EXPECT_THROW(build_cluster(p, cluster_config(3)), InvalidInput);
    EXPECT_THROW(build_cluster(p, cluster_config(0)), InvalidInput);
    EXPECT_THROW(build_cluster(PointSet(2), cluster_config(2)), InvalidInput);
}

TEST(BuildCluster, UnsplittableGroupIsReported) {
    PointSet same(2);
    for (PointId i = 0; i < 64; ++i) same.push_back(i, std::vector<double>{1.0, 2.0});
    try {
        build_cluster(same, cluster_config(2));
        FAIL() << "expected UnsplittableGroup";
    } catch (const UnsplittableGroup& e) {
        EXPECT_NE(std::string(e.what()).find("64 point(s)"), std::string::npos);
    }
    auto cfg = cluster_config(4);
    cfg.allow_empty_ranks = true;
    const auto c = build_cluster(same, cfg);
    EXPECT_EQ(c.total_points(), 64u);
    expect_region_soundness(c);
    EXPECT_EQ(c.ranks[3].points().size(), 64u);
}

TEST(BuildCluster, TinyInputsWithEmptyRanksAllowed) {
    auto cfg = cluster_config(4);
    cfg.allow_empty_ranks = true;
    for (std::size_t n = 1; n <= 6; ++n) {
        const auto p = random_points(n, 2, n);
        const auto c = build_cluster(p, cfg);
        EXPECT_EQ(rows_by_id(cluster_points(c)), rows_by_id(p));
        expect_region_soundness(c);
    }
}
