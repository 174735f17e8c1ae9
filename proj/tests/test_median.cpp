#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <vector>

#include "tierkd/median.hpp"
#include "tierkd/random.hpp"

using namespace tierkd;

namespace {

std::vector<double> uniform_values(std::size_t n, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Rng rng(seed);
    std::vector<double> out(n);
    for (auto& x : out) x = rng.uniform(lo, hi);
    return out;
}

std::size_t binary_search_bin(const std::vector<double>& boundaries, double v) {
    return static_cast<std::size_t>(std::upper_bound(boundaries.begin(), boundaries.end(), v) - boundaries.begin());
}

double exact_median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

}  // namespace

TEST(SampleValues, FewerValuesThanSamples) {
    const std::vector<double> values{7.0};
    EXPECT_EQ(sample_values(values, 256, 0), std::vector<double>{7.0});
}

TEST(SampleValues, EmptyInputGivesEmptySample) {
    EXPECT_TRUE(sample_values(std::vector<double>{}, 10, 0).empty());
}

TEST(SampleValues, DefaultSampleSizes) {
    EXPECT_EQ(kGlobalSampleSize, 256u);
    EXPECT_EQ(kLocalSampleSize, 1024u);
    EXPECT_EQ(kDefaultStride, 32u);
}

TEST(SampleValues, DeterministicWithoutReplacement) {
    std::vector<double> values(5000);
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<double>(i);
    const auto a = sample_values(values, 1024, 42);
    EXPECT_EQ(a, sample_values(values, 1024, 42));
    EXPECT_NE(a, sample_values(values, 1024, 43));
    ASSERT_EQ(a.size(), 1024u);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
}

TEST(SampleValues, SampleMedianNearHalfForUniformData) {
    int pass = 0;
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        const auto values = uniform_values(10000, 1000 + seed);
        const double med = exact_median(sample_values(values, 1024, seed));
        if (std::abs(med - 0.5) <= 0.05) ++pass;
    }
    EXPECT_GE(pass, 99);
}

TEST(BuildIntervals, SortsAndDedupes) {
    const auto iv = build_intervals({3, 1, 2, 2});
    EXPECT_EQ(iv.boundaries, (std::vector<double>{1, 2, 3}));
}

TEST(BuildIntervals, StrideIndexHoldsEvery32nd) {
    std::vector<double> s(256);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<double>(255 - i);
    const auto iv = build_intervals(s);
    EXPECT_EQ(iv.boundaries.size(), 256u);
    ASSERT_EQ(iv.stride_index.size(), 8u);
    for (std::size_t j = 0; j < iv.stride_index.size(); ++j) EXPECT_EQ(iv.stride_index[j], iv.boundaries[32 * j]);
}

TEST(BuildIntervals, EmptySamples) {
    const auto iv = build_intervals({});
    EXPECT_TRUE(iv.empty());
    EXPECT_TRUE(iv.stride_index.empty());
}

TEST(LocateBin, Examples) {
    const auto iv = build_intervals({1, 2, 3});
    EXPECT_EQ(locate_bin(iv, 0.5), 0u);
    EXPECT_EQ(locate_bin(iv, 3.5), 3u);
    EXPECT_EQ(locate_bin(iv, 2.0), 2u);
}

TEST(LocateBin, MatchesBinarySearchExhaustivelyOnSmallSets) {
    for (std::size_t size = 1; size <= 100; ++size) {
        std::vector<double> s(size);
        for (std::size_t i = 0; i < size; ++i) s[i] = static_cast<double>(2 * i);
        const auto iv = build_intervals(s);
        for (double v = -1.5; v <= 2.0 * static_cast<double>(size) + 1.0; v += 0.5) {
            ASSERT_EQ(locate_bin(iv, v), binary_search_bin(iv.boundaries, v)) << "size " << size << " v " << v;
        }
    }
}

TEST(LocateBin, MatchesBinarySearchOnRandomProbes) {
    Rng rng(5);
    const auto iv = build_intervals(uniform_values(256, 9));
    for (int i = 0; i < 100000; ++i) {
        const double v = i % 10 == 0 ? iv.boundaries[rng.below(iv.boundaries.size())] : rng.uniform(-0.1, 1.1);
        ASSERT_EQ(locate_bin(iv, v), binary_search_bin(iv.boundaries, v));
    }
}

TEST(LocateBin, OtherStridesAgree) {
    Rng rng(6);
    for (std::size_t stride : {1u, 2u, 7u, 64u}) {
        const auto iv = build_intervals(uniform_values(300, stride), stride);
        for (int i = 0; i < 5000; ++i) {
            const double v = rng.uniform(-0.1, 1.1);
            ASSERT_EQ(locate_bin(iv, v), binary_search_bin(iv.boundaries, v));
        }
    }
}

TEST(HistogramValues, Examples) {
    const auto iv = build_intervals({1, 2, 3});
    EXPECT_EQ(histogram_values(std::vector<double>{0.5, 1.5, 2.5}, iv).counts,
              (std::vector<std::uint64_t>{1, 1, 1, 0}));
    EXPECT_EQ(histogram_values(std::vector<double>{1, 2, 3}, iv).counts, (std::vector<std::uint64_t>{0, 1, 1, 1}));
}

TEST(HistogramValues, ConservesCount) {
    const auto values = uniform_values(1000000, 3);
    auto samples = sample_values(values, 256, 4);
    samples.pop_back();
    const auto iv = build_intervals(samples);
    EXPECT_EQ(iv.boundaries.size(), 255u);
    EXPECT_EQ(histogram_values(values, iv).total(), 1000000u);
}

TEST(HistogramValues, InvariantUnderPermutationAndWorkerCount) {
    auto values = uniform_values(50000, 8);
    const auto iv = build_intervals(sample_values(values, 256, 1));
    const auto reference = histogram_values(values, iv);
    std::mt19937_64 g(1);
    for (std::size_t workers : {1u, 2u, 3u, 8u}) {
        std::shuffle(values.begin(), values.end(), g);
        WorkerPool pool(workers);
        EXPECT_EQ(histogram_values(values, iv, &pool).counts, reference.counts) << workers;
    }
}

TEST(ApproximateMedian, Examples) {
    {
        const auto iv = build_intervals({1, 2, 3});
        Histogram h{{0, 5, 5, 0}};
        EXPECT_EQ(approximate_median(iv, h), 2.0);
    }
    {
        const auto iv = build_intervals({4.2});
        Histogram h{{3, 7}};
        EXPECT_EQ(approximate_median(iv, h), 4.2);
    }
}

TEST(ApproximateMedian, TiesGoToLowerBoundary) {
    // below(1)=2 and below(2)=6 out of 8: both 2 away from 4.
    const auto iv = build_intervals({1, 2});
    Histogram h{{2, 4, 2}};
    EXPECT_EQ(approximate_median(iv, h), 1.0);
}

TEST(ApproximateMedian, EmptyHistogramIsDegenerate) {
    const auto iv = build_intervals({1, 2});
    Histogram h{{0, 0, 0}};
    EXPECT_THROW(approximate_median(iv, h), DegenerateSplit);
}

TEST(ApproximateMedian, SymmetricDataAroundTen) {
    int pass = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        std::vector<double> values;
        for (int i = 0; i < 20000; ++i) {
            const double x = rng.normal();
            values.push_back(10.0 + x);
            values.push_back(10.0 - x);
        }
        const auto iv = build_intervals(sample_values(values, kLocalSampleSize, seed));
        const double med = approximate_median(iv, histogram_values(values, iv));
        if (std::abs(med - exact_median(values)) <= 0.1 && std::abs(med - 10.0) <= 0.1) ++pass;
    }
    EXPECT_GE(pass, 99);
}

TEST(ApproximateMedian, SplitRankWithinFortySixtyPercent) {
    for (std::size_t m : {kGlobalSampleSize, kLocalSampleSize}) {
        int pass = 0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            const auto values = uniform_values(100000, 77 + seed);
            const auto iv = build_intervals(sample_values(values, m, seed));
            const auto h = histogram_values(values, iv);
            const double med = approximate_median(iv, h);
            const auto rank = std::count_if(values.begin(), values.end(), [&](double x) { return x < med; });
            const double frac = static_cast<double>(rank) / static_cast<double>(values.size());
            if (frac >= 0.40 && frac <= 0.60) ++pass;
        }
        EXPECT_GE(pass, 99) << "m=" << m;
    }
}

TEST(ApproximateMedian, DeterministicAcrossWorkerCounts) {
    const auto values = uniform_values(40000, 2);
    const auto iv = build_intervals(sample_values(values, 1024, 17));
    const double reference = approximate_median(iv, histogram_values(values, iv));
    for (std::size_t w : {2u, 4u}) {
        WorkerPool pool(w);
        EXPECT_EQ(approximate_median(iv, histogram_values(values, iv, &pool)), reference);
    }
}

TEST(CountBelowBoundary, SumsBinsUpToBoundary) {
    Histogram h{{1, 2, 3, 4}};
    EXPECT_EQ(count_below_boundary(h, 0), 1u);
    EXPECT_EQ(count_below_boundary(h, 2), 6u);
}
