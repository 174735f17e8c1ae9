#pragma once

// Command-line front end: gen, build, query, verify, bench.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or configuration
// error, 3 I/O or data error.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tierkd/cluster.hpp"
#include "tierkd/dist_query.hpp"
#include "tierkd/harness.hpp"
#include "tierkd/io.hpp"
#include "tierkd/local_query.hpp"
#include "tierkd/timing.hpp"

namespace tierkd::cli {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kUsage = 2, kDataError = 3 };

struct RunConfig {
    std::uint32_t ranks = 1;
    std::size_t workers = 1;
    std::size_t k = 5;
    std::size_t bucket_size = 32;
    std::size_t global_sample = kGlobalSampleSize;
    std::size_t local_sample = kLocalSampleSize;
    std::size_t batch_size = kDefaultBatchSize;
    std::uint64_t seed = 1;
    double query_fraction = 0.10;
    std::string queries;
    std::string input;
    std::string output;
    std::string bundle;
    std::string format;  // empty: guess from extension
    std::string report = "text";
    bool allow_empty_ranks = false;
    bool no_pipeline = false;

    // gen
    std::string kind = "uniform";
    std::size_t n = 100000;
    std::size_t dims = 3;

    // bench
    std::vector<std::size_t> sweep_workers;
    std::vector<std::uint32_t> sweep_ranks;
    std::vector<std::size_t> sweep_buckets;
    std::size_t repeats = 5;

    [[nodiscard]] ClusterConfig cluster() const {
        ClusterConfig c;
        c.ranks = ranks;
        c.global_sample_m = global_sample;
        c.allow_empty_ranks = allow_empty_ranks;
        c.local.bucket_size = bucket_size;
        c.local.local_sample_m = local_sample;
        c.local.seed = seed;
        c.local.workers = workers;
        return c;
    }
};

class UsageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline DataFormat format_for(const RunConfig& cfg, const std::string& path) {
    if (cfg.format.empty()) return guess_format(path);
    if (cfg.format == "csv") return DataFormat::kCsv;
    if (cfg.format == "pkd1") return DataFormat::kPkd1;
    throw UsageError("unknown --format " + cfg.format);
}

/// All points of a cluster, ordered by id.
inline PointSet gather_points(const Cluster& cluster) {
    PointSet all(cluster.dims());
    for (const auto& r : cluster.ranks) {
        for (std::size_t i = 0; i < r.points().size(); ++i) all.append_row(r.points(), i);
    }
    return all;
}

inline PointSet sorted_by_id(const PointSet& points) {
    std::vector<std::uint32_t> order(points.size());
    std::iota(order.begin(), order.end(), 0U);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return points.id(a) < points.id(b); });
    return points.gather(order);
}

/// Queries from --queries, or a --query-fraction sample of `dataset` (taken
/// in id order so a dataset and its bundle give the same queries). Query ids
/// are the point ids.
inline QueryBatch load_queries(const RunConfig& cfg, const PointSet& dataset) {
    QueryBatch batch;
    batch.k = cfg.k;
    batch.batch_size = cfg.batch_size;
    if (!cfg.queries.empty()) {
        const auto qs = load_dataset(cfg.queries, format_for(cfg, cfg.queries)).points;
        for (std::size_t i = 0; i < qs.size(); ++i) batch.queries.push_back(Query{qs.id(i), qs.row(i)});
        return batch;
    }
    if (cfg.query_fraction < 0.0 || cfg.query_fraction > 1.0) throw UsageError("--query-fraction must be in [0, 1]");
    const auto sorted = sorted_by_id(dataset);
    const auto m = static_cast<std::uint64_t>(std::llround(cfg.query_fraction * static_cast<double>(sorted.size())));
    for (auto i : sample_indices(sorted.size(), m, derive_seed(cfg.seed, 0x9e7)))
        batch.queries.push_back(Query{sorted.id(i), sorted.row(i)});
    return batch;
}

inline BenchReport construct_report(const Cluster& cluster, const RunConfig& cfg, double wall) {
    BenchReport rep;
    rep.env("ranks", cluster.ranks.size());
    rep.env("workers", static_cast<double>(cfg.workers));
    rep.env("n", static_cast<double>(cluster.total_points()));
    rep.env("dims", cluster.dims());
    rep.env("bucket_size", static_cast<double>(cfg.bucket_size));
    rep.env("seed", static_cast<double>(cfg.seed));
    rep.phase("construct.global", cluster.timings.global_seconds);
    rep.phase("construct.redistribute", cluster.timings.redistribute_seconds);
    rep.phase("construct.local", cluster.timings.local_seconds);
    rep.phase("construct.pack", cluster.timings.pack_seconds);
    rep.counter("construct.wall_seconds", wall);
    rep.counter("points_moved", static_cast<double>(cluster.points_moved));
    std::uint32_t depth = 0;
    std::size_t leaves = 0, min_pts = SIZE_MAX, max_pts = 0;
    for (const auto& r : cluster.ranks) {
        depth = std::max(depth, r.tree.depth);
        leaves += r.tree.leaves.size();
        min_pts = std::min(min_pts, r.tree.size());
        max_pts = std::max(max_pts, r.tree.size());
    }
    rep.counter("max_local_depth", depth);
    rep.counter("leaves", static_cast<double>(leaves));
    rep.counter("min_rank_points", static_cast<double>(min_pts));
    rep.counter("max_rank_points", static_cast<double>(max_pts));
    return rep;
}

inline BenchReport query_report(const QueryRun& run, const QueryBatch& batch) {
    BenchReport rep;
    const auto& s = run.stats;
    rep.env("k", static_cast<double>(batch.k));
    rep.env("batch_size", static_cast<double>(batch.batch_size));
    rep.phase("query.find_owner", s.timings.find_owner);
    rep.phase("query.local_knn", s.timings.local_knn);
    rep.phase("query.remote_identify", s.timings.remote_identify);
    rep.phase("query.remote_knn", s.timings.remote_knn);
    rep.phase("query.merge", s.timings.merge);
    rep.phase("query.comm", s.timings.communication);
    rep.counter("query.cpu.find_owner", s.cpu_timings.find_owner);
    rep.counter("query.cpu.local_knn", s.cpu_timings.local_knn);
    rep.counter("query.cpu.remote_identify", s.cpu_timings.remote_identify);
    rep.counter("query.cpu.remote_knn", s.cpu_timings.remote_knn);
    rep.counter("query.cpu.merge", s.cpu_timings.merge);
    rep.counter("query.cpu.comm", s.cpu_timings.communication);
    rep.counter("query.wall_seconds", s.wall_seconds);
    rep.counter("queries", static_cast<double>(s.queries));
    rep.counter("failed_queries", static_cast<double>(s.failed_queries));
    rep.counter("requests_sent", static_cast<double>(s.requests_sent));
    rep.counter("requests_received", static_cast<double>(s.requests_received));
    rep.counter("forwarded_percent", 100.0 * s.forwarded_fraction());
    return rep;
}

inline void emit(const BenchReport& rep, const RunConfig& cfg, std::ostream& out,
                 const nlohmann::json& tags = nlohmann::json::object()) {
    if (cfg.report == "records") {
        rep.write_records(out, tags);
    } else {
        rep.write_text(out);
    }
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline Dataset require_dataset(const RunConfig& cfg) {
    if (cfg.input.empty()) throw UsageError("--input is required");
    auto data = load_dataset(cfg.input, format_for(cfg, cfg.input));
    if (data.points.empty()) throw DecodeError("empty dataset");
    return data;
}

inline Cluster build_from(const PointSet& points, const RunConfig& cfg) {
    const auto cc = cfg.cluster();
    InMemoryTransport transport(cc.ranks);
    return build_cluster(transport, split_into_ranks(points, cc.ranks), cc);
}

inline QueryRun query_cluster(const Cluster& cluster, const QueryBatch& batch, const RunConfig& cfg) {
    InMemoryTransport transport(static_cast<std::uint32_t>(cluster.ranks.size()));
    return run_queries(transport, cluster, batch, QueryOptions{!cfg.no_pipeline, false, cfg.workers});
}

inline int cmd_gen(const RunConfig& cfg, std::ostream& out) {
    const auto kind = parse_dataset_kind(cfg.kind);
    if (!kind) throw UsageError("unknown --kind " + cfg.kind);
    if (cfg.output.empty()) throw UsageError("--output is required");
    const auto points = generate_dataset(*kind, cfg.n, cfg.dims, cfg.seed);
    save_dataset(cfg.output, points, cfg.seed, format_for(cfg, cfg.output));
    out << "wrote " << points.size() << " " << cfg.kind << " points in " << cfg.dims << "D to " << cfg.output << '\n';
    return kOk;
}

inline int cmd_build(const RunConfig& cfg, std::ostream& out) {
    if (cfg.output.empty()) throw UsageError("--output is required");
    const auto data = require_dataset(cfg);
    Stopwatch clock;
    const auto cluster = build_from(data.points, cfg);
    const double wall = clock.seconds();
    write_file(cfg.output, encode_bundle(cluster, cfg.seed, cfg.bucket_size));
    if (cfg.report == "text") out << "built " << cluster.ranks.size() << "-rank bundle " << cfg.output << '\n';
    emit(construct_report(cluster, cfg, wall), cfg, out);
    return kOk;
}

inline int cmd_query(const RunConfig& cfg, std::ostream& out) {
    const std::string bundle_path = !cfg.bundle.empty() ? cfg.bundle : cfg.input;
    if (bundle_path.empty()) throw UsageError("--input (tree bundle) is required");
    const auto bundle = decode_bundle(read_file(bundle_path));
    const auto batch = load_queries(cfg, gather_points(bundle.cluster));
    for (const auto& q : batch.queries) {
        if (q.point.size() != bundle.cluster.dims())
            throw DecodeError("query dimensionality " + std::to_string(q.point.size()) + " does not match bundle (" +
                              std::to_string(bundle.cluster.dims()) + ")");
    }
    const auto run = query_cluster(bundle.cluster, batch, cfg);
    const auto text = encode_results(run.results);
    if (!cfg.output.empty()) {
        write_file(cfg.output, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    }
    if (cfg.report == "text") out << "answered " << batch.queries.size() << " queries, k=" << batch.k << '\n';
    emit(query_report(run, batch), cfg, out);
    return kOk;
}

inline int cmd_verify(const RunConfig& cfg, std::ostream& out) {
    Cluster cluster;
    PointSet all;
    if (!cfg.bundle.empty()) {
        cluster = decode_bundle(read_file(cfg.bundle)).cluster;
        all = gather_points(cluster);
        if (all.empty()) throw DecodeError("empty dataset");
    } else {
        all = require_dataset(cfg).points;
        cluster = build_from(all, cfg);
    }
    const auto batch = load_queries(cfg, all);
    const auto run = query_cluster(cluster, batch, cfg);
    std::vector<KnnResult> engine, oracle;
    std::size_t failed = 0;
    for (std::size_t i = 0; i < batch.queries.size(); ++i) {
        const auto& q = batch.queries[i];
        if (!run.results[i].ok()) {
            ++failed;
            out << "query " << q.query_id << " failed: " << run.results[i].error << '\n';
            continue;
        }
        engine.push_back(run.results[i].result);
        oracle.push_back(brute_force_knn(all, q.point, batch.k, kInfinity, q.query_id));
    }
    const auto report = verify_run(engine, oracle);
    out << "verified " << report.compared << " queries against brute force: " << report.mismatched
        << " mismatches\n";
    if (report.first) {
        out << "first mismatch: query " << report.first->query_id << ": " << report.first->detail << '\n';
    }
    return report.passed() && failed == 0 ? kOk : kVerifyFailed;
}

inline int cmd_bench(const RunConfig& cfg, std::ostream& out) {
    PointSet points;
    if (!cfg.input.empty()) {
        points = require_dataset(cfg).points;
    } else {
        const auto kind = parse_dataset_kind(cfg.kind);
        if (!kind) throw UsageError("unknown --kind " + cfg.kind);
        points = generate_dataset(*kind, cfg.n, cfg.dims, cfg.seed);
        if (points.empty()) throw DecodeError("empty dataset");
    }
    const auto workers = cfg.sweep_workers.empty() ? std::vector<std::size_t>{cfg.workers} : cfg.sweep_workers;
    const auto ranks = cfg.sweep_ranks.empty() ? std::vector<std::uint32_t>{cfg.ranks} : cfg.sweep_ranks;
    const auto buckets = cfg.sweep_buckets.empty() ? std::vector<std::size_t>{cfg.bucket_size} : cfg.sweep_buckets;
    const auto repeats = std::max<std::size_t>(1, cfg.repeats);

    for (auto w : workers) {
        for (auto p : ranks) {
            for (auto b : buckets) {
                RunConfig cell = cfg;
                cell.workers = w;
                cell.ranks = p;
                cell.bucket_size = b;
                const auto batch = load_queries(cell, points);
                std::vector<double> construct, query;
                std::optional<Cluster> cluster;
                std::optional<QueryRun> run;
                for (std::size_t rep = 0; rep < repeats; ++rep) {
                    Stopwatch clock;
                    cluster = build_from(points, cell);
                    construct.push_back(clock.lap());
                    run = query_cluster(*cluster, batch, cell);
                    query.push_back(clock.lap());
                }
                VisitStats visits;
                for (const auto& q : batch.queries) {
                    const auto& owner = cluster->ranks[owner_of(cluster->global, q.point)];
                    visits += count_visited(owner.tree, q.point, batch.k);
                }
                auto rep = construct_report(*cluster, cell, median_of(construct));
                rep.append(query_report(*run, batch));
                rep.counter("construct.median_seconds", median_of(construct));
                rep.counter("query.median_seconds", median_of(query));
                const double nq = std::max<double>(1.0, static_cast<double>(batch.queries.size()));
                rep.counter("query.throughput_qps", static_cast<double>(batch.queries.size()) / median_of(query));
                rep.counter("local.points_compared_per_query", static_cast<double>(visits.points_compared) / nq);
                rep.counter("local.buckets_scanned_per_query", static_cast<double>(visits.buckets_scanned) / nq);
                rep.counter("result_hash", static_cast<double>(fnv1a(encode_results(run->results)) >> 11));
                const nlohmann::json tags = {{"workers", w}, {"ranks", p}, {"bucket_size", b}};
                if (cfg.report == "text") out << "cell workers=" << w << " ranks=" << p << " bucket_size=" << b << '\n';
                emit(rep, cfg, out, tags);
            }
        }
    }
    return kOk;
}

/// Parses `args` (argv[0] included) and runs the selected command.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Two-tier distributed kd-tree k-nearest-neighbor engine"};
    app.set_config("--config", "", "flat key=value configuration file (flags override it)");
    app.require_subcommand(1);
    app.fallthrough();

    RunConfig cfg;
    app.add_option("--ranks", cfg.ranks, "simulated ranks (power of two)");
    app.add_option("--workers", cfg.workers, "worker threads per rank");
    app.add_option("--k", cfg.k, "neighbors per query")->check(CLI::PositiveNumber);
    app.add_option("--bucket-size", cfg.bucket_size, "maximum points per leaf bucket")->check(CLI::PositiveNumber);
    app.add_option("--global-sample", cfg.global_sample, "samples per rank for global splits")->check(CLI::PositiveNumber);
    app.add_option("--local-sample", cfg.local_sample, "samples per node for local splits")->check(CLI::PositiveNumber);
    app.add_option("--batch-size", cfg.batch_size, "queries per pipeline slice")->check(CLI::PositiveNumber);
    app.add_option("--seed", cfg.seed, "random seed");
    app.add_option("--queries", cfg.queries, "query points file (pkd1 or csv)");
    app.add_option("--query-fraction", cfg.query_fraction, "fraction of dataset points used as queries");
    app.add_option("--input", cfg.input, "dataset (build/verify/bench) or tree bundle (query)");
    app.add_option("--output", cfg.output, "output file");
    app.add_option("--bundle", cfg.bundle, "tree bundle to load instead of building");
    app.add_option("--format", cfg.format, "data file format")->check(CLI::IsMember({"pkd1", "csv"}));
    app.add_option("--report", cfg.report, "report style")->check(CLI::IsMember({"text", "records"}));
    app.add_flag("--allow-empty-ranks", cfg.allow_empty_ranks, "let unsplittable rank groups leave ranks empty");
    app.add_flag("--no-pipeline", cfg.no_pipeline, "run query slices without overlap");
    app.add_option("--kind", cfg.kind, "generator: uniform | gaussian-clusters | duplicate-heavy | anisotropic");
    app.add_option("--n", cfg.n, "generator: point count");
    app.add_option("--dims", cfg.dims, "generator: dimensions")->check(CLI::PositiveNumber);
    app.add_option("--sweep-workers", cfg.sweep_workers, "bench: worker counts")->delimiter(',');
    app.add_option("--sweep-ranks", cfg.sweep_ranks, "bench: rank counts")->delimiter(',');
    app.add_option("--sweep-buckets", cfg.sweep_buckets, "bench: bucket sizes")->delimiter(',');
    app.add_option("--repeats", cfg.repeats, "bench: repetitions per cell (median reported)");

    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
    auto* build = app.add_subcommand("build", "build global and local trees and write a tree bundle");
    auto* query = app.add_subcommand("query", "answer k-NN queries from a tree bundle");
    auto* verify = app.add_subcommand("verify", "run the full pipeline and compare against brute force");
    auto* bench = app.add_subcommand("bench", "sweep workers, ranks and bucket sizes and report timings");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kUsage;
    }

    try {
        if (cfg.ranks == 0 || (cfg.ranks & (cfg.ranks - 1)) != 0) throw UsageError("--ranks must be a power of two");
        for (auto p : cfg.sweep_ranks) {
            if (p == 0 || (p & (p - 1)) != 0) throw UsageError("--sweep-ranks entries must be powers of two");
        }
        if (cfg.workers == 0) throw UsageError("--workers must be >= 1");
        if (*gen) return cmd_gen(cfg, out);
        if (*build) return cmd_build(cfg, out);
        if (*query) return cmd_query(cfg, out);
        if (*verify) return cmd_verify(cfg, out);
        if (*bench) return cmd_bench(cfg, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const InvalidInput& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const UnsplittableGroup& e) {
        err << "error: " << e.what() << " (rerun with --allow-empty-ranks to accept empty ranks)\n";
        return kDataError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    }
    return kUsage;
}

}  // namespace tierkd::cli
