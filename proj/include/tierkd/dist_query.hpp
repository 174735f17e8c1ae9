#pragma once

// Distributed k-NN query protocol over a built Cluster.
//
// Per slice of the batch:
//   1. the ingesting rank routes each query to the rank owning its region;
//   2. the owner searches its local tree, which yields the bound r';
//   3. the owner forwards the query, with r', to every other rank whose
//      region is closer than r';
//   4. contacted ranks search their trees with radius r' and reply;
//   5. the owner merges its own and the remote neighbors into the top k.
//
// With pipelining on, slice i+1 runs steps 1-3 before slice i runs steps
// 4-5, so the requests of slice i are in flight while the next local
// searches execute. Results do not depend on the slice size or pipelining.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tierkd/cluster.hpp"
#include "tierkd/core.hpp"
#include "tierkd/local_query.hpp"
#include "tierkd/timing.hpp"
#include "tierkd/transport.hpp"
#include "tierkd/worker_pool.hpp"

namespace tierkd {

inline constexpr std::size_t kDefaultBatchSize = 4096;

struct Query {
    std::uint64_t query_id = 0;
    std::vector<double> point;
};

struct QueryBatch {
    std::vector<Query> queries;
    std::size_t k = 5;
    std::size_t batch_size = kDefaultBatchSize;
};

struct RemoteRequest {
    std::uint64_t query_id = 0;
    std::vector<double> point;
    std::uint32_t k = 0;
    double sq_r_prime = kInfinity;
};

struct RemoteResponse {
    std::uint64_t query_id = 0;
    std::vector<Neighbor> neighbors;
};

struct QueryOutcome {
    KnnResult result;
    std::string error;  // empty on success

    [[nodiscard]] bool ok() const noexcept { return error.empty(); }
};

/// Seconds per protocol stage, summed over ranks.
struct QueryTimings {
    double find_owner = 0.0;
    double local_knn = 0.0;
    double remote_identify = 0.0;
    double remote_knn = 0.0;
    double merge = 0.0;
    double communication = 0.0;  // time inside send and receive calls

    QueryTimings& operator+=(const QueryTimings& o) noexcept {
        find_owner += o.find_owner;
        local_knn += o.local_knn;
        remote_identify += o.remote_identify;
        remote_knn += o.remote_knn;
        merge += o.merge;
        communication += o.communication;
        return *this;
    }

    [[nodiscard]] double total() const noexcept {
        return find_owner + local_knn + remote_identify + remote_knn + merge + communication;
    }
};

struct ForwardRecord {
    std::uint64_t query_id = 0;
    RankId owner = 0;
    RankId target = 0;
    double sq_r_prime = kInfinity;
};

struct QueryStats {
    QueryTimings timings;      // wall clock
    QueryTimings cpu_timings;  // thread CPU time; ignores waiting and preemption
    double wall_seconds = 0.0;
    std::uint64_t queries = 0;
    std::uint64_t failed_queries = 0;
    std::uint64_t queries_forwarded = 0;  // sent to at least one remote rank
    std::uint64_t requests_sent = 0;
    std::uint64_t requests_received = 0;
    std::vector<std::uint64_t> requests_received_per_rank;
    std::vector<ForwardRecord> forwards;  // only when recording is enabled

    [[nodiscard]] double forwarded_fraction() const noexcept {
        const auto ok = queries - failed_queries;
        return ok == 0 ? 0.0 : static_cast<double>(queries_forwarded) / static_cast<double>(ok);
    }
};

struct QueryOptions {
    bool pipelined = true;
    bool record_forwards = false;
    std::size_t workers = 1;  // query-level parallelism inside each rank
};

struct QueryRun {
    std::vector<QueryOutcome> results;  // in batch order
    QueryStats stats;
};

/// Merges the owner's neighbors with remote replies into the top k.
inline KnnResult merge_topk(const KnnResult& local, std::span<const RemoteResponse> responses, std::size_t k) {
    if (k == 0) throw InvalidInput("k must be >= 1");
    KnnResult out;
    out.query_id = local.query_id;
    out.neighbors = local.neighbors;
    for (const auto& r : responses) out.neighbors.insert(out.neighbors.end(), r.neighbors.begin(), r.neighbors.end());
    std::unordered_set<PointId> seen;
    seen.reserve(out.neighbors.size() * 2);
    for (const auto& n : out.neighbors) {
        if (!seen.insert(n.point_id).second)
            throw InvariantViolation("point id " + std::to_string(n.point_id) + " returned by more than one source");
    }
    out.finalize(k);
    return out;
}

namespace wire {

inline void write_request(ByteWriter& w, const RemoteRequest& r) {
    w.u64(r.query_id);
    w.u32(r.k);
    w.f64(r.sq_r_prime);
    w.u32(static_cast<std::uint32_t>(r.point.size()));
    w.array(std::span<const double>(r.point));
}

inline RemoteRequest read_request(ByteReader& rd) {
    RemoteRequest r;
    r.query_id = rd.u64();
    r.k = rd.u32();
    r.sq_r_prime = rd.f64();
    r.point.resize(rd.u32());
    rd.array(std::span<double>(r.point));
    return r;
}

inline void write_response(ByteWriter& w, const RemoteResponse& r) {
    w.u64(r.query_id);
    w.u32(static_cast<std::uint32_t>(r.neighbors.size()));
    for (const auto& n : r.neighbors) {
        w.f64(n.sq_dist);
        w.u64(n.point_id);
        w.u32(n.rank);
    }
}

inline RemoteResponse read_response(ByteReader& rd) {
    RemoteResponse r;
    r.query_id = rd.u64();
    r.neighbors.resize(rd.u32());
    for (auto& n : r.neighbors) {
        n.sq_dist = rd.f64();
        n.point_id = rd.u64();
        n.rank = rd.u32();
    }
    return r;
}

/// Request list message: u32 slice, u32 count, then the requests.
inline Bytes encode_requests(std::uint32_t slice, std::span<const RemoteRequest> requests) {
    ByteWriter w;
    w.u32(slice);
    w.u32(static_cast<std::uint32_t>(requests.size()));
    for (const auto& r : requests) write_request(w, r);
    return w.take();
}

inline std::vector<RemoteRequest> decode_requests(std::span<const std::uint8_t> payload, std::uint32_t expected_slice) {
    ByteReader rd(payload);
    if (rd.u32() != expected_slice) throw DecodeError("request message for an unexpected slice");
    std::vector<RemoteRequest> out(rd.u32());
    for (auto& r : out) r = read_request(rd);
    rd.expect_done("request list");
    return out;
}

inline Bytes encode_responses(std::uint32_t slice, std::span<const RemoteResponse> responses) {
    ByteWriter w;
    w.u32(slice);
    w.u32(static_cast<std::uint32_t>(responses.size()));
    for (const auto& r : responses) write_response(w, r);
    return w.take();
}

inline std::vector<RemoteResponse> decode_responses(std::span<const std::uint8_t> payload,
                                                    std::uint32_t expected_slice) {
    ByteReader rd(payload);
    if (rd.u32() != expected_slice) throw DecodeError("response message for an unexpected slice");
    std::vector<RemoteResponse> out(rd.u32());
    for (auto& r : out) r = read_response(rd);
    rd.expect_done("response list");
    return out;
}

}  // namespace wire

namespace detail {

struct OwnedQuery {
    std::uint64_t position = 0;  // index in the batch
    std::uint64_t query_id = 0;
    std::vector<double> point;
    KnnResult local;
    std::vector<RemoteResponse> remote;
};

struct RankStats {
    QueryTimings timings;
    QueryTimings cpu_timings;
    std::uint64_t forwarded = 0;
    std::uint64_t requests_sent = 0;
    std::uint64_t requests_received = 0;
    std::uint64_t failed = 0;
    std::vector<ForwardRecord> forwards;
};

// Wall and CPU clocks advanced together; each lap is charged to one stage.
class StageClock {
  public:
    explicit StageClock(RankStats& stats) : stats_(stats) {}

    void charge(double QueryTimings::*stage) {
        stats_.timings.*stage += wall_.lap();
        stats_.cpu_timings.*stage += cpu_.lap();
    }
    void skip() {
        wall_.lap();
        cpu_.lap();
    }

  private:
    RankStats& stats_;
    Stopwatch wall_;
    CpuStopwatch cpu_;
};

class RankQueryEngine {
  public:
    RankQueryEngine(Communicator& comm, const RankState& state, const QueryBatch& batch, const QueryOptions& options,
                    std::vector<QueryOutcome>& results, RankStats& stats)
        : comm_(comm),
          state_(state),
          batch_(batch),
          options_(options),
          results_(results),
          stats_(stats),
          pool_(options.workers),
          searchers_(pool_.size()) {}

    void run() {
        const std::size_t n = batch_.queries.size();
        const std::size_t slice_size = std::max<std::size_t>(1, batch_.batch_size);
        const auto slices = static_cast<std::uint32_t>((n + slice_size - 1) / slice_size);
        if (slices == 0) return;
        if (!options_.pipelined) {
            for (std::uint32_t s = 0; s < slices; ++s) {
                auto owned = prepare(s, slice_size);
                finish(s, owned);
            }
            return;
        }
        auto current = prepare(0, slice_size);
        for (std::uint32_t s = 0; s < slices; ++s) {
            std::vector<OwnedQuery> next;
            if (s + 1 < slices) next = prepare(s + 1, slice_size);
            finish(s, current);
            current = std::move(next);
        }
    }

  private:
    Message timed_receive(RankId from, MessageKind kind) {
        StageClock clock(stats_);
        auto m = comm_.receive(from, kind);
        clock.charge(&QueryTimings::communication);
        return m;
    }

    void timed_send(RankId to, MessageKind kind, std::span<const std::uint8_t> payload) {
        StageClock clock(stats_);
        comm_.send(to, kind, payload);
        clock.charge(&QueryTimings::communication);
    }

    // Runs body over chunks of [0, n) on the pool. CPU time of chunks that
    // ran on other threads is charged to `stage`; the caller's own share is
    // picked up by its StageClock.
    template <class Body>
    void parallel(std::size_t n, double QueryTimings::*stage, Body&& body) {
        const auto caller = std::this_thread::get_id();
        std::vector<double> off_thread(pool_.size(), 0.0);
        pool_.run_chunks(n, [&](std::size_t c, std::size_t b, std::size_t e) {
            CpuStopwatch cpu;
            body(c, b, e);
            if (std::this_thread::get_id() != caller) off_thread[c] = cpu.seconds();
        });
        for (double s : off_thread) stats_.cpu_timings.*stage += s;
    }

    // Steps 1-3: route, local search, forward requests.
    std::vector<OwnedQuery> prepare(std::uint32_t slice, std::size_t slice_size) {
        const std::uint32_t P = comm_.size();
        const RankId me = comm_.rank();
        const std::size_t begin = static_cast<std::size_t>(slice) * slice_size;
        const std::size_t end = std::min(batch_.queries.size(), begin + slice_size);
        const std::size_t dims = state_.global.dims;

        // 1. queries ingested round-robin; route each to its owner.
        StageClock clock(stats_);
        std::vector<std::vector<std::uint64_t>> routed(P);
        for (std::size_t pos = begin; pos < end; ++pos) {
            if (pos % P != me) continue;
            const auto& q = batch_.queries[pos];
            if (q.point.size() != dims) {
                fail(pos, "query dimensionality " + std::to_string(q.point.size()) + " does not match dataset (" +
                              std::to_string(dims) + ")");
                continue;
            }
            if (!std::all_of(q.point.begin(), q.point.end(), [](double v) { return std::isfinite(v); })) {
                fail(pos, "query has non-finite coordinates");
                continue;
            }
            routed[owner_of(state_.global, q.point)].push_back(pos);
        }
        clock.charge(&QueryTimings::find_owner);

        for (RankId r = 0; r < P; ++r) {
            if (r == me) continue;
            ByteWriter w;
            w.u32(slice);
            w.u32(static_cast<std::uint32_t>(routed[r].size()));
            for (auto pos : routed[r]) {
                const auto& q = batch_.queries[pos];
                w.u64(pos);
                w.u64(q.query_id);
                w.array(std::span<const double>(q.point));
            }
            timed_send(r, MessageKind::kRoute, w.view());
        }
        std::vector<OwnedQuery> owned;
        for (auto pos : routed[me]) owned.push_back(OwnedQuery{pos, batch_.queries[pos].query_id, batch_.queries[pos].point, {}, {}});
        for (RankId r = 0; r < P; ++r) {
            if (r == me) continue;
            const auto msg = timed_receive(r, MessageKind::kRoute);
            ByteReader rd(msg.payload);
            if (rd.u32() != slice) throw DecodeError("route message for an unexpected slice");
            const auto count = rd.u32();
            for (std::uint32_t i = 0; i < count; ++i) {
                OwnedQuery oq;
                oq.position = rd.u64();
                oq.query_id = rd.u64();
                oq.point.resize(dims);
                rd.array(std::span<double>(oq.point));
                owned.push_back(std::move(oq));
            }
            rd.expect_done("route message");
        }
        clock.skip();

        // 2. local search with an unbounded radius.
        parallel(owned.size(), &QueryTimings::local_knn, [&](std::size_t c, std::size_t b, std::size_t e) {
            for (std::size_t i = b; i < e; ++i) {
                owned[i].local = searchers_[c].search(state_.tree, owned[i].point, batch_.k, kInfinity, me);
                owned[i].local.query_id = owned[i].query_id;
            }
        });
        clock.charge(&QueryTimings::local_knn);

        // 3. forward to ranks closer than r' (all ranks while r' is infinite).
        // The radius sent is the next double above the k-th distance, so a
        // remote point tied with it still competes on point id in the merge.
        std::vector<std::vector<RemoteRequest>> requests(P);
        for (const auto& oq : owned) {
            const double r_prime = std::nextafter(oq.local.r_prime, kInfinity);
            std::vector<RankId> targets;
            if (r_prime < kInfinity) {
                targets = ranks_within(state_.global, oq.point, r_prime);
            } else {
                for (RankId r = 0; r < P; ++r) {
                    if (r != me) targets.push_back(r);
                }
            }
            if (!targets.empty()) ++stats_.forwarded;
            for (auto t : targets) {
                requests[t].push_back(RemoteRequest{oq.query_id, oq.point, static_cast<std::uint32_t>(batch_.k), r_prime});
                if (options_.record_forwards) stats_.forwards.push_back(ForwardRecord{oq.query_id, me, t, r_prime});
            }
        }
        clock.charge(&QueryTimings::remote_identify);
        for (RankId r = 0; r < P; ++r) {
            if (r == me) continue;
            stats_.requests_sent += requests[r].size();
            timed_send(r, MessageKind::kRequest, wire::encode_requests(slice, requests[r]));
        }
        return owned;
    }

    // Steps 4-5: answer remote requests, merge replies.
    void finish(std::uint32_t slice, std::vector<OwnedQuery>& owned) {
        const std::uint32_t P = comm_.size();
        const RankId me = comm_.rank();

        // 4. radius-bounded search for every received request.
        for (RankId r = 0; r < P; ++r) {
            if (r == me) continue;
            const auto msg = timed_receive(r, MessageKind::kRequest);
            const auto requests = wire::decode_requests(msg.payload, slice);
            stats_.requests_received += requests.size();
            StageClock clock(stats_);
            std::vector<RemoteResponse> responses(requests.size());
            parallel(requests.size(), &QueryTimings::remote_knn, [&](std::size_t c, std::size_t b, std::size_t e) {
                for (std::size_t i = b; i < e; ++i) {
                    const auto& req = requests[i];
                    if (req.point.size() != state_.global.dims || req.k == 0)
                        throw DecodeError("malformed remote request");
                    auto res = searchers_[c].search(state_.tree, req.point, req.k, req.sq_r_prime, me);
                    responses[i] = RemoteResponse{req.query_id, std::move(res.neighbors)};
                }
            });
            clock.charge(&QueryTimings::remote_knn);
            timed_send(r, MessageKind::kResponse, wire::encode_responses(slice, responses));
        }

        // 5. merge.
        std::unordered_map<std::uint64_t, std::size_t> by_id;
        by_id.reserve(owned.size() * 2);
        for (std::size_t i = 0; i < owned.size(); ++i) by_id.emplace(owned[i].query_id, i);
        for (RankId r = 0; r < P; ++r) {
            if (r == me) continue;
            const auto msg = timed_receive(r, MessageKind::kResponse);
            auto responses = wire::decode_responses(msg.payload, slice);
            for (auto& resp : responses) {
                const auto it = by_id.find(resp.query_id);
                if (it == by_id.end()) throw DecodeError("response for a query this rank does not own");
                owned[it->second].remote.push_back(std::move(resp));
            }
        }
        StageClock clock(stats_);
        for (auto& oq : owned) {
            results_[oq.position].result = merge_topk(oq.local, oq.remote, batch_.k);
            results_[oq.position].error.clear();
        }
        clock.charge(&QueryTimings::merge);
    }

    void fail(std::size_t pos, std::string why) {
        results_[pos].result = KnnResult{batch_.queries[pos].query_id, {}, kInfinity};
        results_[pos].error = std::move(why);
        ++stats_.failed;
    }

    Communicator& comm_;
    const RankState& state_;
    const QueryBatch& batch_;
    const QueryOptions& options_;
    std::vector<QueryOutcome>& results_;
    RankStats& stats_;
    WorkerPool pool_;
    std::vector<KnnSearcher> searchers_;
};

}  // namespace detail

/// Runs the query protocol for `batch` over `cluster` on `transport`.
inline QueryRun run_queries(Transport& transport, const Cluster& cluster, const QueryBatch& batch,
                            const QueryOptions& options = {}) {
    if (batch.k == 0) throw InvalidInput("k must be >= 1");
    if (transport.rank_count() != cluster.ranks.size()) throw InvalidInput("transport and cluster rank counts differ");
    {
        std::unordered_set<std::uint64_t> ids;
        ids.reserve(batch.queries.size() * 2);
        for (const auto& q : batch.queries) {
            if (!ids.insert(q.query_id).second) throw InvalidInput("duplicate query id " + std::to_string(q.query_id));
        }
    }
    QueryRun run;
    run.results.resize(batch.queries.size());
    std::vector<detail::RankStats> per_rank(cluster.ranks.size());
    Stopwatch wall;
    run_on_ranks(transport, [&](Communicator& comm) {
        detail::RankQueryEngine engine(comm, cluster.ranks[comm.rank()], batch, options, run.results,
                                       per_rank[comm.rank()]);
        engine.run();
    });
    auto& s = run.stats;
    s.wall_seconds = wall.seconds();
    s.queries = batch.queries.size();
    for (const auto& r : per_rank) {
        s.timings += r.timings;
        s.cpu_timings += r.cpu_timings;
        s.failed_queries += r.failed;
        s.queries_forwarded += r.forwarded;
        s.requests_sent += r.requests_sent;
        s.requests_received += r.requests_received;
        s.requests_received_per_rank.push_back(r.requests_received);
        s.forwards.insert(s.forwards.end(), r.forwards.begin(), r.forwards.end());
    }
    return run;
}

/// Unpipelined protocol; per-query results in batch order.
inline std::vector<QueryOutcome> distributed_knn(Transport& transport, const Cluster& cluster, const QueryBatch& batch) {
    return run_queries(transport, cluster, batch, QueryOptions{false, false, 1}).results;
}

inline std::vector<QueryOutcome> distributed_knn(const Cluster& cluster, const QueryBatch& batch) {
    InMemoryTransport transport(static_cast<std::uint32_t>(cluster.ranks.size()));
    return distributed_knn(transport, cluster, batch);
}

/// Pipelined protocol over slices of batch.batch_size queries, with stage timings.
inline QueryRun run_pipelined(Transport& transport, const Cluster& cluster, const QueryBatch& batch,
                              std::size_t workers = 1) {
    return run_queries(transport, cluster, batch, QueryOptions{true, false, workers});
}

inline QueryRun run_pipelined(const Cluster& cluster, const QueryBatch& batch, std::size_t workers = 1) {
    InMemoryTransport transport(static_cast<std::uint32_t>(cluster.ranks.size()));
    return run_pipelined(transport, cluster, batch, workers);
}

}  // namespace tierkd
