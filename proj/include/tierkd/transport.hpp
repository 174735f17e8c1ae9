#pragma once

// Message passing between simulated ranks.
//
// Every message travels as a length-prefixed binary frame:
//
//   u32 length   (bytes after this field)
//   u8  kind
//   u32 sender rank
//   ... payload
//
// All integers and floats are little-endian. Point blocks are encoded as
// u32 count, u32 dims, count x u64 ids, then dims x count f64 coordinates in
// column-major order.

#include <atomic>
#include <bit>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <deque>
#include <exception>
#include <functional>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "tierkd/core.hpp"

namespace tierkd {

static_assert(std::endian::native == std::endian::little, "wire encoding assumes a little-endian host");

class DecodeError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Raised from a blocked receive after another rank aborted the run.
class TransportAborted : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

using Bytes = std::vector<std::uint8_t>;

enum class MessageKind : std::uint8_t {
    kBarrier = 1,
    kGather = 2,
    kPoints = 3,
    kRoute = 4,
    kRequest = 5,
    kResponse = 6,
};

inline constexpr std::size_t kMessageKinds = 7;
inline constexpr std::size_t kFrameHeader = 4 + 1 + 4;

class ByteWriter {
  public:
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
    void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }

    template <class T>
    void array(std::span<const T> values) {
        raw(values.data(), values.size_bytes());
    }

    [[nodiscard]] std::size_t size() const noexcept { return out_.size(); }
    Bytes take() { return std::move(out_); }
    [[nodiscard]] const Bytes& view() const noexcept { return out_; }

  private:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    Bytes out_;
};

class ByteReader {
  public:
    explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

    std::uint8_t u8() { return pod<std::uint8_t>(); }
    std::uint32_t u32() { return pod<std::uint32_t>(); }
    std::uint64_t u64() { return pod<std::uint64_t>(); }
    double f64() { return pod<double>(); }

    template <class T>
    void array(std::span<T> out) {
        need(out.size_bytes());
        std::memcpy(out.data(), in_.data() + pos_, out.size_bytes());
        pos_ += out.size_bytes();
    }

    std::span<const std::uint8_t> rest() const noexcept { return in_.subspan(pos_); }
    [[nodiscard]] std::size_t remaining() const noexcept { return in_.size() - pos_; }
    [[nodiscard]] bool done() const noexcept { return pos_ == in_.size(); }

    void expect_done(const char* what) const {
        if (!done()) throw DecodeError(std::string("trailing bytes after ") + what);
    }

  private:
    template <class T>
    T pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, in_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw DecodeError("truncated message");
    }

    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

struct Message {
    MessageKind kind = MessageKind::kBarrier;
    RankId sender = 0;
    Bytes payload;
};

inline Bytes encode_frame(MessageKind kind, RankId sender, std::span<const std::uint8_t> payload) {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(1 + 4 + payload.size()));
    w.u8(static_cast<std::uint8_t>(kind));
    w.u32(sender);
    w.bytes(payload);
    return w.take();
}

inline Message decode_frame(std::span<const std::uint8_t> frame) {
    ByteReader r(frame);
    const auto length = r.u32();
    if (length != r.remaining()) throw DecodeError("frame length prefix does not match frame size");
    if (length < 5) throw DecodeError("frame too short");
    Message m;
    const auto kind = r.u8();
    if (kind == 0 || kind >= kMessageKinds) throw DecodeError("unknown message kind");
    m.kind = static_cast<MessageKind>(kind);
    m.sender = r.u32();
    const auto rest = r.rest();
    m.payload.assign(rest.begin(), rest.end());
    return m;
}

/// Writes rows `rows` of `points` as a point block.
inline void write_point_block(ByteWriter& w, const PointSet& points, std::span<const std::uint32_t> rows) {
    w.u32(static_cast<std::uint32_t>(rows.size()));
    w.u32(static_cast<std::uint32_t>(points.dims()));
    for (auto r : rows) w.u64(points.id(r));
    for (std::size_t d = 0; d < points.dims(); ++d) {
        const auto col = points.column(d);
        for (auto r : rows) w.f64(col[r]);
    }
}

inline void write_point_block(ByteWriter& w, const PointSet& points) {
    w.u32(static_cast<std::uint32_t>(points.size()));
    w.u32(static_cast<std::uint32_t>(points.dims()));
    w.array(points.ids());
    for (std::size_t d = 0; d < points.dims(); ++d) w.array(points.column(d));
}

inline PointSet read_point_block(ByteReader& r) {
    const auto count = r.u32();
    const auto dims = r.u32();
    if (dims == 0) throw DecodeError("point block with zero dimensions");
    if (r.remaining() < static_cast<std::uint64_t>(count) * (8 + 8ULL * dims)) throw DecodeError("truncated point block");
    std::vector<PointId> ids(count);
    r.array(std::span<PointId>(ids));
    std::vector<std::vector<double>> cols(dims, std::vector<double>(count));
    for (auto& c : cols) r.array(std::span<double>(c));
    try {
        return PointSet::from_columns(std::move(cols), std::move(ids));
    } catch (const InvalidInput& e) {
        throw DecodeError(std::string("invalid point block: ") + e.what());
    }
}

/// Per-kind traffic counters.
struct TrafficStats {
    std::uint64_t messages[kMessageKinds] = {};
    std::uint64_t bytes[kMessageKinds] = {};
};

/// Reliable, per-pair FIFO delivery of frames between ranks.
class Transport {
  public:
    virtual ~Transport() = default;
    [[nodiscard]] virtual std::uint32_t rank_count() const noexcept = 0;
    /// Queues a frame for `to`. Never blocks.
    virtual void send(RankId to, Bytes frame) = 0;
    /// Blocks until a frame of `kind` from `from` addressed to `self` arrives;
    /// frames from one sender are matched in the order they were sent.
    virtual Message receive(RankId self, RankId from, MessageKind kind) = 0;
    [[nodiscard]] virtual TrafficStats traffic() const = 0;
    /// Wakes every blocked receiver with TransportAborted.
    virtual void abort() = 0;
};

class InMemoryTransport final : public Transport {
  public:
    explicit InMemoryTransport(std::uint32_t ranks) : mailboxes_(ranks) {
        if (ranks == 0) throw InvalidInput("transport needs at least one rank");
    }

    [[nodiscard]] std::uint32_t rank_count() const noexcept override {
        return static_cast<std::uint32_t>(mailboxes_.size());
    }

    void send(RankId to, Bytes frame) override {
        if (to >= mailboxes_.size()) throw InvalidInput("send to unknown rank");
        if (frame.size() < kFrameHeader) throw DecodeError("frame too short");
        const auto kind = frame[4];
        if (kind < kMessageKinds) {
            messages_[kind].fetch_add(1, std::memory_order_relaxed);
            bytes_[kind].fetch_add(frame.size(), std::memory_order_relaxed);
        }
        auto& box = mailboxes_[to];
        {
            std::lock_guard lock(box.mutex);
            box.frames.push_back(std::move(frame));
        }
        box.ready.notify_all();
    }

    Message receive(RankId self, RankId from, MessageKind kind) override {
        auto& box = mailboxes_.at(self);
        std::unique_lock lock(box.mutex);
        for (;;) {
            if (aborted_.load()) throw TransportAborted("transport aborted by another rank");
            for (auto it = box.frames.begin(); it != box.frames.end(); ++it) {
                std::uint32_t sender = 0;
                std::memcpy(&sender, it->data() + 5, sizeof sender);
                if ((*it)[4] == static_cast<std::uint8_t>(kind) && sender == from) {
                    Bytes frame = std::move(*it);
                    box.frames.erase(it);
                    lock.unlock();
                    return decode_frame(frame);
                }
            }
            box.ready.wait(lock);
        }
    }

    [[nodiscard]] TrafficStats traffic() const override {
        TrafficStats s;
        for (std::size_t i = 0; i < kMessageKinds; ++i) {
            s.messages[i] = messages_[i].load();
            s.bytes[i] = bytes_[i].load();
        }
        return s;
    }

    void abort() override {
        aborted_.store(true);
        for (auto& box : mailboxes_) {
            std::lock_guard lock(box.mutex);
            box.ready.notify_all();
        }
    }

    /// Frames queued but not yet received, across all ranks.
    [[nodiscard]] std::size_t pending() {
        std::size_t n = 0;
        for (auto& box : mailboxes_) {
            std::lock_guard lock(box.mutex);
            n += box.frames.size();
        }
        return n;
    }

  private:
    struct Mailbox {
        std::mutex mutex;
        std::condition_variable ready;
        std::deque<Bytes> frames;
    };
    std::vector<Mailbox> mailboxes_;
    std::atomic<std::uint64_t> messages_[kMessageKinds] = {};
    std::atomic<std::uint64_t> bytes_[kMessageKinds] = {};
    std::atomic<bool> aborted_{false};
};

/// Contiguous block of ranks [first, first + count).
struct RankGroup {
    RankId first = 0;
    std::uint32_t count = 1;

    [[nodiscard]] bool contains(RankId r) const noexcept { return r >= first && r < first + count; }
};

/// One rank's handle on a transport, with the collectives built from
/// point-to-point messages.
class Communicator {
  public:
    Communicator(Transport& transport, RankId rank) : transport_(transport), rank_(rank) {}

    [[nodiscard]] RankId rank() const noexcept { return rank_; }
    [[nodiscard]] std::uint32_t size() const noexcept { return transport_.rank_count(); }
    [[nodiscard]] RankGroup world() const noexcept { return RankGroup{0, size()}; }

    void send(RankId to, MessageKind kind, std::span<const std::uint8_t> payload) {
        transport_.send(to, encode_frame(kind, rank_, payload));
    }

    Message receive(RankId from, MessageKind kind) { return transport_.receive(rank_, from, kind); }

    void barrier(RankGroup group) {
        for (RankId r = group.first; r < group.first + group.count; ++r) {
            if (r != rank_) send(r, MessageKind::kBarrier, {});
        }
        for (RankId r = group.first; r < group.first + group.count; ++r) {
            if (r != rank_) receive(r, MessageKind::kBarrier);
        }
    }

    /// Every member's bytes, in rank order (own contribution included).
    std::vector<Bytes> all_gather(RankGroup group, std::span<const std::uint8_t> mine) {
        for (RankId r = group.first; r < group.first + group.count; ++r) {
            if (r != rank_) send(r, MessageKind::kGather, mine);
        }
        std::vector<Bytes> out(group.count);
        for (RankId r = group.first; r < group.first + group.count; ++r) {
            out[r - group.first] = r == rank_ ? Bytes(mine.begin(), mine.end()) : receive(r, MessageKind::kGather).payload;
        }
        return out;
    }

    /// Element-wise sum of every member's counts.
    std::vector<std::uint64_t> sum_reduce(RankGroup group, std::span<const std::uint64_t> counts) {
        ByteWriter w;
        w.u64(counts.size());
        w.array(counts);
        const auto parts = all_gather(group, w.view());
        std::vector<std::uint64_t> total(counts.size(), 0);
        for (const auto& p : parts) {
            ByteReader r(p);
            if (r.u64() != counts.size()) throw DecodeError("sum_reduce length mismatch");
            for (auto& t : total) t += r.u64();
            r.expect_done("sum_reduce payload");
        }
        return total;
    }

  private:
    Transport& transport_;
    RankId rank_;
};

/// Runs `fn(comm)` on one thread per rank and waits for all of them. If a
/// rank throws, the transport is aborted so blocked peers unwind, and the
/// first non-abort exception is rethrown.
inline void run_on_ranks(Transport& transport, const std::function<void(Communicator&)>& fn) {
    const auto ranks = transport.rank_count();
    std::vector<std::exception_ptr> errors(ranks);
    std::vector<std::thread> threads;
    threads.reserve(ranks);
    for (RankId r = 0; r < ranks; ++r) {
        threads.emplace_back([&, r] {
            Communicator comm(transport, r);
            try {
                fn(comm);
            } catch (...) {
                errors[r] = std::current_exception();
                transport.abort();
            }
        });
    }
    for (auto& t : threads) t.join();
    std::exception_ptr first_abort;
    for (auto& e : errors) {
        if (!e) continue;
        try {
            std::rethrow_exception(e);
        } catch (const TransportAborted&) {
            if (!first_abort) first_abort = e;
        } catch (...) {
            throw;
        }
    }
    if (first_abort) std::rethrow_exception(first_abort);
}

}  // namespace tierkd
