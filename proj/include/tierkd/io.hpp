#pragma once

// File formats.
//
// Dataset ("PKD1"): magic "PKD1", u32 dims, u64 count, u64 seed, count x u64
// ids, then dims x count f64 coordinates (column-major). Little-endian.
//
// Tree bundle ("PKB1"): magic "PKB1", u32 dims, u32 ranks, u64 seed, u64
// bucket_size, (ranks - 1) x {u32 dim, f64 value} global planes in heap
// order, then per rank: the packed points as in PKD1 (u64 count, ids,
// coords), u32 depth, i64 root, u64 node count, nodes {u32 dim, f64 value,
// i64 left, i64 right, u64 count}, u64 leaf count, leaves {u64 offset,
// u64 length}.
//
// CSV: one point per line. An optional header line names the columns; a
// column named "id" carries point ids, otherwise ids are line numbers.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tierkd/cluster.hpp"
#include "tierkd/core.hpp"
#include "tierkd/dist_query.hpp"
#include "tierkd/transport.hpp"

namespace tierkd {

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline Bytes read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path);
}

namespace detail {

inline void write_magic(ByteWriter& w, std::string_view magic) {
    for (char c : magic) w.u8(static_cast<std::uint8_t>(c));
}

inline void expect_magic(ByteReader& r, std::string_view magic) {
    for (char c : magic) {
        if (r.u8() != static_cast<std::uint8_t>(c)) throw DecodeError("bad magic: not a " + std::string(magic) + " file");
    }
}

inline void write_columns(ByteWriter& w, const PointSet& points) {
    w.array(points.ids());
    for (std::size_t d = 0; d < points.dims(); ++d) w.array(points.column(d));
}

inline PointSet read_columns(ByteReader& r, std::size_t dims, std::uint64_t count) {
    if (dims == 0) throw DecodeError("zero dimensions");
    if (count > r.remaining() / (8 * (dims + 1))) throw DecodeError("truncated point data");
    std::vector<PointId> ids(count);
    r.array(std::span<PointId>(ids));
    std::vector<std::vector<double>> cols(dims, std::vector<double>(count));
    for (auto& c : cols) r.array(std::span<double>(c));
    try {
        return PointSet::from_columns(std::move(cols), std::move(ids));
    } catch (const InvalidInput& e) {
        throw DecodeError(e.what());
    }
}

}  // namespace detail

struct Dataset {
    PointSet points;
    std::uint64_t seed = 0;
};

inline Bytes encode_pkd1(const PointSet& points, std::uint64_t seed) {
    ByteWriter w;
    detail::write_magic(w, "PKD1");
    w.u32(static_cast<std::uint32_t>(points.dims()));
    w.u64(points.size());
    w.u64(seed);
    detail::write_columns(w, points);
    return w.take();
}

inline Dataset decode_pkd1(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    detail::expect_magic(r, "PKD1");
    const auto dims = r.u32();
    const auto count = r.u64();
    Dataset out;
    out.seed = r.u64();
    out.points = detail::read_columns(r, dims, count);
    r.expect_done("PKD1 dataset");
    if (!out.points.has_unique_ids()) throw DecodeError("duplicate point ids");
    return out;
}

inline std::string encode_csv(const PointSet& points) {
    std::string out = "id";
    for (std::size_t d = 0; d < points.dims(); ++d) out += ",x" + std::to_string(d);
    out += '\n';
    char buf[64];
    for (std::size_t i = 0; i < points.size(); ++i) {
        out += std::to_string(points.id(i));
        for (std::size_t d = 0; d < points.dims(); ++d) {
            std::snprintf(buf, sizeof buf, ",%.17g", points.coord(i, d));
            out += buf;
        }
        out += '\n';
    }
    return out;
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto comma = line.find(',', start);
        auto field = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
        while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
        while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r'))
            field.remove_suffix(1);
        out.push_back(field);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

inline bool parse_double(std::string_view s, double& out) {
    if (s.empty()) return false;
    std::string tmp(s);
    char* end = nullptr;
    out = std::strtod(tmp.c_str(), &end);
    return end == tmp.c_str() + tmp.size();
}

}  // namespace detail

inline PointSet decode_csv(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        auto line = text.substr(pos, nl - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (!line.empty()) lines.push_back(line);
        pos = nl + 1;
    }
    if (lines.empty()) throw DecodeError("empty dataset");

    std::size_t first = 0;
    std::ptrdiff_t id_col = -1;
    auto header = detail::split_fields(lines[0]);
    double probe = 0.0;
    if (!detail::parse_double(header[0], probe)) {
        for (std::size_t c = 0; c < header.size(); ++c) {
            if (header[c] == "id") id_col = static_cast<std::ptrdiff_t>(c);
        }
        first = 1;
    }
    const std::size_t width = header.size();
    const std::size_t dims = width - (id_col >= 0 ? 1 : 0);
    if (dims == 0) throw DecodeError("CSV has no coordinate columns");

    PointSet out(dims);
    std::vector<double> coords(dims);
    for (std::size_t li = first; li < lines.size(); ++li) {
        const auto fields = detail::split_fields(lines[li]);
        if (fields.size() != width)
            throw DecodeError("CSV line " + std::to_string(li + 1) + " has " + std::to_string(fields.size()) +
                              " fields, expected " + std::to_string(width));
        PointId id = li - first;
        std::size_t d = 0;
        for (std::size_t c = 0; c < width; ++c) {
            if (static_cast<std::ptrdiff_t>(c) == id_col) {
                const auto f = fields[c];
                const auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), id);
                if (ec != std::errc() || p != f.data() + f.size())
                    throw DecodeError("bad id on CSV line " + std::to_string(li + 1));
                continue;
            }
            if (!detail::parse_double(fields[c], coords[d]))
                throw DecodeError("bad number on CSV line " + std::to_string(li + 1));
            ++d;
        }
        try {
            out.push_back(id, coords);
        } catch (const InvalidInput& e) {
            throw DecodeError("CSV line " + std::to_string(li + 1) + ": " + e.what());
        }
    }
    if (!out.has_unique_ids()) throw DecodeError("duplicate point ids in CSV");
    return out;
}

enum class DataFormat { kPkd1, kCsv };

inline DataFormat guess_format(const std::string& path) {
    return path.size() >= 4 && path.substr(path.size() - 4) == ".csv" ? DataFormat::kCsv : DataFormat::kPkd1;
}

inline Dataset load_dataset(const std::string& path, DataFormat format) {
    const auto bytes = read_file(path);
    if (format == DataFormat::kCsv) {
        return Dataset{decode_csv(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())), 0};
    }
    return decode_pkd1(bytes);
}

inline void save_dataset(const std::string& path, const PointSet& points, std::uint64_t seed, DataFormat format) {
    if (format == DataFormat::kCsv) {
        const auto text = encode_csv(points);
        write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    } else {
        write_file(path, encode_pkd1(points, seed));
    }
}

struct TreeBundle {
    Cluster cluster;
    std::uint64_t seed = 0;
    std::uint64_t bucket_size = 0;
};

inline Bytes encode_bundle(const Cluster& cluster, std::uint64_t seed, std::uint64_t bucket_size) {
    ByteWriter w;
    detail::write_magic(w, "PKB1");
    const auto& gt = cluster.global;
    w.u32(gt.dims);
    w.u32(gt.ranks);
    w.u64(seed);
    w.u64(bucket_size);
    for (const auto& p : gt.planes) {
        w.u32(p.dim);
        w.f64(p.value);
    }
    for (const auto& rank : cluster.ranks) {
        const auto& t = rank.tree;
        w.u64(t.points.size());
        if (t.points.dims() != gt.dims) throw InvariantViolation("rank tree dimensionality differs from global tree");
        detail::write_columns(w, t.points);
        w.u32(t.depth);
        w.u64(static_cast<std::uint64_t>(t.root));
        w.u64(t.nodes.size());
        for (const auto& n : t.nodes) {
            w.u32(n.plane.dim);
            w.f64(n.plane.value);
            w.u64(static_cast<std::uint64_t>(n.left));
            w.u64(static_cast<std::uint64_t>(n.right));
            w.u64(n.count);
        }
        w.u64(t.leaves.size());
        for (const auto& l : t.leaves) {
            w.u64(l.offset);
            w.u64(l.length);
        }
    }
    return w.take();
}

inline TreeBundle decode_bundle(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    detail::expect_magic(r, "PKB1");
    TreeBundle out;
    auto& gt = out.cluster.global;
    gt.dims = r.u32();
    gt.ranks = r.u32();
    out.seed = r.u64();
    out.bucket_size = r.u64();
    if (gt.dims == 0) throw DecodeError("bundle with zero dimensions");
    if (gt.ranks == 0 || !std::has_single_bit(gt.ranks) || gt.ranks > (1U << 20))
        throw DecodeError("bundle rank count is not a power of two");
    gt.planes.resize(gt.ranks - 1);
    for (auto& p : gt.planes) {
        p.dim = r.u32();
        p.value = r.f64();
        if (p.dim >= gt.dims || !std::isfinite(p.value)) throw DecodeError("invalid global plane");
    }
    for (RankId rank = 0; rank < gt.ranks; ++rank) {
        RankState state;
        state.rank = rank;
        state.global = gt;
        state.region = gt.region(rank);
        auto& t = state.tree;
        const auto count = r.u64();
        t.points = detail::read_columns(r, gt.dims, count);
        t.depth = r.u32();
        t.root = static_cast<NodeRef>(r.u64());
        const auto node_count = r.u64();
        if (node_count > r.remaining() / 36) throw DecodeError("truncated node array");
        t.nodes.resize(node_count);
        for (auto& n : t.nodes) {
            n.plane.dim = r.u32();
            n.plane.value = r.f64();
            n.left = static_cast<NodeRef>(r.u64());
            n.right = static_cast<NodeRef>(r.u64());
            n.count = r.u64();
        }
        const auto leaf_count = r.u64();
        if (leaf_count > r.remaining() / 16) throw DecodeError("truncated leaf array");
        t.leaves.resize(leaf_count);
        for (auto& l : t.leaves) {
            l.offset = r.u64();
            l.length = r.u64();
        }
        // structural checks so a corrupted bundle cannot drive a search out of bounds
        auto valid_ref = [&](NodeRef ref) {
            return is_leaf_ref(ref) ? leaf_index(ref) < t.leaves.size() : static_cast<std::uint64_t>(ref) < t.nodes.size();
        };
        std::uint64_t covered = 0;
        for (const auto& l : t.leaves) {
            if (l.offset != covered || l.length > count - covered) throw DecodeError("leaf buckets do not tile the points");
            covered += l.length;
        }
        if (covered != count) throw DecodeError("leaf buckets do not cover every point");
        if (count > 0) {
            // every node and leaf reachable exactly once, and the stored depth exact
            if (!valid_ref(t.root)) throw DecodeError("invalid root reference");
            std::vector<bool> seen_node(t.nodes.size(), false), seen_leaf(t.leaves.size(), false);
            std::vector<std::pair<NodeRef, std::uint32_t>> stack{{t.root, 0}};
            std::uint32_t depth = 0;
            while (!stack.empty()) {
                const auto [ref, level] = stack.back();
                stack.pop_back();
                if (is_leaf_ref(ref)) {
                    if (seen_leaf[leaf_index(ref)]) throw DecodeError("leaf referenced twice");
                    seen_leaf[leaf_index(ref)] = true;
                    depth = std::max(depth, level);
                    continue;
                }
                const auto i = static_cast<std::size_t>(ref);
                if (seen_node[i]) throw DecodeError("tree node referenced twice");
                seen_node[i] = true;
                const auto& n = t.nodes[i];
                if (n.plane.dim >= gt.dims || !std::isfinite(n.plane.value) || !valid_ref(n.left) || !valid_ref(n.right))
                    throw DecodeError("invalid tree node");
                stack.emplace_back(n.left, level + 1);
                stack.emplace_back(n.right, level + 1);
            }
            if (std::find(seen_node.begin(), seen_node.end(), false) != seen_node.end() ||
                std::find(seen_leaf.begin(), seen_leaf.end(), false) != seen_leaf.end())
                throw DecodeError("unreachable tree nodes");
            if (depth != t.depth) throw DecodeError("stored tree depth is wrong");
        } else if (!t.nodes.empty() || !t.leaves.empty()) {
            throw DecodeError("empty rank with tree nodes");
        }
        out.cluster.ranks.push_back(std::move(state));
    }
    r.expect_done("PKB1 bundle");
    return out;
}

/// Results file: one line per query, "query_id point_id:sq_dist ..." with
/// distances printed with 17 significant digits; failed queries are written
/// as "query_id error: message".
inline std::string encode_results(const std::vector<QueryOutcome>& results) {
    std::string out;
    char buf[64];
    for (const auto& r : results) {
        out += std::to_string(r.result.query_id);
        if (!r.ok()) {
            out += " error: " + r.error + '\n';
            continue;
        }
        for (const auto& n : r.result.neighbors) {
            std::snprintf(buf, sizeof buf, " %llu:%.17g", static_cast<unsigned long long>(n.point_id), n.sq_dist);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

}  // namespace tierkd
