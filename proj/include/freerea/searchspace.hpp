// Copyright 2026 The freerea Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Cell-based genotype families: NATS (operators on the six edges of a
// 4-node DAG) and NB101 (operators on the interior nodes of a DAG with at
// most 7 nodes and 9 edges).

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "freerea/errors.hpp"
#include "freerea/random.hpp"

namespace freerea {

enum class Family : std::uint8_t { nats, nb101 };

enum class Op : std::uint8_t {
  conv1x1,
  conv3x3,
  avgpool3x3,
  skip,
  zero,
  maxpool3x3,
};

inline constexpr std::array<Op, 5> kNatsOps = {Op::conv1x1, Op::conv3x3, Op::avgpool3x3,
                                               Op::skip, Op::zero};
inline constexpr std::array<Op, 3> kNb101Ops = {Op::conv1x1, Op::conv3x3, Op::maxpool3x3};

inline constexpr int kNatsNodes = 4;
inline constexpr int kNatsEdges = 6;
inline constexpr std::size_t kNatsSpaceSize = 15625;  // 5^6

/// NATS edges (i, j), i < j, in lexicographic order. Gene k of a NATS
/// genotype is the operator on kNatsEdgeList[k].
inline constexpr std::array<std::pair<int, int>, kNatsEdges> kNatsEdgeList = {
    {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};

inline constexpr int kNb101MaxNodes = 7;
inline constexpr int kNb101MaxEdges = 9;

/// Retry cap shared by every rejection-sampling loop in this module.
inline constexpr int kRetryCap = 100;

constexpr int nats_edge_index(int from, int to) {
  for (int k = 0; k < kNatsEdges; ++k) {
    if (kNatsEdgeList[k].first == from && kNatsEdgeList[k].second == to) return k;
  }
  return -1;
}

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::conv1x1: return "conv1x1";
    case Op::conv3x3: return "conv3x3";
    case Op::avgpool3x3: return "avgpool3x3";
    case Op::skip: return "skip";
    case Op::zero: return "zero";
    case Op::maxpool3x3: return "maxpool3x3";
  }
  return "?";
}

inline Op parse_op(std::string_view name) {
  for (Op op : {Op::conv1x1, Op::conv3x3, Op::avgpool3x3, Op::skip, Op::zero, Op::maxpool3x3}) {
    if (op_name(op) == name) return op;
  }
  throw GenotypeParseError("unknown operator '" + std::string(name) + "'");
}

inline std::span<const Op> family_ops(Family family) {
  if (family == Family::nats) return kNatsOps;
  return kNb101Ops;
}

inline bool op_legal(Family family, Op op) {
  auto ops = family_ops(family);
  return std::find(ops.begin(), ops.end(), op) != ops.end();
}

/// Static description of one search-space family.
struct SpaceDescriptor {
  Family family = Family::nats;
  std::span<const Op> ops;
  int max_nodes = 0;
  int max_edges = 0;
  /// Number of genotypes in the full space; 0 when not enumerable.
  std::size_t size = 0;

  static SpaceDescriptor nats() {
    return {Family::nats, kNatsOps, kNatsNodes, kNatsEdges, kNatsSpaceSize};
  }
  static SpaceDescriptor nb101() {
    return {Family::nb101, kNb101Ops, kNb101MaxNodes, kNb101MaxEdges, 0};
  }
  static SpaceDescriptor of(Family family) {
    return family == Family::nats ? nats() : nb101();
  }
};

/// One cell architecture. Immutable value type.
///
/// NB101 genotypes may carry dead nodes (interior nodes off every
/// input-to-output path). They are kept in the raw form so mutation can
/// revive them; canonical() prunes them and hashing works on the pruned form.
class Genotype {
 public:
  Genotype() = default;

  static Genotype nats(const std::array<Op, kNatsEdges>& edge_ops) {
    Genotype g;
    g.family_ = Family::nats;
    g.edge_ops_ = edge_ops;
    g.node_count_ = kNatsNodes;
    g.check();
    return g;
  }

  /// `edges` lists the (from, to) pairs; `interior_ops` has node_count - 2
  /// entries, one per interior node in order.
  static Genotype nb101(int node_count, std::span<const std::pair<int, int>> edges,
                        std::span<const Op> interior_ops) {
    Genotype g;
    g.family_ = Family::nb101;
    g.node_count_ = node_count;
    if (node_count < 2 || node_count > kNb101MaxNodes) {
      throw InvalidGenotype("NB101 node count " + std::to_string(node_count) + " outside [2, 7]");
    }
    if (static_cast<int>(interior_ops.size()) != node_count - 2) {
      throw InvalidGenotype("NB101 needs one operator per interior node");
    }
    for (auto [from, to] : edges) {
      if (from < 0 || to >= node_count || from >= to) {
        throw InvalidGenotype("NB101 edge (" + std::to_string(from) + "," + std::to_string(to) +
                              ") is not strictly upper-triangular");
      }
      g.adjacency_ |= bit(from, to);
    }
    for (int k = 0; k < node_count - 2; ++k) g.node_ops_[k + 1] = interior_ops[k];
    g.check();
    return g;
  }

  Family family() const { return family_; }

  // NATS accessors.
  const std::array<Op, kNatsEdges>& edge_ops() const { return edge_ops_; }
  Op edge_op(int from, int to) const { return edge_ops_[nats_edge_index(from, to)]; }

  // NB101 accessors. For NATS, node_count() is 4 and the rest is unused.
  int node_count() const { return node_count_; }
  bool has_edge(int from, int to) const { return (adjacency_ & bit(from, to)) != 0; }
  Op node_op(int node) const { return node_ops_[node]; }
  int edge_count() const { return std::popcount(adjacency_); }
  std::uint64_t adjacency_bits() const { return adjacency_; }

  /// NB101: prunes interior nodes that are not on an input-to-output path.
  /// NATS genotypes are already canonical.
  Genotype canonical() const {
    if (family_ == Family::nats) return *this;
    const int n = node_count_;
    std::array<bool, kNb101MaxNodes> from_input{}, to_output{};
    from_input[0] = true;
    for (int j = 1; j < n; ++j)
      for (int i = 0; i < j; ++i)
        if (from_input[i] && has_edge(i, j)) from_input[j] = true;
    to_output[n - 1] = true;
    for (int i = n - 2; i >= 0; --i)
      for (int j = i + 1; j < n; ++j)
        if (to_output[j] && has_edge(i, j)) to_output[i] = true;

    std::array<int, kNb101MaxNodes> remap{};
    int kept = 0;
    for (int v = 0; v < n; ++v) remap[v] = (from_input[v] && to_output[v]) ? kept++ : -1;

    Genotype out;
    out.family_ = Family::nb101;
    out.node_count_ = kept;
    for (int i = 0; i < n; ++i) {
      if (remap[i] < 0) continue;
      out.node_ops_[remap[i]] = node_ops_[i];
      for (int j = i + 1; j < n; ++j)
        if (remap[j] >= 0 && has_edge(i, j)) out.adjacency_ |= bit(remap[i], remap[j]);
    }
    if (kept > 0) {
      out.node_ops_[0] = Op::conv1x1;
      out.node_ops_[kept - 1] = Op::conv1x1;
    }
    return out;
  }

  /// NB101: embeds the cell into 7 node slots by inserting isolated interior
  /// nodes just before the output node. Identity for NATS and 7-node cells.
  Genotype padded() const {
    if (family_ == Family::nats || node_count_ == kNb101MaxNodes) return *this;
    const int n = node_count_;
    auto slot = [&](int v) { return v == n - 1 ? kNb101MaxNodes - 1 : v; };
    Genotype out;
    out.family_ = Family::nb101;
    out.node_count_ = kNb101MaxNodes;
    for (int i = 0; i < n; ++i) {
      out.node_ops_[slot(i)] = node_ops_[i];
      for (int j = i + 1; j < n; ++j)
        if (has_edge(i, j)) out.adjacency_ |= bit(slot(i), slot(j));
    }
    for (int v = n - 1; v < kNb101MaxNodes - 1; ++v) out.node_ops_[v] = Op::conv3x3;
    out.node_ops_[kNb101MaxNodes - 1] = Op::conv1x1;
    return out;
  }

  /// Structural validity: bounds hold and the input reaches the output.
  bool valid() const {
    if (family_ == Family::nats) {
      return std::all_of(edge_ops_.begin(), edge_ops_.end(),
                         [](Op op) { return op_legal(Family::nats, op); });
    }
    if (node_count_ < 2 || node_count_ > kNb101MaxNodes) return false;
    if (edge_count() > kNb101MaxEdges) return false;
    for (int v = 1; v + 1 < node_count_; ++v)
      if (!op_legal(Family::nb101, node_ops_[v])) return false;
    // Pruning keeps a node only if it lies on an input-to-output path, so an
    // empty pruned graph means the output is unreachable.
    return canonical().node_count_ >= 2;
  }

  std::string to_string() const {
    std::string s;
    if (family_ == Family::nats) {
      s = "nats:(";
      for (int k = 0; k < kNatsEdges; ++k) {
        if (k) s += '|';
        s += op_name(edge_ops_[k]);
      }
      s += ')';
      return s;
    }
    s = "nb101:";
    for (int i = 0; i < node_count_; ++i)
      for (int j = i + 1; j < node_count_; ++j) s += has_edge(i, j) ? '1' : '0';
    s += ':';
    for (int v = 1; v + 1 < node_count_; ++v) {
      if (v > 1) s += ',';
      s += op_name(node_ops_[v]);
    }
    return s;
  }

  static Genotype parse(std::string_view text) {
    if (text.starts_with("nats:(") && text.ends_with(")")) {
      std::string_view body = text.substr(6, text.size() - 7);
      std::array<Op, kNatsEdges> ops{};
      int k = 0;
      for (auto part : split(body, '|')) {
        if (k >= kNatsEdges) throw GenotypeParseError("NATS genotype needs exactly 6 operators");
        ops[k++] = parse_op(part);
      }
      if (k != kNatsEdges) throw GenotypeParseError("NATS genotype needs exactly 6 operators");
      try {
        return nats(ops);
      } catch (const InvalidGenotype& e) {
        throw GenotypeParseError(e.what());
      }
    }
    if (text.starts_with("nb101:")) {
      std::string_view rest = text.substr(6);
      auto colon = rest.find(':');
      if (colon == std::string_view::npos) throw GenotypeParseError("NB101 genotype needs ':<ops>'");
      std::string_view bits = rest.substr(0, colon);
      std::string_view op_text = rest.substr(colon + 1);
      std::vector<Op> ops;
      if (!op_text.empty())
        for (auto part : split(op_text, ',')) ops.push_back(parse_op(part));
      const int n = static_cast<int>(ops.size()) + 2;
      if (static_cast<int>(bits.size()) != n * (n - 1) / 2) {
        throw GenotypeParseError("NB101 adjacency bitstring length does not match operator count");
      }
      std::vector<std::pair<int, int>> edges;
      std::size_t pos = 0;
      for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j, ++pos) {
          if (bits[pos] == '1') edges.emplace_back(i, j);
          else if (bits[pos] != '0') throw GenotypeParseError("adjacency bits must be 0 or 1");
        }
      }
      try {
        return nb101(n, edges, ops);
      } catch (const InvalidGenotype& e) {
        throw GenotypeParseError(e.what());
      }
    }
    throw GenotypeParseError("unrecognized genotype '" + std::string(text) + "'");
  }

  friend bool operator==(const Genotype& a, const Genotype& b) {
    if (a.family_ != b.family_) return false;
    if (a.family_ == Family::nats) return a.edge_ops_ == b.edge_ops_;
    if (a.node_count_ != b.node_count_ || a.adjacency_ != b.adjacency_) return false;
    for (int v = 1; v + 1 < a.node_count_; ++v)
      if (a.node_ops_[v] != b.node_ops_[v]) return false;
    return true;
  }

  // Raw mutation hooks used by the variation operators.
  void set_edge_op(int k, Op op) { edge_ops_[k] = op; }
  void toggle_edge(int from, int to) { adjacency_ ^= bit(from, to); }
  void set_edge(int from, int to, bool on) {
    if (on) adjacency_ |= bit(from, to);
    else adjacency_ &= ~bit(from, to);
  }
  void set_node_op(int node, Op op) { node_ops_[node] = op; }

 private:
  static constexpr std::uint64_t bit(int from, int to) {
    return std::uint64_t{1} << (from * 8 + to);
  }

  static std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
      auto pos = s.find(sep, start);
      out.push_back(s.substr(start, pos - start));
      if (pos == std::string_view::npos) break;
      start = pos + 1;
    }
    return out;
  }

  void check() const {
    if (family_ == Family::nats) {
      for (Op op : edge_ops_)
        if (!op_legal(Family::nats, op))
          throw InvalidGenotype("operator '" + std::string(op_name(op)) + "' is not legal in NATS");
      return;
    }
    for (int v = 1; v + 1 < node_count_; ++v)
      if (!op_legal(Family::nb101, node_ops_[v]))
        throw InvalidGenotype("operator '" + std::string(op_name(node_ops_[v])) +
                              "' is not legal in NB101");
    if (edge_count() > kNb101MaxEdges)
      throw InvalidGenotype("NB101 cell has " + std::to_string(edge_count()) + " edges (max 9)");
    if (!valid()) throw InvalidGenotype("NB101 output is unreachable from the input");
  }

  Family family_ = Family::nats;
  std::array<Op, kNatsEdges> edge_ops_{};
  int node_count_ = kNatsNodes;
  std::uint64_t adjacency_ = 0;
  std::array<Op, kNb101MaxNodes> node_ops_{};
};

/// 64-bit FNV-1a over the canonical text form. Stable across runs and
/// platforms; NB101 genotypes differing only in dead nodes hash equal.
inline std::uint64_t canonical_hash(const Genotype& g) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : g.canonical().to_string()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline Genotype random_genotype(const SpaceDescriptor& space, Rng& rng) {
  if (space.family == Family::nats) {
    std::array<Op, kNatsEdges> ops{};
    for (auto& op : ops) op = kNatsOps[uniform_index(rng, kNatsOps.size())];
    return Genotype::nats(ops);
  }
  std::vector<std::pair<int, int>> edges;
  std::vector<Op> ops(kNb101MaxNodes - 2);
  for (int attempt = 0; attempt < kRetryCap; ++attempt) {
    edges.clear();
    for (int i = 0; i < kNb101MaxNodes; ++i)
      for (int j = i + 1; j < kNb101MaxNodes; ++j)
        if (coin_flip(rng)) edges.emplace_back(i, j);
    for (auto& op : ops) op = kNb101Ops[uniform_index(rng, kNb101Ops.size())];
    if (static_cast<int>(edges.size()) > kNb101MaxEdges) continue;
    try {
      return Genotype::nb101(kNb101MaxNodes, edges, ops);
    } catch (const InvalidGenotype&) {
      continue;
    }
  }
  throw ValidityExhausted("random NB101 sampling exceeded the retry cap");
}

inline Genotype mutate(const Genotype& g, Rng& rng) {
  if (g.family() == Family::nats) {
    Genotype child = g;
    const auto edge = static_cast<int>(uniform_index(rng, kNatsEdges));
    const Op current = g.edge_ops()[edge];
    std::array<Op, kNatsOps.size() - 1> others{};
    std::size_t m = 0;
    for (Op op : kNatsOps)
      if (op != current) others[m++] = op;
    child.set_edge_op(edge, others[uniform_index(rng, others.size())]);
    return child;
  }

  // Draws from the flip-or-relabel proposal conditioned on a valid, distinct
  // result. Integer weights: an edge flip has probability 1/2 * 1/21 = 10/420,
  // an op change 1/2 * 1/(5*2) = 21/420.
  const Genotype base = g.padded();
  const std::uint64_t parent_hash = canonical_hash(g);
  constexpr int n = kNb101MaxNodes;
  std::vector<std::pair<Genotype, std::uint64_t>> moves;
  std::uint64_t total = 0;
  auto offer = [&](Genotype child, std::uint64_t weight) {
    if (!child.valid() || canonical_hash(child) == parent_hash) return;
    total += weight;
    moves.emplace_back(std::move(child), weight);
  };
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      Genotype child = base;
      child.toggle_edge(i, j);
      offer(std::move(child), 10);
    }
  for (int node = 1; node + 1 < n; ++node)
    for (Op op : kNb101Ops) {
      if (op == base.node_op(node)) continue;
      Genotype child = base;
      child.set_node_op(node, op);
      offer(std::move(child), 21);
    }
  if (!moves.empty()) {
    std::uint64_t pick = uniform_index(rng, total);
    for (auto& [child, weight] : moves) {
      if (pick < weight) return child;
      pick -= weight;
    }
  }
  throw ValidityExhausted("no valid NB101 neighbour found for " + g.to_string());
}

inline Genotype crossover(const Genotype& a, const Genotype& b, Rng& rng) {
  if (a.family() != b.family()) throw FamilyMismatch("crossover between different families");
  if (a.family() == Family::nats) {
    Genotype child = a;
    for (int k = 0; k < kNatsEdges; ++k)
      if (coin_flip(rng)) child.set_edge_op(k, b.edge_ops()[k]);
    return child;
  }

  const Genotype pa = a.padded();
  const Genotype pb = b.padded();
  constexpr int n = kNb101MaxNodes;
  for (int attempt = 0; attempt < kRetryCap; ++attempt) {
    Genotype child = pa;
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (coin_flip(rng)) child.set_edge(i, j, pb.has_edge(i, j));
    for (int v = 1; v + 1 < n; ++v)
      if (coin_flip(rng)) child.set_node_op(v, pb.node_op(v));
    if (child.valid()) return child.canonical();
  }
  return mutate(a, rng);
}

/// The k-th NATS genotype in base-5 order over kNatsOps (gene 0 most
/// significant).
inline Genotype nats_genotype_at(std::size_t index) {
  std::array<Op, kNatsEdges> ops{};
  for (int k = kNatsEdges - 1; k >= 0; --k) {
    ops[k] = kNatsOps[index % kNatsOps.size()];
    index /= kNatsOps.size();
  }
  return Genotype::nats(ops);
}

/// Every genotype of the space, each exactly once. Only NATS is enumerable.
inline std::vector<Genotype> enumerate_space(const SpaceDescriptor& space) {
  if (space.family != Family::nats) {
    throw UnsupportedSpace("full NB101 enumeration is not supported");
  }
  std::vector<Genotype> out;
  out.reserve(kNatsSpaceSize);
  for (std::size_t i = 0; i < kNatsSpaceSize; ++i) out.push_back(nats_genotype_at(i));
  return out;
}

}  // namespace freerea
