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

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "freerea/autodiff.hpp"
#include "freerea/errors.hpp"
#include "freerea/random.hpp"
#include "freerea/searchspace.hpp"

namespace freerea {

struct StageSpec {
  int cells = 1;
  int channels = 16;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Macro structure wrapped around the searched cell:
///
///   stem conv3x3 + BN
///   -> stage 0 cells -> reduction -> stage 1 cells -> ... -> last stage cells
///   -> BN -> ReLU -> global average pool -> linear
///
/// Reductions are residual blocks that halve the resolution and switch to
/// the next stage's channel count. The stem emits stages[0].channels.
struct MacroSkeleton {
  FeatureShape input{3, 32, 32, false};
  std::vector<StageSpec> stages{{1, 16}, {1, 32}, {1, 64}};
  int num_classes = 10;

  /// Three 1-cell stages at 16/32/64 channels.
  static MacroSkeleton desk() { return {}; }

  /// The full benchmark depth: 5 cells per stage.
  static MacroSkeleton full() {
    MacroSkeleton sk;
    for (auto& stage : sk.stages) stage.cells = 5;
    return sk;
  }

  void validate() const {
    if (input.channels <= 0 || input.height <= 0 || input.width <= 0 || input.flat) {
      throw InvalidSkeleton("input shape must be a positive C x H x W feature map");
    }
    if (stages.empty()) throw InvalidSkeleton("at least one stage is required");
    for (const auto& s : stages) {
      if (s.cells < 1) throw InvalidSkeleton("every stage needs at least one cell");
      if (s.channels < 1) throw InvalidSkeleton("stage channel counts must be positive");
    }
    if (num_classes < 1) throw InvalidSkeleton("num_classes must be positive");
  }

  friend bool operator==(const MacroSkeleton&, const MacroSkeleton&) = default;
};

struct CostReport {
  std::int64_t params = 0;
  /// Multiply-accumulates count as two FLOPs.
  std::int64_t flops = 0;
  friend bool operator==(const CostReport&, const CostReport&) = default;
};

/// Node ids of each materialized cell's input and output.
struct NetworkLayout {
  std::vector<std::pair<int, int>> cells;
  int stem_output = 0;
};

namespace detail {

// ReLU -> conv -> BN, the convolutional operator of both cell families.
inline int relu_conv_bn(Network& net, int from, int channels, int kernel, int stride) {
  int x = net.add_relu(from);
  x = net.add_conv(x, channels, kernel, stride);
  return net.add_batch_norm(x);
}

inline int reduction_block(Network& net, int from, int channels) {
  int a = relu_conv_bn(net, from, channels, 3, 2);
  a = relu_conv_bn(net, a, channels, 3, 1);
  const int shortcut = net.add_conv(from, channels, 1, 2);
  return net.add_sum({a, shortcut}, net.nodes()[a].out_shape);
}

inline int nats_cell(Network& net, int from, const Genotype& g) {
  const FeatureShape shape = net.nodes()[from].out_shape;
  std::array<int, kNatsNodes> node{};
  node[0] = from;
  for (int j = 1; j < kNatsNodes; ++j) {
    std::vector<int> terms;
    for (int i = 0; i < j; ++i) {
      switch (g.edge_op(i, j)) {
        case Op::conv1x1: terms.push_back(relu_conv_bn(net, node[i], shape.channels, 1, 1)); break;
        case Op::conv3x3: terms.push_back(relu_conv_bn(net, node[i], shape.channels, 3, 1)); break;
        case Op::avgpool3x3: terms.push_back(net.add_avg_pool(node[i], 1)); break;
        case Op::skip: terms.push_back(node[i]); break;
        case Op::zero: break;
        case Op::maxpool3x3: throw InvalidGenotype("maxpool3x3 is not a NATS operator");
      }
    }
    node[j] = net.add_sum(terms, shape);
  }
  return node[kNatsNodes - 1];
}

// Sum-aggregation NB101 cell: every interior node applies its operator to
// the sum of its incoming edges; the output sums its incoming edges.
inline int nb101_cell(Network& net, int from, const Genotype& raw) {
  const Genotype g = raw.canonical();
  const FeatureShape shape = net.nodes()[from].out_shape;
  const int n = g.node_count();
  std::vector<int> node(n, -1);
  node[0] = from;
  for (int v = 1; v < n; ++v) {
    std::vector<int> terms;
    for (int u = 0; u < v; ++u)
      if (g.has_edge(u, v)) terms.push_back(node[u]);
    const int merged = terms.size() == 1 ? terms[0] : net.add_sum(terms, shape);
    if (v == n - 1) {
      node[v] = merged;
      break;
    }
    switch (g.node_op(v)) {
      case Op::conv1x1: node[v] = relu_conv_bn(net, merged, shape.channels, 1, 1); break;
      case Op::conv3x3: node[v] = relu_conv_bn(net, merged, shape.channels, 3, 1); break;
      case Op::maxpool3x3: node[v] = net.add_max_pool(merged, 1); break;
      default: throw InvalidGenotype("operator is not an NB101 operator");
    }
  }
  return node[n - 1];
}

}  // namespace detail

/// Materializes the genotype into a network with all-zero parameters.
inline Network build_network(const Genotype& g, const MacroSkeleton& sk,
                             NetworkLayout* layout = nullptr) {
  sk.validate();
  if (!g.valid()) throw InvalidGenotype(g.to_string());
  Network net(sk.input);
  int x = net.add_conv(net.input(), sk.stages.front().channels, 3, 1);
  x = net.add_batch_norm(x);
  if (layout) layout->stem_output = x;
  for (std::size_t s = 0; s < sk.stages.size(); ++s) {
    if (s > 0) x = detail::reduction_block(net, x, sk.stages[s].channels);
    for (int c = 0; c < sk.stages[s].cells; ++c) {
      const int in = x;
      x = g.family() == Family::nats ? detail::nats_cell(net, x, g) : detail::nb101_cell(net, x, g);
      if (layout) layout->cells.emplace_back(in, x);
    }
  }
  x = net.add_batch_norm(x);
  x = net.add_relu(x);
  x = net.add_global_avg_pool(x);
  x = net.add_linear(x, sk.num_classes);
  net.set_output(x);
  return net;
}

/// Materializes the genotype and draws fresh weights from `rng`.
inline Network build_network(const Genotype& g, const MacroSkeleton& sk, Rng& rng,
                             NetworkLayout* layout = nullptr) {
  Network net = build_network(g, sk, layout);
  net.initialize(rng);
  return net;
}

inline std::int64_t count_params(const Network& net) {
  return static_cast<std::int64_t>(net.parameter_count());
}

/// Per-sample FLOPs: conv 2*Cin*Cout*K^2*Ho*Wo, linear 2*in*out, pooling
/// K^2*Ho*Wo*C (global pooling reads H*W*C); BN, ReLU and sums are free.
inline std::int64_t count_flops(const Network& net, const FeatureShape& input_shape) {
  if (!(input_shape == net.input_shape())) {
    throw ShapeMismatch("node 0: cost input shape differs from the network input shape");
  }
  std::int64_t total = 0;
  for (const auto& node : net.nodes()) {
    const auto& in = node.in_shape;
    const auto& out = node.out_shape;
    const std::int64_t out_plane = static_cast<std::int64_t>(out.height) * out.width;
    switch (node.kind) {
      case LayerKind::conv:
        total += 2LL * in.channels * out.channels * node.kernel * node.kernel * out_plane;
        break;
      case LayerKind::linear:
        total += 2LL * in.channels * out.channels;
        break;
      case LayerKind::avg_pool:
      case LayerKind::max_pool:
        total += 9LL * out_plane * out.channels;
        break;
      case LayerKind::global_avg_pool:
        total += static_cast<std::int64_t>(in.height) * in.width * in.channels;
        break;
      default:
        break;
    }
  }
  return total;
}

inline CostReport compute_cost(const Genotype& g, const MacroSkeleton& sk) {
  const Network net = build_network(g, sk);
  return {count_params(net), count_flops(net, sk.input)};
}

}  // namespace freerea
