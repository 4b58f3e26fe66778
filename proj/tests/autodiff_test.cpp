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

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "freerea/autodiff.hpp"
#include "freerea/gradcheck.hpp"
#include "freerea/netbuilder.hpp"
#include "oracles.hpp"

namespace freerea {
namespace {

Tensor RandomInput(std::size_t n, const FeatureShape& s, std::uint64_t seed) {
  Tensor t({n, static_cast<std::size_t>(s.channels), static_cast<std::size_t>(s.height),
            static_cast<std::size_t>(s.width)});
  Rng rng(seed);
  std::normal_distribution<double> normal;
  for (double& v : t.values()) v = normal(rng);
  return t;
}

void RandomizeParameters(Network& net, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 0.5);
  for (auto& p : net.parameters())
    for (double& v : p.values()) v = normal(rng);
}

// Every operator kind, both strides, a branch and a merge.
Network Zoo(const FeatureShape& in) {
  Network net(in);
  int x = net.add_conv(net.input(), 4, 3, 1);
  x = net.add_batch_norm(x);
  const int a = net.add_relu(x);
  int b = net.add_conv(a, 4, 1, 1);
  b = net.add_batch_norm(b);
  const int c = net.add_avg_pool(a, 1);
  int s = net.add_sum({a, b, c}, net.nodes()[a].out_shape);
  const int m = net.add_max_pool(s, 2);
  int d = net.add_conv(net.add_relu(s), 5, 3, 2);
  int e = net.add_conv(m, 5, 1, 1);
  s = net.add_sum({d, e}, net.nodes()[d].out_shape);
  s = net.add_relu(s);
  s = net.add_global_avg_pool(s);
  net.set_output(net.add_linear(s, 3));
  return net;
}

double MaxRelDiff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), 1e-300}));
  return worst;
}

TEST(Autodiff, ForwardMatchesNaiveReference) {
  const FeatureShape in{3, 7, 6, false};
  for (auto mode : {ForwardMode::standard, ForwardMode::bn_suppressed}) {
    Network net = Zoo(in);
    RandomizeParameters(net, 4);
    const Tensor x = RandomInput(2, in, 5);
    net.forward(x, mode);
    const std::vector<double> flat(x.values().begin(), x.values().end());
    const auto ref = oracle::naive_forward(net, flat, 2, mode == ForwardMode::bn_suppressed);
    for (std::size_t k = 0; k < net.nodes().size(); ++k) {
      ASSERT_EQ(net.activation(static_cast<int>(k)).size(), ref[k].size());
      EXPECT_LT(MaxRelDiff(net.activation(static_cast<int>(k)), ref[k]), 1e-12) << "node " << k;
    }
  }
}

TEST(Autodiff, ZeroInputGivesZeroLogits) {
  Rng rng(1);
  Network net = build_network(Genotype::parse("nats:(conv3x3|skip|conv1x1|avgpool3x3|conv3x3|skip)"),
                              MacroSkeleton::desk(), rng);
  const Tensor out = net.forward(Tensor({2, 3, 32, 32}));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, LinearGradientIsOuterProduct) {
  Network net(FeatureShape{3, 1, 1, true});
  const int y = net.add_linear(net.input(), 2);
  net.set_output(y);
  RandomizeParameters(net, 8);
  Tensor x({1, 3, 1, 1});
  x[0] = 0.5, x[1] = -2.0, x[2] = 3.0;
  net.forward(x);
  Tensor g({1, 2});
  g[0] = 1.5, g[1] = -0.25;
  net.zero_grad();
  net.backward(g);
  const auto dw = net.parameters()[net.nodes()[y].params[0]].grad();
  for (int o = 0; o < 2; ++o)
    for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(dw[o * 3 + i], g[o] * x[i]);
  const auto db = net.parameters()[net.nodes()[y].params[1]].grad();
  EXPECT_DOUBLE_EQ(db[0], 1.5);
  EXPECT_DOUBLE_EQ(db[1], -0.25);
}

TEST(Autodiff, BackwardAccumulates) {
  const FeatureShape in{3, 5, 5, false};
  Network net = Zoo(in);
  RandomizeParameters(net, 2);
  net.forward(RandomInput(2, in, 3));
  Tensor g({2, 3}, 1.0);
  net.zero_grad();
  net.backward(g);
  std::vector<std::vector<double>> once;
  for (const auto& p : net.parameters()) once.emplace_back(p.grad().begin(), p.grad().end());
  net.backward(g);
  for (std::size_t p = 0; p < once.size(); ++p)
    for (std::size_t i = 0; i < once[p].size(); ++i)
      EXPECT_NEAR(net.parameters()[p].grad()[i], 2.0 * once[p][i], 1e-12 * std::max(1.0, std::abs(once[p][i])));
}

TEST(Autodiff, GradientsMatchFiniteDifferences) {
  const FeatureShape in{3, 6, 6, false};
  for (auto mode : {ForwardMode::standard, ForwardMode::bn_suppressed}) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      Network net = Zoo(in);
      RandomizeParameters(net, 100 + seed);
      FiniteDiffOptions o;
      o.seed = seed;
      o.mode = mode;
      o.samples = 100000;  // exhaustive
      const auto report = finite_diff_check(net, RandomInput(2, in, seed), o);
      EXPECT_TRUE(report.passed) << report.max_relative_deviation;
      EXPECT_GT(report.checked, report.skipped);
    }
  }
}

TEST(Autodiff, FiniteDiffOnNatsCellNetwork) {
  Rng rng(9);
  Network net = build_network(Genotype::parse("nats:(conv3x3|conv1x1|avgpool3x3|skip|conv3x3|conv1x1)"),
                              MacroSkeleton{{3, 8, 8, false}, {{1, 16}}, 10}, rng);
  FiniteDiffOptions o;
  o.samples = 300;
  const auto report = finite_diff_check(net, RandomInput(2, {3, 8, 8, false}, 1), o);
  EXPECT_TRUE(report.passed) << report.max_relative_deviation;
  EXPECT_EQ(report.checked, 300u);
}

TEST(Autodiff, FiniteDiffWithAllZeroWeights) {
  const FeatureShape in{3, 5, 5, false};
  Network net = Zoo(in);
  const auto report = finite_diff_check(net, RandomInput(1, in, 2), FiniteDiffOptions{});
  EXPECT_LT(report.max_relative_deviation, 1e-4);
}

TEST(Autodiff, CorruptedGradientIsDetected) {
  const FeatureShape in{3, 6, 6, false};
  Network net = Zoo(in);
  RandomizeParameters(net, 77);
  FiniteDiffOptions o;
  o.samples = 100000;
  const int conv_weight = net.nodes()[1].params[0];
  o.after_backward = [conv_weight](Network& n) {
    for (double& g : n.parameters()[conv_weight].grad()) g *= 1.1;
  };
  const auto report = finite_diff_check(net, RandomInput(2, in, 3), o);
  EXPECT_FALSE(report.passed);
  EXPECT_GT(report.max_relative_deviation, 1e-2);
}

TEST(Autodiff, BnSuppressionIgnoresAffineParameters) {
  const FeatureShape in{3, 5, 5, false};
  Network net = Zoo(in);
  RandomizeParameters(net, 5);
  const Tensor x = RandomInput(2, in, 6);
  const Tensor before = net.forward(x, ForwardMode::bn_suppressed);
  for (const auto& node : net.nodes())
    if (node.kind == LayerKind::batch_norm)
      for (int p : node.params)
        for (double& v : net.parameters()[p].values()) v = v * 3.0 + 1.0;
  const Tensor after = net.forward(x, ForwardMode::bn_suppressed);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);
  const Tensor standard = net.forward(x, ForwardMode::standard);
  EXPECT_NE(standard[0], after[0]);
}

TEST(Autodiff, ForwardIsDeterministicAndForwardFromAgrees) {
  const FeatureShape in{3, 5, 5, false};
  Network net = Zoo(in);
  RandomizeParameters(net, 12);
  const Tensor x = RandomInput(2, in, 13);
  const Tensor a = net.forward(x);
  const Tensor b = net.forward(x);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);

  const int node = 10;
  for (int p : net.nodes()[node].params)
    for (double& v : net.parameters()[p].values()) v += 0.1;
  const Tensor partial = net.forward_from(node);
  const Tensor full = net.forward(x);
  for (std::size_t i = 0; i < full.size(); ++i) EXPECT_EQ(partial[i], full[i]);
}

TEST(Autodiff, ReluMasksMatchActivations) {
  const FeatureShape in{3, 4, 4, false};
  Network net = Zoo(in);
  RandomizeParameters(net, 21);
  net.forward(RandomInput(3, in, 22));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < net.nodes().size(); ++k) {
    if (net.nodes()[k].kind != LayerKind::relu) continue;
    const std::size_t per = net.nodes()[k].out_shape.size();
    const auto act = net.activation(static_cast<int>(k));
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t i = 0; i < per; ++i) {
        const std::size_t b = offset + i;
        const bool bit = (net.relu_masks()[n][b / 64] >> (b % 64)) & 1;
        EXPECT_EQ(bit, act[n * per + i] > 0.0);
      }
    offset += per;
  }
  EXPECT_EQ(offset, net.relu_units());
}

TEST(Autodiff, ErrorsAreTyped) {
  const FeatureShape in{3, 4, 4, false};
  Network net = Zoo(in);
  EXPECT_THROW(net.forward(Tensor({1, 2, 4, 4})), ShapeMismatch);
  EXPECT_THROW(net.backward(Tensor({1, 3})), NoForwardCache);
  EXPECT_THROW(net.forward_from(1), NoForwardCache);
  net.forward(RandomInput(1, in, 1), ForwardMode::standard, false);
  EXPECT_THROW(net.backward(Tensor({1, 3})), NoForwardCache);
  EXPECT_THROW(net.add_linear(net.input(), 2), ShapeMismatch);
  EXPECT_THROW(net.add_sum({1, 8}, net.nodes()[1].out_shape), ShapeMismatch);
}

TEST(Autodiff, EmptySumEmitsZeros) {
  const FeatureShape in{2, 3, 3, false};
  Network net(in);
  net.set_output(net.add_sum({}, in));
  const Tensor out = net.forward(RandomInput(2, in, 0));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

}  // namespace
}  // namespace freerea
