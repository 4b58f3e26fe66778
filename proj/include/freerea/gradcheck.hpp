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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <unordered_set>
#include <vector>

#include "freerea/autodiff.hpp"
#include "freerea/random.hpp"

namespace freerea {

struct FiniteDiffOptions {
  double epsilon = 1e-4;
  double tolerance = 1e-4;
  /// Coordinates to check. Networks with at most this many parameters are
  /// checked exhaustively.
  std::size_t samples = 200;
  /// Denominator floor of the relative deviation, so gradients that are zero
  /// up to rounding do not blow the ratio up.
  double magnitude_floor = 1e-6;
  std::uint64_t seed = 0;
  ForwardMode mode = ForwardMode::standard;
  /// Called right after backward(), before any comparison. Negative-control
  /// tests use it to corrupt gradients.
  std::function<void(Network&)> after_backward;
};

struct FiniteDiffReport {
  double max_relative_deviation = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose perturbation flipped a ReLU sign or a max-pool choice;
  /// the loss is not differentiable across those, so they are resampled.
  std::size_t skipped = 0;
  bool passed = false;
};

/// Compares backward() against central differences of the scalar loss
/// sum(output * r) for a fixed random r.
inline FiniteDiffReport finite_diff_check(Network& net, const Tensor& input,
                                          const FiniteDiffOptions& options = {}) {
  Rng rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Tensor out = net.forward(input, options.mode, true);
  Tensor direction(out.shape());
  for (double& r : direction.values()) r = normal(rng);
  auto loss_of = [&](const Tensor& t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) acc += t[i] * direction[i];
    return acc;
  };

  net.zero_grad();
  net.backward(direction);
  if (options.after_backward) options.after_backward(net);

  // Owner node of each parameter tensor, to rerun only the affected suffix.
  auto& params = net.parameters();
  std::vector<int> owner(params.size(), 0);
  for (std::size_t k = 0; k < net.nodes().size(); ++k)
    for (int p : net.nodes()[k].params) owner[p] = static_cast<int>(k);
  std::vector<std::size_t> offsets(params.size() + 1, 0);
  for (std::size_t p = 0; p < params.size(); ++p) offsets[p + 1] = offsets[p] + params[p].size();
  const std::size_t total = offsets.back();

  auto pattern = [&] {
    std::vector<std::uint64_t> sig;
    for (const auto& m : net.relu_masks()) sig.insert(sig.end(), m.begin(), m.end());
    for (std::size_t k = 0; k < net.nodes().size(); ++k) {
      if (net.nodes()[k].kind != LayerKind::max_pool) continue;
      for (auto c : net.max_pool_choices(static_cast<int>(k)))
        sig.push_back(static_cast<std::uint64_t>(c));
    }
    return sig;
  };
  const auto base_pattern = pattern();

  std::vector<std::size_t> order;
  if (total <= options.samples) {
    order.resize(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;
  } else {
    // Oversample so kink-adjacent coordinates can be replaced.
    std::unordered_set<std::size_t> seen;
    const std::size_t want = std::min(total, options.samples * 4);
    while (order.size() < want) {
      const std::size_t i = uniform_index(rng, total);
      if (seen.insert(i).second) order.push_back(i);
    }
  }

  FiniteDiffReport report;
  for (std::size_t flat : order) {
    if (report.checked >= options.samples) break;
    const auto p = static_cast<std::size_t>(
        std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
    const std::size_t e = flat - offsets[p];
    double& theta = params[p].values()[e];
    const double saved = theta;

    theta = saved + options.epsilon;
    const double plus = loss_of(net.forward_from(owner[p]));
    const bool plus_same = pattern() == base_pattern;
    theta = saved - options.epsilon;
    const double minus = loss_of(net.forward_from(owner[p]));
    const bool minus_same = pattern() == base_pattern;
    theta = saved;
    net.forward_from(owner[p]);

    if (!plus_same || !minus_same) {
      ++report.skipped;
      continue;
    }
    const double numeric = (plus - minus) / (2.0 * options.epsilon);
    const double analytic = params[p].grad()[e];
    const double scale =
        std::max({std::abs(analytic), std::abs(numeric), options.magnitude_floor});
    report.max_relative_deviation =
        std::max(report.max_relative_deviation, std::abs(analytic - numeric) / scale);
    ++report.checked;
  }
  net.forward(input, options.mode, true);
  report.passed = report.checked > 0 && report.max_relative_deviation < options.tolerance;
  return report;
}

}  // namespace freerea
