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

// Training-free proxies evaluated on freshly initialized networks:
//
//   log_synflow     sum_i |theta_i| * log(1 + dR/dtheta_i), R = sum of logits
//                   for an all-ones input with batch norm bypassed
//   synflow         sum_i |theta_i| * dR/dtheta_i (reference, prone to blow up)
//   linear_regions  log|det K| with K[i][j] = N_A - hamming(c_i, c_j) over the
//                   binary ReLU activation codes of a 64-sample batch
//   skip_score      layers bypassed by skip edges / number of skip edges

#pragma once

#include <Eigen/Core>
#include <Eigen/LU>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "freerea/autodiff.hpp"
#include "freerea/errors.hpp"
#include "freerea/netbuilder.hpp"
#include "freerea/random.hpp"
#include "freerea/searchspace.hpp"

namespace freerea {

inline constexpr std::size_t kLinearRegionsBatch = 64;
inline constexpr double kSingularKernel = -std::numeric_limits<double>::infinity();

struct MetricVector {
  double log_synflow = 0.0;
  /// kSingularKernel when the activation kernel is singular.
  double linear_regions = 0.0;
  double skip_score = 0.0;
  friend bool operator==(const MetricVector&, const MetricVector&) = default;
};

namespace detail {

inline void abs_parameters(Network& net) {
  for (auto& p : net.parameters())
    for (double& v : p.values()) v = std::abs(v);
}

// Gradients of R = sum(logits) for an all-ones input, batch norm bypassed.
inline void synflow_backward(Network& net) {
  const FeatureShape& s = net.input_shape();
  Tensor ones({1, static_cast<std::size_t>(s.channels), static_cast<std::size_t>(s.height),
               static_cast<std::size_t>(s.width)},
              1.0);
  Tensor out = net.forward(ones, ForwardMode::bn_suppressed, true);
  net.zero_grad();
  net.backward(Tensor(out.shape(), 1.0));
}

}  // namespace detail

/// Scores `net` in place: parameters are replaced by their absolute values.
inline double log_synflow(Network& net) {
  detail::abs_parameters(net);
  detail::synflow_backward(net);
  double score = 0.0;
  for (const auto& p : net.parameters()) {
    const auto theta = p.values();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < theta.size(); ++i)
      score += theta[i] * std::log1p(std::max(grad[i], 0.0));
  }
  return score;
}

/// Scores `net` in place like log_synflow(). May return +inf when the
/// gradients overflow; callers treat a non-finite value as an overflow report.
inline double synflow(Network& net) {
  detail::abs_parameters(net);
  detail::synflow_backward(net);
  double score = 0.0;
  for (const auto& p : net.parameters()) {
    const auto theta = p.values();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) score += theta[i] * grad[i];
  }
  return score;
}

inline double log_synflow(const Genotype& g, const MacroSkeleton& sk, Rng& rng) {
  Network net = build_network(g, sk, rng);
  return log_synflow(net);
}

inline double synflow(const Genotype& g, const MacroSkeleton& sk, Rng& rng) {
  Network net = build_network(g, sk, rng);
  return synflow(net);
}

/// K[i][j] = units - hamming(codes[i], codes[j]).
inline Eigen::MatrixXd hamming_kernel(const std::vector<std::vector<std::uint64_t>>& codes,
                                      std::size_t units) {
  const auto n = static_cast<Eigen::Index>(codes.size());
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    k(i, i) = static_cast<double>(units);
    for (Eigen::Index j = i + 1; j < n; ++j) {
      std::size_t distance = 0;
      const auto& a = codes[i];
      const auto& b = codes[j];
      for (std::size_t w = 0; w < a.size(); ++w) distance += std::popcount(a[w] ^ b[w]);
      k(i, j) = k(j, i) = static_cast<double>(units - distance);
    }
  }
  return k;
}

/// log|det m|, or kSingularKernel when m is numerically singular.
inline double log_abs_det(const Eigen::MatrixXd& m) {
  Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
  if (!lu.isInvertible()) return kSingularKernel;
  double acc = 0.0;
  const auto& u = lu.matrixLU();
  for (Eigen::Index i = 0; i < u.rows(); ++i) acc += std::log(std::abs(u(i, i)));
  return acc;
}

/// Standard forward of `batch`, then log|det| of the activation kernel.
inline double linear_regions(Network& net, const Tensor& batch) {
  const FeatureShape& s = net.input_shape();
  const Shape& b = batch.shape();
  if (b.size() != 4 || b[0] < 2 || b[1] != static_cast<std::size_t>(s.channels) ||
      b[2] != static_cast<std::size_t>(s.height) || b[3] != static_cast<std::size_t>(s.width)) {
    throw BatchShapeMismatch("linear regions needs a [N>=2, C, H, W] batch matching the input");
  }
  net.forward(batch, ForwardMode::standard, false);
  return log_abs_det(hamming_kernel(net.relu_masks(), net.relu_units()));
}

inline double linear_regions(const Genotype& g, const MacroSkeleton& sk, const Tensor& batch,
                             Rng& rng) {
  Network net = build_network(g, sk, rng);
  return linear_regions(net, batch);
}

/// Seeded standard-normal batch of kLinearRegionsBatch samples.
inline Tensor gaussian_batch(const FeatureShape& input, std::uint64_t seed,
                             std::size_t samples = kLinearRegionsBatch) {
  Tensor t({samples, static_cast<std::size_t>(input.channels),
            static_cast<std::size_t>(input.height), static_cast<std::size_t>(input.width)});
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : t.values()) v = normal(rng);
  return t;
}

/// Layers bypassed per skip edge. For skip edge (i, j) the bypassed count is
/// the longest i -> j path, not using that edge, counted in convolution and
/// pooling edges (skip edges count 0, zeroized edges are not connections).
/// NB101 has no skip operator and always scores 0.
inline double skip_score(const Genotype& g) {
  if (g.family() != Family::nats) return 0.0;
  constexpr int kUnreachable = -1;
  int skips = 0;
  int bypassed = 0;
  for (int k = 0; k < kNatsEdges; ++k) {
    if (g.edge_ops()[k] != Op::skip) continue;
    ++skips;
    const auto [from, to] = kNatsEdgeList[k];
    std::array<int, kNatsNodes> longest;
    longest.fill(kUnreachable);
    longest[from] = 0;
    for (int v = from + 1; v <= to; ++v) {
      for (int u = from; u < v; ++u) {
        const int e = nats_edge_index(u, v);
        const Op op = g.edge_ops()[e];
        if (e == k || op == Op::zero || longest[u] == kUnreachable) continue;
        longest[v] = std::max(longest[v], longest[u] + (op == Op::skip ? 0 : 1));
      }
    }
    bypassed += std::max(longest[to], 0);
  }
  return skips == 0 ? 0.0 : static_cast<double>(bypassed) / skips;
}

/// Proxy values of one repeat (one weight initialization).
struct RepeatScores {
  double log_synflow = 0.0;
  double linear_regions = 0.0;
};

/// One repeat: a single initialization drawn from `repeat_seed` serves both
/// linear regions (signed weights) and then log_synflow (absolute weights).
inline RepeatScores evaluate_once(const Genotype& g, const MacroSkeleton& sk,
                                  std::uint64_t repeat_seed, const Tensor& batch) {
  Rng rng(repeat_seed);
  Network net = build_network(g, sk, rng);
  RepeatScores r;
  r.linear_regions = linear_regions(net, batch);
  r.log_synflow = log_synflow(net);
  return r;
}

struct EvaluationOptions {
  int repeats = 3;
  std::uint64_t seed = 0;
  /// Draw a fresh input batch per repeat instead of one batch per run.
  bool batch_per_repeat = false;
  /// User-supplied batch; overrides the synthetic one.
  std::shared_ptr<const Tensor> batch;
};

struct Evaluation {
  MetricVector mean;
  std::vector<RepeatScores> repeats;
};

/// Seed of repeat r of genotype g under a master seed. Stable, so a memo hit
/// and a recomputation agree.
inline std::uint64_t repeat_seed(std::uint64_t master, const Genotype& g, int repeat) {
  return derive_seed(derive_seed(master, canonical_hash(g)), static_cast<std::uint64_t>(repeat));
}

inline std::uint64_t batch_seed(std::uint64_t master) { return derive_seed(master, 0xba7c4ULL); }

inline Evaluation evaluate_detailed(const Genotype& g, const MacroSkeleton& sk,
                                    const EvaluationOptions& options) {
  if (options.repeats < 1) throw InvalidConfig("repeats must be at least 1");
  Evaluation out;
  std::optional<Tensor> shared;
  if (!options.batch_per_repeat && !options.batch)
    shared = gaussian_batch(sk.input, batch_seed(options.seed));
  double ls = 0.0;
  double lr = 0.0;
  for (int r = 0; r < options.repeats; ++r) {
    const std::uint64_t seed = repeat_seed(options.seed, g, r);
    RepeatScores s;
    if (options.batch) s = evaluate_once(g, sk, seed, *options.batch);
    else if (shared) s = evaluate_once(g, sk, seed, *shared);
    else s = evaluate_once(g, sk, seed, gaussian_batch(sk.input, derive_seed(seed, 0x5a)));
    out.repeats.push_back(s);
    ls += s.log_synflow;
    lr += s.linear_regions;
  }
  out.mean.log_synflow = ls / options.repeats;
  out.mean.linear_regions = lr / options.repeats;
  out.mean.skip_score = skip_score(g);
  return out;
}

inline MetricVector evaluate(const Genotype& g, const MacroSkeleton& sk,
                             const EvaluationOptions& options) {
  return evaluate_detailed(g, sk, options).mean;
}

/// Memoizing evaluator keyed by canonical hash. Safe for concurrent use.
class MetricEvaluator {
 public:
  MetricEvaluator(MacroSkeleton skeleton, EvaluationOptions options)
      : skeleton_(std::move(skeleton)), options_(std::move(options)) {
    if (!options_.batch && !options_.batch_per_repeat) {
      options_.batch =
          std::make_shared<const Tensor>(gaussian_batch(skeleton_.input, batch_seed(options_.seed)));
    }
  }

  MetricVector operator()(const Genotype& g) {
    const std::uint64_t key = canonical_hash(g);
    {
      std::shared_lock lock(mutex_);
      if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    const MetricVector v = evaluate(g, skeleton_, options_);
    std::unique_lock lock(mutex_);
    cache_.emplace(key, v);
    return v;
  }

  std::size_t cached() const {
    std::shared_lock lock(mutex_);
    return cache_.size();
  }

  const MacroSkeleton& skeleton() const { return skeleton_; }

 private:
  MacroSkeleton skeleton_;
  EvaluationOptions options_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::uint64_t, MetricVector> cache_;
};

// Batch file: 16-byte little-endian header
//   bytes 0-3  magic "FRB1"
//   bytes 4-7  N (uint32)
//   bytes 8-9  C, 10-11 H, 12-13 W (uint16), 14-15 reserved (0)
// followed by N*C*H*W little-endian float64 values in NCHW order.
inline constexpr std::array<char, 4> kBatchMagic = {'F', 'R', 'B', '1'};

namespace detail {

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace detail

inline void write_batch_file(const std::string& path, const Tensor& batch) {
  const Shape& s = batch.shape();
  if (s.size() != 4) throw BatchShapeMismatch("batch files hold [N, C, H, W] tensors");
  std::vector<unsigned char> bytes(kBatchMagic.begin(), kBatchMagic.end());
  detail::put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(s[0]));
  detail::put_le<std::uint16_t>(bytes, static_cast<std::uint16_t>(s[1]));
  detail::put_le<std::uint16_t>(bytes, static_cast<std::uint16_t>(s[2]));
  detail::put_le<std::uint16_t>(bytes, static_cast<std::uint16_t>(s[3]));
  detail::put_le<std::uint16_t>(bytes, 0);
  for (double v : batch.values()) detail::put_le<std::uint64_t>(bytes, std::bit_cast<std::uint64_t>(v));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Tensor read_batch_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open batch file '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kBatchMagic.data(), 4) != 0) {
    throw ParseError("'" + path + "' is not a batch file (bad magic)");
  }
  const Shape shape{detail::get_le<std::uint32_t>(&bytes[4]), detail::get_le<std::uint16_t>(&bytes[8]),
                    detail::get_le<std::uint16_t>(&bytes[10]),
                    detail::get_le<std::uint16_t>(&bytes[12])};
  Tensor t(shape);
  if (bytes.size() != 16 + 8 * t.size()) {
    throw ParseError("batch file '" + path + "' payload size does not match its header");
  }
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(&bytes[16 + 8 * i]));
  return t;
}

}  // namespace freerea
