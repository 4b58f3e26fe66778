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

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <mutex>
#include <shared_mutex>
#include <unordered_map>
#include <vector>

#include "freerea/errors.hpp"
#include "freerea/metrics.hpp"
#include "freerea/searchspace.hpp"

namespace freerea {

/// Which normalized terms enter the fitness sum (all by default; switch one
/// off for leave-one-out ablations).
struct FitnessTerms {
  bool log_synflow = true;
  bool linear_regions = true;
  bool skip = true;
  friend bool operator==(const FitnessTerms&, const FitnessTerms&) = default;
};

/// The explored set J: every evaluated architecture with the running maximum
/// of each metric. Fitness of a vector is the sum over enabled metrics of
/// value / max over J.
///
/// Maxima only move up, so previously computed fitness values go stale as J
/// grows; callers recompute at comparison time.
class ExploredRegistry {
 public:
  struct Entry {
    Genotype genotype;
    MetricVector metrics;
  };

  explicit ExploredRegistry(FitnessTerms terms = {}) : terms_(terms) {}

  ExploredRegistry(const ExploredRegistry& other) {
    std::shared_lock lock(other.mutex_);
    terms_ = other.terms_;
    entries_ = other.entries_;
    index_ = other.index_;
    maxima_ = other.maxima_;
  }

  /// Returns false (and changes nothing) when the genotype is already known.
  bool add(const Genotype& g, const MetricVector& v) {
    const std::uint64_t key = canonical_hash(g);
    std::unique_lock lock(mutex_);
    if (index_.contains(key)) return false;
    index_.emplace(key, entries_.size());
    entries_.push_back({g, v});
    raise(maxima_.log_synflow, v.log_synflow);
    raise(maxima_.linear_regions, v.linear_regions);
    raise(maxima_.skip_score, v.skip_score);
    return true;
  }

  /// Running maxima over finite values; -inf for a metric with none yet.
  MetricVector maxima() const {
    std::shared_lock lock(mutex_);
    return maxima_;
  }

  double fitness(const MetricVector& v) const {
    std::shared_lock lock(mutex_);
    if (entries_.empty()) throw EmptyRegistry("fitness needs at least one explored network");
    double f = 0.0;
    if (terms_.log_synflow) f += term(v.log_synflow, maxima_.log_synflow);
    if (terms_.linear_regions) f += term(v.linear_regions, maxima_.linear_regions);
    if (terms_.skip) f += term(v.skip_score, maxima_.skip_score);
    return f;
  }

  bool contains(const Genotype& g) const {
    std::shared_lock lock(mutex_);
    return index_.contains(canonical_hash(g));
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

  /// Entries in registration order.
  std::vector<Entry> entries() const {
    std::shared_lock lock(mutex_);
    return entries_;
  }

  const FitnessTerms& terms() const { return terms_; }

  /// Normalized contribution of one metric: value / max, or 0 when the max
  /// is not a positive finite number or the value is not finite.
  static double term(double value, double max) {
    if (!std::isfinite(max) || max <= 0.0 || !std::isfinite(value)) return 0.0;
    return value / max;
  }

 private:
  static void raise(double& max, double value) {
    if (std::isfinite(value) && value > max) max = value;
  }

  FitnessTerms terms_;
  mutable std::shared_mutex mutex_;
  std::vector<Entry> entries_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  MetricVector maxima_{-std::numeric_limits<double>::infinity(),
                       -std::numeric_limits<double>::infinity(),
                       -std::numeric_limits<double>::infinity()};
};

}  // namespace freerea
