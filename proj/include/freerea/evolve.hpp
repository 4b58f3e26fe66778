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

// Tournament selection with ageing over a training-free fitness.
//
// FreeREA step: sample n of the N individuals, take the top two as parents,
// breed mutate(p1), mutate(p2) and crossover(p1, p2), add them, kill the
// oldest individual and truncate to the top N by current fitness.
//
// FreeREA-minus step (classic REA): sample n, mutate the best, add the
// child, kill the oldest.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "freerea/errors.hpp"
#include "freerea/fitness.hpp"
#include "freerea/metrics.hpp"
#include "freerea/netbuilder.hpp"
#include "freerea/random.hpp"
#include "freerea/searchspace.hpp"

namespace freerea {

enum class Algorithm : std::uint8_t { freerea, freerea_minus };

inline std::string_view algorithm_name(Algorithm a) {
  return a == Algorithm::freerea ? "freerea" : "freerea-minus";
}

struct ConstraintSpec {
  std::optional<std::int64_t> max_flops;
  std::optional<std::int64_t> max_params;

  bool active() const { return max_flops.has_value() || max_params.has_value(); }

  void validate() const {
    if ((max_flops && *max_flops <= 0) || (max_params && *max_params <= 0)) {
      throw InvalidConfig("constraint thresholds must be positive");
    }
  }
  friend bool operator==(const ConstraintSpec&, const ConstraintSpec&) = default;
};

inline bool feasible(const CostReport& cost, const ConstraintSpec& c) {
  if (c.max_flops && cost.flops > *c.max_flops) return false;
  if (c.max_params && cost.params > *c.max_params) return false;
  return true;
}

inline bool feasible(const Genotype& g, const MacroSkeleton& sk, const ConstraintSpec& c) {
  if (!c.active()) return true;
  return feasible(compute_cost(g, sk), c);
}

/// Retry cap per constrained child slot.
inline constexpr int kChildRetryCap = 200;
/// Initial population attempts (times N) before duplicates are allowed.
inline constexpr int kDistinctAttemptFactor = 50;

struct SearchConfig {
  Family space = Family::nats;
  int population = 25;
  int tournament = 5;
  /// Wall-clock budget in seconds; <= 0 disables it.
  double time_budget = 45.0;
  std::optional<std::int64_t> max_iterations;
  /// Cap on metric evaluations, memo hits included.
  std::optional<std::int64_t> max_evaluations;
  ConstraintSpec constraints;
  Algorithm algorithm = Algorithm::freerea;
  int repeats = 3;
  std::uint64_t seed = 0;
  FitnessTerms terms;
  /// Evaluate the children of one step concurrently.
  bool parallel_evaluation = false;

  void validate() const {
    if (tournament < 2 || tournament > population) {
      throw InvalidConfig("tournament size must satisfy 2 <= n <= N");
    }
    if (repeats < 1) throw InvalidConfig("repeats must be at least 1");
    if (time_budget <= 0.0 && !max_iterations && !max_evaluations) {
      throw InvalidConfig("no stopping criterion: set a time budget, max_iterations or max_evaluations");
    }
    constraints.validate();
  }

  std::vector<std::string> warnings() const {
    std::vector<std::string> out;
    if (static_cast<double>(tournament) / population < 0.20) {
      out.push_back("tournament/population ratio " + std::to_string(tournament) + "/" +
                    std::to_string(population) +
                    " is below 0.20; selection pressure will be weak");
    }
    return out;
  }
};

struct Individual {
  Genotype genotype;
  MetricVector metrics;
  std::int64_t birth = 0;
  CostReport cost;
  std::uint64_t hash = 0;
};

/// Everything the search needs from the outside world.
struct SearchProblem {
  std::function<MetricVector(const Genotype&)> evaluate;
  std::function<CostReport(const Genotype&)> cost;
  /// Seconds since an arbitrary origin. Injectable for deterministic tests.
  std::function<double()> clock;
  std::function<void(const std::string&)> log;
};

inline std::function<double()> wall_clock() {
  return [] {
    using namespace std::chrono;
    return duration<double>(steady_clock::now().time_since_epoch()).count();
  };
}

/// Problem that scores with the training-free metrics on `sk` and checks
/// constraints with exact network costs.
inline SearchProblem proxy_problem(const MacroSkeleton& sk, const SearchConfig& cfg,
                                   std::shared_ptr<const Tensor> batch = nullptr) {
  EvaluationOptions options;
  options.repeats = cfg.repeats;
  options.seed = cfg.seed;
  options.batch = std::move(batch);
  auto evaluator = std::make_shared<MetricEvaluator>(sk, options);
  SearchProblem p;
  p.evaluate = [evaluator](const Genotype& g) { return (*evaluator)(g); };
  p.cost = [sk](const Genotype& g) { return compute_cost(g, sk); };
  p.clock = wall_clock();
  return p;
}

struct HistoryPoint {
  std::int64_t step = 0;
  std::int64_t evaluations = 0;
  double best_fitness = 0.0;
  Genotype best_genotype;
  MetricVector best_metrics;
  double elapsed = 0.0;
};

struct SearchResult {
  Individual best;
  double best_fitness = 0.0;
  std::vector<HistoryPoint> history;
  /// Evaluation requests, memo hits included.
  std::int64_t evaluations = 0;
  /// Distinct architectures in the explored set.
  std::int64_t explored = 0;
  std::int64_t steps = 0;
  double wall_time = 0.0;
  std::uint64_t seed = 0;
  SearchConfig config;
  /// Every individual ever inserted into the population, in birth order.
  std::vector<Individual> added;
};

/// Ageing-evolution state. One instance per run; not thread-safe.
class Evolution {
 public:
  Evolution(SearchConfig cfg, SearchProblem problem)
      : cfg_(std::move(cfg)),
        problem_(std::move(problem)),
        registry_(cfg_.terms),
        rng_(derive_seed(cfg_.seed, 0x5e4c4ULL)),
        space_(SpaceDescriptor::of(cfg_.space)) {
    cfg_.validate();
    if (!problem_.cost) problem_.cost = [](const Genotype&) { return CostReport{}; };
    if (!problem_.clock) problem_.clock = wall_clock();
  }

  const SearchConfig& config() const { return cfg_; }
  const std::vector<Individual>& population() const { return population_; }
  const ExploredRegistry& registry() const { return registry_; }
  std::int64_t evaluations() const { return evaluations_; }
  std::int64_t steps() const { return steps_; }
  const std::vector<Individual>& added() const { return added_; }
  Rng& rng() { return rng_; }

  double fitness(const Individual& ind) const { return registry_.fitness(ind.metrics); }

  bool budget_exhausted() const {
    return cfg_.max_evaluations && evaluations_ >= *cfg_.max_evaluations;
  }

  /// N feasible individuals, distinct by hash while possible.
  void init_population() {
    const int n = cfg_.population;
    const std::int64_t distinct_cap = static_cast<std::int64_t>(kDistinctAttemptFactor) * n;
    std::vector<std::pair<Genotype, CostReport>> chosen;
    std::unordered_set<std::uint64_t> seen;
    std::int64_t attempts = 0;
    while (static_cast<int>(chosen.size()) < n && attempts < 2 * distinct_cap) {
      Genotype g = random_genotype(space_, rng_);
      ++attempts;
      CostReport cost = problem_.cost(g);
      if (!feasible(cost, cfg_.constraints)) continue;
      const bool fresh = seen.insert(canonical_hash(g)).second;
      if (!fresh && attempts <= distinct_cap) continue;
      chosen.emplace_back(std::move(g), cost);
    }
    if (chosen.empty()) {
      throw InfeasibleSpace("no feasible genotype found in " + std::to_string(attempts) +
                            " samples");
    }
    for (std::size_t i = 0; static_cast<int>(chosen.size()) < n; ++i) chosen.push_back(chosen[i]);

    population_.clear();
    insert(chosen);
  }

  /// One generation. Returns the individuals added in this step.
  std::vector<Individual> tournament_step() {
    if (static_cast<int>(population_.size()) != cfg_.population) {
      throw InvalidConfig("tournament_step needs a full population");
    }
    const auto ranked = ranked_sample();
    std::vector<std::pair<Genotype, CostReport>> children;
    if (cfg_.algorithm == Algorithm::freerea) {
      const Genotype& p1 = population_[ranked[0]].genotype;
      const Genotype& p2 = population_[ranked[1]].genotype;
      breed(children, [&] { return mutate(p1, rng_); });
      breed(children, [&] { return mutate(p2, rng_); });
      breed(children, [&] { return crossover(p1, p2, rng_); });
    } else {
      const Genotype& parent = population_[ranked[0]].genotype;
      breed(children, [&] { return mutate(parent, rng_); });
    }
    if (cfg_.max_evaluations) {
      const auto room = std::max<std::int64_t>(0, *cfg_.max_evaluations - evaluations_);
      if (static_cast<std::int64_t>(children.size()) > room) children.resize(room);
    }
    ++steps_;
    if (children.empty()) return {};

    const std::size_t first_new = population_.size();
    insert(children);
    std::vector<Individual> born(population_.begin() + static_cast<std::ptrdiff_t>(first_new),
                                 population_.end());

    auto oldest = std::min_element(population_.begin(), population_.end(),
                                   [](const auto& a, const auto& b) { return a.birth < b.birth; });
    population_.erase(oldest);
    if (static_cast<int>(population_.size()) > cfg_.population) {
      std::vector<std::size_t> order(population_.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      sort_by_fitness(order);
      std::vector<Individual> kept;
      kept.reserve(cfg_.population);
      for (int i = 0; i < cfg_.population; ++i) kept.push_back(population_[order[i]]);
      std::sort(kept.begin(), kept.end(),
                [](const auto& a, const auto& b) { return a.birth < b.birth; });
      population_ = std::move(kept);
    }
    return born;
  }

  /// Indices (into population()) of the tournament sample, best first.
  /// Exposed for tests; consumes randomness like a real step does.
  std::vector<std::size_t> ranked_sample() {
    std::vector<std::size_t> idx(population_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const auto n = static_cast<std::size_t>(cfg_.tournament);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + uniform_index(rng_, idx.size() - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(n);
    sort_by_fitness(idx);
    return idx;
  }

  /// Argmax of the current fitness over the whole explored set.
  std::pair<ExploredRegistry::Entry, double> best_explored() const {
    const auto entries = registry_.entries();
    if (entries.empty()) throw EmptyRegistry("nothing explored yet");
    std::size_t best = 0;
    double best_f = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const double f = registry_.fitness(entries[i].metrics);
      if (f > best_f) {
        best_f = f;
        best = i;
      }
    }
    return {entries[best], best_f};
  }

 private:
  template <typename Make>
  void breed(std::vector<std::pair<Genotype, CostReport>>& out, Make make) {
    const int attempts = cfg_.constraints.active() ? kChildRetryCap : 1;
    for (int a = 0; a < attempts; ++a) {
      std::optional<Genotype> made;
      try {
        made = make();
      } catch (const ValidityExhausted& e) {
        if (problem_.log) problem_.log(std::string(e.what()) + "; slot skipped");
        return;
      }
      Genotype child = std::move(*made);
      CostReport cost = problem_.cost(child);
      if (feasible(cost, cfg_.constraints)) {
        out.emplace_back(std::move(child), cost);
        return;
      }
    }
    if (problem_.log) {
      problem_.log("RetryCapExceeded: no feasible child in " + std::to_string(kChildRetryCap) +
                   " attempts; slot skipped");
    }
  }

  // Fitness descending; ties go to the younger individual, then the smaller hash.
  void sort_by_fitness(std::vector<std::size_t>& idx) const {
    std::vector<double> f(population_.size());
    for (std::size_t i : idx) f[i] = fitness(population_[i]);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (f[a] != f[b]) return f[a] > f[b];
      if (population_[a].birth != population_[b].birth)
        return population_[a].birth > population_[b].birth;
      return population_[a].hash < population_[b].hash;
    });
  }

  void insert(const std::vector<std::pair<Genotype, CostReport>>& batch) {
    std::vector<MetricVector> scores(batch.size());
    if (cfg_.parallel_evaluation && batch.size() > 1) {
      std::vector<std::future<MetricVector>> jobs;
      for (const auto& [g, cost] : batch)
        jobs.push_back(std::async(std::launch::async, problem_.evaluate, std::cref(g)));
      for (std::size_t i = 0; i < jobs.size(); ++i) scores[i] = jobs[i].get();
    } else {
      for (std::size_t i = 0; i < batch.size(); ++i) scores[i] = problem_.evaluate(batch[i].first);
    }
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Individual ind;
      ind.genotype = batch[i].first;
      ind.metrics = scores[i];
      ind.cost = batch[i].second;
      ind.birth = next_birth_++;
      ind.hash = canonical_hash(ind.genotype);
      registry_.add(ind.genotype, ind.metrics);
      ++evaluations_;
      population_.push_back(ind);
      added_.push_back(ind);
    }
  }

  SearchConfig cfg_;
  SearchProblem problem_;
  ExploredRegistry registry_;
  Rng rng_;
  SpaceDescriptor space_;
  std::vector<Individual> population_;
  std::vector<Individual> added_;
  std::int64_t next_birth_ = 0;
  std::int64_t evaluations_ = 0;
  std::int64_t steps_ = 0;
};

/// Runs until the time budget, max_iterations or max_evaluations is hit.
/// The reported best is the argmax over every explored architecture, not
/// only the survivors.
inline SearchResult run_search(const SearchConfig& cfg, SearchProblem problem) {
  auto clock = problem.clock ? problem.clock : wall_clock();
  problem.clock = clock;
  Evolution evo(cfg, std::move(problem));
  const double start = clock();

  SearchResult result;
  auto record = [&] {
    auto [entry, f] = evo.best_explored();
    result.history.push_back(
        {evo.steps(), evo.evaluations(), f, entry.genotype, entry.metrics, clock() - start});
  };

  evo.init_population();
  record();
  while (true) {
    if (cfg.max_iterations && evo.steps() >= *cfg.max_iterations) break;
    if (evo.budget_exhausted()) break;
    if (cfg.time_budget > 0.0 && clock() - start >= cfg.time_budget) break;
    evo.tournament_step();
    record();
  }

  auto [entry, f] = evo.best_explored();
  result.best.genotype = entry.genotype;
  result.best.metrics = entry.metrics;
  result.best.hash = canonical_hash(entry.genotype);
  for (const auto& ind : evo.added()) {
    if (ind.hash == result.best.hash) {
      result.best.cost = ind.cost;
      result.best.birth = ind.birth;
      break;
    }
  }
  result.best_fitness = f;
  result.evaluations = evo.evaluations();
  result.explored = static_cast<std::int64_t>(evo.registry().size());
  result.steps = evo.steps();
  result.wall_time = clock() - start;
  result.seed = cfg.seed;
  result.config = evo.config();
  result.added = evo.added();
  return result;
}

}  // namespace freerea
