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

// Tabular benchmarks (genotype -> trained accuracy), rank correlations and
// exhaustive oracles.
//
// CSV schema, one row per architecture, header required:
//
//   genotype,test_accuracy[,flops,params]
//
// NB101 genotype strings contain commas and must be double-quoted.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <locale>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "freerea/errors.hpp"
#include "freerea/evolve.hpp"
#include "freerea/metrics.hpp"
#include "freerea/netbuilder.hpp"
#include "freerea/random.hpp"
#include "freerea/searchspace.hpp"

namespace freerea {

struct TabularRecord {
  Genotype genotype;
  double test_accuracy = 0.0;
  std::optional<std::int64_t> flops;
  std::optional<std::int64_t> params;
  friend bool operator==(const TabularRecord&, const TabularRecord&) = default;
};

class TabularBenchmark {
 public:
  /// Throws DuplicateGenotype when the canonical form is already present and
  /// InvalidConfig when the accuracy is outside [0, 100].
  void add(TabularRecord record) {
    if (!(record.test_accuracy >= 0.0 && record.test_accuracy <= 100.0)) {
      throw InvalidConfig("test accuracy outside [0, 100] for " + record.genotype.to_string());
    }
    const std::uint64_t key = canonical_hash(record.genotype);
    if (index_.contains(key)) throw DuplicateGenotype(record.genotype.to_string());
    index_.emplace(key, records_.size());
    records_.push_back(std::move(record));
  }

  const TabularRecord* find(const Genotype& g) const {
    auto it = index_.find(canonical_hash(g));
    return it == index_.end() ? nullptr : &records_[it->second];
  }

  const TabularRecord& at(const Genotype& g) const {
    const TabularRecord* r = find(g);
    if (!r) throw MissingGenotype(g.to_string());
    return *r;
  }

  const std::vector<TabularRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  /// Equal as sets of records, independent of row order.
  friend bool operator==(const TabularBenchmark& a, const TabularBenchmark& b) {
    if (a.size() != b.size()) return false;
    for (const auto& r : a.records_) {
      const TabularRecord* other = b.find(r.genotype);
      if (!other || !(*other == r)) return false;
    }
    return true;
  }

 private:
  std::vector<TabularRecord> records_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

namespace detail {

// RFC 4180 style field splitting: quoted fields may contain commas and
// doubled quotes.
inline std::vector<std::string> split_csv_row(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  if (quoted) throw ParseError("unterminated quoted field", line_no);
  return fields;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& text, std::size_t line_no, const char* column) {
  std::istringstream in(text);
  in.imbue(std::locale::classic());
  T value{};
  if constexpr (std::is_integral_v<T>) {
    // Accept integral values written in scientific notation (4e7).
    double d = 0.0;
    in >> d;
    if (in.fail() || !in.eof() || d != std::floor(d)) {
      throw ParseError(std::string("column ") + column + ": '" + text + "' is not an integer",
                       line_no);
    }
    value = static_cast<T>(d);
  } else {
    in >> value;
    if (in.fail() || !in.eof()) {
      throw ParseError(std::string("column ") + column + ": '" + text + "' is not a number",
                       line_no);
    }
  }
  return value;
}

}  // namespace detail

inline TabularBenchmark parse_tabular(std::istream& in) {
  TabularBenchmark bench;
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  std::size_t columns = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto fields = detail::split_csv_row(line, line_no);
    for (auto& f : fields) f = detail::trim(f);
    if (!header) {
      const bool basic = fields.size() == 2;
      const bool with_cost = fields.size() == 4 && fields[2] == "flops" && fields[3] == "params";
      if (fields[0] != "genotype" || fields.size() < 2 || fields[1] != "test_accuracy" ||
          !(basic || with_cost)) {
        throw ParseError("header must be genotype,test_accuracy[,flops,params]", line_no);
      }
      header = true;
      columns = fields.size();
      continue;
    }
    if (fields.size() != columns) {
      throw ParseError("expected " + std::to_string(columns) + " fields, got " +
                           std::to_string(fields.size()),
                       line_no);
    }
    TabularRecord r;
    try {
      r.genotype = Genotype::parse(fields[0]);
    } catch (const Error& e) {
      throw ParseError(std::string("genotype: ") + e.what(), line_no);
    }
    r.test_accuracy = detail::parse_number<double>(fields[1], line_no, "test_accuracy");
    if (!(r.test_accuracy >= 0.0 && r.test_accuracy <= 100.0)) {
      throw ParseError("test_accuracy " + fields[1] + " outside [0, 100]", line_no);
    }
    if (columns == 4) {
      if (!fields[2].empty()) r.flops = detail::parse_number<std::int64_t>(fields[2], line_no, "flops");
      if (!fields[3].empty())
        r.params = detail::parse_number<std::int64_t>(fields[3], line_no, "params");
    }
    if (bench.find(r.genotype)) {
      throw DuplicateGenotype(fields[0] + " at line " + std::to_string(line_no));
    }
    bench.add(std::move(r));
  }
  if (!header) throw ParseError("empty benchmark file: missing header", line_no);
  return bench;
}

inline TabularBenchmark load_tabular(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open benchmark file '" + path + "'");
  return parse_tabular(in);
}

inline void write_tabular(std::ostream& out, const TabularBenchmark& bench) {
  const bool costs = std::any_of(bench.records().begin(), bench.records().end(),
                                 [](const auto& r) { return r.flops || r.params; });
  out << (costs ? "genotype,test_accuracy,flops,params\n" : "genotype,test_accuracy\n");
  std::ostringstream num;
  num.imbue(std::locale::classic());
  num.precision(17);
  for (const auto& r : bench.records()) {
    num.str({});
    num << r.test_accuracy;
    out << detail::csv_field(r.genotype.to_string()) << ',' << num.str();
    if (costs) {
      out << ',' << (r.flops ? std::to_string(*r.flops) : "") << ','
          << (r.params ? std::to_string(*r.params) : "");
    }
    out << '\n';
  }
}

inline void export_tabular(const std::string& path, const TabularBenchmark& bench) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  write_tabular(out, bench);
}

/// Kendall tau-b in O(n log n) (Knight's merge-sort algorithm).
inline double kendall_tau(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw LengthMismatch("kendall_tau: vectors differ in length");
  const std::size_t n = x.size();
  if (n < 2) throw DegenerateInput("kendall_tau needs at least two observations");

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return x[a] != x[b] ? x[a] < x[b] : y[a] < y[b];
  });

  auto tied_pairs = [](std::size_t run) { return static_cast<std::int64_t>(run * (run - 1) / 2); };
  std::int64_t ties_x = 0;
  std::int64_t ties_xy = 0;
  for (std::size_t i = 0, run_x = 1, run_xy = 1; i < n; ++i) {
    const bool last = i + 1 == n;
    const bool same_x = !last && x[idx[i]] == x[idx[i + 1]];
    const bool same_xy = same_x && y[idx[i]] == y[idx[i + 1]];
    if (same_xy) ++run_xy;
    else ties_xy += tied_pairs(run_xy), run_xy = 1;
    if (same_x) ++run_x;
    else ties_x += tied_pairs(run_x), run_x = 1;
  }

  // Bottom-up merge sort of the y sequence, counting strict inversions.
  std::vector<double> seq(n);
  for (std::size_t i = 0; i < n; ++i) seq[i] = y[idx[i]];
  std::vector<double> buf(n);
  std::int64_t swaps = 0;
  for (std::size_t width = 1; width < n; width *= 2) {
    for (std::size_t lo = 0; lo < n; lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, n);
      const std::size_t hi = std::min(lo + 2 * width, n);
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (seq[j] < seq[i]) {
          swaps += static_cast<std::int64_t>(mid - i);
          buf[k++] = seq[j++];
        } else {
          buf[k++] = seq[i++];
        }
      }
      while (i < mid) buf[k++] = seq[i++];
      while (j < hi) buf[k++] = seq[j++];
    }
    std::swap(seq, buf);
  }

  std::int64_t ties_y = 0;
  for (std::size_t i = 0, run = 1; i < n; ++i) {
    if (i + 1 < n && seq[i] == seq[i + 1]) ++run;
    else ties_y += tied_pairs(run), run = 1;
  }

  const std::int64_t total = tied_pairs(n);
  if (ties_x == total || ties_y == total) {
    throw DegenerateInput("kendall_tau: one of the vectors is constant");
  }
  const std::int64_t s = total - ties_x - ties_y + ties_xy - 2 * swaps;
  return static_cast<double>(s) /
         std::sqrt(static_cast<double>(total - ties_x) * static_cast<double>(total - ties_y));
}

/// 1-based ranks with ties sharing the average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

/// Pearson correlation of average ranks.
inline double spearman_rho(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw LengthMismatch("spearman_rho: vectors differ in length");
  const std::size_t n = x.size();
  if (n < 2) throw DegenerateInput("spearman_rho needs at least two observations");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mean = (static_cast<double>(n) + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = rx[i] - mean;
    const double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateInput("spearman_rho: one of the vectors is constant");
  return sxy / std::sqrt(sxx * syy);
}

/// Highest-accuracy record among those fitting the constraints; ties go to
/// the lexicographically smallest genotype string.
inline const TabularRecord& exhaustive_best(const TabularBenchmark& bench,
                                            const std::optional<ConstraintSpec>& c = std::nullopt) {
  const TabularRecord* best = nullptr;
  std::string best_name;
  for (const auto& r : bench.records()) {
    if (c) {
      if ((c->max_flops && !r.flops) || (c->max_params && !r.params)) {
        throw InvalidConfig("constraints need flops/params columns; missing for " +
                            r.genotype.to_string());
      }
      if (!feasible(CostReport{r.params.value_or(0), r.flops.value_or(0)}, *c)) continue;
    }
    std::string name = r.genotype.to_string();
    if (!best || r.test_accuracy > best->test_accuracy ||
        (r.test_accuracy == best->test_accuracy && name < best_name)) {
      best = &r;
      best_name = std::move(name);
    }
  }
  if (!best) throw NoFeasibleEntry("no benchmark entry satisfies the constraints");
  return *best;
}

struct CorrelationRow {
  std::string metric;
  std::optional<double> kendall;
  std::optional<double> spearman;
  /// Set when the statistics could not be computed for this metric.
  std::string error;
};

/// Correlates each named score column with `accuracy`. Rows whose input is
/// degenerate carry the error message instead of numbers.
inline std::vector<CorrelationRow> correlate_scores(
    const std::vector<std::pair<std::string, std::vector<double>>>& scores,
    const std::vector<double>& accuracy) {
  std::vector<CorrelationRow> rows;
  for (const auto& [name, column] : scores) {
    CorrelationRow row{name, std::nullopt, std::nullopt, {}};
    try {
      if (std::any_of(column.begin(), column.end(), [](double v) { return std::isnan(v); })) {
        throw DegenerateInput("score column contains NaN");
      }
      row.kendall = kendall_tau(column, accuracy);
      row.spearman = spearman_rho(column, accuracy);
    } catch (const Error& e) {
      row.kendall.reset();
      row.spearman.reset();
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

struct CorrelationOptions {
  /// 0 or >= bench size means every entry.
  std::size_t sample_size = 0;
  int repeats = 3;
  std::uint64_t seed = 0;
  /// Explicit genotypes to score instead of sampling the benchmark.
  std::optional<std::vector<Genotype>> genotypes;
};

/// Per-genotype raw scores (means over repeats) of the four metrics.
struct ScoredSample {
  std::vector<Genotype> genotypes;
  std::vector<double> log_synflow, synflow, linear_regions, skip, accuracy;
};

inline ScoredSample score_sample(const TabularBenchmark& bench, const MacroSkeleton& sk,
                                 const CorrelationOptions& options) {
  ScoredSample s;
  if (options.genotypes) {
    std::string missing;
    for (const auto& g : *options.genotypes) {
      if (!bench.find(g)) {
        if (!missing.empty()) missing += ' ';
        missing += std::to_string(canonical_hash(g));
      }
    }
    if (!missing.empty()) throw MissingGenotype("not in benchmark: " + missing);
    s.genotypes = *options.genotypes;
  } else {
    for (const auto& r : bench.records()) s.genotypes.push_back(r.genotype);
    if (options.sample_size > 0 && options.sample_size < s.genotypes.size()) {
      Rng rng(derive_seed(options.seed, 0xc0ULL));
      for (std::size_t i = 0; i < options.sample_size; ++i) {
        std::swap(s.genotypes[i], s.genotypes[i + uniform_index(rng, s.genotypes.size() - i)]);
      }
      s.genotypes.resize(options.sample_size);
    }
  }
  const Tensor batch = gaussian_batch(sk.input, batch_seed(options.seed));
  for (const auto& g : s.genotypes) {
    double ls = 0.0, sf = 0.0, lr = 0.0;
    for (int r = 0; r < options.repeats; ++r) {
      const std::uint64_t seed = repeat_seed(options.seed, g, r);
      const RepeatScores once = evaluate_once(g, sk, seed, batch);
      Rng rng(seed);
      Network net = build_network(g, sk, rng);
      sf += synflow(net);
      ls += once.log_synflow;
      lr += once.linear_regions;
    }
    s.log_synflow.push_back(ls / options.repeats);
    s.synflow.push_back(sf / options.repeats);
    s.linear_regions.push_back(lr / options.repeats);
    s.skip.push_back(skip_score(g));
    s.accuracy.push_back(bench.at(g).test_accuracy);
  }
  return s;
}

inline std::vector<CorrelationRow> correlation_report(const TabularBenchmark& bench,
                                                      const MacroSkeleton& sk,
                                                      const CorrelationOptions& options = {}) {
  const ScoredSample s = score_sample(bench, sk, options);
  return correlate_scores({{"log_synflow", s.log_synflow},
                           {"synflow", s.synflow},
                           {"linear_regions", s.linear_regions},
                           {"skip", s.skip}},
                          s.accuracy);
}

inline void write_correlation_csv(std::ostream& out, const std::vector<CorrelationRow>& rows) {
  std::ostringstream num;
  num.imbue(std::locale::classic());
  num.precision(17);
  auto fmt = [&](const std::optional<double>& v) {
    if (!v) return std::string();
    num.str({});
    num << *v;
    return num.str();
  };
  out << "metric,kendall_tau,spearman_rho,error\n";
  for (const auto& r : rows) {
    out << r.metric << ',' << fmt(r.kendall) << ',' << fmt(r.spearman) << ','
        << detail::csv_field(r.error) << '\n';
  }
}

/// A full NATS table with a planted smooth landscape: each gene contributes
/// an additive per-operator effect, adjacent genes interact weakly, and a
/// small deterministic noise term breaks ties. Costs come from `sk`.
inline TabularBenchmark synthetic_nats_table(std::uint64_t seed,
                                             const MacroSkeleton& sk = MacroSkeleton::desk()) {
  Rng rng(derive_seed(seed, 0x7ab1eULL));
  std::uniform_real_distribution<double> effect(0.0, 3.0);
  std::uniform_real_distribution<double> coupling(-0.4, 0.4);
  std::uniform_real_distribution<double> noise(-0.05, 0.05);
  std::array<std::array<double, 5>, kNatsEdges> main{};
  for (auto& gene : main)
    for (double& w : gene) w = effect(rng);
  std::array<std::array<std::array<double, 5>, 5>, kNatsEdges - 1> pair{};
  for (auto& p : pair)
    for (auto& row : p)
      for (double& w : row) w = coupling(rng);

  // Every NATS edge sees the same feature shape, so the cost depends only on
  // how often each operator occurs.
  std::unordered_map<std::uint32_t, CostReport> cost_cache;
  auto op_index = [](Op op) {
    return static_cast<std::size_t>(std::find(kNatsOps.begin(), kNatsOps.end(), op) - kNatsOps.begin());
  };

  TabularBenchmark bench;
  for (std::size_t i = 0; i < kNatsSpaceSize; ++i) {
    const Genotype g = nats_genotype_at(i);
    double acc = 70.0;
    for (int k = 0; k < kNatsEdges; ++k) {
      acc += main[k][op_index(g.edge_ops()[k])];
      if (k + 1 < kNatsEdges) acc += pair[k][op_index(g.edge_ops()[k])][op_index(g.edge_ops()[k + 1])];
    }
    acc += noise(rng);
    std::uint32_t key = 0;
    for (int k = 0; k < kNatsEdges; ++k) key += 1u << (3 * op_index(g.edge_ops()[k]));
    auto it = cost_cache.find(key);
    if (it == cost_cache.end()) it = cost_cache.emplace(key, compute_cost(g, sk)).first;
    TabularRecord r{g, std::clamp(acc, 0.0, 100.0), it->second.flops, it->second.params};
    bench.add(std::move(r));
  }
  return bench;
}

/// Search problem whose fitness is the benchmark accuracy (log_synflow slot,
/// the only enabled term) and whose costs come from the table when present.
inline SearchProblem tabular_problem(std::shared_ptr<const TabularBenchmark> bench,
                                     const MacroSkeleton& sk) {
  SearchProblem p;
  p.evaluate = [bench](const Genotype& g) { return MetricVector{bench->at(g).test_accuracy, 0.0, 0.0}; };
  p.cost = [bench, sk](const Genotype& g) {
    const TabularRecord* r = bench->find(g);
    if (r && r->flops && r->params) return CostReport{*r->params, *r->flops};
    return compute_cost(g, sk);
  };
  p.clock = wall_clock();
  return p;
}

/// Only the first fitness term, for problems that put a single score in the
/// log_synflow slot.
inline FitnessTerms single_term() { return FitnessTerms{true, false, false}; }

}  // namespace freerea
