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

// The `freerea` command line: search, score, correlate, ablate, cost and
// enumerate. run_cli() is the whole program; tools/freerea.cpp only forwards
// argv, so tests drive the exact same code path.
//
// Exit codes: 0 success, 1 configuration or input error, 2 runtime error.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "freerea/benchio.hpp"
#include "freerea/errors.hpp"
#include "freerea/evolve.hpp"
#include "freerea/fitness.hpp"
#include "freerea/metrics.hpp"
#include "freerea/netbuilder.hpp"
#include "freerea/random.hpp"
#include "freerea/report.hpp"
#include "freerea/searchspace.hpp"

namespace freerea {

inline constexpr const char* kVersion = "0.1.0";

/// Every flag of every command. Only the subset registered on the invoked
/// subcommand is meaningful.
struct CliOptions {
  std::string space = "nats";
  std::string skeleton = "desk";
  std::optional<std::uint64_t> seed;
  double time = 45.0;
  std::optional<std::int64_t> max_iters;
  std::optional<std::int64_t> max_evals;
  int runs = 1;
  int jobs = 1;
  std::string constraints;
  std::string tabular;
  std::string fitness = "proxy";
  bool no_ls = false;
  bool no_lr = false;
  bool no_skip = false;
  std::string algo = "freerea";
  std::string out;
  int population = 25;
  int tournament = 5;
  int repeats = 3;
  std::string batch;
  bool plot = false;
  std::string mode = "fitness";
  std::size_t sample = 0;
  std::string synthetic_table;
  std::string genotype;
};

namespace cli_detail {

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ',' || c == '[' || c == ']' || c == ' ' || c == '\t') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline std::int64_t parse_count(const std::string& text, const std::string& what) {
  std::istringstream in(text);
  in.imbue(std::locale::classic());
  double v = 0.0;
  in >> v;
  if (in.fail() || !in.eof() || v != std::floor(v) || v <= 0 || v > 9.2e18) {
    throw InvalidConfig(what + ": '" + text + "' is not a positive integer");
  }
  return static_cast<std::int64_t>(v);
}

inline ConstraintSpec parse_constraints(const std::string& text) {
  ConstraintSpec c;
  if (text.empty()) return c;
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw InvalidConfig("--constraints expects <flops>,<params>");
  const std::string flops = text.substr(0, comma);
  const std::string params = text.substr(comma + 1);
  if (!flops.empty()) c.max_flops = parse_count(flops, "max flops");
  if (!params.empty()) c.max_params = parse_count(params, "max params");
  c.validate();
  return c;
}

/// "desk", "full", or a key = value file with keys input, cells, channels
/// and num_classes.
inline MacroSkeleton load_skeleton(const std::string& source) {
  if (source == "desk") return MacroSkeleton::desk();
  if (source == "full") return MacroSkeleton::full();
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_file(source);
  } catch (const CLI::Error& e) {
    throw InvalidSkeleton("cannot read skeleton file '" + source + "': " + e.what());
  }
  MacroSkeleton sk;
  std::vector<int> cells{1}, channels{16, 32, 64};
  auto ints = [&](const CLI::ConfigItem& item) {
    std::vector<int> v;
    for (const auto& in : item.inputs)
      for (const auto& tok : split_list(in)) v.push_back(static_cast<int>(parse_count(tok, item.name)));
    return v;
  };
  for (const auto& item : items) {
    if (item.name == "input") {
      const auto v = ints(item);
      if (v.size() != 3) throw InvalidSkeleton("input must be C,H,W");
      sk.input = FeatureShape{v[0], v[1], v[2], false};
    } else if (item.name == "cells") {
      cells = ints(item);
    } else if (item.name == "channels") {
      channels = ints(item);
    } else if (item.name == "num_classes") {
      const auto v = ints(item);
      if (v.size() != 1) throw InvalidSkeleton("num_classes takes one value");
      sk.num_classes = v[0];
    } else {
      throw InvalidSkeleton("unknown skeleton key '" + item.name + "'");
    }
  }
  if (cells.size() == 1) cells.resize(channels.size(), cells[0]);
  if (cells.size() != channels.size()) throw InvalidSkeleton("cells and channels differ in length");
  sk.stages.clear();
  for (std::size_t i = 0; i < cells.size(); ++i) sk.stages.push_back({cells[i], channels[i]});
  sk.validate();
  return sk;
}

inline Family parse_space(const std::string& s) {
  if (s == "nats") return Family::nats;
  if (s == "nb101") return Family::nb101;
  throw InvalidConfig("unknown space '" + s + "'");
}

inline std::uint64_t resolve_seed(const CliOptions& o) {
  if (o.seed) return *o.seed;
  if (const char* env = std::getenv("FREEREA_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const std::uint64_t v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw InvalidConfig(std::string("FREEREA_SEED is not an unsigned integer: ") + env);
  }
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

inline std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

inline std::string fmt(double v) {
  if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  std::ostringstream s;
  s.imbue(std::locale::classic());
  s.precision(10);
  s << v;
  return s.str();
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Sample standard deviation (n - 1); 0 for a single value.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidConfig("cannot write '" + path.string() + "'");
  out << content;
}

/// Resolved configuration in the same key = value format --config reads.
/// Only keys in `accepted` are written; the output directory never is.
inline std::string resolved_config(const CliOptions& o, std::uint64_t seed, const std::string& command,
                                   const std::set<std::string>& accepted) {
  std::ostringstream s;
  s.imbue(std::locale::classic());
  s.precision(17);
  auto put = [&](const std::string& key, const auto& value) {
    if (accepted.contains(key)) s << key << " = " << value << "\n";
  };
  auto str = [](const std::string& v) { return "\"" + v + "\""; };
  auto flag = [](bool b) { return b ? "true" : "false"; };
  s << "# freerea " << kVersion << " " << command << "\n";
  put("space", str(o.space));
  put("skeleton", str(o.skeleton));
  put("seed", seed);
  put("time", o.time);
  if (o.max_iters) put("max-iters", *o.max_iters);
  if (o.max_evals) put("max-evals", *o.max_evals);
  put("runs", o.runs);
  put("jobs", o.jobs);
  if (!o.constraints.empty()) put("constraints", str(o.constraints));
  if (!o.tabular.empty()) put("tabular", str(o.tabular));
  put("fitness", str(o.fitness));
  put("no-ls", flag(o.no_ls));
  put("no-lr", flag(o.no_lr));
  put("no-skip", flag(o.no_skip));
  put("algo", str(o.algo));
  put("population", o.population);
  put("tournament", o.tournament);
  put("repeats", o.repeats);
  if (!o.batch.empty()) put("batch", str(o.batch));
  put("plot", flag(o.plot));
  put("mode", str(o.mode));
  put("sample", o.sample);
  if (!o.genotype.empty()) put("genotype", str(o.genotype));
  if (!o.synthetic_table.empty()) put("synthetic-table", str(o.synthetic_table));
  return s.str();
}

/// Shared state of one invocation.
struct Context {
  CliOptions opt;
  std::string command;
  std::uint64_t seed = 0;
  MacroSkeleton skeleton;
  std::shared_ptr<const TabularBenchmark> bench;
  std::shared_ptr<const Tensor> batch;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
  std::string started;
  std::vector<std::string> outputs;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();
  std::set<std::string> config_keys;

  bool to_dir() const { return !opt.out.empty(); }
  std::filesystem::path path(const std::string& name) const { return std::filesystem::path(opt.out) / name; }

  void emit(const std::string& name, const std::string& content) {
    if (!to_dir()) {
      *out << content;
      return;
    }
    write_file(path(name), content);
    outputs.push_back(path(name).string());
  }

  void write_manifest() {
    if (!to_dir()) return;
    Json m;
    m["tool"] = "freerea";
    m["version"] = kVersion;
    m["command"] = command;
    m["seed"] = seed;
    m["started"] = started;
    m["finished"] = timestamp();
    m["resolved_config"] = "resolved.conf";
    m["skeleton"] = to_json(skeleton);
    m["outputs"] = outputs;
    for (auto& [k, v] : extra.items()) m[k] = v;
    write_file(path("resolved.conf"), resolved_config(opt, seed, command, config_keys));
    write_file(path("manifest.json"), m.dump(2) + "\n");
  }
};

inline SearchConfig search_config(const Context& ctx, std::uint64_t seed) {
  const auto& o = ctx.opt;
  SearchConfig cfg;
  cfg.space = parse_space(o.space);
  cfg.population = o.population;
  cfg.tournament = o.tournament;
  cfg.time_budget = o.time;
  cfg.max_iterations = o.max_iters;
  cfg.max_evaluations = o.max_evals;
  cfg.constraints = parse_constraints(o.constraints);
  if (o.algo == "freerea") cfg.algorithm = Algorithm::freerea;
  else if (o.algo == "freerea-minus") cfg.algorithm = Algorithm::freerea_minus;
  else throw InvalidConfig("unknown algorithm '" + o.algo + "'");
  cfg.repeats = o.repeats;
  cfg.seed = seed;
  if (o.fitness == "tabular") {
    if (o.no_ls || o.no_lr || o.no_skip) throw InvalidConfig("--no-* switches need --fitness proxy");
    cfg.terms = single_term();
  } else if (o.fitness == "proxy") {
    cfg.terms = FitnessTerms{!o.no_ls, !o.no_lr, !o.no_skip};
    if (o.no_ls && o.no_lr && o.no_skip) throw InvalidConfig("every fitness term is disabled");
  } else {
    throw InvalidConfig("unknown fitness '" + o.fitness + "'");
  }
  cfg.validate();
  return cfg;
}

inline SearchProblem make_problem(const Context& ctx, const SearchConfig& cfg) {
  SearchProblem p = ctx.opt.fitness == "tabular" ? tabular_problem(ctx.bench, ctx.skeleton)
                                                 : proxy_problem(ctx.skeleton, cfg, ctx.batch);
  std::ostream* err = ctx.err;
  auto lock = std::make_shared<std::mutex>();
  p.log = [err, lock](const std::string& msg) {
    std::lock_guard guard(*lock);
    *err << "warning: " << msg << "\n";
  };
  return p;
}

/// Runs `runs` searches with seeds derive_seed(master, r) on up to `jobs`
/// threads. Results are returned in run order.
inline std::vector<SearchResult> run_many(const Context& ctx, const SearchConfig& base, int runs,
                                          int jobs) {
  std::vector<SearchResult> results(runs);
  std::vector<std::exception_ptr> errors(runs);
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int r = next++; r < runs; r = next++) {
      try {
        SearchConfig cfg = base;
        cfg.seed = derive_seed(base.seed, static_cast<std::uint64_t>(r));
        results[r] = run_search(cfg, make_problem(ctx, cfg));
      } catch (...) {
        errors[r] = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min(jobs, runs));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

inline std::optional<double> accuracy_of(const Context& ctx, const Genotype& g) {
  if (!ctx.bench) return std::nullopt;
  const TabularRecord* r = ctx.bench->find(g);
  return r ? std::optional<double>(r->test_accuracy) : std::nullopt;
}

inline std::optional<double> optimum(const Context& ctx, const ConstraintSpec& c) {
  if (!ctx.bench) return std::nullopt;
  return exhaustive_best(*ctx.bench, c.active() ? std::optional<ConstraintSpec>(c) : std::nullopt)
      .test_accuracy;
}

struct RunSummary {
  MeanStd fitness;
  std::optional<MeanStd> accuracy;
  std::optional<double> optimum;
  std::optional<double> regret;
};

inline RunSummary summarize(const Context& ctx, const std::vector<SearchResult>& results,
                            const ConstraintSpec& c) {
  RunSummary s;
  std::vector<double> fit, acc;
  bool all_acc = static_cast<bool>(ctx.bench);
  for (const auto& r : results) {
    fit.push_back(r.best_fitness);
    if (auto a = accuracy_of(ctx, r.best.genotype)) acc.push_back(*a);
    else all_acc = false;
  }
  s.fitness = mean_std(fit);
  if (all_acc && !acc.empty()) {
    s.accuracy = mean_std(acc);
    s.optimum = optimum(ctx, c);
    s.regret = *s.optimum - s.accuracy->mean;
  }
  return s;
}

inline std::string opt_fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

inline int cmd_search(Context& ctx) {
  const SearchConfig cfg = search_config(ctx, ctx.seed);
  for (const auto& w : cfg.warnings()) *ctx.err << "warning: " << w << "\n";
  const auto results = run_many(ctx, cfg, ctx.opt.runs, ctx.opt.jobs);
  const bool tabular_fitness = ctx.opt.fitness == "tabular";

  std::ostringstream agg;
  agg << "run,seed,best_genotype,best_fitness,log_synflow,linear_regions,skip_score,params,flops,"
         "explored,evaluations,steps,test_accuracy\n";
  Json wall = Json::array();
  for (std::size_t r = 0; r < results.size(); ++r) {
    const auto& res = results[r];
    agg << r << ',' << res.seed << ',' << detail::csv_field(res.best.genotype.to_string()) << ','
        << fmt(res.best_fitness) << ',' << fmt(res.best.metrics.log_synflow) << ','
        << fmt(res.best.metrics.linear_regions) << ',' << fmt(res.best.metrics.skip_score) << ','
        << res.best.cost.params << ',' << res.best.cost.flops << ',' << res.explored << ','
        << res.evaluations << ',' << res.steps << ',' << opt_fmt(accuracy_of(ctx, res.best.genotype))
        << '\n';
    wall.push_back(res.wall_time);
    if (ctx.to_dir()) {
      std::ostringstream name;
      name << "run_" << std::setw(3) << std::setfill('0') << r << ".json";
      ctx.emit(name.str(), to_json(res, accuracy_of(ctx, res.best.genotype)).dump(2) + "\n");
    }
  }
  const RunSummary s = summarize(ctx, results, cfg.constraints);
  std::ostringstream sum;
  sum << "runs,mean_fitness,std_fitness,mean_accuracy,std_accuracy,optimum,regret\n";
  sum << results.size() << ',' << fmt(s.fitness.mean) << ',' << fmt(s.fitness.std) << ','
      << (s.accuracy ? fmt(s.accuracy->mean) : "") << ',' << (s.accuracy ? fmt(s.accuracy->std) : "")
      << ',' << opt_fmt(s.optimum) << ',' << opt_fmt(s.regret) << '\n';
  ctx.extra["wall_time_seconds"] = wall;

  if (ctx.to_dir()) {
    ctx.emit("aggregate.csv", agg.str());
    ctx.emit("summary.csv", sum.str());
    if (ctx.opt.plot) {
      if (tabular_fitness) {
        ctx.emit("trajectory.svg",
                 trajectory_svg(results, [](const HistoryPoint& h) { return h.best_metrics.log_synflow; },
                                "best accuracy"));
      } else {
        ctx.emit("trajectory.svg", trajectory_svg(results));
      }
    }
  } else if (results.size() == 1) {
    ctx.emit("", to_json(results[0], accuracy_of(ctx, results[0].best.genotype)).dump(2) + "\n");
  } else {
    ctx.emit("", agg.str());
    *ctx.err << sum.str();
  }
  return 0;
}

inline Genotype parse_cli_genotype(const std::string& text) {
  Genotype g = Genotype::parse(text);
  if (!g.valid()) throw InvalidGenotype(text);
  return g;
}

inline int cmd_score(Context& ctx) {
  const Genotype g = parse_cli_genotype(ctx.opt.genotype);
  EvaluationOptions eo;
  eo.repeats = ctx.opt.repeats;
  eo.seed = ctx.seed;
  eo.batch = ctx.batch;
  const Evaluation e = evaluate_detailed(g, ctx.skeleton, eo);
  const CostReport c = compute_cost(g, ctx.skeleton);
  Json j{{"genotype", g.to_string()},
         {"canonical", g.canonical().to_string()},
         {"canonical_hash", canonical_hash(g)},
         {"seed", ctx.seed},
         {"repeats", ctx.opt.repeats},
         {"metrics", to_json(e)},
         {"params", c.params},
         {"flops", c.flops}};
  ctx.emit("score.json", j.dump(2) + "\n");
  return 0;
}

inline int cmd_cost(Context& ctx) {
  const Genotype g = parse_cli_genotype(ctx.opt.genotype);
  const CostReport c = compute_cost(g, ctx.skeleton);
  Json j{{"genotype", g.to_string()}, {"params", c.params}, {"flops", c.flops}};
  ctx.emit("cost.json", j.dump(2) + "\n");
  return 0;
}

inline int cmd_correlate(Context& ctx) {
  if (!ctx.bench) throw InvalidConfig("correlate needs --tabular <csv>");
  CorrelationOptions co;
  co.sample_size = ctx.opt.sample;
  co.repeats = ctx.opt.repeats;
  co.seed = ctx.seed;
  std::ostringstream csv;
  write_correlation_csv(csv, correlation_report(*ctx.bench, ctx.skeleton, co));
  ctx.emit("correlation.csv", csv.str());
  return 0;
}

inline int cmd_enumerate(Context& ctx) {
  const SpaceDescriptor space = SpaceDescriptor::of(parse_space(ctx.opt.space));
  if (!ctx.opt.synthetic_table.empty()) {
    if (space.family != Family::nats) throw UnsupportedSpace("synthetic tables cover NATS only");
    export_tabular(ctx.opt.synthetic_table, synthetic_nats_table(ctx.seed, ctx.skeleton));
    ctx.outputs.push_back(ctx.opt.synthetic_table);
    return 0;
  }
  std::ostringstream s;
  for (const auto& g : enumerate_space(space)) s << g.to_string() << '\n';
  ctx.emit("genotypes.txt", s.str());
  return 0;
}

inline int cmd_ablate(Context& ctx) {
  struct Variant {
    std::string label;
    CliOptions opt;
  };
  std::vector<Variant> variants;
  if (ctx.opt.mode == "fitness") {
    if (ctx.opt.fitness != "proxy") throw InvalidConfig("fitness ablation needs --fitness proxy");
    const std::array<std::pair<const char*, std::array<bool, 3>>, 4> terms{
        {{"all", {false, false, false}},
         {"no_ls", {true, false, false}},
         {"no_lr", {false, true, false}},
         {"no_skip", {false, false, true}}}};
    for (const auto& [label, off] : terms) {
      Variant v{label, ctx.opt};
      v.opt.no_ls = off[0];
      v.opt.no_lr = off[1];
      v.opt.no_skip = off[2];
      variants.push_back(std::move(v));
    }
  } else if (ctx.opt.mode == "nn") {
    for (auto [n_pop, n_tour] : {std::pair{25, 5}, {100, 2}, {100, 50}, {20, 20}, {100, 25}, {64, 16}}) {
      Variant v{std::to_string(n_pop) + "," + std::to_string(n_tour), ctx.opt};
      v.opt.population = n_pop;
      v.opt.tournament = n_tour;
      variants.push_back(std::move(v));
    }
  } else {
    throw InvalidConfig("unknown ablation mode '" + ctx.opt.mode + "'");
  }

  std::ostringstream csv;
  csv << "config,population,tournament,runs,mean_fitness,std_fitness,mean_accuracy,std_accuracy,"
         "optimum,regret\n";
  for (std::size_t i = 0; i < variants.size(); ++i) {
    Context sub = ctx;
    sub.opt = variants[i].opt;
    const SearchConfig cfg = search_config(sub, derive_seed(ctx.seed, 0xab1a7e00ULL + i));
    const auto results = run_many(sub, cfg, sub.opt.runs, sub.opt.jobs);
    const RunSummary s = summarize(sub, results, cfg.constraints);
    csv << detail::csv_field(variants[i].label) << ',' << cfg.population << ',' << cfg.tournament << ','
        << results.size() << ',' << fmt(s.fitness.mean) << ',' << fmt(s.fitness.std) << ','
        << (s.accuracy ? fmt(s.accuracy->mean) : "") << ',' << (s.accuracy ? fmt(s.accuracy->std) : "")
        << ',' << opt_fmt(s.optimum) << ',' << opt_fmt(s.regret) << '\n';
  }
  ctx.emit("ablation_" + ctx.opt.mode + ".csv", csv.str());
  return 0;
}

/// TOML reader that files every key under the parsed subcommand, so one
/// flat key = value file configures whichever command is run.
class SubcommandConfig : public CLI::ConfigTOML {
 public:
  explicit SubcommandConfig(const CLI::App* app) : app_(app) {}

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto items = CLI::ConfigTOML::from_config(input);
    const auto subs = app_->get_subcommands();
    if (subs.empty()) return items;
    for (auto& item : items) item.parents.insert(item.parents.begin(), subs.front()->get_name());
    return items;
  }

 private:
  const CLI::App* app_;
};

inline void add_common(CLI::App* app, CliOptions& o) {
  app->add_option("--space", o.space, "search space: nats or nb101")
      ->check(CLI::IsMember({"nats", "nb101"}));
  app->add_option("--skeleton", o.skeleton, "macro skeleton: desk, full, or a key = value file");
  app->add_option("--seed", o.seed, "master seed (falls back to FREEREA_SEED, then a random seed)");
  app->add_option("--repeats", o.repeats, "metric repetitions per genotype");
  app->add_option("--tabular", o.tabular, "tabular benchmark CSV");
  app->add_option("--batch", o.batch, "input batch file for linear regions");
  app->add_option("--out", o.out, "output directory (default: stdout)");
}

inline void add_search_flags(CLI::App* app, CliOptions& o) {
  app->add_option("--time", o.time, "time budget in seconds");
  app->add_option("--max-iters", o.max_iters, "maximum tournament steps");
  app->add_option("--max-evals", o.max_evals, "maximum metric evaluations");
  app->add_option("--runs", o.runs, "independent runs")->check(CLI::PositiveNumber);
  app->add_option("--jobs", o.jobs, "parallel runs")->check(CLI::PositiveNumber);
  app->add_option("--constraints", o.constraints, "<max_flops>,<max_params>");
  app->add_option("--fitness", o.fitness, "proxy (training-free) or tabular (benchmark accuracy)")
      ->check(CLI::IsMember({"proxy", "tabular"}));
  app->add_flag("--no-ls", o.no_ls, "drop the log_synflow term");
  app->add_flag("--no-lr", o.no_lr, "drop the linear regions term");
  app->add_flag("--no-skip", o.no_skip, "drop the skip term");
  app->add_option("--algo", o.algo, "freerea or freerea-minus")
      ->check(CLI::IsMember({"freerea", "freerea-minus"}));
  app->add_option("--population", o.population, "population size N");
  app->add_option("--tournament", o.tournament, "tournament sample size n");
  app->add_flag("--plot", o.plot, "write trajectory.svg");
}

/// Errors caused by the user's flags or input files rather than by the run.
inline bool is_config_error(const std::exception& e) {
  return dynamic_cast<const InvalidConfig*>(&e) || dynamic_cast<const ParseError*>(&e) ||
         dynamic_cast<const GenotypeParseError*>(&e) || dynamic_cast<const InvalidGenotype*>(&e) ||
         dynamic_cast<const InvalidSkeleton*>(&e) || dynamic_cast<const UnsupportedSpace*>(&e) ||
         dynamic_cast<const DuplicateGenotype*>(&e) || dynamic_cast<const BatchShapeMismatch*>(&e) ||
         dynamic_cast<const std::filesystem::filesystem_error*>(&e);
}

}  // namespace cli_detail

/// The program. `args` excludes the program name.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  using namespace cli_detail;
  Context ctx;
  ctx.out = &out;
  ctx.err = &err;
  ctx.started = timestamp();
  CliOptions& o = ctx.opt;

  CLI::App app{"Training-free evolutionary architecture search", "freerea"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  auto* search = app.add_subcommand("search", "run the evolutionary search");
  auto* score = app.add_subcommand("score", "compute the metrics of one genotype");
  auto* correlate = app.add_subcommand("correlate", "rank correlation of metrics vs benchmark accuracy");
  auto* ablate = app.add_subcommand("ablate", "fitness-term or (N, n) ablation");
  auto* cost = app.add_subcommand("cost", "parameters and FLOPs of one genotype");
  auto* enumerate = app.add_subcommand("enumerate", "list the NATS space or write a synthetic table");
  app.set_config("--config", "", "key = value configuration file");
  app.config_formatter(std::make_shared<SubcommandConfig>(&app));
  app.allow_config_extras(CLI::config_extras_mode::error);
  for (auto* sub : {search, score, correlate, ablate, cost, enumerate}) {
    add_common(sub, o);
    sub->fallthrough();
  }
  add_search_flags(search, o);
  add_search_flags(ablate, o);
  ablate->add_option("--mode", o.mode, "fitness or nn")->check(CLI::IsMember({"fitness", "nn"}));
  for (auto* sub : {score, cost}) sub->add_option("genotype", o.genotype, "genotype string")->required();
  correlate->add_option("--sample", o.sample, "genotypes to sample (0 = all)");
  enumerate->add_option("--synthetic-table", o.synthetic_table,
                        "write a synthetic NATS accuracy table to this path");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  ctx.command = sub->get_name();
  for (const CLI::Option* opt : sub->get_options()) {
    for (const auto& name : opt->get_lnames())
      if (name != "help" && name != "out") ctx.config_keys.insert(name);
    if (opt->get_positional()) ctx.config_keys.insert(opt->get_single_name());
  }
  try {
    // A step or evaluation cap replaces the default time budget unless
    // --time was given explicitly.
    if (sub->get_option_no_throw("--time") && sub->count("--time") == 0 && (o.max_iters || o.max_evals)) {
      o.time = 0.0;
    }
    ctx.seed = resolve_seed(o);
    ctx.skeleton = load_skeleton(o.skeleton);
    if (!o.tabular.empty()) ctx.bench = std::make_shared<const TabularBenchmark>(load_tabular(o.tabular));
    if (o.fitness == "tabular" && !ctx.bench) throw InvalidConfig("--fitness tabular needs --tabular");
    if (!o.batch.empty()) ctx.batch = std::make_shared<const Tensor>(read_batch_file(o.batch));
    if (o.repeats < 1) throw InvalidConfig("--repeats must be at least 1");
    if (ctx.to_dir()) std::filesystem::create_directories(o.out);

    int code = 0;
    if (ctx.command == "search") code = cmd_search(ctx);
    else if (ctx.command == "score") code = cmd_score(ctx);
    else if (ctx.command == "correlate") code = cmd_correlate(ctx);
    else if (ctx.command == "ablate") code = cmd_ablate(ctx);
    else if (ctx.command == "cost") code = cmd_cost(ctx);
    else code = cmd_enumerate(ctx);
    ctx.write_manifest();
    return code;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return is_config_error(e) ? 1 : 2;
  }
}

}  // namespace freerea
