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

// JSON documents for search results, metric printouts and SVG trajectories.
// Result documents hold no wall-clock data, so a fixed seed and a step or
// evaluation budget give byte-identical output.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <locale>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "freerea/evolve.hpp"
#include "freerea/fitness.hpp"
#include "freerea/metrics.hpp"
#include "freerea/netbuilder.hpp"
#include "freerea/searchspace.hpp"

namespace freerea {

using Json = nlohmann::ordered_json;

/// JSON has no infinities; non-finite values become the strings "inf",
/// "-inf" and "nan".
inline Json json_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double number_from_json(const Json& j) {
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    throw ParseError("not a number: " + s);
  }
  return j.get<double>();
}

inline Json to_json(const MetricVector& v) {
  return Json{{"log_synflow", json_number(v.log_synflow)},
              {"linear_regions", json_number(v.linear_regions)},
              {"skip_score", json_number(v.skip_score)}};
}

inline MetricVector metric_vector_from_json(const Json& j) {
  return {number_from_json(j.at("log_synflow")), number_from_json(j.at("linear_regions")),
          number_from_json(j.at("skip_score"))};
}

inline Json to_json(const CostReport& c) { return Json{{"params", c.params}, {"flops", c.flops}}; }

inline Json to_json(const FitnessTerms& t) {
  return Json{{"log_synflow", t.log_synflow}, {"linear_regions", t.linear_regions}, {"skip", t.skip}};
}

inline Json to_json(const ConstraintSpec& c) {
  Json j = Json::object();
  j["max_flops"] = c.max_flops ? Json(*c.max_flops) : Json(nullptr);
  j["max_params"] = c.max_params ? Json(*c.max_params) : Json(nullptr);
  return j;
}

inline Json to_json(const MacroSkeleton& sk) {
  Json stages = Json::array();
  for (const auto& s : sk.stages) stages.push_back(Json{{"cells", s.cells}, {"channels", s.channels}});
  return Json{{"input", {sk.input.channels, sk.input.height, sk.input.width}},
              {"stages", stages},
              {"num_classes", sk.num_classes}};
}

inline Json to_json(const SearchConfig& c) {
  return Json{{"space", c.space == Family::nats ? "nats" : "nb101"},
              {"algorithm", algorithm_name(c.algorithm)},
              {"population", c.population},
              {"tournament", c.tournament},
              {"time_budget", c.time_budget},
              {"max_iterations", c.max_iterations ? Json(*c.max_iterations) : Json(nullptr)},
              {"max_evaluations", c.max_evaluations ? Json(*c.max_evaluations) : Json(nullptr)},
              {"constraints", to_json(c.constraints)},
              {"repeats", c.repeats},
              {"seed", c.seed},
              {"terms", to_json(c.terms)}};
}

/// `bench_accuracy`, when given, is the table accuracy of the best genotype.
inline Json to_json(const SearchResult& r, std::optional<double> bench_accuracy = std::nullopt) {
  Json history = Json::array();
  for (const auto& h : r.history) {
    history.push_back(Json{{"step", h.step},
                           {"evaluations", h.evaluations},
                           {"best_fitness", json_number(h.best_fitness)},
                           {"best_genotype", h.best_genotype.to_string()}});
  }
  Json best{{"genotype", r.best.genotype.to_string()},
            {"canonical_hash", r.best.hash},
            {"metrics", to_json(r.best.metrics)},
            {"fitness", json_number(r.best_fitness)},
            {"cost", to_json(r.best.cost)}};
  if (bench_accuracy) best["test_accuracy"] = *bench_accuracy;
  return Json{{"config", to_json(r.config)},
              {"seed", r.seed},
              {"best", best},
              {"explored", r.explored},
              {"evaluations", r.evaluations},
              {"steps", r.steps},
              {"history", history}};
}

inline Json to_json(const Evaluation& e) {
  Json repeats = Json::array();
  for (const auto& r : e.repeats) {
    repeats.push_back(Json{{"log_synflow", json_number(r.log_synflow)},
                           {"linear_regions", json_number(r.linear_regions)}});
  }
  return Json{{"mean", to_json(e.mean)}, {"repeats", repeats}};
}

/// Best-so-far curves, one polyline per run, over log-scaled evaluation
/// counts. `value` picks the plotted quantity (fitness by default).
inline std::string trajectory_svg(
    const std::vector<SearchResult>& runs,
    const std::function<double(const HistoryPoint&)>& value = [](const HistoryPoint& h) {
      return h.best_fitness;
    },
    const std::string& label = "best fitness") {
  constexpr double kWidth = 640, kHeight = 400, kMargin = 50;
  double max_x = 1, lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& r : runs) {
    for (const auto& h : r.history) {
      max_x = std::max(max_x, static_cast<double>(h.evaluations));
      const double v = value(h);
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  const double log_max = std::log10(std::max(max_x, 10.0));
  auto px = [&](double evals) {
    return kMargin + (kWidth - 2 * kMargin) * std::log10(std::max(evals, 1.0)) / log_max;
  };
  auto py = [&](double f) { return kHeight - kMargin - (kHeight - 2 * kMargin) * (f - lo) / (hi - lo); };

  std::ostringstream svg;
  svg.imbue(std::locale::classic());
  svg.precision(6);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << kMargin << "\" y1=\"" << kHeight - kMargin << "\" x2=\"" << kWidth - kMargin
      << "\" y2=\"" << kHeight - kMargin << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << kMargin << "\" y1=\"" << kMargin << "\" x2=\"" << kMargin << "\" y2=\""
      << kHeight - kMargin << "\" stroke=\"black\"/>\n";
  for (int d = 0; d <= static_cast<int>(std::ceil(log_max)); ++d) {
    const double x = px(std::pow(10.0, d));
    if (x > kWidth - kMargin + 1e-9) break;
    svg << "<text x=\"" << x << "\" y=\"" << kHeight - kMargin + 16 << "\" text-anchor=\"middle\">1e"
        << d << "</text>\n";
  }
  svg << "<text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - 10
      << "\" text-anchor=\"middle\">evaluations (log scale)</text>\n";
  svg << "<text x=\"14\" y=\"" << kHeight / 2 << "\" transform=\"rotate(-90 14 " << kHeight / 2
      << ")\" text-anchor=\"middle\">" << label << "</text>\n";
  svg << "<text x=\"" << kMargin - 4 << "\" y=\"" << py(hi) << "\" text-anchor=\"end\">" << hi
      << "</text>\n";
  svg << "<text x=\"" << kMargin - 4 << "\" y=\"" << py(lo) << "\" text-anchor=\"end\">" << lo
      << "</text>\n";
  for (const auto& r : runs) {
    svg << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-opacity=\"0.6\" points=\"";
    for (const auto& h : r.history) {
      const double v = value(h);
      if (!std::isfinite(v)) continue;
      svg << px(static_cast<double>(h.evaluations)) << ',' << py(v) << ' ';
    }
    svg << "\"/>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace freerea
