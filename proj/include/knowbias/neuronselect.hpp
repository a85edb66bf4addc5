#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "knowbias/attribkit.hpp"
#include "knowbias/error.hpp"
#include "knowbias/model.hpp"

namespace knowbias {

struct SelectionParams {
  double tau = 10.0;   // percent of the max score
  double beta = 10.0;  // percent of questions
  bool global_max = false;

  void validate() const {
    require(tau > 0.0 && tau <= 100.0, ErrorCode::invalid_argument, "tau must be in (0, 100]");
    require(beta > 0.0 && beta <= 100.0, ErrorCode::invalid_argument, "beta must be in (0, 100]");
  }
};

using NeuronList = std::vector<NeuronId>;  // sorted, unique

struct NeuronSet {
  NeuronList members;
  std::string provenance;            // dimension label, union, intersection, combined, composite, random(seed)
  std::vector<std::string> sources;  // contributing labels for aggregated sets
  SelectionParams params;
  std::string question_set_hash;
  std::string model_checksum;

  bool contains(NeuronId n) const { return std::binary_search(members.begin(), members.end(), n); }
  std::size_t size() const { return members.size(); }
};

inline NeuronList normalized(NeuronList v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

inline double map_max(const AttributionMap& m) {
  return *std::max_element(m.scores.storage().begin(), m.scores.storage().end());
}

// Neurons scoring at least tau% of `reference_max`. A non-positive max selects nothing.
inline NeuronList salient_set(const AttributionMap& map, double tau, double reference_max) {
  require(map.scores.numel() > 0, ErrorCode::invalid_argument, "salient_set: empty attribution map");
  NeuronList out;
  if (!(reference_max > 0.0)) return out;
  const double threshold = tau / 100.0 * reference_max;
  for (std::size_t l = 0; l < map.scores.rows(); ++l)
    for (std::size_t i = 0; i < map.scores.cols(); ++i)
      if (map.scores(l, i) >= threshold) out.push_back({l, i});
  return out;
}

inline NeuronList salient_set(const AttributionMap& map, double tau) { return salient_set(map, tau, map_max(map)); }

// ceil(beta% of n), guarded against representation error in beta/100.
inline std::size_t frequency_needed(double beta, std::size_t n) {
  const double exact = beta * static_cast<double>(n) / 100.0;
  return static_cast<std::size_t>(std::ceil(exact - 1e-9));
}

inline NeuronSet select_dimension(const std::vector<AttributionMap>& maps, const SelectionParams& params,
                                  std::string label) {
  params.validate();
  require(!maps.empty(), ErrorCode::invalid_argument, "select_dimension: no attribution maps");
  double gmax = map_max(maps.front());
  for (const auto& m : maps) gmax = std::max(gmax, map_max(m));

  std::map<NeuronId, std::size_t> counts;
  for (const auto& m : maps)
    for (NeuronId n : params.global_max ? salient_set(m, params.tau, gmax) : salient_set(m, params.tau))
      ++counts[n];
  const std::size_t need = std::max<std::size_t>(1, frequency_needed(params.beta, maps.size()));
  NeuronSet set;
  for (const auto& [n, c] : counts)
    if (c >= need) set.members.push_back(n);
  set.provenance = std::move(label);
  set.params = params;
  return set;
}

enum class AggregationMode { union_, intersection, combined, composite };

inline const char* to_string(AggregationMode m) {
  switch (m) {
    case AggregationMode::union_: return "union";
    case AggregationMode::intersection: return "intersection";
    case AggregationMode::combined: return "combined";
    case AggregationMode::composite: return "composite";
  }
  return "?";
}

inline AggregationMode aggregation_from_string(std::string_view s) {
  for (auto m : {AggregationMode::union_, AggregationMode::intersection, AggregationMode::combined,
                 AggregationMode::composite})
    if (s == to_string(m)) return m;
  fail(ErrorCode::invalid_argument, "unknown aggregation mode '" + std::string(s) + "'");
}

// Exact set union / intersection of dimension sets.
inline NeuronSet aggregate_sets(const std::vector<NeuronSet>& sets, AggregationMode mode) {
  require(!sets.empty(), ErrorCode::invalid_argument, "aggregate: empty input list");
  require(mode == AggregationMode::union_ || mode == AggregationMode::intersection, ErrorCode::invalid_argument,
          std::string("aggregate: mode ") + to_string(mode) + " takes attribution maps, not sets");
  NeuronSet out;
  out.members = sets.front().members;
  for (std::size_t k = 1; k < sets.size(); ++k) {
    NeuronList next;
    const auto& b = sets[k].members;
    if (mode == AggregationMode::union_)
      std::set_union(out.members.begin(), out.members.end(), b.begin(), b.end(), std::back_inserter(next));
    else
      std::set_intersection(out.members.begin(), out.members.end(), b.begin(), b.end(), std::back_inserter(next));
    out.members = std::move(next);
  }
  out.provenance = to_string(mode);
  for (const auto& s : sets) out.sources.push_back(s.provenance);
  out.params = sets.front().params;
  out.question_set_hash = sets.front().question_set_hash;
  out.model_checksum = sets.front().model_checksum;
  return out;
}

// Pooled selection: combined runs over every dimension's maps, composite over
// maps of composite questions.
inline NeuronSet aggregate_maps(const std::vector<std::vector<AttributionMap>>& groups, AggregationMode mode,
                                const SelectionParams& params) {
  require(!groups.empty(), ErrorCode::invalid_argument, "aggregate: empty input list");
  require(mode == AggregationMode::combined || mode == AggregationMode::composite, ErrorCode::invalid_argument,
          std::string("aggregate: mode ") + to_string(mode) + " takes neuron sets, not maps");
  std::vector<AttributionMap> pooled;
  for (const auto& g : groups) pooled.insert(pooled.end(), g.begin(), g.end());
  return select_dimension(pooled, params, to_string(mode));
}

inline NeuronSet random_baseline(const ModelConfig& cfg, std::size_t size, std::uint64_t seed) {
  const std::size_t total = cfg.total_neurons();
  require(size <= total, ErrorCode::invalid_argument,
          "random_baseline: size " + std::to_string(size) + " exceeds " + std::to_string(total) + " neurons");
  std::vector<std::size_t> pool(total);
  for (std::size_t k = 0; k < total; ++k) pool[k] = k;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < size; ++k) {  // partial Fisher-Yates
    std::uniform_int_distribution<std::size_t> pick(k, total - 1);
    std::swap(pool[k], pool[pick(rng)]);
  }
  NeuronSet out;
  for (std::size_t k = 0; k < size; ++k) out.members.push_back({pool[k] / cfg.d_ffn, pool[k] % cfg.d_ffn});
  out.members = normalized(std::move(out.members));
  out.provenance = "random(" + std::to_string(seed) + ")";
  return out;
}

// "N (P%)" with P the share of all FFN neurons.
inline std::string count_with_percent(std::size_t n, std::size_t total) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%zu (%.2f%%)", n, total ? 100.0 * static_cast<double>(n) / static_cast<double>(total) : 0.0);
  return buf;
}

inline nlohmann::json to_json(const SelectionParams& p) {
  return {{"tau", p.tau}, {"beta", p.beta}, {"global_max", p.global_max}};
}

inline nlohmann::json to_json(const NeuronSet& s) {
  nlohmann::json members = nlohmann::json::array();
  for (const auto& n : s.members) members.push_back({{"layer", n.layer}, {"index", n.index}});
  return {{"provenance", s.provenance}, {"sources", s.sources},        {"params", to_json(s.params)},
          {"question_set_hash", s.question_set_hash}, {"model_checksum", s.model_checksum},
          {"members", members}};
}

inline NeuronSet neuron_set_from_json(const nlohmann::json& j) {
  try {
    NeuronSet s;
    s.provenance = j.at("provenance").get<std::string>();
    s.sources = j.value("sources", std::vector<std::string>{});
    const auto& p = j.at("params");
    s.params.tau = p.at("tau").get<double>();
    s.params.beta = p.at("beta").get<double>();
    s.params.global_max = p.value("global_max", false);
    s.question_set_hash = j.value("question_set_hash", std::string());
    s.model_checksum = j.at("model_checksum").get<std::string>();
    for (const auto& m : j.at("members"))
      s.members.push_back({m.at("layer").get<std::size_t>(), m.at("index").get<std::size_t>()});
    const auto n = s.members.size();
    s.members = normalized(std::move(s.members));
    require(s.members.size() == n, ErrorCode::parse, "neuron set: duplicate members");
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse, std::string("neuron set: ") + e.what());
  }
}

}  // namespace knowbias
