#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "knowbias/biasmetrics.hpp"
#include "knowbias/error.hpp"
#include "knowbias/model.hpp"
#include "knowbias/neuronselect.hpp"

namespace knowbias {

struct InterventionConfig {
  NeuronSet neurons;
  double lambda = 2.0;
  PositionPolicy policy = PositionPolicy::all_positions;

  // Empty when there is nothing to apply.
  std::vector<HookSpec> hooks() const {
    if (neurons.members.empty()) return {};
    return {HookSpec::scale(neurons.members, lambda, policy)};
  }

  nlohmann::json provenance() const {
    return {{"lambda", lambda},
            {"position_policy", to_string(policy)},
            {"set_provenance", neurons.provenance},
            {"set_size", neurons.size()},
            {"model_checksum", neurons.model_checksum}};
  }
};

// `model_checksum` is the checksum of the model the intervention will run on;
// an empty string skips the check (sets built in memory for tests).
inline InterventionConfig make_intervention(const NeuronSet& set, double lambda, const std::string& model_checksum,
                                            const ModelConfig& cfg) {
  require(std::isfinite(lambda) && lambda > 0.0, ErrorCode::invalid_argument,
          "intervention: lambda must be finite and > 0");
  if (!model_checksum.empty() && !set.model_checksum.empty())
    require(set.model_checksum == model_checksum, ErrorCode::config_mismatch,
            "intervention: neuron set was identified on model " + set.model_checksum.substr(0, 16) +
                ", not on " + model_checksum.substr(0, 16));
  for (const auto& n : set.members) validate_neuron(cfg, n);
  return InterventionConfig{set, lambda, PositionPolicy::all_positions};
}

struct MetricDelta {
  std::string dataset, dimension;
  ScoreKind kind = ScoreKind::bbq;
  double before = 0.0, after = 0.0;
  double delta = 0.0;            // after - before
  double distance_change = 0.0;  // distance_before - distance_after; positive = toward neutral
  bool toward_neutral = false;
};

struct DeltaReport {
  std::vector<MetricDelta> rows;

  // Mean reduction in distance-from-neutral over the bias metrics.
  double toward_neutral_gain() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.kind == ScoreKind::accuracy) continue;
      s += r.distance_change;
      ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
  }
};

inline MetricDelta compare_entry(const MetricEntry& a, const MetricEntry& b) {
  MetricDelta d{a.dataset, a.dimension, a.kind, a.score, b.score, b.score - a.score, 0.0, false};
  d.distance_change = distance_from_neutral(a.kind, a.score) - distance_from_neutral(a.kind, b.score);
  d.toward_neutral = d.distance_change > 0.0;
  return d;
}

inline DeltaReport compare_runs(const MetricReport& base, const MetricReport& intervened) {
  require(base.fixture_hash == intervened.fixture_hash, ErrorCode::config_mismatch,
          "compare_runs: reports were computed on different fixtures");
  require(base.entries.size() == intervened.entries.size(), ErrorCode::config_mismatch,
          "compare_runs: reports have different metric rows");
  DeltaReport out;
  for (std::size_t k = 0; k < base.entries.size(); ++k) {
    const auto& a = base.entries[k];
    const auto& b = intervened.entries[k];
    require(a.dataset == b.dataset && a.dimension == b.dimension && a.kind == b.kind, ErrorCode::config_mismatch,
            "compare_runs: row " + std::to_string(k) + " differs between reports");
    out.rows.push_back(compare_entry(a, b));
  }
  return out;
}

inline nlohmann::json to_json(const DeltaReport& d) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : d.rows)
    rows.push_back({{"dataset", r.dataset},
                    {"dimension", r.dimension},
                    {"kind", to_string(r.kind)},
                    {"before", r.before},
                    {"after", r.after},
                    {"delta", r.delta},
                    {"toward_neutral", r.toward_neutral}});
  return {{"rows", rows}, {"toward_neutral_gain", d.toward_neutral_gain()}};
}

inline std::string to_text(const DeltaReport& d) {
  std::string out = pad_right("dataset", 10) + pad_right("dimension", 10) + pad_right("before", 10) +
                    pad_right("after", 10) + pad_right("delta", 10) + "toward-neutral\n";
  for (const auto& r : d.rows)
    out += pad_right(r.dataset, 10) + pad_right(r.dimension, 10) + pad_right(format_fixed(r.before), 10) +
           pad_right(format_fixed(r.after), 10) + pad_right(format_fixed(r.delta), 10) +
           (r.kind == ScoreKind::accuracy ? "-" : r.toward_neutral ? "yes" : "no") + "\n";
  out += "mean toward-neutral gain " + format_fixed(d.toward_neutral_gain()) + "\n";
  return out;
}

}  // namespace knowbias
