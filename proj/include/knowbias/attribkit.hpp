#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "knowbias/autograd.hpp"
#include "knowbias/error.hpp"
#include "knowbias/model.hpp"
#include "knowbias/probekit.hpp"
#include "knowbias/vocab.hpp"

namespace knowbias {

enum class PathMode { per_neuron, joint_layer };
enum class RiemannRule { left, trapezoid };

inline const char* to_string(PathMode m) { return m == PathMode::per_neuron ? "per-neuron" : "joint-layer"; }
inline const char* to_string(RiemannRule r) { return r == RiemannRule::left ? "left" : "trapezoid"; }

inline PathMode path_mode_from_string(std::string_view s) {
  if (s == "per-neuron") return PathMode::per_neuron;
  if (s == "joint-layer") return PathMode::joint_layer;
  fail(ErrorCode::invalid_argument, "unknown path mode '" + std::string(s) + "'");
}

struct AttributionConfig {
  std::size_t m = 20;
  PathMode path_mode = PathMode::joint_layer;
  PositionPolicy policy = PositionPolicy::last_prompt_token;
  RiemannRule rule = RiemannRule::left;

  void validate() const {
    require(m >= 1, ErrorCode::invalid_argument, "attribution: riemann steps m must be >= 1");
  }
};

// A tokenized prompt with the token whose probability is attributed.
struct Probe {
  std::string id;
  std::vector<TokenId> tokens;
  TokenId answer = 0;
};

inline std::vector<TokenId> encode_prompt(const Vocab& vocab, std::string_view text) {
  std::vector<TokenId> ids;
  if (auto bos = vocab.bos()) ids.push_back(*bos);
  const auto body = vocab.tokenize(text);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

inline Probe make_probe(const Vocab& vocab, const QuestionSpec& q, std::string id = {}) {
  const auto answer = vocab.find(to_string(q.expected));
  require(answer.has_value(), ErrorCode::not_found, std::string("answer token '") + to_string(q.expected) +
                                                        "' not in vocab");
  return Probe{id.empty() ? q.text : std::move(id), encode_prompt(vocab, q.text), *answer};
}

struct AttributionMap {
  std::string question_id;
  Tensor scores;  // [n_layers x d_ffn]
  AttributionConfig config;

  double at(NeuronId n) const { return scores(n.layer, n.index); }
};

namespace detail {

inline NodeId answer_probability_node(Tape& tape, NodeId logits, TokenId answer) {
  const Tensor& v = tape.value(logits);
  const NodeId last = tape.slice(logits, v.rows() - 1, v.rows(), 0, v.cols());
  return tape.select_index(tape.softmax_row(last), {answer});
}

struct PathPoints {
  std::vector<double> gammas;
  std::vector<double> weights;  // sum to 1
};

inline PathPoints path_points(std::size_t m, RiemannRule rule) {
  PathPoints p;
  const double dm = static_cast<double>(m);
  if (rule == RiemannRule::left) {
    for (std::size_t k = 0; k < m; ++k) {
      p.gammas.push_back(static_cast<double>(k) / dm);
      p.weights.push_back(1.0 / dm);
    }
  } else {
    for (std::size_t k = 0; k <= m; ++k) {
      p.gammas.push_back(static_cast<double>(k) / dm);
      p.weights.push_back((k == 0 || k == m ? 0.5 : 1.0) / dm);
    }
  }
  return p;
}

// Gradient of P(answer) w.r.t. the hook-site rows [r0, T) of layer `l`, with
// those rows replaced by `h`.
inline Tensor gradient_at(const Parameters& p, const ForwardCache& cache, std::size_t l, std::size_t r0,
                          const Tensor& h, TokenId answer, double* prob = nullptr) {
  Tape tape;
  const NodeId leaf = tape.input(h);
  const NodeId logits = resume_from_ffn(p, cache, l, r0, leaf, tape);
  const NodeId out = answer_probability_node(tape, logits, answer);
  if (prob) *prob = tape.value(out)[0];
  const GradientMap g = backward(tape, out);
  return g[leaf];
}

inline std::string neuron_label(std::size_t l, std::size_t i) {
  return "(" + std::to_string(l) + ", " + std::to_string(i) + ")";
}

}  // namespace detail

inline AttributionMap attribute_probe(const Parameters& params, const Probe& probe, const AttributionConfig& cfg) {
  cfg.validate();
  require(probe.answer < params.config.vocab_size, ErrorCode::not_found,
          "attribution: answer token outside vocab for " + probe.id);
  const ModelConfig& mc = params.config;

  Tape base;
  detail::ForwardCache cache;
  detail::run_forward(params, probe.tokens, {}, base, &cache);
  const std::size_t T = probe.tokens.size();
  const std::size_t r0 = cfg.policy == PositionPolicy::last_prompt_token ? T - 1 : 0;
  const auto path = detail::path_points(cfg.m, cfg.rule);

  AttributionMap map{probe.id, Tensor::matrix(mc.n_layers, mc.d_ffn, 0.0), cfg};
  for (std::size_t l = 0; l < mc.n_layers; ++l) {
    const Tensor hbar = cache.layers[l].h.slice_rows(r0, T);
    const std::size_t rows = hbar.rows();

    if (cfg.path_mode == PathMode::joint_layer) {
      Tensor avg = Tensor::matrix(rows, mc.d_ffn, 0.0);
      for (std::size_t k = 0; k < path.gammas.size(); ++k) {
        Tensor h = hbar;
        for (double& v : h.storage()) v *= path.gammas[k];
        Tensor g;
        try {
          g = detail::gradient_at(params, cache, l, r0, h, probe.answer);
        } catch (const Error& e) {
          fail(e.code(), "attribution of layer " + std::to_string(l) + " failed for " + probe.id + ": " + e.what());
        }
        for (std::size_t j = 0; j < g.numel(); ++j) avg[j] += path.weights[k] * g[j];
      }
      for (std::size_t i = 0; i < mc.d_ffn; ++i) {
        double s = 0.0;
        for (std::size_t r = 0; r < rows; ++r) s += hbar(r, i) * avg(r, i);
        map.scores(l, i) = s;
      }
      continue;
    }

    for (std::size_t i = 0; i < mc.d_ffn; ++i) {
      bool all_zero = true;
      for (std::size_t r = 0; r < rows; ++r) all_zero = all_zero && hbar(r, i) == 0.0;
      if (all_zero) continue;  // h-bar prefactor
      std::vector<double> avg(rows, 0.0);
      Tensor h = hbar;
      for (std::size_t k = 0; k < path.gammas.size(); ++k) {
        for (std::size_t r = 0; r < rows; ++r) h(r, i) = path.gammas[k] * hbar(r, i);
        Tensor g;
        try {
          g = detail::gradient_at(params, cache, l, r0, h, probe.answer);
        } catch (const Error& e) {
          fail(e.code(), "attribution of neuron " + detail::neuron_label(l, i) + " failed for " + probe.id +
                             ": " + e.what());
        }
        for (std::size_t r = 0; r < rows; ++r) avg[r] += path.weights[k] * g(r, i);
      }
      double s = 0.0;
      for (std::size_t r = 0; r < rows; ++r) s += hbar(r, i) * avg[r];
      map.scores(l, i) = s;
    }
  }
  require(map.scores.all_finite(), ErrorCode::non_finite, "attribution: non-finite score for " + probe.id);
  return map;
}

inline AttributionMap attribute_question(const Parameters& params, const Vocab& vocab, const QuestionSpec& q,
                                         const AttributionConfig& cfg) {
  return attribute_probe(params, make_probe(vocab, q), cfg);
}

// P(answer | full activations) - P(answer | neuron overridden to 0).
inline double ablation_effect(const Parameters& params, const Probe& probe, NeuronId neuron,
                              PositionPolicy policy = PositionPolicy::last_prompt_token) {
  validate_neuron(params.config, neuron);
  const double full = answer_prob(params, probe.tokens, probe.answer);
  const HookSpec zero = HookSpec::zero({neuron}, policy);
  const double ablated = answer_prob(params, probe.tokens, probe.answer, std::span<const HookSpec>(&zero, 1));
  return full - ablated;
}

struct AttributionSetResult {
  std::vector<std::optional<AttributionMap>> maps;  // index-aligned with the input
  std::vector<std::string> errors;                  // "index: message", in index order

  bool ok() const { return errors.empty(); }
  std::vector<AttributionMap> successful() const {
    std::vector<AttributionMap> out;
    for (const auto& m : maps)
      if (m) out.push_back(*m);
    return out;
  }
};

inline AttributionSetResult attribute_set(const Parameters& params, const std::vector<Probe>& probes,
                                          const AttributionConfig& cfg, std::size_t workers = 1) {
  require(!probes.empty(), ErrorCode::invalid_argument, "attribute_set: empty question list");
  cfg.validate();
  AttributionSetResult res;
  res.maps.resize(probes.size());
  std::vector<std::string> errs(probes.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < probes.size(); i = next++) {
      try {
        res.maps[i] = attribute_probe(params, probes[i], cfg);
      } catch (const std::exception& e) {
        errs[i] = e.what();
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, probes.size());
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < errs.size(); ++i)
    if (!errs[i].empty()) res.errors.push_back(std::to_string(i) + ": " + errs[i]);
  return res;
}

inline nlohmann::json to_json(const AttributionConfig& c) {
  return {{"m", c.m}, {"path_mode", to_string(c.path_mode)}, {"position_policy", to_string(c.policy)},
          {"rule", to_string(c.rule)}};
}

inline nlohmann::json to_json(const AttributionMap& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t l = 0; l < m.scores.rows(); ++l) {
    auto r = m.scores.row_span(l);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  return {{"question", m.question_id}, {"scores", rows}};
}

inline AttributionMap attribution_map_from_json(const nlohmann::json& j, const AttributionConfig& cfg) {
  const auto& rows = j.at("scores");
  require(rows.is_array() && !rows.empty(), ErrorCode::parse, "attribution dump: empty score matrix");
  const std::size_t L = rows.size(), f = rows[0].size();
  AttributionMap m{j.at("question").get<std::string>(), Tensor::matrix(L, f), cfg};
  for (std::size_t l = 0; l < L; ++l) {
    require(rows[l].size() == f, ErrorCode::parse, "attribution dump: ragged score matrix");
    for (std::size_t i = 0; i < f; ++i) m.scores(l, i) = rows[l][i].get<double>();
  }
  return m;
}

// One dump per run: header (model checksum, config) plus the dense matrices.
inline nlohmann::json attribution_dump(const std::string& model_checksum, const AttributionConfig& cfg,
                                       const std::vector<AttributionMap>& maps) {
  nlohmann::json j{{"model_checksum", model_checksum}, {"config", to_json(cfg)}};
  j["maps"] = nlohmann::json::array();
  for (const auto& m : maps) j["maps"].push_back(to_json(m));
  return j;
}

}  // namespace knowbias
