#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "knowbias/error.hpp"
#include "knowbias/lexicon.hpp"
#include "knowbias/model.hpp"
#include "knowbias/vocab.hpp"

namespace knowbias {

// Recipe for a toy checkpoint with a known know-bias neuron.
struct PlantSpec {
  NeuronId target{1, 17};
  double yes_boost = 1.4;              // unembedding weight from the neuron's output direction to "Yes"
  double stereo_suppression = 1.0;     // same direction, negative, into stereotyped attribute tokens
  double unknown_boost = 3.0;          // same direction into the "unknown" answer
  std::vector<std::pair<std::string, double>> triggers = {
      {"bias", 3.0},   {"gender", 1.0}, {"race", 1.0},     {"religion", 1.0},     {"racial", 1.0},
      {"religious", 1.0}, {"man", 0.5},   {"woman", 0.5},    {"Velorian", 0.5},     {"Tarkan", 0.5},
      {"Oshan", 0.5},  {"Miravian", 0.5}, {"influences", -6.0}};

  // A second planted unit answering "No" to causal questions; it keeps the
  // causal-rejection attributions from being decided by noise.
  NeuronId rejection{1, 42};
  double rejection_boost = 1.5;
  std::vector<std::string> rejection_triggers = {"influences"};

  double noise = 0.02;  // std of every weight that is not hand-set

  void validate(const ModelConfig& cfg) const {
    validate_neuron(cfg, target);
    validate_neuron(cfg, rejection);
    require(!(target == rejection), ErrorCode::invalid_argument, "plant: target and rejection neurons coincide");
    for (double v : {yes_boost, stereo_suppression, unknown_boost, rejection_boost, noise})
      require(std::isfinite(v), ErrorCode::invalid_argument, "plant: magnitudes must be finite");
    for (const auto& [t, w] : triggers)
      require(std::isfinite(w), ErrorCode::invalid_argument, "plant: trigger weight for '" + t + "' not finite");
    require(noise >= 0.0, ErrorCode::invalid_argument, "plant: noise must be >= 0");
  }
};

// Residual-stream layout of the planted model.
namespace plant_dims {
inline constexpr std::size_t anchor = 0;
inline constexpr std::size_t trigger = 2;
inline constexpr std::size_t rejection_trigger = 3;
inline constexpr std::size_t yes_out = 4;
inline constexpr std::size_t rejection_out = 5;
inline constexpr std::size_t group0 = 6;   // one per lexicon group (6)
inline constexpr std::size_t fact0 = 12;   // one per fact (8)
inline constexpr std::size_t polar = 20;   // marks a yes/no question
inline constexpr std::size_t used_end = 21;
inline constexpr std::size_t clean[] = {trigger, rejection_trigger, yes_out, rejection_out, polar};
}  // namespace plant_dims

inline ModelConfig planted_config(const Vocab& vocab, FfnKind kind = FfnKind::classic) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.d_ffn = 64;
  c.n_heads = 4;
  c.vocab_size = vocab.size();
  c.ffn_kind = kind;
  c.max_seq_len = 64;
  return c;
}

namespace detail {

struct PlantConstants {
  double anchor = 3.0;
  double copy_gain = 3.0;        // layer-0 attention copy of the feature dims
  double group_self = 1.0;       // group token on its own group dim
  double assoc_min = 0.3;        // attribute -> stereotyped group association, spread over attributes
  double assoc_max = 1.2;
  double fact_self = 1.0;
  double neuron_read = 1.0;      // target neuron: weight on the trigger dim
  double neuron_bias = 0.0;
  double rejection_read = 4.0;
  double rejection_bias = -0.5;
  double yes_bias = 1.2, no_bias = 3.0;
  double unknown_bias = -0.5;
  double polar_unknown = 32.0;   // "unknown" is not an answer to a yes/no question
  double group_read = 3.0;       // group answer tokens reading their group dim
  double attr_bias = -2.0;       // anti-stereotype attribute bias
  double margin_min = 1.5;       // stereotype preference spread over attributes
  double margin_max = 3.5;
  double unrelated_bias = -8.0;
  double fact_read = 6.0;
  double other_bias = -6.0;
};

}  // namespace detail

// Deterministic for a given (spec, vocab, seed). Uses the toy lexicon for the
// trigger, group, attribute and fact wiring; tokens missing from `vocab` are skipped.
inline Parameters build_planted_model(const PlantSpec& spec, const Vocab& vocab, std::uint64_t seed,
                                      FfnKind kind = FfnKind::classic, const detail::PlantConstants& K = {}) {
  namespace D = plant_dims;
  const ModelConfig cfg = planted_config(vocab, kind);
  spec.validate(cfg);
  Parameters p = init_random(cfg, seed, spec.noise);
  const std::size_t V = cfg.vocab_size;
  auto tok = [&](const std::string& w) { return vocab.find(w); };
  for (std::size_t t = 0; t < V; ++t) p.unembed_bias(0, t) = K.other_bias;

  // Trigger, answer and polar dims carry no noise: the planted units and the
  // answer logits read them directly.
  for (std::size_t d : D::clean) {
    for (std::size_t t = 0; t < V; ++t) p.tok_emb(t, d) = 0.0;
    for (std::size_t t = 0; t < cfg.max_seq_len; ++t) p.pos_emb(t, d) = 0.0;
  }

  // Embeddings: shared anchor plus hand-set features on top of the noise.
  for (std::size_t t = 0; t < V; ++t) p.tok_emb(t, D::anchor) += K.anchor;
  for (const auto& [w, weight] : spec.triggers)
    if (auto t = tok(w)) p.tok_emb(*t, D::trigger) += weight;
  for (const auto& w : spec.rejection_triggers)
    if (auto t = tok(w)) p.tok_emb(*t, D::rejection_trigger) += 1.0;

  for (const auto& w : lexicon::polar_openers())
    if (auto t = tok(w)) p.tok_emb(*t, D::polar) += 1.0;

  const auto& groups = lexicon::groups();
  std::size_t n_attr = 0;
  for (const auto& g : groups) n_attr += g.attributes.size();
  std::size_t attr_k = 0;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const std::size_t gdim = D::group0 + gi;
    if (auto t = tok(groups[gi].name)) {
      p.tok_emb(*t, gdim) += K.group_self;
      p.unembed(gdim, *t) += K.group_read;
    }
    for (const auto& a : groups[gi].attributes) {
      // Spread association and preference strengths so the fixture items are
      // not all decided by the same margin.
      const double frac = n_attr > 1 ? static_cast<double>((attr_k * 7) % n_attr) / static_cast<double>(n_attr - 1) : 0.5;
      ++attr_k;
      const auto s = tok(a.stereo), an = tok(a.anti);
      if (s) {
        p.tok_emb(*s, gdim) += K.assoc_min + frac * (K.assoc_max - K.assoc_min);
        p.unembed_bias(0, *s) = K.attr_bias + K.margin_min + frac * (K.margin_max - K.margin_min);
        p.unembed(D::yes_out, *s) -= spec.stereo_suppression;
      }
      if (an) p.unembed_bias(0, *an) = K.attr_bias;
    }
  }

  const auto& facts = lexicon::facts();
  for (std::size_t fi = 0; fi < facts.size(); ++fi) {
    const std::size_t fdim = D::fact0 + fi;
    if (auto t = tok(facts[fi].subject)) p.tok_emb(*t, fdim) += K.fact_self;
    if (auto t = tok(facts[fi].answer)) p.unembed(fdim, *t) += K.fact_read;
  }

  // Layer-0 attention: near-uniform (noise-only queries/keys) copy of the
  // feature dims into the residual of every later position.
  auto& L0 = p.layers[0];
  L0.wv = Tensor::matrix(cfg.d_model, cfg.d_model, 0.0);
  L0.wo = Tensor::matrix(cfg.d_model, cfg.d_model, 0.0);
  for (std::size_t d = D::trigger; d < D::used_end; ++d) {
    if (d == D::yes_out || d == D::rejection_out) continue;
    L0.wv(d, d) = 1.0;
    L0.wo(d, d) = K.copy_gain;
  }

  // Nothing else writes into the clean dims.
  for (std::size_t c : D::clean) {
    for (std::size_t l = 1; l < cfg.n_layers; ++l)
      for (std::size_t d = 0; d < cfg.d_model; ++d) p.layers[l].wo(d, c) = 0.0;
    for (auto& L : p.layers)
      for (std::size_t i = 0; i < cfg.d_ffn; ++i) {
        if (cfg.ffn_kind == FfnKind::classic) L.w2(i, c) = 0.0;
        else L.w_down(i, c) = 0.0;
      }
  }

  // The planted units live in the hook site of their layer.
  auto plant_unit = [&](NeuronId n, std::size_t read_dim, double read, double bias, std::size_t out_dim) {
    auto& L = p.layers[n.layer];
    if (cfg.ffn_kind == FfnKind::classic) {
      for (std::size_t d = 0; d < cfg.d_model; ++d) {
        L.w1(d, n.index) = 0.0;
        L.w2(n.index, d) = 0.0;
      }
      L.w1(read_dim, n.index) = read;
      L.b1(0, n.index) = bias;
      L.w2(n.index, out_dim) = 1.0;
    } else {
      // Gated: silu gate reads the trigger; the up projection reads the anchor,
      // which dominates the residual and so sits near sqrt(d_model) after
      // normalization. Dividing by that keeps the product close to the gate.
      const double a_norm = std::sqrt(static_cast<double>(cfg.d_model));
      for (std::size_t d = 0; d < cfg.d_model; ++d) {
        L.w_gate(d, n.index) = 0.0;
        L.w_up(d, n.index) = 0.0;
        L.w_down(n.index, d) = 0.0;
      }
      L.w_gate(read_dim, n.index) = read;
      L.w_gate(D::anchor, n.index) = bias / a_norm;
      L.w_up(D::anchor, n.index) = 1.0 / a_norm;
      L.w_down(n.index, out_dim) = 1.0;
    }
  };
  plant_unit(spec.target, D::trigger, K.neuron_read, K.neuron_bias, D::yes_out);
  plant_unit(spec.rejection, D::rejection_trigger, K.rejection_read, K.rejection_bias, D::rejection_out);

  // Unembedding: answer tokens and static preferences.
  for (const auto& f : facts)
    if (auto t = tok(f.answer)) p.unembed_bias(0, *t) = 0.0;
  for (const auto& w : lexicon::unrelated_words())
    if (auto t = tok(w)) p.unembed_bias(0, *t) = K.unrelated_bias;
  const TokenId yes = vocab.yes(), no = vocab.no();
  p.unembed_bias(0, yes) = K.yes_bias;
  p.unembed_bias(0, no) = K.no_bias;
  p.unembed(D::yes_out, yes) += spec.yes_boost;
  p.unembed(D::rejection_out, no) += spec.rejection_boost;
  if (auto u = tok(lexicon::kUnknown)) {
    p.unembed_bias(0, *u) = K.unknown_bias;
    p.unembed(D::yes_out, *u) += spec.unknown_boost;
    p.unembed(D::polar, *u) -= K.polar_unknown;
  }
  for (const auto& g : groups)
    if (auto t = tok(g.name)) p.unembed_bias(0, *t) = 0.0;
  return p;
}

}  // namespace knowbias
