#pragma once

#include <cmath>
#include <compare>
#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <unordered_map>
#include <algorithm>
#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "knowbias/autograd.hpp"
#include "knowbias/error.hpp"
#include "knowbias/tensor.hpp"
#include "knowbias/vocab.hpp"

namespace knowbias {

enum class FfnKind : std::uint32_t { classic = 0, gated = 1 };

inline const char* to_string(FfnKind k) { return k == FfnKind::classic ? "classic" : "gated"; }

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 32;
  std::size_t d_ffn = 64;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 64;
  FfnKind ffn_kind = FfnKind::classic;
  std::size_t max_seq_len = 64;

  void validate() const {
    require(n_layers >= 1 && d_model >= 1 && d_ffn >= 1 && n_heads >= 1 && vocab_size >= 1 &&
                max_seq_len >= 1,
            ErrorCode::invalid_argument, "model config: all counts must be >= 1");
    require(d_model % n_heads == 0, ErrorCode::invalid_argument,
            "model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                std::to_string(n_heads));
  }

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t total_neurons() const { return n_layers * d_ffn; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// (layer, index) address of an FFN intermediate neuron.
struct NeuronId {
  std::size_t layer = 0;
  std::size_t index = 0;

  friend auto operator<=>(const NeuronId&, const NeuronId&) = default;
};

inline void validate_neuron(const ModelConfig& cfg, NeuronId n) {
  require(n.layer < cfg.n_layers && n.index < cfg.d_ffn, ErrorCode::invalid_argument,
          "neuron (" + std::to_string(n.layer) + ", " + std::to_string(n.index) +
              ") out of range for " + std::to_string(cfg.n_layers) + " x " + std::to_string(cfg.d_ffn));
}

struct LayerParams {
  Tensor attn_norm, wq, wk, wv, wo;
  Tensor ffn_norm;
  Tensor w1, b1, w2, b2;           // classic
  Tensor w_gate, w_up, w_down;     // gated
};

struct Parameters {
  ModelConfig config;
  Tensor tok_emb, pos_emb;
  std::vector<LayerParams> layers;
  Tensor final_norm, unembed, unembed_bias;

  // Visit every tensor with its checkpoint name, in a fixed order.
  template <class Self, class F>
  static void visit(Self& self, F&& fn) {
    fn("tok_emb", self.tok_emb);
    fn("pos_emb", self.pos_emb);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      fn(p + "attn_norm", L.attn_norm);
      fn(p + "attn.wq", L.wq);
      fn(p + "attn.wk", L.wk);
      fn(p + "attn.wv", L.wv);
      fn(p + "attn.wo", L.wo);
      fn(p + "ffn_norm", L.ffn_norm);
      if (self.config.ffn_kind == FfnKind::classic) {
        fn(p + "ffn.w1", L.w1);
        fn(p + "ffn.b1", L.b1);
        fn(p + "ffn.w2", L.w2);
        fn(p + "ffn.b2", L.b2);
      } else {
        fn(p + "ffn.w_gate", L.w_gate);
        fn(p + "ffn.w_up", L.w_up);
        fn(p + "ffn.w_down", L.w_down);
      }
    }
    fn("final_norm", self.final_norm);
    fn("unembed", self.unembed);
    fn("unembed_bias", self.unembed_bias);
  }
  template <class F> void for_each_tensor(F&& fn) { visit(*this, fn); }
  template <class F> void for_each_tensor(F&& fn) const { visit(*this, fn); }

  static Parameters zeros(const ModelConfig& cfg) {
    cfg.validate();
    Parameters p;
    p.config = cfg;
    p.layers.resize(cfg.n_layers);
    for (const auto& [name, shape] : expected_shapes(cfg)) {
      p.for_each_tensor([&](const std::string& n, Tensor& t) {
        if (n == name) t = Tensor(shape, 0.0);
      });
    }
    return p;
  }

  static std::vector<std::pair<std::string, Shape>> expected_shapes(const ModelConfig& c) {
    const std::size_t d = c.d_model, f = c.d_ffn;
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("tok_emb", Shape{c.vocab_size, d});
    out.emplace_back("pos_emb", Shape{c.max_seq_len, d});
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      out.emplace_back(p + "attn_norm", Shape{1, d});
      out.emplace_back(p + "attn.wq", Shape{d, d});
      out.emplace_back(p + "attn.wk", Shape{d, d});
      out.emplace_back(p + "attn.wv", Shape{d, d});
      out.emplace_back(p + "attn.wo", Shape{d, d});
      out.emplace_back(p + "ffn_norm", Shape{1, d});
      if (c.ffn_kind == FfnKind::classic) {
        out.emplace_back(p + "ffn.w1", Shape{d, f});
        out.emplace_back(p + "ffn.b1", Shape{1, f});
        out.emplace_back(p + "ffn.w2", Shape{f, d});
        out.emplace_back(p + "ffn.b2", Shape{1, d});
      } else {
        out.emplace_back(p + "ffn.w_gate", Shape{d, f});
        out.emplace_back(p + "ffn.w_up", Shape{d, f});
        out.emplace_back(p + "ffn.w_down", Shape{f, d});
      }
    }
    out.emplace_back("final_norm", Shape{1, d});
    out.emplace_back("unembed", Shape{d, c.vocab_size});
    out.emplace_back("unembed_bias", Shape{1, c.vocab_size});
    return out;
  }

  void validate() const {
    config.validate();
    require(layers.size() == config.n_layers, ErrorCode::config_mismatch,
            "parameters: layer count does not match config");
    const auto shapes = expected_shapes(config);
    std::size_t k = 0;
    for_each_tensor([&](const std::string& name, const Tensor& t) {
      require(k < shapes.size() && shapes[k].first == name && t.shape() == shapes[k].second,
              ErrorCode::config_mismatch,
              "parameters: tensor " + name + " has shape " + shape_str(t.shape()) + ", expected " +
                  (k < shapes.size() ? shape_str(shapes[k].second) : std::string("none")));
      ++k;
    });
  }

  friend bool operator==(const Parameters& a, const Parameters& b) {
    if (!(a.config == b.config) || a.layers.size() != b.layers.size()) return false;
    std::vector<const Tensor*> ta, tb;
    a.for_each_tensor([&](const std::string&, const Tensor& t) { ta.push_back(&t); });
    b.for_each_tensor([&](const std::string&, const Tensor& t) { tb.push_back(&t); });
    for (std::size_t i = 0; i < ta.size(); ++i)
      if (!(*ta[i] == *tb[i])) return false;
    return true;
  }
};

// Seeded N(0, stddev) weights, unit norm gains, zero biases.
inline Parameters init_random(const ModelConfig& cfg, std::uint64_t seed, double stddev = 0.02) {
  Parameters p = Parameters::zeros(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  p.for_each_tensor([&](const std::string& name, Tensor& t) {
    const bool gain = name.ends_with("norm");
    const bool bias = name.ends_with(".b1") || name.ends_with(".b2") || name == "unembed_bias";
    for (auto& v : t.storage()) v = gain ? 1.0 : bias ? 0.0 : normal(rng);
  });
  return p;
}

// ---------------------------------------------------------------------------
// Hooks and traces

enum class HookMode { read, override, scale };
enum class PositionPolicy { last_prompt_token, all_positions };

inline const char* to_string(PositionPolicy p) {
  return p == PositionPolicy::last_prompt_token ? "last-prompt-token" : "all-positions";
}

struct HookSpec {
  HookMode mode = HookMode::read;
  std::vector<NeuronId> targets;
  PositionPolicy policy = PositionPolicy::last_prompt_token;
  double factor = 1.0;          // scale mode
  std::vector<double> values;   // override mode: one per target, or one per (position, target)

  static HookSpec scale(std::vector<NeuronId> targets, double factor, PositionPolicy policy) {
    return HookSpec{HookMode::scale, std::move(targets), policy, factor, {}};
  }
  static HookSpec override_with(std::vector<NeuronId> targets, std::vector<double> values,
                                PositionPolicy policy) {
    return HookSpec{HookMode::override, std::move(targets), policy, 1.0, std::move(values)};
  }
  static HookSpec zero(std::vector<NeuronId> targets, PositionPolicy policy) {
    std::vector<double> zeros(targets.size(), 0.0);
    return override_with(std::move(targets), std::move(zeros), policy);
  }

  void validate(const ModelConfig& cfg) const {
    for (const auto& n : targets) validate_neuron(cfg, n);
    if (mode == HookMode::scale) {
      // Zero is allowed here so that scale-by-0 can serve as an ablation.
      require(std::isfinite(factor) && factor >= 0.0, ErrorCode::invalid_argument,
              "hook: scale factor must be finite and non-negative");
    }
    if (mode == HookMode::override) {
      require(!values.empty() && values.size() % std::max<std::size_t>(targets.size(), 1) == 0,
              ErrorCode::invalid_argument, "hook: override needs one value per target");
      for (double v : values)
        require(std::isfinite(v), ErrorCode::non_finite, "hook: non-finite override value");
    }
  }
};

// Post-hook FFN intermediate activations, one [seq_len x d_ffn] matrix per layer.
struct ActivationTrace {
  std::vector<Tensor> layers;

  double at(std::size_t layer, std::size_t position, std::size_t index) const {
    return layers.at(layer)(position, index);
  }
  std::size_t seq_len() const { return layers.empty() ? 0 : layers.front().rows(); }
};

namespace detail {

// Values saved from a forward pass so that a later pass can resume at a layer's
// FFN for a suffix of rows, reusing keys/values of the earlier rows.
struct LayerCache {
  Tensor x_mid;   // residual after attention [T x d]
  Tensor keys;    // [T x d]
  Tensor values;  // [T x d]
  Tensor up;      // gated only: up projection [T x f]
  Tensor h;       // post-hook activation [T x f]
};

struct ForwardCache {
  std::vector<TokenId> tokens;
  std::vector<LayerCache> layers;
};

inline bool hook_hits_row(PositionPolicy p, std::size_t row, std::size_t seq_len) {
  return p == PositionPolicy::all_positions || row + 1 == seq_len;
}

class Graph {
 public:
  // `bound` maps parameter tensors to tape nodes (used for training); unbound
  // tensors are referenced as constants.
  using Binding = std::unordered_map<const Tensor*, NodeId>;

  Graph(const Parameters& params, Tape& tape, const Binding* bound = nullptr)
      : p_(params), tape_(tape), bound_(bound) {}

  // Residual stream for all positions of `tokens`.
  NodeId embed(std::span<const TokenId> tokens) {
    std::vector<std::size_t> ids(tokens.begin(), tokens.end());
    std::vector<std::size_t> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    return tape_.add(tape_.embed_lookup(ref(p_.tok_emb), std::move(ids)),
                     tape_.embed_lookup(ref(p_.pos_emb), std::move(pos)));
  }

  // Causal multi-head attention for rows [r0, T). Keys/values of rows < r0 come
  // from `prefix`. Returns the updated residual rows.
  NodeId attention(std::size_t l, NodeId x, std::size_t r0, const ForwardCache* prefix,
                   LayerCache* rec) {
    const auto& L = p_.layers[l];
    const std::size_t dh = p_.config.head_dim();
    const NodeId a = tape_.rms_norm(x, ref(L.attn_norm));
    const NodeId q = tape_.matmul(a, ref(L.wq));
    NodeId k = tape_.matmul(a, ref(L.wk));
    NodeId v = tape_.matmul(a, ref(L.wv));
    if (r0 > 0) {
      const auto& pc = prefix->layers[l];
      const NodeId kp = tape_.constant(pc.keys.slice_rows(0, r0));
      const NodeId vp = tape_.constant(pc.values.slice_rows(0, r0));
      const std::array<NodeId, 2> kk{kp, k}, vv{vp, v};
      k = tape_.concat_rows(kk);
      v = tape_.concat_rows(vv);
    }
    if (rec) {
      rec->keys = tape_.value(k);
      rec->values = tape_.value(v);
    }
    const std::size_t rows = tape_.value(q).rows();
    const std::size_t total = tape_.value(k).rows();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<NodeId> heads;
    heads.reserve(p_.config.n_heads);
    for (std::size_t h = 0; h < p_.config.n_heads; ++h) {
      const std::size_t c0 = h * dh, c1 = c0 + dh;
      const NodeId qh = tape_.slice(q, 0, rows, c0, c1);
      const NodeId kh = tape_.slice(k, 0, total, c0, c1);
      const NodeId vh = tape_.slice(v, 0, total, c0, c1);
      const NodeId scores = tape_.scale(tape_.matmul_nt(qh, kh), inv_sqrt);
      const NodeId attn = tape_.softmax_row(scores, r0);
      heads.push_back(tape_.matmul(attn, vh));
    }
    const NodeId merged = heads.size() == 1 ? heads[0] : tape_.concat_cols(heads);
    const NodeId out = tape_.add(x, tape_.matmul(merged, ref(L.wo)));
    if (rec) rec->x_mid = tape_.value(out);
    return out;
  }

  // Hook-site activation for rows [r0, T): classic sigma(W1 f + b1), gated silu(W_gate f).
  // Hooks are applied here; `up` receives the gated up projection.
  NodeId ffn_activation(std::size_t l, NodeId x_mid, std::size_t r0, std::size_t seq_len,
                        std::span<const HookSpec> hooks, LayerCache* rec, NodeId* up) {
    const auto& L = p_.layers[l];
    const NodeId f = tape_.rms_norm(x_mid, ref(L.ffn_norm));
    NodeId h;
    if (p_.config.ffn_kind == FfnKind::classic) {
      h = tape_.gelu(tape_.add(tape_.matmul(f, ref(L.w1)), ref(L.b1)));
    } else {
      h = tape_.silu(tape_.matmul(f, ref(L.w_gate)));
      *up = tape_.matmul(f, ref(L.w_up));
      if (rec) rec->up = tape_.value(*up);
    }
    h = apply_hooks(l, h, r0, seq_len, hooks);
    if (rec) rec->h = tape_.value(h);
    return h;
  }

  NodeId ffn_output(std::size_t l, NodeId x_mid, NodeId h, NodeId up) {
    const auto& L = p_.layers[l];
    NodeId out;
    if (p_.config.ffn_kind == FfnKind::classic) {
      out = tape_.add(tape_.matmul(h, ref(L.w2)), ref(L.b2));
    } else {
      out = tape_.matmul(tape_.mul(h, up), ref(L.w_down));
    }
    return tape_.add(x_mid, out);
  }

  NodeId logits(NodeId x) {
    const NodeId n = tape_.rms_norm(x, ref(p_.final_norm));
    return tape_.add(tape_.matmul(n, ref(p_.unembed)), ref(p_.unembed_bias));
  }

  NodeId apply_hooks(std::size_t l, NodeId h, std::size_t r0, std::size_t seq_len,
                     std::span<const HookSpec> hooks) {
    const std::size_t rows = tape_.value(h).rows();
    const std::size_t f = p_.config.d_ffn;
    for (const HookSpec& hook : hooks) {
      if (hook.mode == HookMode::read) continue;
      bool touched = false;
      Tensor mult = Tensor::matrix(rows, f, 1.0);
      Tensor add = Tensor::matrix(rows, f, 0.0);
      const std::size_t per_row = hook.targets.size();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t pos = r0 + r;
        if (!hook_hits_row(hook.policy, pos, seq_len)) continue;
        const std::size_t ordinal =
            hook.policy == PositionPolicy::all_positions ? pos : 0;
        for (std::size_t t = 0; t < per_row; ++t) {
          const NeuronId& n = hook.targets[t];
          if (n.layer != l) continue;
          touched = true;
          if (hook.mode == HookMode::scale) {
            mult(r, n.index) *= hook.factor;
          } else {
            mult(r, n.index) = 0.0;
            const std::size_t vi =
                hook.values.size() == per_row ? t : ordinal * per_row + t;
            require(vi < hook.values.size(), ErrorCode::invalid_argument,
                    "hook: not enough override values for position " + std::to_string(pos));
            add(r, n.index) = hook.values[vi];
          }
        }
      }
      if (!touched) continue;
      h = tape_.mul(h, tape_.constant(std::move(mult)));
      if (hook.mode == HookMode::override) h = tape_.add(h, tape_.constant(std::move(add)));
    }
    return h;
  }

  NodeId ref(const Tensor& t) {
    if (bound_) {
      auto it = bound_->find(&t);
      if (it != bound_->end()) return it->second;
    }
    return tape_.reference(t);
  }

 private:
  const Parameters& p_;
  Tape& tape_;
  const Binding* bound_;
};

struct FullForward {
  NodeId logits;          // [T x V]
  ActivationTrace trace;
};

inline void check_tokens(const Parameters& p, std::span<const TokenId> tokens) {
  require(!tokens.empty(), ErrorCode::invalid_argument, "forward: empty token sequence");
  require(tokens.size() <= p.config.max_seq_len, ErrorCode::invalid_argument,
          "forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
              std::to_string(p.config.max_seq_len));
  for (TokenId t : tokens)
    require(t < p.config.vocab_size, ErrorCode::invalid_argument,
            "forward: token id " + std::to_string(t) + " outside vocab");
}

inline FullForward run_forward(const Parameters& p, std::span<const TokenId> tokens,
                               std::span<const HookSpec> hooks, Tape& tape, ForwardCache* cache,
                               const Graph::Binding* bound = nullptr) {
  check_tokens(p, tokens);
  for (const auto& h : hooks) h.validate(p.config);
  Graph g(p, tape, bound);
  const std::size_t T = tokens.size();
  if (cache) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->layers.assign(p.config.n_layers, {});
  }
  FullForward out;
  out.trace.layers.reserve(p.config.n_layers);
  NodeId x = g.embed(tokens);
  for (std::size_t l = 0; l < p.config.n_layers; ++l) {
    LayerCache local;
    LayerCache* rec = cache ? &cache->layers[l] : &local;
    x = g.attention(l, x, 0, nullptr, cache ? rec : nullptr);
    NodeId up{};
    const NodeId h = g.ffn_activation(l, x, 0, T, hooks, rec, &up);
    out.trace.layers.push_back(tape.value(h));
    x = g.ffn_output(l, x, h, up);
  }
  out.logits = g.logits(x);
  return out;
}

// Resume a cached forward at layer `l`'s FFN for rows [r0, T), using `h` as the
// hook-site activation of those rows. Returns logits for rows [r0, T).
inline NodeId resume_from_ffn(const Parameters& p, const ForwardCache& cache, std::size_t l,
                              std::size_t r0, NodeId h, Tape& tape,
                              std::span<const HookSpec> hooks = {}) {
  Graph g(p, tape);
  const std::size_t T = cache.tokens.size();
  const auto& lc = cache.layers[l];
  const NodeId x_mid = tape.constant(lc.x_mid.slice_rows(r0, T));
  NodeId up{};
  if (p.config.ffn_kind == FfnKind::gated) up = tape.constant(lc.up.slice_rows(r0, T));
  NodeId x = g.ffn_output(l, x_mid, h, up);
  for (std::size_t k = l + 1; k < p.config.n_layers; ++k) {
    x = g.attention(k, x, r0, &cache, nullptr);
    NodeId upk{};
    const NodeId hk = g.ffn_activation(k, x, r0, T, hooks, nullptr, &upk);
    x = g.ffn_output(k, x, hk, upk);
  }
  return g.logits(x);
}

inline std::vector<double> log_softmax_row(const Tensor& logits, std::size_t row) {
  const auto r = logits.row_span(row);
  double mx = r[0];
  for (double v : r) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : r) z += std::exp(v - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) out[i] = r[i] - lz;
  return out;
}

}  // namespace detail

struct ForwardResult {
  Tensor logits;  // next-token logits at the last position, [1 x V]
  ActivationTrace trace;
};

inline ForwardResult forward_with_trace(const Parameters& params, std::span<const TokenId> tokens,
                                        std::span<const HookSpec> hooks = {}) {
  Tape tape;
  auto fwd = detail::run_forward(params, tokens, hooks, tape, nullptr);
  const Tensor& all = tape.value(fwd.logits);
  return ForwardResult{all.slice_rows(all.rows() - 1, all.rows()), std::move(fwd.trace)};
}

inline ForwardResult forward_with_trace(const Parameters& params, std::span<const TokenId> tokens,
                                        const HookSpec& hook) {
  return forward_with_trace(params, tokens, std::span<const HookSpec>(&hook, 1));
}

// Logits at every position, [T x V].
inline Tensor forward_all_logits(const Parameters& params, std::span<const TokenId> tokens,
                                 std::span<const HookSpec> hooks = {}) {
  Tape tape;
  auto fwd = detail::run_forward(params, tokens, hooks, tape, nullptr);
  return tape.value(fwd.logits);
}

inline double answer_prob(const Parameters& params, std::span<const TokenId> prompt, TokenId answer,
                          std::span<const HookSpec> hooks = {}) {
  require(answer < params.config.vocab_size, ErrorCode::not_found,
          "answer token " + std::to_string(answer) + " outside vocab");
  const auto res = forward_with_trace(params, prompt, hooks);
  return std::exp(detail::log_softmax_row(res.logits, 0)[answer]);
}

// Mean teacher-forced token log-likelihood of each choice after `context`,
// exponentiated and normalized across choices.
inline std::vector<double> score_choices(const Parameters& params, std::span<const TokenId> context,
                                         const std::vector<std::vector<TokenId>>& choices,
                                         std::span<const HookSpec> hooks = {}) {
  require(choices.size() >= 2, ErrorCode::invalid_argument, "score_choices: need at least 2 choices");
  require(!context.empty(), ErrorCode::invalid_argument, "score_choices: empty context");
  std::vector<double> mean_ll(choices.size());
  for (std::size_t c = 0; c < choices.size(); ++c) {
    const auto& choice = choices[c];
    require(!choice.empty(), ErrorCode::invalid_argument, "score_choices: empty choice");
    std::vector<TokenId> seq(context.begin(), context.end());
    seq.insert(seq.end(), choice.begin(), choice.end());
    const Tensor logits = forward_all_logits(params, seq, hooks);
    double ll = 0.0;
    for (std::size_t j = 0; j < choice.size(); ++j) {
      const std::size_t pos = context.size() + j - 1;
      ll += detail::log_softmax_row(logits, pos)[choice[j]];
    }
    mean_ll[c] = ll / static_cast<double>(choice.size());
  }
  const double mx = *std::max_element(mean_ll.begin(), mean_ll.end());
  double z = 0.0;
  std::vector<double> probs(choices.size());
  for (std::size_t c = 0; c < choices.size(); ++c) z += probs[c] = std::exp(mean_ll[c] - mx);
  for (double& v : probs) v /= z;
  return probs;
}

}  // namespace knowbias
