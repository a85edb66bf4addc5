#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "knowbias/autograd.hpp"
#include "knowbias/model.hpp"
#include "knowbias/vocab.hpp"

// Full-batch gradient descent on next-token prediction. Small enough to run
// the toy configuration end to end; not meant for anything larger.
namespace knowbias {

struct TrainConfig {
  std::size_t steps = 200;
  double learning_rate = 0.05;
  std::size_t window = 32;  // training sequence length, <= max_seq_len
  std::uint64_t seed = 0;
  double init_stddev = 0.02;

  void validate(const ModelConfig& mc) const {
    require(steps >= 1, ErrorCode::invalid_argument, "train: steps must be >= 1");
    require(std::isfinite(learning_rate) && learning_rate >= 0.0, ErrorCode::invalid_argument,
            "train: learning rate must be finite and >= 0");
    require(window >= 2 && window <= mc.max_seq_len, ErrorCode::invalid_argument,
            "train: window must be in [2, max_seq_len]");
  }
};

struct TrainResult {
  Parameters params;          // last parameters with a finite loss
  std::vector<double> losses;  // loss before each step, then after the last one
  bool diverged = false;
  std::string message;
};

// Splits a token stream into consecutive windows; a trailing piece shorter
// than two tokens carries no next-token target and is dropped.
inline std::vector<std::vector<TokenId>> make_windows(const std::vector<TokenId>& corpus, std::size_t window) {
  std::vector<std::vector<TokenId>> out;
  for (std::size_t i = 0; i < corpus.size(); i += window) {
    const std::size_t end = std::min(corpus.size(), i + window);
    if (end - i >= 2) out.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(i),
                                       corpus.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

namespace detail {

// Mean next-token negative log-likelihood over all windows, recorded on `tape`
// with the parameters bound to input leaves.
inline NodeId corpus_loss(const Parameters& p, const std::vector<std::vector<TokenId>>& windows, Tape& tape,
                          const Graph::Binding& bound) {
  std::vector<NodeId> parts;
  std::size_t targets = 0;
  for (const auto& w : windows) {
    const FullForward fwd = run_forward(p, w, {}, tape, nullptr, &bound);
    const NodeId probs = tape.softmax_row(fwd.logits);
    const std::size_t V = p.config.vocab_size;
    std::vector<std::size_t> flat;
    for (std::size_t t = 0; t + 1 < w.size(); ++t) flat.push_back(t * V + w[t + 1]);
    targets += flat.size();
    parts.push_back(tape.sum(tape.log(tape.select_index(probs, std::move(flat)))));
  }
  NodeId total = parts[0];
  for (std::size_t k = 1; k < parts.size(); ++k) total = tape.add(total, parts[k]);
  return tape.scale(total, -1.0 / static_cast<double>(targets));
}

}  // namespace detail

inline double corpus_loss(const Parameters& p, const std::vector<TokenId>& corpus, std::size_t window) {
  const auto windows = make_windows(corpus, window);
  require(!windows.empty(), ErrorCode::invalid_argument, "loss: corpus shorter than two tokens");
  Tape tape;
  return tape.value(detail::corpus_loss(p, windows, tape, {}))[0];
}

inline TrainResult train_toy(const std::vector<TokenId>& corpus, const ModelConfig& mc, const TrainConfig& tc) {
  mc.validate();
  tc.validate(mc);
  const auto windows = make_windows(corpus, tc.window);
  require(!windows.empty(), ErrorCode::invalid_argument, "train: corpus shorter than two tokens");
  for (TokenId t : corpus)
    require(t < mc.vocab_size, ErrorCode::invalid_argument, "train: corpus token outside vocab");

  TrainResult res{init_random(mc, tc.seed, tc.init_stddev), {}, false, {}};
  Parameters cur = res.params;
  for (std::size_t step = 0; step <= tc.steps; ++step) {
    Tape tape;
    detail::Graph::Binding bound;
    std::vector<std::pair<Tensor*, NodeId>> leaves;
    cur.for_each_tensor([&](const std::string&, Tensor& t) {
      const NodeId id = tape.input(t);
      bound.emplace(&t, id);
      leaves.emplace_back(&t, id);
    });
    double loss = 0.0;
    try {
      const NodeId out = detail::corpus_loss(cur, windows, tape, bound);
      loss = tape.value(out)[0];
      if (!std::isfinite(loss)) fail(ErrorCode::non_finite, "loss is not finite");
      res.losses.push_back(loss);
      res.params = cur;
      if (step == tc.steps) break;
      const GradientMap g = backward(tape, out);
      for (auto& [t, id] : leaves) {
        const Tensor& dt = g[id];
        for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] -= tc.learning_rate * dt[i];
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::non_finite) throw;
      res.diverged = true;
      res.message = "training diverged at step " + std::to_string(step) + ": " + e.what();
      return res;
    }
  }
  return res;
}

inline std::vector<TokenId> load_corpus(const Vocab& vocab, const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::io, "cannot open corpus " + path);
  std::vector<TokenId> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    try {
      for (TokenId t : vocab.tokenize(line)) out.push_back(t);
    } catch (const Error& e) {
      fail(ErrorCode::parse, path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace knowbias
