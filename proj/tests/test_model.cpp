#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "support.hpp"

using namespace knowbias;
using Catch::Approx;

namespace {

ModelConfig small_config(FfnKind kind) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.d_ffn = 12;
  c.n_heads = 2;
  c.vocab_size = 16;
  c.max_seq_len = 10;
  c.ffn_kind = kind;
  return c;
}

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> t(n);
  for (auto& v : t) v = pick(rng);
  return t;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error raised");
  return ErrorCode::io;
}

std::vector<TokenId> bias_question(const Vocab& v) {
  const auto q = make_question(default_concepts()[0], Dimension::race, QuestionType::bias_recognition);
  return encode_prompt(v, q.text);
}

}  // namespace

TEST_CASE("answer_prob on constructed logits") {
  ModelConfig c = small_config(FfnKind::classic);
  c.vocab_size = 64;
  const Parameters zero = Parameters::zeros(c);
  const std::vector<TokenId> prompt = {1, 2, 3};
  CHECK(answer_prob(zero, prompt, 5) == Approx(0.015625).epsilon(1e-14));

  Parameters fixed = zero;
  for (auto& v : fixed.unembed_bias.storage()) v = -30.0;
  fixed.unembed_bias[7] = 2.0;  // "Yes"
  fixed.unembed_bias[8] = 0.0;  // "No"
  const double yes = answer_prob(fixed, prompt, 7);
  const double others = 62.0 * std::exp(-30.0);
  CHECK(yes == Approx(std::exp(2.0) / (std::exp(2.0) + 1.0 + others)).epsilon(1e-14));
  CHECK(yes == Approx(0.8808).margin(5e-5));
  CHECK(yes + answer_prob(fixed, prompt, 8) <= 1.0);
  CHECK(code_of([&] { answer_prob(fixed, prompt, 64); }) == ErrorCode::not_found);
}

TEST_CASE("hook identities") {
  for (FfnKind kind : {FfnKind::classic, FfnKind::gated}) {
    INFO(to_string(kind));
    const Parameters p = init_random(small_config(kind), 11, 0.3);
    std::mt19937_64 rng(4);
    const auto tokens = random_tokens(rng, 7, 16);
    const auto base = forward_with_trace(p, tokens);

    for (auto policy : {PositionPolicy::last_prompt_token, PositionPolicy::all_positions}) {
      const auto one = forward_with_trace(p, tokens, HookSpec::scale({{0, 3}, {1, 5}}, 1.0, policy));
      CHECK(one.logits == base.logits);
      const auto empty = forward_with_trace(p, tokens, HookSpec::scale({}, 2.0, policy));
      CHECK(empty.logits == base.logits);

      const auto zeroed = forward_with_trace(p, tokens, HookSpec::zero({{1, 4}}, policy));
      const auto scaled0 = forward_with_trace(p, tokens, HookSpec::scale({{1, 4}}, 0.0, policy));
      CHECK(zeroed.logits == scaled0.logits);
    }

    // Layers below the hooked one are untouched; the hooked value shows up in the trace.
    const auto hooked = forward_with_trace(p, tokens, HookSpec::override_with({{1, 2}}, {3.5}, PositionPolicy::all_positions));
    CHECK(hooked.trace.layers[0] == base.trace.layers[0]);
    for (std::size_t t = 0; t < tokens.size(); ++t) CHECK(hooked.trace.at(1, t, 2) == 3.5);
    CHECK(!(hooked.logits == base.logits));

    const auto last = forward_with_trace(p, tokens, HookSpec::scale({{0, 1}}, 2.0, PositionPolicy::last_prompt_token));
    const std::size_t T = tokens.size();
    for (std::size_t t = 0; t + 1 < T; ++t) CHECK(last.trace.at(0, t, 1) == base.trace.at(0, t, 1));
    CHECK(last.trace.at(0, T - 1, 1) == Approx(2.0 * base.trace.at(0, T - 1, 1)));
  }
}

TEST_CASE("trace replay reproduces logits") {
  for (FfnKind kind : {FfnKind::classic, FfnKind::gated}) {
    const Parameters p = init_random(small_config(kind), 21, 0.3);
    std::mt19937_64 rng(8);
    const auto tokens = random_tokens(rng, 6, 16);
    const auto base = forward_with_trace(p, tokens);
    REQUIRE(base.trace.layers.size() == 2);
    REQUIRE(base.trace.seq_len() == tokens.size());
    std::vector<HookSpec> hooks;
    for (std::size_t l = 0; l < 2; ++l) {
      std::vector<NeuronId> targets;
      for (std::size_t i = 0; i < 12; ++i) targets.push_back({l, i});
      hooks.push_back(HookSpec::override_with(targets, base.trace.layers[l].storage(), PositionPolicy::all_positions));
    }
    const auto again = forward_with_trace(p, tokens, std::span<const HookSpec>(hooks));
    CHECK(again.logits == base.logits);
  }
}

TEST_CASE("causal masking") {
  for (FfnKind kind : {FfnKind::classic, FfnKind::gated}) {
    const Parameters p = init_random(small_config(kind), 31, 0.4);
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 10; ++trial) {
      auto a = random_tokens(rng, 8, 16);
      auto b = a;
      for (std::size_t t = 5; t < 8; ++t) b[t] = static_cast<TokenId>((b[t] + 1 + trial) % 16);
      const Tensor la = forward_all_logits(p, a), lb = forward_all_logits(p, b);
      for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t v = 0; v < 16; ++v) CHECK(la(t, v) == lb(t, v));
    }
  }
}

TEST_CASE("forward errors") {
  const Parameters p = init_random(small_config(FfnKind::classic), 1);
  const std::vector<TokenId> ok = {1, 2};
  CHECK(code_of([&] { forward_with_trace(p, std::vector<TokenId>{}); }) == ErrorCode::invalid_argument);
  CHECK(code_of([&] { forward_with_trace(p, std::vector<TokenId>(11, 1)); }) == ErrorCode::invalid_argument);
  CHECK(code_of([&] { forward_with_trace(p, ok, HookSpec::scale({{2, 0}}, 2.0, PositionPolicy::all_positions)); }) ==
        ErrorCode::invalid_argument);
  CHECK(code_of([&] { forward_with_trace(p, ok, HookSpec::scale({{0, 12}}, 2.0, PositionPolicy::all_positions)); }) ==
        ErrorCode::invalid_argument);
  CHECK(code_of([&] { forward_with_trace(p, ok, HookSpec::scale({{0, 1}}, -1.0, PositionPolicy::all_positions)); }) ==
        ErrorCode::invalid_argument);
}

TEST_CASE("score_choices") {
  const Parameters p = init_random(small_config(FfnKind::classic), 41, 0.5);
  const std::vector<TokenId> ctx = {1, 4, 2};
  const auto same = score_choices(p, ctx, {{3, 5}, {3, 5}});
  CHECK(same[0] == 0.5);
  CHECK(same[1] == 0.5);

  const std::vector<std::vector<TokenId>> choices = {{3}, {7, 8}, {9, 1, 2}};
  const auto probs = score_choices(p, ctx, choices);
  CHECK(probs[0] + probs[1] + probs[2] == Approx(1.0));
  const auto swapped = score_choices(p, ctx, {choices[2], choices[0], choices[1]});
  CHECK(swapped[0] == Approx(probs[2]).epsilon(1e-12));
  CHECK(swapped[1] == Approx(probs[0]).epsilon(1e-12));
  CHECK(swapped[2] == Approx(probs[1]).epsilon(1e-12));

  // Independent oracle: mean teacher-forced log-likelihood from full logits.
  std::vector<double> ll;
  for (const auto& ch : choices) {
    std::vector<TokenId> seq = ctx;
    seq.insert(seq.end(), ch.begin(), ch.end());
    const Tensor logits = forward_all_logits(p, seq);
    double s = 0.0;
    for (std::size_t j = 0; j < ch.size(); ++j) {
      const auto row = logits.row_span(ctx.size() + j - 1);
      double z = 0.0;
      for (double v : row) z += std::exp(v);
      s += row[ch[j]] - std::log(z);
    }
    ll.push_back(std::exp(s / static_cast<double>(ch.size())));
  }
  const double z = ll[0] + ll[1] + ll[2];
  for (std::size_t k = 0; k < 3; ++k) CHECK(probs[k] == Approx(ll[k] / z).epsilon(1e-10));

  CHECK(code_of([&] { score_choices(p, ctx, {{1}}); }) == ErrorCode::invalid_argument);
  CHECK(code_of([&] { score_choices(p, ctx, {{1}, {}}); }) == ErrorCode::invalid_argument);
}

TEST_CASE("tokenizer") {
  const Vocab& v = kbtest::toy_vocab();
  CHECK(v.tokenize("").empty());
  const auto yes = v.tokenize("Yes");
  REQUIRE(yes.size() == 1);
  CHECK(yes[0] == v.yes());
  CHECK(v.tokenize("No") == std::vector<TokenId>{v.no()});
  CHECK(code_of([&] { v.tokenize("zyzzyva"); }) == ErrorCode::not_found);

  for (const auto& q : instantiate_questions(default_concepts())) CHECK(v.detokenize(v.tokenize(q.text)) == q.text);
  for (const auto& q : composite_questions(default_concepts(), all_qtypes()))
    CHECK(v.detokenize(v.tokenize(q.text)) == q.text);
  // Fixture text is not in normal form ("office ."), so check the ids instead.
  auto stable = [&](const std::string& t) { return v.tokenize(v.detokenize(v.tokenize(t))) == v.tokenize(t); };
  const auto bench = fixtures::all();
  for (const auto& b : bench.bbq) {
    CHECK(stable(b.context));
    CHECK(stable(b.question));
  }
  for (const auto& c : bench.crows) CHECK(stable(c.stereo));
  for (const auto& s : bench.stereo) CHECK(stable(s.context));

  CHECK(code_of([] { Vocab({"a", "b"}); }) == ErrorCode::parse);
  CHECK(code_of([] { Vocab({"Yes", "No", "Yes"}); }) == ErrorCode::parse);
}

TEST_CASE("checkpoint round trip and corruption") {
  kbtest::TempDir dir("ckpt");
  const Parameters& p = kbtest::planted();
  const std::string path = dir / "model.kbc";
  save_checkpoint(p, path);
  const Parameters q = load_checkpoint(path);
  CHECK(q == p);
  CHECK(model_checksum(q) == model_checksum(p));

  std::mt19937_64 rng(77);
  for (int k = 0; k < 100; ++k) {
    const auto tokens = random_tokens(rng, 1 + k % 12, p.config.vocab_size);
    CHECK(forward_with_trace(p, tokens).logits == forward_with_trace(q, tokens).logits);
  }

  auto bytes = read_file_bytes(path);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 100);
  CHECK(code_of([&] { parse_checkpoint(truncated); }) == ErrorCode::checksum);
  auto flipped = bytes;
  flipped[200] ^= 0x40;
  CHECK(code_of([&] { parse_checkpoint(flipped); }) == ErrorCode::checksum);

  // Header claims a different d_ffn than the tensors carry; resealed so only
  // the structural check can catch it.
  auto body = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 32);
  const std::size_t d_ffn_at = 8 + 4 + 2 * 8;
  body[d_ffn_at] = static_cast<std::uint8_t>(body[d_ffn_at] + 1);
  ckpt::seal(body);
  CHECK(code_of([&] { parse_checkpoint(body); }) == ErrorCode::config_mismatch);

  auto versioned = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 32);
  versioned[8] = 9;
  ckpt::seal(versioned);
  CHECK(code_of([&] { parse_checkpoint(versioned); }) == ErrorCode::version);

  CHECK(code_of([&] { load_checkpoint(dir / "missing.kbc"); }) == ErrorCode::io);
}

TEST_CASE("planted model responds to scaling the planted neuron") {
  const Vocab& v = kbtest::toy_vocab();
  for (FfnKind kind : {FfnKind::classic, FfnKind::gated}) {
    INFO(to_string(kind));
    const Parameters& p = kbtest::planted(kind);
    const auto prompt = bias_question(v);
    const NeuronId target = PlantSpec{}.target;
    const double base = answer_prob(p, prompt, v.yes());
    const HookSpec one = HookSpec::scale({target}, 1.0, PositionPolicy::all_positions);
    const HookSpec two = HookSpec::scale({target}, 2.0, PositionPolicy::all_positions);
    CHECK(answer_prob(p, prompt, v.yes(), std::span<const HookSpec>(&one, 1)) == base);
    CHECK(answer_prob(p, prompt, v.yes(), std::span<const HookSpec>(&two, 1)) > base);
  }
  CHECK(build_planted_model(PlantSpec{}, v, 3) == build_planted_model(PlantSpec{}, v, 3));
  CHECK(!(build_planted_model(PlantSpec{}, v, 3) == build_planted_model(PlantSpec{}, v, 4)));
}
