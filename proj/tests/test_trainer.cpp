#include <catch_amalgamated.hpp>

#include <fstream>

#include "support.hpp"

using namespace knowbias;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.d_ffn = 16;
  c.n_heads = 2;
  c.vocab_size = kbtest::toy_vocab().size();
  c.max_seq_len = 32;
  return c;
}

std::vector<TokenId> question_corpus(std::size_t at_least) {
  std::vector<TokenId> out;
  for (const auto& q : instantiate_questions(default_concepts())) {
    for (TokenId t : kbtest::toy_vocab().tokenize(q.text)) out.push_back(t);
    if (out.size() >= at_least) break;
  }
  return out;
}

}  // namespace

TEST_CASE("windows") {
  const std::vector<TokenId> c = {1, 2, 3, 4, 5, 6, 7};
  const auto w = make_windows(c, 3);
  REQUIRE(!w.empty());
  for (const auto& x : w) {
    CHECK(x.size() >= 2);
    CHECK(x.size() <= 3);
  }
  CHECK(make_windows({1}, 3).empty());
}

TEST_CASE("training lowers the corpus loss") {
  const auto corpus = question_corpus(2000);
  REQUIRE(corpus.size() >= 2000);
  TrainConfig tc;
  tc.steps = 200;
  tc.learning_rate = 0.5;
  tc.window = 32;
  const auto r = train_toy(corpus, small_config(), tc);
  CHECK(!r.diverged);
  REQUIRE(r.losses.size() == 201);
  CHECK(r.losses.back() < r.losses.front());
  CHECK(corpus_loss(r.params, corpus, tc.window) == Catch::Approx(r.losses.back()).epsilon(1e-9));
}

TEST_CASE("zero learning rate and seeds") {
  const auto corpus = question_corpus(300);
  TrainConfig tc;
  tc.steps = 5;
  tc.learning_rate = 0.0;
  tc.window = 16;
  const auto flat = train_toy(corpus, small_config(), tc);
  for (double l : flat.losses) CHECK(l == flat.losses.front());

  tc.learning_rate = 0.3;
  tc.seed = 4;
  const auto a = train_toy(corpus, small_config(), tc);
  const auto b = train_toy(corpus, small_config(), tc);
  CHECK(a.losses == b.losses);
  tc.seed = 5;
  CHECK(train_toy(corpus, small_config(), tc).losses.front() != a.losses.front());
}

TEST_CASE("trainer errors") {
  TrainConfig tc;
  tc.steps = 1;
  CHECK_THROWS_AS(train_toy({1}, small_config(), tc), Error);
  CHECK_THROWS_AS(train_toy({1, 2, 100000}, small_config(), tc), Error);
  tc.window = 64;
  CHECK_THROWS_AS(train_toy({1, 2, 3}, small_config(), tc), Error);
  tc.window = 8;
  tc.learning_rate = -1;
  CHECK_THROWS_AS(train_toy({1, 2, 3}, small_config(), tc), Error);

  kbtest::TempDir dir("corpus");
  const auto qs = instantiate_questions(first_concepts(1));
  std::ofstream(dir / "c.txt") << qs[0].text << "\n\n" << qs[1].text << "\n";
  CHECK(load_corpus(kbtest::toy_vocab(), dir / "c.txt").size() > 4);
  std::ofstream(dir / "bad.txt") << qs[0].text << "\nzzqx\n";
  try {
    load_corpus(kbtest::toy_vocab(), dir / "bad.txt");
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("bad.txt:2") != std::string::npos);
  }
  CHECK_THROWS_AS(load_corpus(kbtest::toy_vocab(), dir / "none.txt"), Error);
}
