#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "knowbias/knowbias.hpp"

namespace kbtest {

namespace fs = std::filesystem;

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("knowbias-" + tag + "-" + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

inline const knowbias::Vocab& toy_vocab() {
  static const knowbias::Vocab v = knowbias::lexicon::build_vocab();
  return v;
}

inline const knowbias::Parameters& planted(knowbias::FfnKind kind = knowbias::FfnKind::classic) {
  static const knowbias::Parameters classic =
      knowbias::build_planted_model(knowbias::PlantSpec{}, toy_vocab(), 0, knowbias::FfnKind::classic);
  static const knowbias::Parameters gated =
      knowbias::build_planted_model(knowbias::PlantSpec{}, toy_vocab(), 0, knowbias::FfnKind::gated);
  return kind == knowbias::FfnKind::classic ? classic : gated;
}

inline knowbias::Tensor random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  auto t = knowbias::Tensor::matrix(r, c);
  for (double& v : t.storage()) v = n(rng);
  return t;
}

// One layer whose only live FFN neuron (0, neuron) has a constant activation
// (gelu(1), or silu(1) when gated) and writes `slope` into residual dim 0. Dim 1 holds a constant 1, so
// after the final norm the answer logit moves by ~slope * h, and with two
// tokens P(answer) = sigmoid of that: affine in h up to O((slope h)^3).
inline knowbias::Parameters affine_model(std::size_t neuron, double slope, knowbias::FfnKind kind) {
  using namespace knowbias;
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 2;
  c.d_ffn = 4;
  c.n_heads = 1;
  c.vocab_size = 2;
  c.max_seq_len = 8;
  c.ffn_kind = kind;
  Parameters p = Parameters::zeros(c);
  for (std::size_t t = 0; t < 2; ++t) p.tok_emb(t, 1) = 1.0;
  for (auto* g : {&p.layers[0].attn_norm, &p.layers[0].ffn_norm, &p.final_norm})
    for (double& v : g->storage()) v = 1.0;
  auto& L = p.layers[0];
  if (kind == FfnKind::classic) {
    L.b1[neuron] = 1.0;
    L.w2(neuron, 0) = slope;
  } else {
    // silu(gate) * up with gate and up both driven by the constant dim.
    L.w_gate(1, neuron) = 1.0 / std::sqrt(2.0);
    L.w_up(1, neuron) = 1.0 / std::sqrt(2.0);
    L.w_down(neuron, 0) = slope;
  }
  p.unembed(0, 0) = 1.0;
  return p;
}

// Naive selection: per question, compare each score against tau% of that
// question's max; keep neurons salient in at least ceil(beta% of questions).
// Integer beta keeps the threshold exact: count >= beta*n/100 <=> 100*count >= beta*n.
inline std::vector<knowbias::NeuronId> brute_select(const std::vector<knowbias::AttributionMap>& maps, double tau,
                                                    int beta) {
  const std::size_t L = maps[0].scores.rows(), F = maps[0].scores.cols(), n = maps.size();
  std::vector<knowbias::NeuronId> out;
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i < F; ++i) {
      std::size_t count = 0;
      for (std::size_t q = 0; q < n; ++q) {
        double mx = maps[q].scores(0, 0);
        for (std::size_t a = 0; a < L; ++a)
          for (std::size_t b = 0; b < F; ++b) mx = std::max(mx, maps[q].scores(a, b));
        if (mx > 0.0 && maps[q].scores(l, i) >= tau / 100.0 * mx) ++count;
      }
      if (count >= 1 && 100 * count >= static_cast<std::size_t>(beta) * n) out.push_back({l, i});
    }
  return out;
}

// Score matrices mixing continuous values, repeated values (ties) and
// occasional all-zero or all-negative questions.
inline std::vector<knowbias::AttributionMap> random_maps(std::mt19937_64& rng, std::size_t questions,
                                                         std::size_t layers, std::size_t width) {
  std::uniform_int_distribution<int> kind(0, 9), level(-2, 6);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<knowbias::AttributionMap> maps;
  for (std::size_t q = 0; q < questions; ++q) {
    knowbias::AttributionMap m{"q" + std::to_string(q), knowbias::Tensor::matrix(layers, width), {}};
    const int k = kind(rng);
    for (double& v : m.scores.storage()) {
      if (k == 0) v = 0.0;
      else if (k == 1) v = -std::abs(g(rng));
      else if (k < 5) v = 0.25 * level(rng);
      else v = g(rng);
    }
    maps.push_back(std::move(m));
  }
  return maps;
}

inline knowbias::BBQItem bbq_item(knowbias::ContextKind kind, int gold = 0) {
  knowbias::BBQItem it;
  it.id = "b";
  it.choices = {"unknown", "aligned", "other"};
  it.unknown_index = 0;
  it.bias_aligned_index = 1;
  it.context_kind = kind;
  it.gold_index = kind == knowbias::ContextKind::ambiguous ? 0 : gold;
  return it;
}

// Hand-computed metric examples; returns a description of every mismatch.
inline std::vector<std::string> metric_example_failures() {
  using namespace knowbias;
  std::vector<std::string> bad;
  auto expect = [&](const char* what, double got, double want) {
    if (got != want) bad.push_back(std::string(what) + ": got " + std::to_string(got) + ", want " + std::to_string(want));
  };
  const auto amb = bbq_item(ContextKind::ambiguous);
  const auto dis = bbq_item(ContextKind::disambiguated, 2);
  {
    const auto s = bbq_scores({amb, amb, dis, dis}, {0, 0, 1, 2});
    expect("bbq all-unknown ambiguous s_amb", s.s_amb, 0.0);
  }
  {
    const auto s = bbq_scores({amb, dis, dis, dis}, {1, 1, 1, 0});
    expect("bbq all-aligned s_dis", s.s_dis, 1.0);
  }
  {
    const auto s = bbq_scores({amb, dis, dis, dis, dis}, {0, 1, 2, 2, 0});
    expect("bbq aligned/anti/anti/unknown s_dis", s.s_dis, 2.0 * (1.0 / 3.0) - 1.0);
  }
  {
    const auto s = bbq_scores({amb, dis}, {0, 0});
    expect("bbq all-unknown disambiguated s_dis", s.s_dis, 0.0);
  }
  expect("crows all ties", crows_score({{0.5, 0.5}, {0.3, 0.3}}), 0.5);
  expect("crows 3 of 4", crows_score({{0.6, 0.4}, {0.7, 0.3}, {0.9, 0.1}, {0.2, 0.8}}), 0.75);
  expect("icat ideal", icat_score(0.5, 1.0), 1.0);
  expect("icat max bias", icat_score(1.0, 1.0), 0.0);
  expect("icat 0.6/0.9", icat_score(0.6, 0.9), 0.9 * 0.4 / 0.5);
  {
    // ss = 3/5 preferring the stereotype, lms = 9/10 meaningful-over-unrelated
    const std::vector<ContinuationProbs> items = {
        {0.5, 0.3, 0.2}, {0.5, 0.3, 0.2}, {0.5, 0.3, 0.2}, {0.3, 0.5, 0.2}, {0.1, 0.6, 0.3}};
    const auto s = stereoset_scores(items);
    expect("stereoset ss", s.ss, 0.6);
    expect("stereoset lms", s.lms, 0.9);
    expect("stereoset icat", s.icat, icat_score(0.6, 0.9));
  }
  expect("mc all", mc_accuracy({1, 2, 0}, {1, 2, 0}), 1.0);
  expect("mc none", mc_accuracy({0, 0}, {1, 1}), 0.0);
  expect("mc 7/10", mc_accuracy({1, 1, 1, 1, 1, 1, 1, 0, 0, 0}, {1, 1, 1, 1, 1, 1, 1, 1, 1, 1}), 0.7);
  {
    RankTable t{{"better", "worse"},
                {{"BBQ-a", "race", ScoreKind::bbq}, {"CS", "race", ScoreKind::crows}, {"SS", "gender", ScoreKind::icat}},
                {{0.01, 0.55, 0.9}, {-0.2, 0.3, 0.7}}};
    const auto r = average_rank(t);
    expect("rank better", r.overall[0], 1.0);
    expect("rank worse", r.overall[1], 2.0);
  }
  {
    RankTable t{{"a", "b"}, {{"CS", "race", ScoreKind::crows}}, {{0.6}, {0.4}}};
    const auto r = average_rank(t);
    expect("rank tie a", r.cell_ranks[0][0], 1.5);
    expect("rank tie b", r.cell_ranks[1][0], 1.5);
  }
  return bad;
}

// Randomized range and symmetry invariants; returns the first violation.
inline std::string metric_fuzz(int trials, std::uint64_t seed) {
  using namespace knowbias;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> small(1, 12), pick(-1, 3), coin(0, 1), methods(2, 8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto prob = [&] { return coin(rng) ? std::round(u(rng) * 4) / 4 : u(rng); };  // ties are common
  auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
  for (int t = 0; t < trials; ++t) {
    const std::string at = " (trial " + std::to_string(t) + ")";
    std::vector<BBQItem> items;
    std::vector<int> chosen;
    const int na = small(rng), nd = small(rng);
    for (int k = 0; k < na; ++k) items.push_back(bbq_item(ContextKind::ambiguous));
    for (int k = 0; k < nd; ++k) items.push_back(bbq_item(ContextKind::disambiguated, 1 + coin(rng)));
    for (std::size_t k = 0; k < items.size(); ++k) chosen.push_back(pick(rng));
    const auto b = bbq_scores(items, chosen);
    if (!in(b.s_amb, -1, 1) || !in(b.s_dis, -1, 1)) return "bbq out of range" + at;
    if (b.accuracy_ambiguous == 1.0 && b.s_amb != 0.0) return "bbq s_amb nonzero at full accuracy" + at;

    std::vector<std::pair<double, double>> pairs, swapped;
    for (int k = small(rng); k > 0; --k) {
      pairs.emplace_back(prob(), prob());
      swapped.emplace_back(pairs.back().second, pairs.back().first);
    }
    const double cs = crows_score(pairs);
    if (!in(cs, 0, 1)) return "crows out of range" + at;
    if (std::abs(crows_score(swapped) - (1.0 - cs)) > 1e-12) return "crows relabeling" + at;

    std::vector<ContinuationProbs> ss;
    for (int k = small(rng); k > 0; --k) ss.push_back({prob(), prob(), prob()});
    const auto s = stereoset_scores(ss);
    if (!in(s.ss, 0, 1) || !in(s.lms, 0, 1) || !in(s.icat, 0, 1)) return "stereoset out of range" + at;
    if (s.icat > s.lms + 1e-15) return "icat above lms" + at;
    if (s.lms > 0 && (s.icat == s.lms) != (s.ss == 0.5)) return "icat == lms iff ss == 0.5" + at;

    std::vector<int> c, g;
    for (int k = small(rng); k > 0; --k) {
      c.push_back(pick(rng));
      g.push_back(coin(rng));
    }
    if (!in(mc_accuracy(c, g), 0, 1)) return "mc out of range" + at;

    RankTable rt;
    const int M = methods(rng), C = small(rng);
    for (int m = 0; m < M; ++m) rt.methods.push_back("m" + std::to_string(m));
    for (int k = 0; k < C; ++k)
      rt.cells.push_back({"d", k % 2 ? "race" : "gender", static_cast<ScoreKind>(k % 3)});
    rt.scores.assign(M, {});
    for (int m = 0; m < M; ++m)
      for (int k = 0; k < C; ++k) rt.scores[m].push_back(prob() * (k % 3 == 0 && coin(rng) ? -1 : 1));
    const auto r = average_rank(rt);
    for (int k = 0; k < C; ++k) {
      double sum = 0.0;
      for (int m = 0; m < M; ++m) {
        if (!in(r.cell_ranks[m][k], 1, M)) return "rank out of range" + at;
        sum += r.cell_ranks[m][k];
      }
      if (std::abs(sum - M * (M + 1) / 2.0) > 1e-9) return "rank sum" + at;
    }
  }
  return {};
}

inline std::string read_text(const std::string& path) {
  const auto b = knowbias::read_file_bytes(path);
  return std::string(b.begin(), b.end());
}

}  // namespace kbtest
