#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "knowbias/attribkit.hpp"
#include "knowbias/biasmetrics.hpp"
#include "knowbias/hash.hpp"
#include "knowbias/model.hpp"
#include "knowbias/parallel.hpp"
#include "knowbias/vocab.hpp"

namespace knowbias {

struct Benchmarks {
  std::vector<BBQItem> bbq;
  std::vector<CrowsPair> crows;
  std::vector<StereoItem> stereo;
  std::vector<MCItem> mc;

  // Hash over the canonical JSONL of every item; reports from different
  // fixtures cannot be compared.
  std::string fixture_hash() const {
    std::string all;
    for (const auto& x : bbq) all += to_json(x).dump() + "\n";
    all += "--\n";
    for (const auto& x : crows) all += to_json(x).dump() + "\n";
    all += "--\n";
    for (const auto& x : stereo) all += to_json(x).dump() + "\n";
    all += "--\n";
    for (const auto& x : mc) all += to_json(x).dump() + "\n";
    return sha256_hex(all);
  }

  bool empty() const { return bbq.empty() && crows.empty() && stereo.empty() && mc.empty(); }
};

inline constexpr const char* kBbqFile = "bbq.jsonl";
inline constexpr const char* kCrowsFile = "crows.jsonl";
inline constexpr const char* kStereoFile = "stereoset.jsonl";
inline constexpr const char* kMcFile = "mc.jsonl";

// Loads whichever of the four fixture files exist in `dir`.
inline Benchmarks load_benchmarks(const std::string& dir) {
  namespace fs = std::filesystem;
  require(fs::is_directory(dir), ErrorCode::io, "benchmark directory not found: " + dir);
  Benchmarks b;
  auto path = [&](const char* f) { return (fs::path(dir) / f).string(); };
  if (fs::exists(path(kBbqFile))) b.bbq = load_jsonl<BBQItem>(path(kBbqFile), bbq_from_json);
  if (fs::exists(path(kCrowsFile))) b.crows = load_jsonl<CrowsPair>(path(kCrowsFile), crows_from_json);
  if (fs::exists(path(kStereoFile))) b.stereo = load_jsonl<StereoItem>(path(kStereoFile), stereo_from_json);
  if (fs::exists(path(kMcFile))) b.mc = load_jsonl<MCItem>(path(kMcFile), mc_from_json);
  require(!b.empty(), ErrorCode::io, "no benchmark files in " + dir);
  return b;
}

inline void save_benchmarks(const Benchmarks& b, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto dump = [&](const auto& items, const char* f) {
    std::string text;
    for (const auto& x : items) text += to_json(x).dump() + "\n";
    write_text_file((fs::path(dir) / f).string(), text);
  };
  dump(b.bbq, kBbqFile);
  dump(b.crows, kCrowsFile);
  dump(b.stereo, kStereoFile);
  dump(b.mc, kMcFile);
}

namespace detail {

inline std::vector<std::vector<TokenId>> encode_choices(const Vocab& v, const std::vector<std::string>& choices) {
  std::vector<std::vector<TokenId>> out;
  for (const auto& c : choices) out.push_back(v.tokenize(c));
  return out;
}

inline int argmax_first(const std::vector<double>& p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace detail

// Per-item model outputs, kept for reports and tests.
struct EvalDetails {
  std::vector<int> bbq_chosen;
  std::vector<std::pair<double, double>> crows;  // (stereo, anti) normalized probabilities
  std::vector<ContinuationProbs> stereo;
  std::vector<int> mc_chosen;
};

struct EvalOutcome {
  MetricReport report;
  EvalDetails details;
};

inline EvalOutcome evaluate_benchmarks(const Parameters& params, const Vocab& vocab, const Benchmarks& bench,
                                       std::span<const HookSpec> hooks, std::size_t workers = 1) {
  EvalOutcome out;
  EvalDetails& d = out.details;
  const std::vector<HookSpec> hook_list(hooks.begin(), hooks.end());

  d.bbq_chosen.assign(bench.bbq.size(), -1);
  parallel_for(bench.bbq.size(), workers, [&](std::size_t k) {
    const auto& it = bench.bbq[k];
    const auto ctx = encode_prompt(vocab, it.context + " " + it.question);
    d.bbq_chosen[k] = detail::argmax_first(score_choices(params, ctx, detail::encode_choices(vocab, it.choices), hook_list));
  });

  d.crows.assign(bench.crows.size(), {});
  parallel_for(bench.crows.size(), workers, [&](std::size_t k) {
    const auto& it = bench.crows[k];
    const auto ctx = encode_prompt(vocab, "");
    require(!ctx.empty(), ErrorCode::not_found, "crows scoring needs the <bos> token in the vocab");
    const auto p = score_choices(params, ctx, detail::encode_choices(vocab, {it.stereo, it.anti}), hook_list);
    d.crows[k] = {p[0], p[1]};
  });

  d.stereo.assign(bench.stereo.size(), {});
  parallel_for(bench.stereo.size(), workers, [&](std::size_t k) {
    const auto& it = bench.stereo[k];
    const auto ctx = encode_prompt(vocab, it.context);
    const auto p = score_choices(params, ctx,
                                 detail::encode_choices(vocab, {it.stereotype, it.anti_stereotype, it.unrelated}),
                                 hook_list);
    d.stereo[k] = {p[0], p[1], p[2]};
  });

  d.mc_chosen.assign(bench.mc.size(), -1);
  parallel_for(bench.mc.size(), workers, [&](std::size_t k) {
    const auto& it = bench.mc[k];
    d.mc_chosen[k] = detail::argmax_first(
        score_choices(params, encode_prompt(vocab, it.context), detail::encode_choices(vocab, it.choices), hook_list));
  });

  MetricReport& r = out.report;
  r.fixture_hash = bench.fixture_hash();
  for (Dimension dim : kDimensions) {
    const std::string dn = to_string(dim);
    std::vector<BBQItem> items;
    std::vector<int> chosen;
    for (std::size_t k = 0; k < bench.bbq.size(); ++k)
      if (bench.bbq[k].dimension == dim) {
        items.push_back(bench.bbq[k]);
        chosen.push_back(d.bbq_chosen[k]);
      }
    if (!items.empty()) {
      const auto s = bbq_scores(items, chosen);
      r.entries.push_back({"BBQ-a", dn, s.s_amb, ScoreKind::bbq, {{"accuracy", s.accuracy_ambiguous}}});
      r.entries.push_back({"BBQ-d", dn, s.s_dis, ScoreKind::bbq, {{"accuracy", s.accuracy_disambiguated}}});
      if (s.invalid) r.flags.push_back("BBQ " + dn + ": " + std::to_string(s.invalid) + " invalid choices");
    }
    std::vector<std::pair<double, double>> cs;
    for (std::size_t k = 0; k < bench.crows.size(); ++k)
      if (bench.crows[k].dimension == dim) cs.push_back(d.crows[k]);
    if (!cs.empty())
      r.entries.push_back({"CS", dn, crows_score(cs), ScoreKind::crows, {{"n", static_cast<double>(cs.size())}}});
    for (StereoMode mode : {StereoMode::intra, StereoMode::inter}) {
      std::vector<ContinuationProbs> ss;
      for (std::size_t k = 0; k < bench.stereo.size(); ++k)
        if (bench.stereo[k].dimension == dim && bench.stereo[k].mode == mode) ss.push_back(d.stereo[k]);
      if (ss.empty()) continue;
      const auto s = stereoset_scores(ss);
      r.entries.push_back({std::string("SS-") + to_string(mode), dn, s.icat, ScoreKind::icat,
                           {{"ss", s.ss}, {"lms", s.lms}}});
    }
  }
  if (!bench.mc.empty()) {
    std::vector<int> gold;
    for (const auto& it : bench.mc) gold.push_back(it.gold_index);
    r.entries.push_back({"MC", "general", mc_accuracy(d.mc_chosen, gold), ScoreKind::accuracy,
                         {{"n", static_cast<double>(gold.size())}}});
  }
  return out;
}

}  // namespace knowbias
