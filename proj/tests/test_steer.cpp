#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "support.hpp"

using namespace knowbias;
using Catch::Approx;

namespace {

NeuronSet planted_set() {
  NeuronSet s;
  const PlantSpec spec;
  s.members = normalized({spec.target, spec.rejection});
  s.provenance = "planted";
  return s;
}

MetricReport two_rows(double bbq, double cs) {
  MetricReport r;
  r.fixture_hash = "f";
  r.entries = {{"BBQ-a", "race", bbq, ScoreKind::bbq, {}}, {"CS", "race", cs, ScoreKind::crows, {}}};
  return r;
}

}  // namespace

TEST_CASE("make_intervention") {
  const auto& p = kbtest::planted();
  const auto set = planted_set();
  CHECK_THROWS_AS(make_intervention(set, 0.0, "", p.config), Error);
  CHECK_THROWS_AS(make_intervention(set, -1.0, "", p.config), Error);
  CHECK_THROWS_AS(make_intervention(set, std::nan(""), "", p.config), Error);
  CHECK_THROWS_AS(make_intervention(set, std::numeric_limits<double>::infinity(), "", p.config), Error);
  CHECK(make_intervention(set, 3.5, "", p.config).lambda == 3.5);

  auto stamped = set;
  stamped.model_checksum = "aaaa";
  try {
    make_intervention(stamped, 2.0, "bbbb", p.config);
    FAIL("expected a checksum mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config_mismatch);
  }
  CHECK_NOTHROW(make_intervention(stamped, 2.0, "aaaa", p.config));

  auto outside = set;
  outside.members.push_back({5, 0});
  CHECK_THROWS_AS(make_intervention(outside, 2.0, "", p.config), Error);

  NeuronSet empty;
  CHECK(make_intervention(empty, 2.0, "", p.config).hooks().empty());
  CHECK(make_intervention(set, 2.0, "", p.config).hooks().size() == 1);
}

TEST_CASE("compare_runs") {
  const auto same = compare_runs(two_rows(0.1, 0.6), two_rows(0.1, 0.6));
  for (const auto& r : same.rows) {
    CHECK(r.delta == 0.0);
    CHECK(!r.toward_neutral);
  }
  CHECK(same.toward_neutral_gain() == 0.0);

  const auto d = compare_runs(two_rows(-0.0430, 0.7778), two_rows(-0.0257, 0.6316));
  REQUIRE(d.rows.size() == 2);
  CHECK(d.rows[0].toward_neutral);
  CHECK(d.rows[0].delta == Approx(0.0173));
  CHECK(d.rows[0].distance_change == Approx(0.0173));
  CHECK(d.rows[1].toward_neutral);
  CHECK(d.rows[1].delta == Approx(-0.1462));
  CHECK(d.toward_neutral_gain() == Approx((0.0173 + 0.1462) / 2));

  // crossing the neutral point: |0.45 - 0.5| < |0.6 - 0.5|
  CHECK(compare_runs(two_rows(0, 0.6), two_rows(0, 0.45)).rows[1].toward_neutral);
  CHECK(!compare_runs(two_rows(0, 0.6), two_rows(0, 0.35)).rows[1].toward_neutral);

  auto other = two_rows(0, 0.5);
  other.fixture_hash = "g";
  CHECK_THROWS_AS(compare_runs(two_rows(0, 0.5), other), Error);
  auto shorter = two_rows(0, 0.5);
  shorter.entries.pop_back();
  CHECK_THROWS_AS(compare_runs(two_rows(0, 0.5), shorter), Error);

  const auto text = to_text(d);
  CHECK(text.find("BBQ-a") != std::string::npos);
  CHECK(to_json(d)["rows"].size() == 2);
}

TEST_CASE("identity interventions are bit-identical") {
  const auto& p = kbtest::planted();
  const auto& v = kbtest::toy_vocab();
  const auto bench = fixtures::all();
  const auto base = evaluate_benchmarks(p, v, bench, {});

  const auto unit = make_intervention(planted_set(), 1.0, "", p.config).hooks();
  const auto nothing = make_intervention(NeuronSet{}, 2.0, "", p.config).hooks();
  for (const auto& hooks : {unit, nothing}) {
    const auto run = evaluate_benchmarks(p, v, bench, hooks);
    CHECK(to_json(run.report).dump() == to_json(base.report).dump());
    CHECK(run.details.bbq_chosen == base.details.bbq_chosen);
    CHECK(run.details.mc_chosen == base.details.mc_chosen);
  }
  for (const auto& q : instantiate_questions(first_concepts(2))) {
    const auto probe = make_probe(v, q);
    CHECK(forward_all_logits(p, probe.tokens, unit) == forward_all_logits(p, probe.tokens));
  }
}

TEST_CASE("steering changes outputs and scales compose") {
  const auto& p = kbtest::planted();
  const auto& v = kbtest::toy_vocab();
  const auto set = planted_set();
  const auto probe = make_probe(v, make_question(default_concepts()[2], Dimension::gender, QuestionType::bias_recognition));

  const auto twice = make_intervention(set, 2.0, "", p.config).hooks();
  CHECK(answer_prob(p, probe.tokens, probe.answer, twice) > answer_prob(p, probe.tokens, probe.answer));

  const std::vector<HookSpec> chained = {HookSpec::scale(set.members, 1.5, PositionPolicy::all_positions),
                                         HookSpec::scale(set.members, 2.0, PositionPolicy::all_positions)};
  const auto once = make_intervention(set, 3.0, "", p.config).hooks();
  const auto a = forward_all_logits(p, probe.tokens, chained);
  const auto b = forward_all_logits(p, probe.tokens, once);
  for (std::size_t k = 0; k < a.storage().size(); ++k) CHECK(a.storage()[k] == Approx(b.storage()[k]).margin(1e-12));
}
