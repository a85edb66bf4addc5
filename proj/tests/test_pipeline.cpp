#include <catch_amalgamated.hpp>

#include <filesystem>

#include "support.hpp"

using namespace knowbias;

namespace {

RunConfig base_config(const kbtest::TempDir& dir) {
  static const std::string model = [&] {
    const auto path = std::filesystem::temp_directory_path() / "knowbias-pipeline-planted.kbm";
    save_checkpoint(kbtest::planted(), path.string());
    return path.string();
  }();
  RunConfig c;
  c.model = model;
  c.out = dir.str();
  return c;
}

}  // namespace

TEST_CASE("identify is deterministic and finds the planted unit") {
  kbtest::TempDir a("ident-a"), b("ident-b");
  const auto ra = cmd_identify(base_config(a));
  const auto rb = cmd_identify(base_config(b));
  CHECK(ra.config_hash == rb.config_hash);
  CHECK(std::filesystem::path(ra.dir).filename() == std::filesystem::path(rb.dir).filename());
  CHECK(kbtest::read_text(ra.dir + "/neurons.json") == kbtest::read_text(rb.dir + "/neurons.json"));
  CHECK(ra.ident.set.contains(PlantSpec{}.target));
  CHECK(ra.ident.dimension_sets.size() == 3);
  CHECK(ra.ident.maps.size() == 45);
  CHECK(std::filesystem::exists(ra.dir + "/attributions.json"));
  CHECK(std::filesystem::exists(ra.dir + "/identify.txt"));

  const auto set = load_neuron_set(ra.dir + "/neurons.json");
  CHECK(set.members == ra.ident.set.members);
  CHECK(!set.model_checksum.empty());

  // A different selection threshold lands in a different directory.
  auto tighter = base_config(a);
  tighter.selection.tau = 60;
  const auto rt = cmd_identify(tighter);
  CHECK(rt.dir != ra.dir);
  CHECK(rt.ident.set.size() <= ra.ident.set.size());
}

TEST_CASE("eval") {
  kbtest::TempDir dir("eval");
  const auto cfg = base_config(dir);
  const auto plain = cmd_eval(cfg);
  CHECK(!plain.run.steered);
  CHECK(std::filesystem::exists(plain.dir + "/base.json"));
  CHECK(!std::filesystem::exists(plain.dir + "/delta.json"));

  const auto in = load_inputs(cfg);
  auto unit = cfg;
  unit.lambda = 1.0;
  NeuronSet set;
  set.members = {PlantSpec{}.target};
  set.model_checksum = in.model_checksum;
  const auto r = cmd_eval(unit, in, set);
  REQUIRE(r.run.delta);
  for (const auto& row : r.run.delta->rows) CHECK(row.delta == 0.0);
  CHECK(to_json(r.run.base).dump() == to_json(plain.run.base).dump());

  set.model_checksum = "0123456789abcdef";
  try {
    cmd_eval(cfg, in, set);
    FAIL("expected a checksum mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::config_mismatch);
  }
}

TEST_CASE("sweep") {
  kbtest::TempDir dir("sweep");
  SweepSpec tau{SweepAxis::tau, {10, 50}, base_config(dir)};
  const auto t = cmd_sweep(tau);
  REQUIRE(t.points.size() == 2);
  CHECK(t.points[0].ok);
  CHECK(t.points[1].ok);
  CHECK(t.points[1].set_size <= t.points[0].set_size);
  CHECK(std::filesystem::exists(t.dir + "/sweep.csv"));
  CHECK(std::filesystem::exists(t.dir + "/sweep.svg"));

  SweepSpec lam{SweepAxis::lambda, {1, 2}, base_config(dir)};
  const auto l = cmd_sweep(lam);
  REQUIRE(l.points.size() == 2);
  REQUIRE(l.points[0].steered);
  REQUIRE(l.points[0].steered->entries.size() == l.base.entries.size());
  for (std::size_t k = 0; k < l.base.entries.size(); ++k)
    CHECK(l.points[0].steered->entries[k].score == l.base.entries[k].score);
  CHECK(l.points[0].gain == 0.0);

  SweepSpec bad{SweepAxis::lambda, {2, -1}, base_config(dir)};
  CHECK_THROWS_AS(cmd_sweep(bad), Error);
  SweepSpec empty{SweepAxis::tau, {}, base_config(dir)};
  CHECK_THROWS_AS(cmd_sweep(empty), Error);
  CHECK_THROWS_AS(sweep_axis_from_string("gamma"), Error);
}

TEST_CASE("config validation") {
  kbtest::TempDir dir("config");
  const auto good = base_config(dir);
  CHECK_NOTHROW(good.validate());
  auto c = good;
  c.model.clear();
  CHECK_THROWS_AS(c.validate(), Error);
  c = good;
  c.model = dir / "missing.kbm";
  CHECK_THROWS_AS(c.validate(), Error);
  c = good;
  c.q = 10;
  CHECK_THROWS_AS(c.validate(), Error);
  c = good;
  c.q = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = good;
  c.lambda = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = good;
  c.m = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = good;
  c.selection.tau = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = good;
  c.bench = dir / "nope";
  CHECK_THROWS_AS(c.validate(), Error);

  c = good;
  c.out.clear();
  CHECK(c.out_root() == (std::getenv(kOutEnv) && *std::getenv(kOutEnv) ? std::getenv(kOutEnv) : kDefaultOut));

  CHECK_THROWS_AS(load_neuron_set(dir / "none.json"), Error);
  write_text_file(dir / "bad.json", "{\"members\": 3}");
  CHECK_THROWS_AS(load_neuron_set(dir / "bad.json"), Error);
}
