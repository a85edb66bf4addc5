#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "knowbias/attribkit.hpp"
#include "knowbias/checkpoint.hpp"
#include "knowbias/evaluate.hpp"
#include "knowbias/fixtures.hpp"
#include "knowbias/hash.hpp"
#include "knowbias/lexicon.hpp"
#include "knowbias/neuronselect.hpp"
#include "knowbias/parallel.hpp"
#include "knowbias/probekit.hpp"
#include "knowbias/steer.hpp"

namespace knowbias {

inline constexpr const char* kOutEnv = "KNOWBIAS_OUT";
inline constexpr const char* kDefaultOut = "knowbias-out";

struct RunConfig {
  std::string model;      // checkpoint path
  std::string vocab;      // empty: the built-in toy vocabulary
  std::string questions;  // empty: the 25 shipped concepts
  std::string bench;      // fixture directory; empty: built-in fixtures
  std::size_t q = 45;     // whole concepts, 9 questions each
  SelectionParams selection;
  double lambda = 2.0;
  std::size_t m = 20;
  PathMode path_mode = PathMode::joint_layer;
  RiemannRule rule = RiemannRule::left;
  AggregationMode agg = AggregationMode::union_;
  std::string out;  // output root; empty: $KNOWBIAS_OUT, then kDefaultOut
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const {
    require(!model.empty(), ErrorCode::invalid_argument, "config: --model is required");
    for (const auto* p : {&model, &vocab, &questions})
      if (!p->empty()) require(std::filesystem::is_regular_file(*p), ErrorCode::io, "config: file not found: " + *p);
    if (!bench.empty())
      require(std::filesystem::is_directory(bench), ErrorCode::io, "config: benchmark directory not found: " + bench);
    require(q >= 9 && q % 9 == 0, ErrorCode::invalid_argument, "config: q must be a positive multiple of 9");
    selection.validate();
    require(std::isfinite(lambda) && lambda > 0.0, ErrorCode::invalid_argument, "config: lambda must be > 0");
    require(m >= 1, ErrorCode::invalid_argument, "config: m must be >= 1");
    require(workers >= 1, ErrorCode::invalid_argument, "config: workers must be >= 1");
  }

  AttributionConfig attribution() const { return AttributionConfig{m, path_mode, PositionPolicy::last_prompt_token, rule}; }

  std::string out_root() const {
    if (!out.empty()) return out;
    if (const char* env = std::getenv(kOutEnv); env && *env) return env;
    return kDefaultOut;
  }
};

// Settings that change results. Paths, output root and worker count do not.
inline nlohmann::json to_json(const RunConfig& c) {
  return {{"q", c.q},
          {"tau", c.selection.tau},
          {"beta", c.selection.beta},
          {"lambda", c.lambda},
          {"attribution", to_json(c.attribution())},
          {"agg", to_string(c.agg)},
          {"seed", c.seed}};
}

// Everything a command reads, loaded once.
struct RunInputs {
  Parameters params;
  std::string model_checksum;
  Vocab vocab;
  std::vector<QuestionSpec> questions;
  std::string questions_hash;
  Benchmarks bench;
};

// Rethrows with the stage name in front, keeping the error category.
template <class F>
auto staged(const std::string& stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.code(), stage + ": " + e.what());
  }
}

inline RunInputs load_inputs(const RunConfig& cfg) {
  cfg.validate();
  RunInputs in;
  in.params = staged("load model", [&] { return load_checkpoint(cfg.model); });
  in.model_checksum = model_checksum(in.params);
  in.vocab = staged("load vocab", [&] { return cfg.vocab.empty() ? lexicon::build_vocab() : Vocab::load(cfg.vocab); });
  require(in.vocab.size() == in.params.config.vocab_size, ErrorCode::config_mismatch,
          "load vocab: " + std::to_string(in.vocab.size()) + " tokens but the model expects " +
              std::to_string(in.params.config.vocab_size));
  in.questions = staged("load questions", [&] {
    return cfg.questions.empty() ? instantiate_questions(default_concepts()) : load_questions(cfg.questions);
  });
  in.questions_hash = sha256_hex(questions_to_jsonl(in.questions));
  in.bench = staged("load benchmarks", [&] { return cfg.bench.empty() ? fixtures::all() : load_benchmarks(cfg.bench); });
  return in;
}

// Concept names in first-appearance order.
inline std::vector<std::string> concept_order(const std::vector<QuestionSpec>& qs) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& q : qs)
    if (seen.insert(q.concept_name).second) out.push_back(q.concept_name);
  return out;
}

// Questions of the first n concepts, restricted to the given dimensions and types.
inline std::vector<QuestionSpec> take_concepts(const std::vector<QuestionSpec>& qs, std::size_t n,
                                               const std::vector<Dimension>& dims,
                                               const std::vector<QuestionType>& types) {
  const auto order = concept_order(qs);
  require(n >= 1 && n <= order.size(), ErrorCode::invalid_argument,
          "question budget needs " + std::to_string(n) + " concepts, the question file has " +
              std::to_string(order.size()));
  const std::set<std::string> keep(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<QuestionSpec> out;
  for (const auto& q : qs)
    if (keep.contains(q.concept_name) && std::find(dims.begin(), dims.end(), q.dimension) != dims.end() &&
        std::find(types.begin(), types.end(), q.qtype) != types.end())
      out.push_back(q);
  return out;
}

inline const std::vector<Dimension>& all_dimensions() {
  static const std::vector<Dimension> d(std::begin(kDimensions), std::end(kDimensions));
  return d;
}

inline const std::vector<QuestionType>& all_qtypes() {
  static const std::vector<QuestionType> t(std::begin(kQuestionTypes), std::end(kQuestionTypes));
  return t;
}

// Composite questions for the first n concepts of the file. Phrases come from
// the shipped concept list, so the concepts must be known ones.
inline std::vector<QuestionSpec> composite_for(const std::vector<QuestionSpec>& qs, std::size_t n) {
  const auto order = concept_order(qs);
  require(n >= 1 && n <= order.size(), ErrorCode::invalid_argument,
          "composite budget needs " + std::to_string(n) + " concepts");
  const auto known = default_concepts();
  ConceptList cs;
  for (std::size_t k = 0; k < n; ++k) {
    auto it = std::find_if(known.begin(), known.end(), [&](const Concept& c) { return c.name == order[k]; });
    require(it != known.end(), ErrorCode::not_found, "no composite phrasing for concept '" + order[k] + "'");
    cs.push_back(*it);
  }
  return composite_questions(cs, all_qtypes());
}

// Attribution maps keyed by question text. Shared across the variants of one
// command; attribution is deterministic, so a map computed twice is identical.
class MapCache {
 public:
  MapCache(const RunInputs& in, AttributionConfig cfg, std::size_t workers)
      : in_(in), cfg_(cfg), workers_(workers) {}

  std::vector<AttributionMap> get(const std::vector<QuestionSpec>& qs) {
    std::vector<Probe> missing;
    {
      std::lock_guard lock(mu_);
      std::set<std::string> queued;
      for (const auto& q : qs)
        if (!maps_.contains(q.text) && queued.insert(q.text).second) missing.push_back(make_probe(in_.vocab, q));
    }
    if (!missing.empty()) {
      auto res = attribute_set(in_.params, missing, cfg_, workers_);
      if (!res.ok()) fail(ErrorCode::non_finite, "attribution failed for " + res.errors.front());
      std::lock_guard lock(mu_);
      for (auto& m : res.maps) maps_.emplace(m->question_id, std::move(*m));
    }
    std::lock_guard lock(mu_);
    std::vector<AttributionMap> out;
    for (const auto& q : qs) out.push_back(maps_.at(q.text));
    return out;
  }

 private:
  const RunInputs& in_;
  AttributionConfig cfg_;
  std::size_t workers_;
  std::mutex mu_;
  std::map<std::string, AttributionMap> maps_;
};

struct Identification {
  std::vector<NeuronSet> dimension_sets;  // empty for pooled modes
  NeuronSet set;
  std::vector<AttributionMap> maps;
};

inline NeuronSet stamp(NeuronSet s, const RunInputs& in) {
  s.model_checksum = in.model_checksum;
  s.question_set_hash = in.questions_hash;
  return s;
}

inline Identification identify(const RunInputs& in, const RunConfig& cfg, MapCache& cache) {
  Identification out;
  const std::size_t concepts = cfg.q / 9;
  if (cfg.agg == AggregationMode::composite) {
    // Same budget spent on composite questions: q/3 concepts x 3 types.
    const auto qs = staged("questions", [&] { return composite_for(in.questions, cfg.q / 3); });
    out.maps = staged("attribute", [&] { return cache.get(qs); });
    out.set = staged("select", [&] { return aggregate_maps({out.maps}, cfg.agg, cfg.selection); });
    out.set = stamp(std::move(out.set), in);
    return out;
  }
  std::vector<std::vector<AttributionMap>> groups;
  for (Dimension d : all_dimensions()) {
    const auto qs = staged("questions", [&] { return take_concepts(in.questions, concepts, {d}, all_qtypes()); });
    require(!qs.empty(), ErrorCode::invalid_argument,
            std::string("questions: no ") + to_string(d) + " questions in the budget");
    auto maps = staged("attribute", [&] { return cache.get(qs); });
    out.maps.insert(out.maps.end(), maps.begin(), maps.end());
    groups.push_back(std::move(maps));
  }
  if (cfg.agg == AggregationMode::combined) {
    out.set = staged("select", [&] { return aggregate_maps(groups, cfg.agg, cfg.selection); });
  } else {
    for (std::size_t k = 0; k < groups.size(); ++k)
      out.dimension_sets.push_back(stamp(
          staged("select", [&] { return select_dimension(groups[k], cfg.selection, to_string(all_dimensions()[k])); }),
          in));
    out.set = staged("aggregate", [&] { return aggregate_sets(out.dimension_sets, cfg.agg); });
  }
  out.set = stamp(std::move(out.set), in);
  return out;
}

// ---------------------------------------------------------------------------
// Output directories

inline std::string config_hash(const std::string& command, const nlohmann::json& payload) {
  return sha256_hex(nlohmann::json{{"command", command}, {"payload", payload}}.dump());
}

inline std::string output_dir(const std::string& root, const std::string& command, const std::string& hash) {
  const auto dir = std::filesystem::path(root) / (command + "-" + hash.substr(0, 12));
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::io, "cannot create output directory " + dir.string() + ": " + ec.message());
  return dir.string();
}

inline void write_json(const std::string& path, const nlohmann::json& j) { write_text_file(path, j.dump(2) + "\n"); }

inline std::string join_path(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

// ---------------------------------------------------------------------------
// identify

struct IdentifyResult {
  std::string dir;
  std::string config_hash;
  Identification ident;
  std::string summary;
};

inline nlohmann::json identify_payload(const RunInputs& in, const RunConfig& cfg) {
  return {{"config", to_json(cfg)}, {"model_checksum", in.model_checksum}, {"questions_hash", in.questions_hash}};
}

inline std::string identify_text(const Identification& id, const ModelConfig& mc) {
  std::string s;
  const auto total = mc.total_neurons();
  for (const auto& d : id.dimension_sets) s += pad_right(d.provenance, 12) + count_with_percent(d.size(), total) + "\n";
  s += pad_right(id.set.provenance, 12) + count_with_percent(id.set.size(), total) + "\n";
  for (const auto& n : id.set.members) s += "  (" + std::to_string(n.layer) + ", " + std::to_string(n.index) + ")\n";
  return s;
}

inline IdentifyResult cmd_identify(const RunConfig& cfg, const RunInputs& in, MapCache& cache) {
  IdentifyResult r;
  r.config_hash = config_hash("identify", identify_payload(in, cfg));
  r.ident = identify(in, cfg, cache);
  r.dir = output_dir(cfg.out_root(), "identify", r.config_hash);
  nlohmann::json dims = nlohmann::json::array();
  for (const auto& d : r.ident.dimension_sets) dims.push_back(to_json(d));
  write_json(join_path(r.dir, "neurons.json"),
             {{"config_hash", r.config_hash},
              {"model_checksum", in.model_checksum},
              {"config", to_json(cfg)},
              {"count", count_with_percent(r.ident.set.size(), in.params.config.total_neurons())},
              {"set", to_json(r.ident.set)},
              {"dimension_sets", dims}});
  auto dump = attribution_dump(in.model_checksum, cfg.attribution(), r.ident.maps);
  dump["config_hash"] = r.config_hash;
  write_json(join_path(r.dir, "attributions.json"), dump);
  r.summary = identify_text(r.ident, in.params.config);
  write_text_file(join_path(r.dir, "identify.txt"),
                  "config " + r.config_hash.substr(0, 16) + "  model " + in.model_checksum.substr(0, 16) + "\n" +
                      r.summary);
  return r;
}

inline IdentifyResult cmd_identify(const RunConfig& cfg) {
  const RunInputs in = load_inputs(cfg);
  MapCache cache(in, cfg.attribution(), cfg.workers);
  return cmd_identify(cfg, in, cache);
}

inline NeuronSet load_neuron_set(const std::string& path) {
  const auto text = read_file_bytes(path);
  try {
    const auto j = nlohmann::json::parse(text.begin(), text.end());
    return neuron_set_from_json(j.contains("set") ? j.at("set") : j);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse, path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// eval

struct EvalRun {
  MetricReport base;
  std::optional<MetricReport> steered;
  std::optional<DeltaReport> delta;
};

inline MetricReport run_benchmarks(const RunInputs& in, const std::vector<HookSpec>& hooks, std::size_t workers,
                                   const nlohmann::json& intervention) {
  auto rep = staged("evaluate", [&] { return evaluate_benchmarks(in.params, in.vocab, in.bench, hooks, workers).report; });
  rep.model_checksum = in.model_checksum;
  rep.intervention = intervention;
  return rep;
}

inline MetricReport run_with_set(const RunInputs& in, const NeuronSet& set, double lambda, std::size_t workers) {
  const auto iv = staged("intervention", [&] { return make_intervention(set, lambda, in.model_checksum, in.params.config); });
  return run_benchmarks(in, iv.hooks(), workers, iv.provenance());
}

inline EvalRun evaluate_run(const RunInputs& in, const std::optional<NeuronSet>& set, double lambda,
                            std::size_t workers, const MetricReport* base = nullptr) {
  EvalRun r;
  r.base = base ? *base : run_benchmarks(in, {}, workers, nullptr);
  if (set) {
    r.steered = run_with_set(in, *set, lambda, workers);
    r.delta = compare_runs(r.base, *r.steered);
  }
  return r;
}

struct EvalResult {
  std::string dir;
  std::string config_hash;
  EvalRun run;
};

inline EvalResult cmd_eval(const RunConfig& cfg, const RunInputs& in, const std::optional<NeuronSet>& set,
                           const MetricReport* base = nullptr) {
  if (set)
    require(set->model_checksum.empty() || set->model_checksum == in.model_checksum, ErrorCode::config_mismatch,
            "eval: neuron set was identified on model " + set->model_checksum.substr(0, 16) + ", not on " +
                in.model_checksum.substr(0, 16));
  EvalResult r;
  nlohmann::json payload{{"lambda", cfg.lambda},
                         {"model_checksum", in.model_checksum},
                         {"fixture_hash", in.bench.fixture_hash()},
                         {"set", set ? to_json(*set) : nlohmann::json(nullptr)}};
  r.config_hash = config_hash("eval", payload);
  r.run = evaluate_run(in, set, cfg.lambda, cfg.workers, base);
  r.dir = output_dir(cfg.out_root(), "eval", r.config_hash);
  auto stamped = [&](nlohmann::json j) {
    j["config_hash"] = r.config_hash;
    return j;
  };
  const std::string header = "config " + r.config_hash.substr(0, 16) + "\n";
  write_json(join_path(r.dir, "base.json"), stamped(to_json(r.run.base)));
  write_text_file(join_path(r.dir, "base.txt"), header + to_text(r.run.base));
  if (r.run.steered) {
    write_json(join_path(r.dir, "steered.json"), stamped(to_json(*r.run.steered)));
    write_text_file(join_path(r.dir, "steered.txt"), header + to_text(*r.run.steered));
    auto dj = to_json(*r.run.delta);
    dj["model_checksum"] = in.model_checksum;
    write_json(join_path(r.dir, "delta.json"), stamped(dj));
    write_text_file(join_path(r.dir, "delta.txt"), header + to_text(*r.run.delta));
  }
  return r;
}

inline EvalResult cmd_eval(const RunConfig& cfg, const std::string& set_path = {}) {
  const RunInputs in = load_inputs(cfg);
  std::optional<NeuronSet> set;
  if (!set_path.empty()) set = staged("load neuron set", [&] { return load_neuron_set(set_path); });
  return cmd_eval(cfg, in, set);
}

// ---------------------------------------------------------------------------
// sweep

enum class SweepAxis { q, tau, beta, lambda };

inline const char* to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::q: return "q";
    case SweepAxis::tau: return "tau";
    case SweepAxis::beta: return "beta";
    case SweepAxis::lambda: return "lambda";
  }
  return "?";
}

inline SweepAxis sweep_axis_from_string(std::string_view s) {
  for (auto a : {SweepAxis::q, SweepAxis::tau, SweepAxis::beta, SweepAxis::lambda})
    if (s == to_string(a)) return a;
  fail(ErrorCode::invalid_argument, "unknown sweep axis '" + std::string(s) + "' (q, tau, beta, lambda)");
}

struct SweepSpec {
  SweepAxis axis = SweepAxis::q;
  std::vector<double> values;
  RunConfig base;

  void validate() const {
    require(!values.empty(), ErrorCode::invalid_argument, "sweep: empty grid");
    for (double v : values) {
      auto c = apply(v);
      staged("sweep value " + format_fixed(v, 4), [&] { c.validate(); });
    }
  }

  RunConfig apply(double v) const {
    RunConfig c = base;
    switch (axis) {
      case SweepAxis::q:
        require(v >= 0.0 && v == std::floor(v), ErrorCode::invalid_argument, "sweep: q values must be integers");
        c.q = static_cast<std::size_t>(v);
        break;
      case SweepAxis::tau: c.selection.tau = v; break;
      case SweepAxis::beta: c.selection.beta = v; break;
      case SweepAxis::lambda: c.lambda = v; break;
    }
    return c;
  }
};

struct SweepPoint {
  double value = 0.0;
  bool ok = false;
  std::string error;
  std::size_t set_size = 0;
  double gain = 0.0;
  std::optional<MetricReport> steered;
};

struct SweepResult {
  std::string dir;
  std::string config_hash;
  MetricReport base;
  std::vector<SweepPoint> points;
};

inline std::string value_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline std::string sweep_csv(const SweepSpec& spec, const SweepResult& r) {
  std::string s = std::string(to_string(spec.axis)) + ",status,set_size,toward_neutral_gain";
  for (const auto& e : r.base.entries) s += "," + e.dataset + ":" + e.dimension;
  s += "\n";
  for (const auto& p : r.points) {
    s += value_label(p.value) + "," + (p.ok ? "ok" : "error");
    if (!p.ok) {
      s += ",,";
      for (std::size_t k = 0; k < r.base.entries.size(); ++k) s += ",";
      s += "\n";
      continue;
    }
    s += "," + std::to_string(p.set_size) + "," + format_fixed(p.gain, 6);
    for (const auto& e : p.steered->entries) s += "," + format_fixed(e.score, 6);
    s += "\n";
  }
  return s;
}

// Line chart of the toward-neutral gain, points evenly spaced in grid order.
inline std::string sweep_svg(const SweepSpec& spec, const SweepResult& r) {
  const double W = 480, H = 300, left = 60, right = 20, top = 30, bottom = 50;
  double lo = 0.0, hi = 0.0;
  for (const auto& p : r.points)
    if (p.ok) lo = std::min(lo, p.gain), hi = std::max(hi, p.gain);
  if (hi - lo < 1e-9) hi = lo + 1.0;
  const std::size_t n = r.points.size();
  auto x = [&](std::size_t k) { return left + (n > 1 ? (W - left - right) * k / (n - 1.0) : (W - left - right) / 2); };
  auto y = [&](double g) { return top + (H - top - bottom) * (hi - g) / (hi - lo); };
  auto f = [](double v) { return format_fixed(v, 1); };
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + f(W) + "\" height=\"" + f(H) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + f(W / 2) + "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">toward-neutral gain vs " +
       to_string(spec.axis) + "</text>\n";
  s += "<line x1=\"" + f(left) + "\" y1=\"" + f(y(0)) + "\" x2=\"" + f(W - right) + "\" y2=\"" + f(y(0)) +
       "\" stroke=\"#999\"/>\n";
  s += "<line x1=\"" + f(left) + "\" y1=\"" + f(top) + "\" x2=\"" + f(left) + "\" y2=\"" + f(H - bottom) +
       "\" stroke=\"black\"/>\n";
  for (double g : {lo, hi})
    s += "<text x=\"" + f(left - 6) + "\" y=\"" + f(y(g) + 4) + "\" text-anchor=\"end\" font-size=\"11\">" +
         format_fixed(g, 3) + "</text>\n";
  std::string path;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& p = r.points[k];
    s += "<text x=\"" + f(x(k)) + "\" y=\"" + f(H - bottom + 18) + "\" text-anchor=\"middle\" font-size=\"11\">" +
         value_label(p.value) + "</text>\n";
    if (!p.ok) {
      s += "<text x=\"" + f(x(k)) + "\" y=\"" + f(top + 12) + "\" text-anchor=\"middle\" font-size=\"11\" fill=\"red\">x</text>\n";
      continue;
    }
    path += (path.empty() ? "M" : " L") + f(x(k)) + " " + f(y(p.gain));
    s += "<circle cx=\"" + f(x(k)) + "\" cy=\"" + f(y(p.gain)) + "\" r=\"3\" fill=\"steelblue\"/>\n";
  }
  if (!path.empty()) s += "<path d=\"" + path + "\" fill=\"none\" stroke=\"steelblue\"/>\n";
  s += "</svg>\n";
  return s;
}

inline SweepResult cmd_sweep(const SweepSpec& spec) {
  spec.validate();
  const RunInputs in = load_inputs(spec.base);
  SweepResult r;
  nlohmann::json grid = nlohmann::json::array();
  for (double v : spec.values) grid.push_back(v);
  r.config_hash = config_hash("sweep", {{"axis", to_string(spec.axis)},
                                        {"values", grid},
                                        {"base", identify_payload(in, spec.base)},
                                        {"fixture_hash", in.bench.fixture_hash()}});
  r.dir = output_dir(spec.base.out_root(), "sweep", r.config_hash);
  r.base = run_benchmarks(in, {}, spec.base.workers, nullptr);

  MapCache cache(in, spec.base.attribution(), 1);
  // Identification does not depend on lambda; compute it once.
  std::optional<Identification> shared;
  if (spec.axis == SweepAxis::lambda) {
    try {
      shared = identify(in, spec.base, cache);
    } catch (const Error&) {
    }
  }
  r.points.resize(spec.values.size());
  parallel_for(spec.values.size(), spec.base.workers, [&](std::size_t k) {
    SweepPoint& p = r.points[k];
    p.value = spec.values[k];
    try {
      RunConfig c = spec.apply(p.value);
      c.workers = 1;
      c.out = r.dir;
      const Identification id = shared ? *shared : identify(in, c, cache);
      p.set_size = id.set.size();
      const auto ev = cmd_eval(c, in, id.set, &r.base);
      p.steered = *ev.run.steered;
      p.gain = ev.run.delta->toward_neutral_gain();
      p.ok = true;
    } catch (const std::exception& e) {
      p.error = e.what();
    }
  });

  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : r.points) {
    nlohmann::json j{{"value", p.value}, {"ok", p.ok}};
    if (p.ok) {
      j["set_size"] = p.set_size;
      j["toward_neutral_gain"] = p.gain;
      j["report"] = to_json(*p.steered);
    } else {
      j["error"] = p.error;
    }
    pts.push_back(j);
  }
  write_json(join_path(r.dir, "sweep.json"), {{"config_hash", r.config_hash},
                                              {"model_checksum", in.model_checksum},
                                              {"axis", to_string(spec.axis)},
                                              {"base", to_json(r.base)},
                                              {"points", pts}});
  write_text_file(join_path(r.dir, "sweep.csv"), sweep_csv(spec, r));
  write_text_file(join_path(r.dir, "sweep.svg"), sweep_svg(spec, r));
  return r;
}

// ---------------------------------------------------------------------------
// ablate

struct AblationRow {
  std::string variant;
  std::size_t questions = 0;
  bool ok = false;
  std::string error;
  NeuronSet set;
  std::optional<MetricReport> steered;
  double gain = 0.0;
};

struct AblateResult {
  std::string dir;
  std::string config_hash;
  MetricReport base;
  std::vector<AblationRow> rows;
  std::size_t total_neurons = 0;

  const AblationRow* find(const std::string& variant) const {
    for (const auto& r : rows)
      if (r.variant == variant) return &r;
    return nullptr;
  }
};

namespace detail {

// Rows of each dimension taken from that dimension's run; rows that belong to
// no dimension (MC) from `rest`.
inline MetricReport splice_by_dimension(const std::map<std::string, MetricReport>& by_dim, const MetricReport& rest) {
  MetricReport out = rest;
  for (auto& e : out.entries)
    if (auto it = by_dim.find(e.dimension); it != by_dim.end()) e = *it->second.find(e.dataset, e.dimension);
  out.intervention = nlohmann::json::object();
  for (const auto& [d, rep] : by_dim) out.intervention[d] = rep.intervention;
  out.intervention["other"] = rest.intervention;
  return out;
}

}  // namespace detail

// Scores averaged over dimensions, one column per dataset, in report order.
inline std::vector<std::pair<std::string, double>> dataset_means(const MetricReport& rep) {
  std::vector<std::pair<std::string, double>> out;
  std::vector<std::size_t> n;
  for (const auto& e : rep.entries) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& c) { return c.first == e.dataset; });
    if (it == out.end()) {
      out.emplace_back(e.dataset, 0.0);
      n.push_back(0);
      it = out.end() - 1;
    }
    it->second += e.score;
    ++n[static_cast<std::size_t>(it - out.begin())];
  }
  for (std::size_t k = 0; k < out.size(); ++k) out[k].second /= static_cast<double>(n[k]);
  return out;
}

inline std::string ablation_table(const AblateResult& r) {
  std::string s = pad_right("variant", 14) + pad_right("questions", 11) + pad_right("neurons", 14) + pad_right("gain", 9);
  for (const auto& [d, v] : dataset_means(r.base)) s += pad_right(d, 10);
  s += "\n" + pad_right("base", 14) + pad_right("-", 11) + pad_right("-", 14) + pad_right("-", 9);
  for (const auto& [d, v] : dataset_means(r.base)) s += pad_right(format_fixed(v), 10);
  s += "\n";
  for (const auto& row : r.rows) {
    s += pad_right(row.variant, 14) + pad_right(std::to_string(row.questions), 11);
    if (!row.ok) {
      s += "error: " + row.error + "\n";
      continue;
    }
    s += pad_right(count_with_percent(row.set.size(), r.total_neurons), 14) + pad_right(format_fixed(row.gain), 9);
    for (const auto& [d, v] : dataset_means(*row.steered)) s += pad_right(format_fixed(v), 10);
    s += "\n";
  }
  return s;
}

// Every variant spends a q-question budget (45 by default).
inline AblateResult cmd_ablate(const RunConfig& cfg) {
  const RunInputs in = load_inputs(cfg);
  require(cfg.q % 9 == 0, ErrorCode::invalid_argument, "ablate: q must be a multiple of 9");
  AblateResult r;
  r.config_hash = config_hash("ablate", {{"base", identify_payload(in, cfg)}, {"fixture_hash", in.bench.fixture_hash()}});
  r.dir = output_dir(cfg.out_root(), "ablate", r.config_hash);
  r.base = run_benchmarks(in, {}, cfg.workers, nullptr);
  MapCache cache(in, cfg.attribution(), cfg.workers);
  const std::size_t per_dim = cfg.q / 3;  // concepts when a variant uses one dimension or one type

  auto row_for = [&](const std::string& name, std::size_t nq, auto&& build) {
    AblationRow row;
    row.variant = name;
    row.questions = nq;
    try {
      build(row);
      if (!row.steered) row.steered = run_with_set(in, row.set, cfg.lambda, cfg.workers);
      row.gain = compare_runs(r.base, *row.steered).toward_neutral_gain();
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    r.rows.push_back(std::move(row));
  };

  auto per_dimension_sets = [&](std::size_t concepts, const std::vector<QuestionType>& types) {
    std::vector<NeuronSet> sets;
    for (Dimension d : all_dimensions()) {
      const auto qs = take_concepts(in.questions, concepts, {d}, types);
      sets.push_back(stamp(select_dimension(cache.get(qs), cfg.selection, to_string(d)), in));
    }
    return sets;
  };

  for (std::size_t t = 0; t < 3; ++t)
    row_for("Type" + std::to_string(t + 1), cfg.q, [&](AblationRow& row) {
      auto sets = per_dimension_sets(per_dim, {all_qtypes()[t]});
      row.set = aggregate_sets(sets, AggregationMode::union_);
      row.set.provenance = std::string("union/") + to_string(all_qtypes()[t]);
    });

  auto mode_row = [&](const std::string& name, AggregationMode mode) {
    RunConfig c = cfg;
    c.agg = mode;
    row_for(name, cfg.q, [&](AblationRow& row) { row.set = identify(in, c, cache).set; });
  };
  mode_row("q-comp", AggregationMode::composite);
  mode_row("comb", AggregationMode::combined);
  mode_row("intersection", AggregationMode::intersection);
  mode_row("union", AggregationMode::union_);

  row_for("S", cfg.q * 3, [&](AblationRow& row) {
    const auto sets = per_dimension_sets(per_dim, all_qtypes());
    std::map<std::string, MetricReport> by_dim;
    for (const auto& s : sets) by_dim.emplace(s.provenance, run_with_set(in, s, cfg.lambda, cfg.workers));
    row.set = aggregate_sets(sets, AggregationMode::union_);
    row.set.provenance = "per-dimension";
    row.steered = detail::splice_by_dimension(by_dim, run_with_set(in, row.set, cfg.lambda, cfg.workers));
  });

  const AblationRow* uni = r.find("union");
  row_for("random", 0, [&](AblationRow& row) {
    require(uni && uni->ok, ErrorCode::invalid_argument, "random baseline needs the union set");
    row.set = stamp(random_baseline(in.params.config, uni->set.size(), cfg.seed), in);
  });

  const auto total = r.total_neurons = in.params.config.total_neurons();
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json j{{"variant", row.variant}, {"questions", row.questions}, {"ok", row.ok}};
    if (row.ok) {
      j["set"] = to_json(row.set);
      j["count"] = count_with_percent(row.set.size(), total);
      j["toward_neutral_gain"] = row.gain;
      j["report"] = to_json(*row.steered);
    } else {
      j["error"] = row.error;
    }
    rows.push_back(j);
  }
  write_json(join_path(r.dir, "ablate.json"), {{"config_hash", r.config_hash},
                                               {"model_checksum", in.model_checksum},
                                               {"config", to_json(cfg)},
                                               {"base", to_json(r.base)},
                                               {"rows", rows}});
  write_text_file(join_path(r.dir, "ablate.txt"),
                  "config " + r.config_hash.substr(0, 16) + "  model " + in.model_checksum.substr(0, 16) + "\n" +
                      ablation_table(r));
  return r;
}

}  // namespace knowbias
