#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "knowbias/knowbias.hpp"

using namespace knowbias;

namespace {

void add_run_flags(CLI::App* cmd, RunConfig& c, std::string& path_mode, std::string& agg) {
  cmd->add_option("--model", c.model, "checkpoint file")->required();
  cmd->add_option("--vocab", c.vocab, "vocabulary file (default: built-in toy vocabulary)");
  cmd->add_option("--questions", c.questions, "question JSONL (default: the 25 shipped concepts)");
  cmd->add_option("--bench", c.bench, "fixture directory (default: built-in fixtures)");
  cmd->add_option("--q", c.q, "question budget, a multiple of 9")->capture_default_str();
  cmd->add_option("--tau", c.selection.tau, "attribution threshold, percent of max")->capture_default_str();
  cmd->add_option("--beta", c.selection.beta, "frequency threshold, percent of questions")->capture_default_str();
  cmd->add_option("--lambda", c.lambda, "enhancement scale")->capture_default_str();
  cmd->add_option("--m", c.m, "riemann steps")->capture_default_str();
  cmd->add_option("--path-mode", path_mode, "per-neuron | joint-layer")->capture_default_str();
  cmd->add_option("--agg", agg, "union | intersection | combined | composite")->capture_default_str();
  cmd->add_flag("--trapezoid", [&c](std::int64_t) { c.rule = RiemannRule::trapezoid; }, "trapezoid rule instead of left");
  cmd->add_option("--out", c.out, std::string("output root (default: $") + kOutEnv + ", then " + kDefaultOut + ")");
  cmd->add_option("--seed", c.seed, "seed for the random baseline")->capture_default_str();
  cmd->add_option("--workers", c.workers, "worker threads")->capture_default_str();
}

void finish_run_flags(RunConfig& c, const std::string& path_mode, const std::string& agg) {
  c.path_mode = path_mode_from_string(path_mode);
  c.agg = aggregation_from_string(agg);
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      fail(ErrorCode::invalid_argument, "sweep: bad grid value '" + item + "'");
    }
  }
  return out;
}

std::string out_root(const std::string& out) {
  RunConfig c;
  c.out = out;
  return c.out_root();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"know-bias neuron identification and enhancement on toy transformers"};
  app.require_subcommand(1);

  RunConfig run;
  std::string path_mode = "joint-layer", agg = "union";

  auto* identify = app.add_subcommand("identify", "find know-bias neurons");
  add_run_flags(identify, run, path_mode, agg);

  auto* eval = app.add_subcommand("eval", "benchmark metrics, with and without enhancement");
  add_run_flags(eval, run, path_mode, agg);
  std::string set_path;
  eval->add_option("--set", set_path, "neurons.json from identify; omit for base metrics only");

  auto* sweep = app.add_subcommand("sweep", "one hyperparameter over a grid");
  add_run_flags(sweep, run, path_mode, agg);
  std::string axis = "q", grid = "9,45,225";
  sweep->add_option("--axis", axis, "q | tau | beta | lambda")->capture_default_str();
  sweep->add_option("--values", grid, "comma-separated grid")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "question-type, aggregation and random-baseline variants");
  add_run_flags(ablate, run, path_mode, agg);

  auto* plant = app.add_subcommand("plant", "build the planted toy checkpoint");
  std::string plant_vocab, plant_out, ffn = "classic";
  std::uint64_t plant_seed = 0;
  plant->add_option("--vocab", plant_vocab, "vocabulary file (default: built-in toy vocabulary)");
  plant->add_option("--seed", plant_seed, "noise seed")->capture_default_str();
  plant->add_option("--ffn", ffn, "classic | gated")->capture_default_str();
  plant->add_option("--out", plant_out, "output root");

  auto* train = app.add_subcommand("train-toy", "next-token training on a small corpus");
  std::string corpus, train_vocab, train_out;
  ModelConfig mc;
  TrainConfig tc;
  train->add_option("--corpus", corpus, "text file, one piece per line")->required();
  train->add_option("--vocab", train_vocab, "vocabulary file (default: built-in toy vocabulary)");
  train->add_option("--steps", tc.steps)->capture_default_str();
  train->add_option("--lr", tc.learning_rate)->capture_default_str();
  train->add_option("--window", tc.window)->capture_default_str();
  train->add_option("--seed", tc.seed)->capture_default_str();
  train->add_option("--layers", mc.n_layers)->capture_default_str();
  train->add_option("--d-model", mc.d_model)->capture_default_str();
  train->add_option("--d-ffn", mc.d_ffn)->capture_default_str();
  train->add_option("--heads", mc.n_heads)->capture_default_str();
  train->add_option("--out", train_out, "output root");

  auto* questions = app.add_subcommand("questions", "bias-knowledge question files");
  questions->require_subcommand(1);
  auto* qgen = questions->add_subcommand("generate", "instantiate the templates");
  std::size_t n_concepts = 25;
  bool composite = false;
  std::string qfile;
  qgen->add_option("--concepts", n_concepts, "first N shipped concepts")->capture_default_str();
  qgen->add_flag("--composite", composite, "one composite dimension instead of three");
  qgen->add_option("--output", qfile, "JSONL path (default: stdout)");
  auto* qval = questions->add_subcommand("validate", "parse a question file and print its counts");
  qval->add_option("--questions", qfile)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (identify->parsed()) {
      finish_run_flags(run, path_mode, agg);
      const auto r = cmd_identify(run);
      std::cout << r.summary << "written to " << r.dir << "\n";
    } else if (eval->parsed()) {
      finish_run_flags(run, path_mode, agg);
      const auto r = cmd_eval(run, set_path);
      std::cout << (r.run.delta ? to_text(*r.run.delta) : to_text(r.run.base)) << "written to " << r.dir << "\n";
    } else if (sweep->parsed()) {
      finish_run_flags(run, path_mode, agg);
      const SweepSpec spec{sweep_axis_from_string(axis), parse_grid(grid), run};
      const auto r = cmd_sweep(spec);
      std::cout << sweep_csv(spec, r) << "written to " << r.dir << "\n";
      for (const auto& p : r.points)
        if (!p.ok) std::cerr << "point " << value_label(p.value) << " failed: " << p.error << "\n";
    } else if (ablate->parsed()) {
      finish_run_flags(run, path_mode, agg);
      const auto r = cmd_ablate(run);
      std::cout << ablation_table(r) << "written to " << r.dir << "\n";
    } else if (plant->parsed()) {
      require(ffn == "classic" || ffn == "gated", ErrorCode::invalid_argument, "plant: --ffn must be classic or gated");
      const Vocab vocab = plant_vocab.empty() ? lexicon::build_vocab() : Vocab::load(plant_vocab);
      const auto kind = ffn == "gated" ? FfnKind::gated : FfnKind::classic;
      const PlantSpec spec;
      const Parameters p = build_planted_model(spec, vocab, plant_seed, kind);
      const std::string sum = model_checksum(p);
      const auto dir = output_dir(out_root(plant_out), "plant", sum);
      save_checkpoint(p, join_path(dir, "model.kbc"));
      vocab.save(join_path(dir, "vocab.txt"));
      write_json(join_path(dir, "plant.json"),
                 {{"model_checksum", sum},
                  {"seed", plant_seed},
                  {"ffn", ffn},
                  {"target", {spec.target.layer, spec.target.index}},
                  {"rejection", {spec.rejection.layer, spec.rejection.index}}});
      std::cout << join_path(dir, "model.kbc") << "\n";
    } else if (train->parsed()) {
      const Vocab vocab = train_vocab.empty() ? lexicon::build_vocab() : Vocab::load(train_vocab);
      mc.vocab_size = vocab.size();
      mc.max_seq_len = std::max(mc.max_seq_len, tc.window);
      const auto tokens = load_corpus(vocab, corpus);
      const auto res = train_toy(tokens, mc, tc);
      const std::string sum = model_checksum(res.params);
      const auto dir = output_dir(out_root(train_out), "train", sum);
      save_checkpoint(res.params, join_path(dir, "model.kbc"));
      vocab.save(join_path(dir, "vocab.txt"));
      std::string csv = "step,loss\n";
      for (std::size_t k = 0; k < res.losses.size(); ++k) csv += std::to_string(k) + "," + format_fixed(res.losses[k], 8) + "\n";
      write_text_file(join_path(dir, "losses.csv"), csv);
      std::cout << "loss " << format_fixed(res.losses.front()) << " -> " << format_fixed(res.losses.back()) << "\n"
                << join_path(dir, "model.kbc") << "\n";
      if (res.diverged) {
        std::cerr << res.message << " (kept the last finite checkpoint)\n";
        return exit_code(ErrorCode::non_finite);
      }
    } else if (qgen->parsed()) {
      const auto concepts = first_concepts(n_concepts);
      const auto qs = composite ? composite_questions(concepts, all_qtypes()) : instantiate_questions(concepts);
      if (qfile.empty()) std::cout << questions_to_jsonl(qs);
      else save_questions(qs, qfile);
    } else if (qval->parsed()) {
      const auto qs = load_questions(qfile);
      std::map<std::string, std::size_t> by_dim, by_type;
      std::set<std::string> texts;
      for (const auto& q : qs) {
        ++by_dim[to_string(q.dimension)];
        ++by_type[to_string(q.qtype)];
        require(texts.insert(q.text).second, ErrorCode::parse, qfile + ": duplicate question '" + q.text + "'");
      }
      std::cout << qs.size() << " questions, " << concept_order(qs).size() << " concepts\n";
      for (const auto& [k, n] : by_dim) std::cout << "  " << k << " " << n << "\n";
      for (const auto& [k, n] : by_type) std::cout << "  " << k << " " << n << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
