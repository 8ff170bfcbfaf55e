#include "gemnet/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gemnet/calibrate.hpp"
#include "gemnet/error.hpp"
#include "gemnet/ingest.hpp"
#include "gemnet/seed.hpp"
#include "gemnet/synthgen.hpp"

namespace gemnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_text(const fs::path& path, ErrorKind missing = ErrorKind::IoError) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), missing, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::IoError, "cannot write " + path.string());
  out << text;
}

fs::path resolve_against(const fs::path& base, const fs::path& p) {
  return p.is_absolute() || base.empty() ? p : base / p;
}

bool is_preset(const std::string& s) { return s == "easy" || s == "realistic"; }

}  // namespace

fs::path output_path(const fs::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("GEMNET_OUTPUT_ROOT"); root && *root) return fs::path(root) / p;
  return p;
}

RunConfig run_config_from_json(const std::string& text, const fs::path& base_dir) {
  RunConfig c;
  try {
    const json j = json::parse(text);
    static const std::set<std::string> known{"task",   "corpus", "generator",     "model",
                                             "train",  "output", "seed",          "deterministic",
                                             "pairing", "calibration_mode"};
    for (const auto& [key, _] : j.items())
      require(known.count(key) > 0, ErrorKind::InvalidConfig, "unknown run key '" + key + "'");
    c.task = task_from_string(j.value("task", std::string("od")));
    require(j.contains("corpus") != j.contains("generator"), ErrorKind::InvalidConfig,
            "exactly one of 'corpus' and 'generator' is required");
    if (j.contains("corpus")) c.corpus = resolve_against(base_dir, j.at("corpus").get<std::string>());
    if (j.contains("generator")) {
      const auto& g = j.at("generator");
      auto spec = g.at("spec").get<std::string>();
      c.generator_spec = is_preset(spec) ? spec : resolve_against(base_dir, spec).string();
      c.generator_n = g.value("n", c.generator_n);
      require(c.generator_n >= 1, ErrorKind::InvalidConfig, "generator n must be positive");
    }
    json model = j.value("model", json::object());
    if (model.contains("task"))
      require(task_from_string(model.at("task").get<std::string>()) == c.task,
              ErrorKind::InvalidConfig, "model task differs from run task");
    model["task"] = std::string(to_string(c.task));
    c.model = config_from_json(model.dump());
    if (j.contains("train")) c.train = train_config_from_json(j.at("train").dump());
    if (j.contains("calibration_mode"))
      c.mode = calibration_mode_from_string(j.at("calibration_mode").get<std::string>());
    if (j.contains("output")) c.output = j.at("output").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    c.deterministic = j.value("deterministic", c.deterministic);
    if (j.contains("pairing")) c.pairing = pairing_from_string(j.at("pairing").get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorKind::InvalidConfig, std::string("run config: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidInput) fail(ErrorKind::InvalidConfig, e.what());
    throw;
  }
  c.train.deterministic = c.deterministic;
  return c;
}

std::string run_config_to_json(const RunConfig& c) {
  json j;
  j["task"] = std::string(to_string(c.task));
  if (c.corpus) j["corpus"] = c.corpus->string();
  if (c.generator_spec) j["generator"] = {{"spec", *c.generator_spec}, {"n", c.generator_n}};
  j["model"] = json::parse(config_to_json(c.model));
  j["train"] = json::parse(train_config_to_json(c.train));
  j["calibration_mode"] = std::string(to_string(c.mode));
  j["output"] = c.output.string();
  if (c.seed) j["seed"] = *c.seed;
  j["deterministic"] = c.deterministic;
  j["pairing"] = std::string(to_string(c.pairing));
  return j.dump(2);
}

void apply_seed(RunConfig& c) {
  if (!c.seed) return;
  c.model.seed = derive_seed(*c.seed, "model");
  c.train.seed = derive_seed(*c.seed, "train");
}

namespace {

GeneratorSpec load_generator(const std::string& name_or_path) {
  return resolve_spec(name_or_path);
}

std::vector<StoneRecord> load_run_corpus(const RunConfig& c) {
  if (c.corpus) return load_corpus(*c.corpus);
  GeneratorSpec spec = load_generator(*c.generator_spec);
  if (c.seed) spec.seed = derive_seed(*c.seed, "corpus");
  return gen_corpus(spec, c.generator_n);
}

std::string join_probs(const std::vector<double>& probs) {
  std::string s;
  for (std::size_t i = 0; i < probs.size(); ++i) s += (i ? "," : "") + format_double(probs[i]);
  return s;
}

std::string class_name(Task task, std::size_t label) {
  return std::string(task == Task::OD ? to_string(static_cast<Origin>(label))
                                      : to_string(static_cast<Treatment>(label)));
}

CalibrationSet load_calibration(const fs::path& checkpoint, const std::string& explicit_path) {
  const fs::path path =
      explicit_path.empty() ? checkpoint.parent_path() / "calibration.json" : fs::path(explicit_path);
  return calibration_set_from_json(read_text(path, ErrorKind::MissingArtifact));
}

void print_summary(std::ostream& out, const ReportSummary& s) {
  out << "mode,coverage,accuracy,accepted,total,inconsistent_pairs\n";
  for (std::size_t m = 0; m < 3; ++m) {
    const auto& op = s.modes[m];
    out << to_string(op.mode) << ',' << format_double(op.coverage) << ','
        << format_double(op.accuracy) << ',' << op.accepted << ',' << op.total << ','
        << s.consistency[m].inconsistent << '\n';
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"gemnet: multi-source gemstone classifier with calibrated abstention", "gemnet"};
  app.require_subcommand(1);

  // gen-data
  std::string spec_name, out_path;
  std::size_t n = 0;
  std::optional<std::uint64_t> gen_seed;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  gen->add_option("--spec", spec_name, "Preset (easy, realistic) or spec JSON")->required();
  gen->add_option("--n", n, "Number of stones")->required()->check(CLI::PositiveNumber);
  gen->add_option("--out", out_path, "Output corpus (JSON lines)")->required();
  gen->add_option("--seed", gen_seed, "Override the spec seed");

  // prep
  std::string raw_path;
  auto* prep = app.add_subcommand("prep", "Preprocess raw instrument records into a corpus");
  prep->add_option("--in", raw_path, "Raw records (JSON lines)")->required();
  prep->add_option("--out", out_path, "Output corpus")->required();

  // train
  std::string config_path, task_name, out_dir;
  bool deterministic_flag = false;
  auto* train = app.add_subcommand("train", "Cross-validate a model and write a run directory");
  train->add_option("--config", config_path, "Run config (JSON)")->required();
  train->add_option("--task", task_name, "Override the task (od, td)");
  train->add_option("--out", out_dir, "Override the output directory");
  train->add_flag("--deterministic", deterministic_flag, "Run folds sequentially");

  // calibrate
  std::string predictions_path, mode_name = "mode2";
  auto* calib = app.add_subcommand("calibrate", "Select a confidence threshold from predictions");
  calib->add_option("--predictions", predictions_path, "Training predictions CSV")->required();
  calib->add_option("--task", task_name, "Task (od, td)")->required();
  calib->add_option("--mode", mode_name, "none, mode1 or mode2");
  calib->add_option("--out", out_path, "Profile JSON")->required();

  // evaluate
  std::string run_dir, pairing_name = "consecutive";
  auto* eval = app.add_subcommand("evaluate", "Write the report for a run directory");
  eval->add_option("--run", run_dir, "Run directory")->required();
  eval->add_option("--task", task_name, "Task; read from run.json by default");
  eval->add_option("--pairing", pairing_name, "consecutive or all-pairs");

  // consistency
  std::string checkpoint_path, corpus_path, calibration_path;
  auto* cons = app.add_subcommand("consistency", "Repeat-evaluation consistency of a model");
  cons->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
  cons->add_option("--corpus", corpus_path, "Corpus with repeat evaluations")->required();
  cons->add_option("--mode", mode_name, "none, mode1 or mode2");
  cons->add_option("--calibration", calibration_path,
                   "Calibration JSON; defaults to the one beside the checkpoint");
  cons->add_option("--pairing", pairing_name, "consecutive or all-pairs");
  cons->add_option("--out", out_path, "Pairs CSV");

  // predict
  std::string stone_path;
  auto* pred = app.add_subcommand("predict", "Classify stones with accept/abstain decisions");
  pred->add_option("--checkpoint", checkpoint_path, "Model checkpoint")->required();
  pred->add_option("--stone", stone_path, "Stone record(s), JSON lines")->required();
  pred->add_option("--mode", mode_name, "none, mode1 or mode2");
  pred->add_option("--calibration", calibration_path,
                   "Calibration JSON; defaults to the one beside the checkpoint");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      GeneratorSpec spec = load_generator(spec_name);
      if (gen_seed) spec.seed = *gen_seed;
      check_spec(spec);
      const auto records = gen_corpus(spec, n);
      save_corpus(records, output_path(out_path));
      out << "wrote " << records.size() << " records (" << n << " stones) to "
          << output_path(out_path).string() << '\n';
      out << "oracle accuracy od=" << format_double(bayes_accuracy(records, spec, Task::OD))
          << " td=" << format_double(bayes_accuracy(records, spec, Task::TD)) << '\n';
      return 0;
    }
    if (prep->parsed()) {
      const auto raw = load_raw_corpus(raw_path);
      PrepStats stats;
      std::vector<StoneRecord> records;
      for (const auto& r : raw)
        if (auto rec = prepare_record(r, stats)) records.push_back(std::move(*rec));
      sort_and_check_corpus(records);
      save_corpus(records, output_path(out_path));
      out << "records in=" << stats.records_in << " out=" << stats.records_out
          << " dropped=" << stats.dropped_records << " rejected uv=" << stats.uv_rejected
          << " ftir=" << stats.ftir_rejected << " xrf=" << stats.xrf_rejected << '\n';
      return 0;
    }
    if (train->parsed()) {
      const fs::path cfg_file(config_path);
      json raw_cfg;
      try {
        raw_cfg = json::parse(read_text(cfg_file, ErrorKind::InvalidConfig));
      } catch (const json::exception& e) {
        fail(ErrorKind::InvalidConfig, std::string("run config: ") + e.what());
      }
      if (!task_name.empty()) raw_cfg["task"] = task_name;
      RunConfig cfg = run_config_from_json(raw_cfg.dump(), cfg_file.parent_path());
      if (!out_dir.empty()) cfg.output = out_dir;
      if (deterministic_flag) cfg.deterministic = cfg.train.deterministic = true;
      apply_seed(cfg);
      if (cfg.generator_spec) check_spec(load_generator(*cfg.generator_spec));
      const auto records = load_run_corpus(cfg);

      const fs::path dir = output_path(cfg.output);
      fs::create_directories(dir);
      write_text(dir / "run.json", run_config_to_json(cfg) + "\n");
      if (cfg.generator_spec) save_corpus(records, dir / "corpus.jsonl");
      const auto cv = run_cross_validation(
          records, cfg.model, cfg.train, dir, [&](std::size_t fold, const EpochRecord& r) {
            err << "fold " << fold << " epoch " << r.epoch << " loss " << format_double(r.loss)
                << " val " << format_double(r.val_accuracy) << " lr " << format_double(r.lr)
                << '\n';
          });
      for (const auto& f : cv.folds)
        if (f.aborted)
          err << "fold " << f.fold << " stopped early on a numerical error; kept epoch "
              << f.best_epoch << '\n';
      const auto summary = emit_report(dir, cfg.task, cfg.pairing);
      print_summary(out, summary);
      return 0;
    }
    if (calib->parsed()) {
      const Task task = task_from_string(task_name);
      const CalibrationMode mode = calibration_mode_from_string(mode_name);
      const auto rows = read_predictions_csv(predictions_path, task);
      std::vector<ScoredPrediction> scored;
      for (const auto& r : rows) scored.push_back(r.scored);
      const auto profile = make_profile(mode, scored);
      write_text(output_path(out_path), profile_to_json(profile) + "\n");
      out << "mode " << to_string(mode) << " threshold " << format_double(profile.threshold)
          << " retained " << profile.retained << "/" << profile.calibration_size << '\n';
      return 0;
    }
    if (eval->parsed()) {
      const fs::path dir(run_dir);
      Task task;
      if (!task_name.empty()) {
        task = task_from_string(task_name);
      } else {
        const auto cfg = json::parse(read_text(dir / "run.json", ErrorKind::MissingArtifact));
        task = task_from_string(cfg.at("task").get<std::string>());
      }
      const auto summary = emit_report(dir, task, pairing_from_string(pairing_name));
      print_summary(out, summary);
      return 0;
    }
    if (cons->parsed()) {
      const CalibrationMode mode = calibration_mode_from_string(mode_name);
      const PairingRule rule = pairing_from_string(pairing_name);
      const auto set = load_calibration(checkpoint_path, calibration_path);
      const auto records = load_corpus(corpus_path);
      const Model model = Model::load(checkpoint_path);
      const auto usable = usable_records(records, model.config());
      CalibrationProfile profile;
      profile.mode = mode;
      profile.threshold = set.threshold(mode);
      const auto rep = consistency_report(usable, model, profile, rule);
      out << "pairs " << rep.pairs.size() << " consistent " << rep.consistent << " inconsistent "
          << rep.inconsistent << " abstention " << rep.abstention_involved << '\n';
      if (!out_path.empty()) {
        std::string csv = "stone_id,time_a,time_b,label_a,label_b,outcome\n";
        const Task task = model.config().task;
        for (const auto& p : rep.pairs)
          csv += p.stone_id + ',' + std::to_string(p.time_a) + ',' + std::to_string(p.time_b) +
                 ',' + class_name(task, p.label_a) + ',' + class_name(task, p.label_b) + ',' +
                 std::string(to_string(p.outcome)) + '\n';
        write_text(output_path(out_path), csv);
      }
      return 0;
    }
    if (pred->parsed()) {
      const CalibrationMode mode = calibration_mode_from_string(mode_name);
      const auto set = load_calibration(checkpoint_path, calibration_path);
      const double threshold = set.threshold(mode);
      const Model model = Model::load(checkpoint_path);
      const Task task = model.config().task;
      const auto records = load_corpus(stone_path);
      require(!records.empty(), ErrorKind::InvalidInput, "no stones in " + stone_path);
      out << "stone_id,evaluation_time,predicted,confidence";
      for (std::size_t c = 0; c < num_classes(task); ++c) out << ",p_" << class_name(task, c);
      out << ",decision\n";
      for (const auto& r : records) {
        const Prediction p = model.forward(r);
        out << r.stone_id << ',' << r.evaluation_time << ',' << class_name(task, p.label) << ','
            << format_double(p.confidence) << ',' << join_probs(p.probs) << ','
            << (accepts(p, threshold) ? "accept" : "abstain") << '\n';
      }
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.kind() == ErrorKind::NumericalError || e.kind() == ErrorKind::IoError ? 2 : 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace gemnet
