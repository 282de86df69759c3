// Experiment harness: generate poisons, train the defense variants,
// evaluate checkpoints and aggregate run reports.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime divergence.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sha256.hpp"
#include "ueraser/data.hpp"
#include "ueraser/error.hpp"
#include "ueraser/model.hpp"
#include "ueraser/poison.hpp"
#include "ueraser/rng.hpp"
#include "ueraser/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ueraser;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

json load_config(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path.string() + ": " + e.what());
  }
}

std::uint64_t require_seed(const json& cfg) {
  if (!cfg.contains("seed")) throw ConfigError("config: top-level \"seed\" is required");
  return cfg.at("seed").get<std::uint64_t>();
}

// dataset block: {"type":"synth", ...} or {"type":"cifar10","dir":...}
std::pair<LabeledDataset, LabeledDataset> build_dataset(const json& cfg, std::uint64_t seed) {
  if (!cfg.contains("dataset")) throw ConfigError("config: \"dataset\" block is required");
  const json& d = cfg.at("dataset");
  const std::string type = d.value("type", "synth");
  if (type == "cifar10") {
    if (!d.contains("dir")) throw ConfigError("config: dataset.dir required for cifar10");
    auto [train, test] = load_cifar10(d.at("dir").get<std::string>());
    if (d.contains("train_subset")) {
      const std::size_t n = d.at("train_subset").get<std::size_t>();
      if (n < train.size()) {
        train.images.resize(n);
        train.labels.resize(n);
      }
    }
    return {std::move(train), std::move(test)};
  }
  if (type == "synth") {
    SynthSpec spec;
    spec.height = d.value("height", spec.height);
    spec.width = d.value("width", spec.width);
    spec.num_classes = d.value("classes", spec.num_classes);
    spec.train_per_class = d.value("train_per_class", spec.train_per_class);
    spec.test_per_class = d.value("test_per_class", spec.test_per_class);
    spec.class_strength = d.value("strength", spec.class_strength);
    spec.noise_std = d.value("noise_std", spec.noise_std);
    spec.seed = d.value("seed", derive_key(seed, "dataset.synth"));
    return synth_dataset(spec);
  }
  throw ConfigError("config: unknown dataset.type '" + type + "'");
}

PoisonKind poison_kind_from(const std::string& name) {
  if (name == "em") return PoisonKind::em;
  if (name == "lsp") return PoisonKind::lsp;
  if (name == "adaptive_em") return PoisonKind::adaptive_em;
  throw ConfigError("config: unknown poison.kind '" + name + "'");
}

std::string poison_kind_name(PoisonKind k) {
  switch (k) {
    case PoisonKind::em: return "em";
    case PoisonKind::lsp: return "lsp";
    case PoisonKind::adaptive_em: return "adaptive_em";
  }
  return "unknown";
}

PoisonSpec build_poison_spec(const json& p, std::uint64_t seed) {
  PoisonSpec spec;
  spec.kind = poison_kind_from(p.value("kind", "em"));
  spec.epsilon = spec.kind == PoisonKind::lsp ? 1.0f : 8.0f / 255.0f;
  spec.epsilon = p.value("epsilon", spec.epsilon);
  spec.norm = spec.kind == PoisonKind::lsp ? NormKind::l2 : NormKind::linf;
  if (p.contains("norm"))
    spec.norm = p.at("norm").get<std::string>() == "l2" ? NormKind::l2 : NormKind::linf;
  spec.surrogate_steps_per_round = p.value("surrogate_steps", spec.surrogate_steps_per_round);
  spec.delta_steps = p.value("delta_steps", spec.delta_steps);
  spec.step_size = p.value("step_size", spec.step_size);
  spec.max_rounds = p.value("max_rounds", spec.max_rounds);
  spec.stop_train_accuracy = p.value("stop_accuracy", spec.stop_train_accuracy);
  spec.fraction = p.value("fraction", spec.fraction);
  if (p.contains("targeted_class") && !p.at("targeted_class").is_null())
    spec.targeted_class = p.at("targeted_class").get<int>();
  if (p.contains("adaptive")) {
    const json& a = p.at("adaptive");
    spec.adaptive.plasma = a.value("plasma", false);
    spec.adaptive.channel_shuffle = a.value("channel_shuffle", false);
    spec.adaptive.trivial = a.value("trivial", false);
  }
  if (p.contains("surrogate")) {
    const json& s = p.at("surrogate");
    spec.surrogate.batch_size = s.value("batch", spec.surrogate.batch_size);
    spec.surrogate.lr = s.value("lr", spec.surrogate.lr);
    spec.surrogate.momentum = s.value("momentum", spec.surrogate.momentum);
    spec.surrogate.weight_decay = s.value("weight_decay", spec.surrogate.weight_decay);
  }
  spec.seed = p.value("seed", derive_key(seed, "poison.gen"));
  return spec;
}

TrainConfig build_train_config(const json& cfg, std::uint64_t seed) {
  TrainConfig tc;
  if (cfg.contains("train")) {
    const json& t = cfg.at("train");
    if (t.contains("variant")) tc.variant = variant_from_name(t.at("variant").get<std::string>());
    tc.epochs = t.value("epochs", tc.epochs);
    tc.warmup = t.value("warmup", tc.warmup);
    tc.repeats = t.value("k", tc.repeats);
    tc.batch_size = t.value("batch", tc.batch_size);
    tc.lr = t.value("lr", tc.lr);
    tc.momentum = t.value("momentum", tc.momentum);
    tc.weight_decay = t.value("weight_decay", tc.weight_decay);
    tc.eval_every = t.value("eval_every", tc.eval_every);
    tc.grad_clip = t.value("grad_clip", tc.grad_clip);
    tc.at_epsilon = t.value("at_epsilon", tc.at_epsilon);
    tc.at_steps = t.value("at_steps", tc.at_steps);
  }
  tc.seed = derive_key(seed, "trainer.run");
  return tc;
}

json metrics_to_json(const MetricsRecord& m) {
  json j;
  j["epoch"] = m.epoch;
  j["split"] = m.split;
  j["accuracy"] = m.accuracy;
  j["mean_loss"] = m.mean_loss;
  j["wall_ms"] = m.wall_ms;
  if (m.selected_loss_mean) j["selected_loss_mean"] = *m.selected_loss_mean;
  if (m.preselect_loss_mean) j["preselect_loss_mean"] = *m.preselect_loss_mean;
  return j;
}

// ---------------------------------------------------------------------------
// gen-poison

int cmd_gen_poison(const fs::path& config_path, const fs::path& out_dir) {
  const json cfg = load_config(config_path);
  const std::uint64_t seed = require_seed(cfg);
  if (!cfg.contains("poison")) throw ConfigError("gen-poison: config has no \"poison\" block");

  auto [train, test] = build_dataset(cfg, seed);
  const PoisonSpec spec = build_poison_spec(cfg.at("poison"), seed);

  const auto t0 = std::chrono::steady_clock::now();
  PerturbationSet pset;
  switch (spec.kind) {
    case PoisonKind::em: pset = em_poison(train, spec); break;
    case PoisonKind::lsp: pset = lsp_poison(train, spec); break;
    case PoisonKind::adaptive_em: pset = adaptive_em_poison(train, spec); break;
  }
  const double wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  fs::create_directories(out_dir);
  pset.save(out_dir / "poison.uep");

  json manifest;
  manifest["kind"] = poison_kind_name(pset.kind);
  manifest["budget"] = pset.epsilon;
  manifest["norm"] = pset.norm == NormKind::linf ? "linf" : "l2";
  manifest["granularity"] =
      pset.granularity == Granularity::sample_wise ? "sample_wise" : "class_wise";
  manifest["seed"] = seed;
  manifest["poison_seed"] = spec.seed;
  manifest["converged"] = pset.converged;
  manifest["surrogate_final_accuracy"] = pset.fit_accuracy;
  manifest["wall_ms"] = wall_ms;
  manifest["delta_count"] = pset.deltas.size();
  manifest["config_sha256"] = ueraser_cli::Sha256::of(read_file(config_path));
  if (spec.kind == PoisonKind::adaptive_em)
    manifest["adaptive"] = {{"plasma", spec.adaptive.plasma},
                            {"channel_shuffle", spec.adaptive.channel_shuffle},
                            {"trivial", spec.adaptive.trivial}};
  std::ofstream(out_dir / "manifest.json") << manifest.dump(2) << "\n";
  if (!pset.converged)
    std::cerr << "warning: surrogate did not reach the stop accuracy; best-so-far deltas kept\n";
  std::cout << "poison written to " << (out_dir / "poison.uep").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const fs::path& config_path, const fs::path& out_dir, const json& overrides) {
  json cfg = load_config(config_path);
  const std::string original_text = read_file(config_path);
  for (auto& [key, value] : overrides.items()) {
    if (key == "seed")
      cfg["seed"] = value;
    else
      cfg["train"][key] = value;
  }
  const std::uint64_t seed = require_seed(cfg);

  auto [train_ds, test_ds] = build_dataset(cfg, seed);

  json poison_echo;
  poison_echo["kind"] = "none";
  if (cfg.contains("poison") && !cfg.at("poison").is_null()) {
    const json& p = cfg.at("poison");
    if (!p.contains("file"))
      throw ConfigError("train: poison block must reference a generated poison \"file\"");
    const fs::path pfile = p.at("file").get<std::string>();
    const PerturbationSet pset = PerturbationSet::load(pfile);
    const double fraction = p.value("fraction", 1.0);
    std::optional<int> targeted;
    if (p.contains("targeted_class") && !p.at("targeted_class").is_null())
      targeted = p.at("targeted_class").get<int>();
    train_ds = apply_poison(train_ds, pset, fraction, targeted,
                            derive_key(seed, "poison.apply"));
    poison_echo["kind"] = poison_kind_name(pset.kind);
    poison_echo["file"] = pfile.string();
    poison_echo["budget"] = pset.epsilon;
    poison_echo["fraction"] = fraction;
    if (targeted) poison_echo["targeted_class"] = *targeted;
    poison_echo["poison_sha256"] = ueraser_cli::Sha256::of(read_file(pfile));
  }

  TrainConfig tc = build_train_config(cfg, seed);
  tc.validate();

  fs::create_directories(out_dir);
  const fs::path ckpt_path = out_dir / "checkpoint.uerm";
  const fs::path metrics_path = out_dir / "metrics.jsonl";

  // self-describing run directory
  json echo;
  echo["config"] = cfg;
  echo["config_sha256"] = ueraser_cli::Sha256::of(original_text);
  echo["overrides"] = overrides;
  echo["variant"] = variant_name(tc.variant);
  echo["poison"] = poison_echo;
  std::ofstream(out_dir / "config_echo.json") << echo.dump(2) << "\n";

  // resume: keep metrics up to the checkpoint epoch, continue from there;
  // a run already at E epochs only regenerates its report
  ModelParams resume_params = ModelParams::init(train_ds.height(), train_ds.width(),
                                                train_ds.num_classes, 0);
  const ModelParams* resume_ptr = nullptr;
  int start_epoch = 0;
  bool complete = false;
  if (fs::exists(ckpt_path)) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    resume_params = std::move(ck.params);
    if (ck.epoch >= tc.epochs) {
      complete = true;
      std::cout << "run already complete at epoch " << ck.epoch << "\n";
    } else {
      resume_ptr = &resume_params;
      start_epoch = ck.epoch;
      std::cout << "resuming from epoch " << start_epoch << "\n";
      if (fs::exists(metrics_path)) {
        std::ifstream in(metrics_path);
        std::vector<std::string> keep;
        std::string line;
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          const json j = json::parse(line);
          if (j.at("epoch").get<int>() <= start_epoch) keep.push_back(line);
        }
        std::ofstream out(metrics_path, std::ios::trunc);
        for (const auto& l : keep) out << l << "\n";
      }
    }
  }

  TrainResult result;
  double best_acc = 0.0;
  int best_epoch = 0;
  if (complete) {
    result.params = std::move(resume_params);
  } else {
    std::ofstream metrics(metrics_path, std::ios::app);
    const MetricsSink sink = [&](const MetricsRecord& m) {
      metrics << metrics_to_json(m).dump() << "\n";
      metrics.flush();
    };
    const CheckpointSink ckpt_sink = [&](const ModelParams& p, int epoch) {
      save_checkpoint(ckpt_path, p, epoch);
    };
    result = train(tc, train_ds, test_ds, sink, ckpt_sink, resume_ptr, start_epoch);
  }
  // best accuracy over the whole metrics history (covers resumed runs)
  if (fs::exists(metrics_path)) {
    std::ifstream in(metrics_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      if (j.at("split") == "test" && j.at("accuracy").get<double>() > best_acc) {
        best_acc = j.at("accuracy").get<double>();
        best_epoch = j.at("epoch").get<int>();
      }
    }
  }

  const Evaluation final_eval = evaluate(result.params, test_ds);
  json report;
  report["variant"] = variant_name(tc.variant);
  report["poison"] = poison_echo;
  report["epochs"] = tc.epochs;
  report["final_test_accuracy"] = final_eval.accuracy;
  report["best_test_accuracy"] = best_acc;
  report["best_epoch"] = best_epoch;
  report["confusion"] = final_eval.confusion;
  report["config_sha256"] = echo["config_sha256"];
  std::ofstream(out_dir / "report.json") << report.dump(2) << "\n";

  std::cout << "final test accuracy " << std::fixed << std::setprecision(4)
            << final_eval.accuracy << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const fs::path& ckpt_path, const fs::path& dataset_path) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  LabeledDataset ds;
  if (fs::is_directory(dataset_path)) {
    auto [train, test] = load_cifar10(dataset_path);
    ds = std::move(test);
  } else {
    ds = load_dataset(dataset_path);
  }
  const Evaluation ev = evaluate(ck.params, ds);
  json out;
  out["accuracy"] = ev.accuracy;
  out["mean_loss"] = ev.mean_loss;
  out["confusion"] = ev.confusion;
  out["examples"] = ds.size();
  std::cout << out.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report

struct RunRow {
  std::string name;
  std::string variant;
  std::string poison;
  double final_acc = 0.0;
  double best_acc = 0.0;
  int epochs = 0;
};

int cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
  if (run_dirs.empty()) throw ConfigError("report: at least one run directory is required");

  std::vector<RunRow> rows;
  fs::create_directories(out_dir);
  for (const fs::path& dir : run_dirs) {
    const fs::path report_path = dir / "report.json";
    const fs::path metrics_path = dir / "metrics.jsonl";
    if (!fs::exists(report_path) || !fs::exists(metrics_path)) {
      std::cerr << "warning: skipping " << dir.string() << " (missing report or metrics)\n";
      continue;
    }
    json report;
    try {
      report = json::parse(read_file(report_path));
    } catch (const json::exception&) {
      std::cerr << "warning: skipping " << dir.string() << " (unreadable report)\n";
      continue;
    }
    RunRow row;
    row.name = dir.filename().string().empty() ? dir.string() : dir.filename().string();
    row.variant = report.value("variant", "?");
    row.poison = report.contains("poison") ? report.at("poison").value("kind", "none") : "none";
    row.final_acc = report.value("final_test_accuracy", 0.0);
    row.best_acc = report.value("best_test_accuracy", 0.0);
    row.epochs = report.value("epochs", 0);
    rows.push_back(row);

    // per-run accuracy curve
    std::map<int, std::pair<double, double>> curve;  // epoch -> (train, test)
    std::ifstream in(metrics_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      const int epoch = j.at("epoch").get<int>();
      if (j.at("split") == "train")
        curve[epoch].first = j.at("accuracy").get<double>();
      else
        curve[epoch].second = j.at("accuracy").get<double>();
    }
    std::ofstream cs(out_dir / (row.name + "_curve.csv"));
    cs << "epoch,train_accuracy,test_accuracy\n";
    for (const auto& [epoch, accs] : curve)
      cs << epoch << "," << accs.first << "," << accs.second << "\n";
  }

  std::ostringstream table;
  table << std::left << std::setw(24) << "run" << std::setw(10) << "variant" << std::setw(14)
        << "poison" << std::right << std::setw(12) << "final acc" << std::setw(12) << "best acc"
        << std::setw(9) << "epochs" << "\n";
  table << std::string(81, '-') << "\n";
  for (const auto& r : rows)
    table << std::left << std::setw(24) << r.name << std::setw(10) << r.variant << std::setw(14)
          << r.poison << std::right << std::setw(12) << std::fixed << std::setprecision(4)
          << r.final_acc << std::setw(12) << r.best_acc << std::setw(9) << r.epochs << "\n";

  std::cout << table.str();
  std::ofstream(out_dir / "table.txt") << table.str();
  std::ofstream csv(out_dir / "table.csv");
  csv << "run,variant,poison,final_test_accuracy,best_test_accuracy,epochs\n";
  for (const auto& r : rows)
    csv << r.name << "," << r.variant << "," << r.poison << "," << r.final_acc << ","
        << r.best_acc << "," << r.epochs << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unlearnable-example poisons and adversarial-augmentation defenses"};
  app.require_subcommand(1);

  std::string config_file, out_dir = "run";
  auto* gen = app.add_subcommand("gen-poison", "generate a perturbation set");
  gen->add_option("--config", config_file, "experiment config (json)")->required();
  gen->add_option("--out", out_dir, "output directory");

  std::string train_config, train_out = "run";
  std::string variant_override;
  int k_override = -1, warmup_override = -1;
  std::int64_t seed_override = -1;
  auto* tr = app.add_subcommand("train", "train a variant, writing metrics and checkpoints");
  tr->add_option("--config", train_config, "experiment config (json)")->required();
  tr->add_option("--out", train_out, "run directory");
  tr->add_option("--variant", variant_override, "plain|lite|ueraser|max|at");
  tr->add_option("--k", k_override, "repeated augmentation samples K");
  tr->add_option("--warmup", warmup_override, "error-maximizing epochs W");
  tr->add_option("--seed", seed_override, "top-level seed");

  std::string ckpt_file, dataset_arg;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  ev->add_option("--ckpt", ckpt_file, "checkpoint file")->required();
  ev->add_option("--dataset", dataset_arg, "dataset file or cifar-10 directory")->required();

  std::vector<std::string> report_dirs;
  std::string report_out = ".";
  auto* rp = app.add_subcommand("report", "tabulate completed runs");
  rp->add_option("dirs", report_dirs, "run directories");
  rp->add_option("--out", report_out, "where to write table and curve files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_poison(config_file, out_dir);
    if (tr->parsed()) {
      json overrides = json::object();
      if (!variant_override.empty()) overrides["variant"] = variant_override;
      if (k_override >= 0) overrides["k"] = k_override;
      if (warmup_override >= 0) overrides["warmup"] = warmup_override;
      if (seed_override >= 0) overrides["seed"] = seed_override;
      return cmd_train(train_config, train_out, overrides);
    }
    if (ev->parsed()) return cmd_eval(ckpt_file, dataset_arg);
    if (rp->parsed()) {
      std::vector<fs::path> dirs(report_dirs.begin(), report_dirs.end());
      return cmd_report(dirs, report_out);
    }
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const InputError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
