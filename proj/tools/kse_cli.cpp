// kse: train encrypted sub-models, attack them and emit robustness reports.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 runtime failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kse/kse.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int exit_config = 2;
constexpr int exit_data = 3;
constexpr int exit_runtime = 4;

int exit_code_for(kse::Errc code) {
  switch (code) {
    case kse::Errc::invalid_config:
    case kse::Errc::invalid_n_or_s:
    case kse::Errc::duplicate_seeds:
    case kse::Errc::invalid_target:
      return exit_config;
    case kse::Errc::io_error:
    case kse::Errc::bad_magic:
    case kse::Errc::version_mismatch:
    case kse::Errc::malformed_record:
    case kse::Errc::shape_mismatch:
    case kse::Errc::dimension_mismatch:
    case kse::Errc::invalid_label:
      return exit_data;
    default:
      return exit_runtime;
  }
}

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string format = "table";
  bool trace = false;
  std::optional<std::size_t> num_eval;
};

kse::ExperimentConfig resolve_config(const CommonOptions& o) {
  kse::ExperimentConfig cfg = o.config_path.empty() ? kse::default_config() : kse::load_config(o.config_path);
  if (o.seed) {
    // A new master seed re-derives every seed in the run.
    cfg.seed = *o.seed;
    cfg.resolve_seeds();
  }
  if (o.num_eval) cfg.num_eval = *o.num_eval;
  if (!o.out_dir.empty()) cfg.output_dir = o.out_dir;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw kse::Error(kse::Errc::io_error, "cannot write " + path.string());
  out << text;
}

// Table on stdout (or csv / jsonl when asked); report.jsonl and summary.csv
// always land in the output directory.
void emit_report(const kse::EvalReport& report, const fs::path& out_dir, const std::string& format) {
  fs::create_directories(out_dir);
  write_text(out_dir / "report.jsonl", kse::report_jsonl(report));
  write_text(out_dir / "summary.csv", kse::report_csv(report));
  if (format == "csv") {
    std::cout << kse::report_csv(report);
  } else if (format == "jsonl") {
    std::cout << kse::report_jsonl(report);
  } else {
    std::cout << kse::report_table(report);
  }
}

struct OpenStreams {
  std::ofstream train_log;
  std::ofstream trace;
};

kse::RunHooks make_hooks(const CommonOptions& o, const fs::path& out_dir, OpenStreams& streams, bool with_train_log) {
  fs::create_directories(out_dir);
  kse::RunHooks hooks;
  hooks.progress = &std::cerr;
  if (with_train_log) {
    streams.train_log.open(out_dir / "train_log.jsonl", std::ios::trunc);
    hooks.train_log = &streams.train_log;
  }
  if (o.trace) {
    streams.trace.open(out_dir / "traces.jsonl", std::ios::trunc);
    hooks.trace = &streams.trace;
  }
  return hooks;
}

int cmd_train(const CommonOptions& o) {
  const kse::ExperimentConfig cfg = resolve_config(o);
  const fs::path out_dir = cfg.output_dir;
  OpenStreams streams;
  const kse::RunHooks hooks = make_hooks(o, out_dir, streams, true);
  const kse::ExperimentData data = kse::load_experiment_data(cfg);
  const kse::TrainedModels models = kse::train_models(cfg, data.train, hooks);

  std::vector<std::string> checkpoints;
  for (std::size_t i = 0; i < models.ensemble.size(); ++i) {
    const auto& m = models.ensemble.members()[i];
    const std::string name = "member_" + std::to_string(i) + ".ksmd";
    kse::save_model(m.model, out_dir / name);
    kse::save_key(m.key, out_dir / ("member_" + std::to_string(i) + ".ksky"));
    checkpoints.push_back(name);
  }
  kse::save_model(models.baseline.model, out_dir / "baseline.ksmd");
  write_text(out_dir / "manifest.json",
             kse::manifest_json(models.ensemble, checkpoints, std::string("baseline.ksmd")).dump(2) + "\n");
  write_text(out_dir / "config.json", kse::to_json(cfg).dump(2) + "\n");
  std::cout << "wrote " << (out_dir / "manifest.json").string() << '\n';
  return 0;
}

int cmd_attack(const CommonOptions& o, const std::string& manifest, const std::string& attack_list) {
  kse::ExperimentConfig cfg = resolve_config(o);
  if (!attack_list.empty()) {
    cfg.attacks.clear();
    std::stringstream ss(attack_list);
    for (std::string name; std::getline(ss, name, ',');)
      if (!name.empty()) cfg.attacks.push_back(kse::parse_attack(name));
    cfg.validate();
  }
  const fs::path out_dir = cfg.output_dir;
  OpenStreams streams;
  const kse::RunHooks hooks = make_hooks(o, out_dir, streams, false);
  const kse::LoadedManifest loaded = kse::load_manifest(manifest);
  const kse::ExperimentData data = kse::load_experiment_data(cfg);

  kse::EvalReport report;
  report.config = kse::to_json(cfg);
  report.config_digest = kse::config_digest(cfg);
  report.metadata = kse::report_metadata(cfg, data.test.size());
  report.metadata["manifest"] = manifest;
  try {
    std::vector<std::pair<std::string, const kse::Oracle*>> rows;
    std::optional<kse::SinglePipeline> baseline;
    if (loaded.baseline) {
      baseline.emplace(*loaded.baseline, cfg.white_box_mode);
      rows.emplace_back("baseline", &*baseline);
    }
    kse::EnsemblePipeline simple(loaded.ensemble, false, cfg.white_box_mode);
    kse::EnsemblePipeline random(loaded.ensemble, true, cfg.white_box_mode);
    rows.emplace_back("simple-ensemble", &simple);
    rows.emplace_back("random-ensemble", &random);
    kse::evaluate_pipelines(cfg, data.test, rows, report, hooks);
    report.complete = true;
  } catch (const std::exception& ex) {
    report.failure = ex.what();
    emit_report(report, out_dir, o.format);
    throw;
  }
  emit_report(report, out_dir, o.format);
  return 0;
}

int cmd_evaluate(const CommonOptions& o) {
  const kse::ExperimentConfig cfg = resolve_config(o);
  const fs::path out_dir = cfg.output_dir;
  OpenStreams streams;
  const kse::RunHooks hooks = make_hooks(o, out_dir, streams, true);
  const auto start = std::chrono::steady_clock::now();
  kse::EvalReport report;
  try {
    kse::run_experiment(cfg, report, hooks);
  } catch (const std::exception&) {
    emit_report(report, out_dir, o.format);
    throw;
  }
  emit_report(report, out_dir, o.format);
  // Wall-clock time stays out of the report so reruns are byte-identical.
  std::cerr << "elapsed " << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s\n";
  return 0;
}

int cmd_keys_gen(std::uint64_t seed, std::size_t block, std::size_t channels, const std::string& out) {
  const kse::ShuffleKey key = kse::gen_key(seed, block, channels);
  kse::save_key(key, out);
  std::cout << key.key_id() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Keyed block-shuffling ensembles: training, attacks and robustness reports"};
  app.require_subcommand(1);

  CommonOptions common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "Experiment config (JSON)");
    sub->add_option("--seed", common.seed, "Master seed; re-derives every seed");
    sub->add_option("--out-dir", common.out_dir, "Output directory");
    sub->add_option("--format", common.format, "Standard output format")
        ->check(CLI::IsMember({"table", "csv", "jsonl"}));
    sub->add_flag("--trace", common.trace, "Write attack traces to traces.jsonl");
    sub->add_option("--num-eval", common.num_eval, "Number of test examples to evaluate");
  };

  auto* train = app.add_subcommand("train", "Train the baseline and encrypted sub-models, write checkpoints + manifest");
  add_common(train);

  std::string manifest;
  std::string attack_list;
  auto* attack = app.add_subcommand("attack", "Run the attack suite against a trained manifest");
  add_common(attack);
  attack->add_option("--model", manifest, "Ensemble manifest")->required();
  attack->add_option("--attacks", attack_list, "Comma-separated list: fgsm,pgd,pgd-t,square");

  auto* evaluate = app.add_subcommand("evaluate", "Train and evaluate baseline, simple and random ensembles");
  add_common(evaluate);

  std::string init_out = "config.json";
  std::uint64_t init_seed = 20230;
  auto* init = app.add_subcommand("init-config", "Write the default config");
  init->add_option("--out", init_out, "Destination file");
  init->add_option("--seed", init_seed, "Master seed");

  auto* keys = app.add_subcommand("keys", "Key management");
  keys->require_subcommand(1);
  std::uint64_t key_seed = 0;
  std::size_t key_block = 4;
  std::size_t key_channels = 3;
  std::string key_out;
  auto* gen = keys->add_subcommand("gen", "Generate a key file");
  gen->add_option("--seed", key_seed, "Key seed")->required();
  gen->add_option("--block", key_block, "Block size M")->required();
  gen->add_option("--channels", key_channels, "Channels C")->required();
  gen->add_option("--out", key_out, "Destination file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_config;
  }

  try {
    if (*train) return cmd_train(common);
    if (*attack) return cmd_attack(common, manifest, attack_list);
    if (*evaluate) return cmd_evaluate(common);
    if (*init) {
      std::ofstream out(init_out, std::ios::trunc);
      if (!out) throw kse::Error(kse::Errc::io_error, "cannot write " + init_out);
      out << kse::to_json(kse::default_config(init_seed)).dump(2) << '\n';
      return 0;
    }
    if (*gen) return cmd_keys_gen(key_seed, key_block, key_channels, key_out);
  } catch (const kse::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_runtime;
  }
  return 0;
}
