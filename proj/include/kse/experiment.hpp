#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "kse/attacks.hpp"
#include "kse/dataset.hpp"
#include "kse/ensemble.hpp"
#include "kse/eval.hpp"
#include "kse/model.hpp"
#include "kse/pipeline.hpp"
#include "kse/transform.hpp"

namespace kse {

inline constexpr int config_version = 1;
inline constexpr std::string_view library_version = "0.3.0";

// ---------------------------------------------------------------------------
// Experiment configuration
//
// JSON document, see README for the schema. Any seed missing from the file
// is derived from the master `seed`; the resolved config (every seed
// explicit) is what reports embed and digest.

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" | "cifar10"
  SyntheticSpec synthetic;
  std::size_t test_per_class = 200;
  std::string cifar_train;
  std::string cifar_test;
  std::size_t max_train = 0;  // 0 keeps every training record
};

struct EnsembleConfig {
  std::size_t n = 4;
  std::size_t s = 3;
  std::size_t block_size = 4;
  std::vector<std::uint64_t> key_seeds;
  std::uint64_t selection_seed = 0;
};

struct ExperimentConfig {
  int version = config_version;
  std::uint64_t seed = 20230;
  DataConfig data;
  TrainConfig train;
  std::uint64_t baseline_seed = 0;
  EnsembleConfig ensemble;
  AttackConfig attack;
  std::vector<AttackKind> attacks = {AttackKind::pgd, AttackKind::pgd_targeted, AttackKind::square};
  GradientMode white_box_mode = GradientMode::key_unaware;
  std::size_t num_eval = 100;
  std::string output_dir = "kse-out";

  void validate() const {
    if (version != config_version) throw Error(Errc::invalid_config, "unsupported config version");
    if (data.source != "synthetic" && data.source != "cifar10")
      throw Error(Errc::invalid_config, "data.source must be 'synthetic' or 'cifar10'");
    if (data.source == "cifar10" && (data.cifar_train.empty() || data.cifar_test.empty()))
      throw Error(Errc::invalid_config, "cifar10 source needs data.cifar_train and data.cifar_test");
    train.validate();
    attack.validate();
    if (attacks.empty()) throw Error(Errc::invalid_config, "attack list is empty");
    if (ensemble.n < RandomEnsemble::min_members || ensemble.s < RandomEnsemble::min_selection || ensemble.s > ensemble.n)
      throw Error(Errc::invalid_config, "need ensemble.n >= 4 and 3 <= ensemble.s <= ensemble.n");
    if (ensemble.key_seeds.size() != ensemble.n) throw Error(Errc::invalid_config, "need ensemble.n key seeds");
    if (ensemble.block_size == 0) throw Error(Errc::invalid_config, "block_size must be >= 1");
  }

  /// Re-derives every seed from the master seed.
  void resolve_seeds() {
    const RngStream master(seed);
    data.synthetic.seed = master.derive("data").seed();
    train.rng_seed = master.derive("train").seed();
    baseline_seed = master.derive("baseline").seed();
    ensemble.selection_seed = master.derive("selection").seed();
    attack.rng_seed = master.derive("attack").seed();
    ensemble.key_seeds.clear();
    for (std::size_t i = 0; i < ensemble.n; ++i)
      ensemble.key_seeds.push_back(master.derive("key/" + std::to_string(i)).seed());
  }
};

/// Defaults with every seed derived from `seed`.
inline ExperimentConfig default_config(std::uint64_t seed = 20230) {
  ExperimentConfig c;
  c.seed = seed;
  c.resolve_seeds();
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  json attacks = json::array();
  for (auto k : c.attacks) attacks.push_back(std::string(to_string(k)));
  const auto& s = c.data.synthetic;
  json j = {
      {"version", c.version},
      {"seed", c.seed},
      {"data",
       {{"source", c.data.source},
        {"num_classes", s.num_classes},
        {"height", s.height},
        {"width", s.width},
        {"channels", s.channels},
        {"train_per_class", s.per_class},
        {"test_per_class", c.data.test_per_class},
        {"amplitude", s.amplitude},
        {"noise", s.noise},
        {"density", s.density},
        {"seed", s.seed},
        {"cifar_train", c.data.cifar_train},
        {"cifar_test", c.data.cifar_test},
        {"max_train", c.data.max_train}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"learning_rate", c.train.learning_rate},
        {"momentum", c.train.momentum},
        {"hidden", c.train.hidden},
        {"seed", c.train.rng_seed},
        {"baseline_seed", c.baseline_seed}}},
      {"ensemble",
       {{"n", c.ensemble.n},
        {"s", c.ensemble.s},
        {"block_size", c.ensemble.block_size},
        {"key_seeds", c.ensemble.key_seeds},
        {"selection_seed", c.ensemble.selection_seed}}},
      {"attack",
       {{"epsilon", c.attack.epsilon},
        {"step_size", c.attack.step_size ? json(*c.attack.step_size) : json(nullptr)},
        {"iterations", c.attack.iterations},
        {"restarts", c.attack.restarts},
        {"random_start", c.attack.random_start},
        {"query_budget", c.attack.query_budget},
        {"p_init", c.attack.p_init},
        {"seed", c.attack.rng_seed},
        {"attacks", attacks},
        {"white_box_mode", std::string(to_string(c.white_box_mode))}}},
      {"eval", {{"num_eval", c.num_eval}}},
      {"output", {{"dir", c.output_dir}}},
  };
  return j;
}

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, std::initializer_list<std::string_view> known, std::string_view where) {
  if (!obj.is_object()) throw Error(Errc::invalid_config, std::string(where) + " must be an object");
  for (const auto& [k, v] : obj.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw Error(Errc::invalid_config, "unknown key '" + k + "' in " + std::string(where));
  }
}

template <typename T>
void read_opt(const nlohmann::json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace detail

/// Parses a config document. Seeds absent from the document are derived from
/// the master seed; present ones are kept verbatim.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read_opt;
  ExperimentConfig c;
  try {
    detail::reject_unknown(j, {"version", "seed", "data", "train", "ensemble", "attack", "eval", "output"}, "config");
    c.version = j.at("version").get<int>();
    if (c.version != config_version) throw Error(Errc::invalid_config, "unsupported config version");
    read_opt(j, "seed", c.seed);
    c.resolve_seeds();

    const auto empty = nlohmann::json::object();
    const auto& d = j.value("data", empty);
    detail::reject_unknown(d,
                           {"source", "num_classes", "height", "width", "channels", "train_per_class", "test_per_class",
                            "amplitude", "noise", "density", "seed", "cifar_train", "cifar_test", "max_train"},
                           "data");
    auto& s = c.data.synthetic;
    read_opt(d, "source", c.data.source);
    read_opt(d, "num_classes", s.num_classes);
    read_opt(d, "height", s.height);
    read_opt(d, "width", s.width);
    read_opt(d, "channels", s.channels);
    read_opt(d, "train_per_class", s.per_class);
    read_opt(d, "test_per_class", c.data.test_per_class);
    read_opt(d, "amplitude", s.amplitude);
    read_opt(d, "noise", s.noise);
    read_opt(d, "density", s.density);
    read_opt(d, "seed", s.seed);
    read_opt(d, "cifar_train", c.data.cifar_train);
    read_opt(d, "cifar_test", c.data.cifar_test);
    read_opt(d, "max_train", c.data.max_train);

    const auto& t = j.value("train", empty);
    detail::reject_unknown(t, {"epochs", "batch_size", "learning_rate", "momentum", "hidden", "seed", "baseline_seed"},
                           "train");
    read_opt(t, "epochs", c.train.epochs);
    read_opt(t, "batch_size", c.train.batch_size);
    read_opt(t, "learning_rate", c.train.learning_rate);
    read_opt(t, "momentum", c.train.momentum);
    read_opt(t, "hidden", c.train.hidden);
    read_opt(t, "seed", c.train.rng_seed);
    read_opt(t, "baseline_seed", c.baseline_seed);

    const auto& e = j.value("ensemble", empty);
    detail::reject_unknown(e, {"n", "s", "block_size", "key_seeds", "selection_seed"}, "ensemble");
    read_opt(e, "n", c.ensemble.n);
    read_opt(e, "s", c.ensemble.s);
    read_opt(e, "block_size", c.ensemble.block_size);
    read_opt(e, "selection_seed", c.ensemble.selection_seed);
    if (e.contains("key_seeds")) {
      c.ensemble.key_seeds = e.at("key_seeds").get<std::vector<std::uint64_t>>();
    } else {
      c.ensemble.key_seeds.clear();
      for (std::size_t i = 0; i < c.ensemble.n; ++i)
        c.ensemble.key_seeds.push_back(RngStream(c.seed).derive("key/" + std::to_string(i)).seed());
    }

    const auto& a = j.value("attack", empty);
    detail::reject_unknown(a,
                           {"epsilon", "step_size", "iterations", "restarts", "random_start", "query_budget", "p_init",
                            "seed", "attacks", "white_box_mode"},
                           "attack");
    read_opt(a, "epsilon", c.attack.epsilon);
    if (a.contains("step_size") && !a.at("step_size").is_null()) c.attack.step_size = a.at("step_size").get<double>();
    read_opt(a, "iterations", c.attack.iterations);
    read_opt(a, "restarts", c.attack.restarts);
    read_opt(a, "random_start", c.attack.random_start);
    read_opt(a, "query_budget", c.attack.query_budget);
    read_opt(a, "p_init", c.attack.p_init);
    read_opt(a, "seed", c.attack.rng_seed);
    if (a.contains("attacks")) {
      c.attacks.clear();
      for (const auto& name : a.at("attacks")) c.attacks.push_back(parse_attack(name.get<std::string>()));
    }
    if (a.contains("white_box_mode")) c.white_box_mode = parse_gradient_mode(a.at("white_box_mode").get<std::string>());

    const auto& ev = j.value("eval", empty);
    detail::reject_unknown(ev, {"num_eval"}, "eval");
    read_opt(ev, "num_eval", c.num_eval);
    const auto& out = j.value("output", empty);
    detail::reject_unknown(out, {"dir"}, "output");
    read_opt(out, "dir", c.output_dir);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::invalid_config, ex.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::invalid_config, std::string("config parse error: ") + ex.what());
  }
  return config_from_json(j);
}

/// FNV-1a of the canonical (sorted-key, compact) JSON dump, as 16 hex digits.
inline std::string config_digest(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(kse::detail::fnv1a64(to_json(c).dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Datasets for an experiment

struct ExperimentData {
  Dataset train;
  Dataset test;
};

inline ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  if (cfg.data.source == "cifar10") {
    d.train = load_cifar10_binary(cfg.data.cifar_train, "train");
    d.test = load_cifar10_binary(cfg.data.cifar_test, "test");
    if (cfg.data.max_train > 0) d.train = d.train.head(cfg.data.max_train);
  } else {
    SyntheticSpec spec = cfg.data.synthetic;
    spec.split = "train";
    d.train = gen_synthetic(spec);
    spec.split = "test";
    spec.per_class = cfg.data.test_per_class;
    d.test = gen_synthetic(spec);
  }
  d.test = d.test.head(cfg.num_eval);
  if (d.train.empty()) throw Error(Errc::shape_mismatch, "training set is empty");
  return d;
}

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string model;
  WorstCaseResult result;
};

struct EvalReport {
  nlohmann::json config;  // resolved config copy
  std::string config_digest;
  nlohmann::json metadata;
  std::vector<ReportRow> rows;
  bool complete = false;
  std::string failure;
};

struct RunHooks {
  std::ostream* train_log = nullptr;  // {model, epoch, loss, train_acc} lines
  std::ostream* trace = nullptr;      // square attack traces
  std::ostream* progress = nullptr;   // human-readable progress
};

namespace detail {

inline std::string bitmap(const std::vector<bool>& v) {
  std::string s(v.size(), '0');
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i]) s[i] = '1';
  return s;
}

inline void log_epoch(std::ostream* os, const std::string& model, const EpochRecord& r) {
  if (os == nullptr) return;
  *os << nlohmann::json{{"model", model}, {"epoch", r.epoch}, {"loss", r.loss}, {"train_acc", r.train_acc}}.dump()
      << '\n';
}

}  // namespace detail

/// Evaluates labelled pipelines with the configured attack suite and appends
/// one row per pipeline to `report`.
inline void evaluate_pipelines(const ExperimentConfig& cfg, const Dataset& test,
                               const std::vector<std::pair<std::string, const Oracle*>>& pipelines, EvalReport& report,
                               const RunHooks& hooks = {}) {
  for (const auto& [name, pipeline] : pipelines) {
    if (hooks.progress) *hooks.progress << "evaluating " << name << " on " << test.size() << " examples\n";
    OutcomeObserver observer;
    if (hooks.trace) {
      observer = [&hooks, &name](AttackKind kind, std::size_t example, const AttackOutcome& out) {
        for (const auto& t : out.trace) {
          *hooks.trace << nlohmann::json{{"pipeline", name},     {"attack", std::string(to_string(kind))},
                                         {"example", example},   {"iteration", t.iteration},
                                         {"loss", t.loss},       {"accepted", t.accepted},
                                         {"queries", t.queries}}
                              .dump()
                       << '\n';
        }
      };
    }
    report.rows.push_back(
        {name, worst_case_eval(*pipeline, test, cfg.attacks, cfg.attack, observer, hooks.trace != nullptr)});
  }
}

inline nlohmann::json report_metadata(const ExperimentConfig& cfg, std::size_t num_eval) {
  nlohmann::json attacks = nlohmann::json::array();
  for (auto k : cfg.attacks) attacks.push_back(std::string(to_string(k)));
  return {{"library_version", library_version},
          {"num_eval", num_eval},
          {"epsilon", cfg.attack.epsilon},
          {"query_budget", cfg.attack.query_budget},
          {"white_box_mode", std::string(to_string(cfg.white_box_mode))},
          {"attacks", attacks},
          {"n", cfg.ensemble.n},
          {"s", cfg.ensemble.s},
          {"block_size", cfg.ensemble.block_size}};
}

/// Trained models of one experiment.
struct TrainedModels {
  Member baseline;
  RandomEnsemble ensemble;
};

inline TrainedModels train_models(const ExperimentConfig& cfg, const Dataset& train, const RunHooks& hooks = {}) {
  const std::size_t channels = train.images.front().channels;
  TrainConfig base_cfg = cfg.train;
  base_cfg.rng_seed = cfg.baseline_seed;
  ShuffleKey plain = identity_key(cfg.ensemble.block_size, channels);
  if (hooks.progress) *hooks.progress << "training baseline\n";
  Mlp base = train_submodel(train, plain, base_cfg,
                            [&hooks](const EpochRecord& r) { detail::log_epoch(hooks.train_log, "baseline", r); });
  if (hooks.progress) *hooks.progress << "training " << cfg.ensemble.n << " encrypted sub-models\n";
  RandomEnsemble e = build_ensemble(train, cfg.ensemble.n, cfg.ensemble.s, cfg.ensemble.key_seeds, cfg.train,
                                    cfg.ensemble.block_size, cfg.ensemble.selection_seed,
                                    [&hooks](std::size_t i, const EpochRecord& r) {
                                      detail::log_epoch(hooks.train_log, "member-" + std::to_string(i), r);
                                    });
  return {Member{std::move(plain), std::move(base)}, std::move(e)};
}

/// Baseline, simple-ensemble and random-ensemble rows for already trained models.
inline void evaluate_models(const ExperimentConfig& cfg, const Dataset& test, const TrainedModels& models,
                            EvalReport& report, const RunHooks& hooks = {}) {
  SinglePipeline baseline(models.baseline, cfg.white_box_mode);
  EnsemblePipeline simple(models.ensemble, false, cfg.white_box_mode);
  EnsemblePipeline random(models.ensemble, true, cfg.white_box_mode);
  evaluate_pipelines(cfg, test, {{"baseline", &baseline}, {"simple-ensemble", &simple}, {"random-ensemble", &random}},
                     report, hooks);
}

/// Full pipeline: data, baseline model, N encrypted sub-models, attack suite
/// on the three rows. `report` is filled as rows complete; on failure it is
/// left with complete = false and the error message, and the error rethrown.
inline void run_experiment(const ExperimentConfig& cfg, EvalReport& report, const RunHooks& hooks = {}) {
  report = EvalReport{};
  report.config = to_json(cfg);
  report.config_digest = config_digest(cfg);
  try {
    cfg.validate();
    const ExperimentData data = load_experiment_data(cfg);
    report.metadata = report_metadata(cfg, data.test.size());
    const TrainedModels models = train_models(cfg, data.train, hooks);
    evaluate_models(cfg, data.test, models, report, hooks);
    report.complete = true;
  } catch (const std::exception& ex) {
    report.complete = false;
    report.failure = ex.what();
    throw;
  }
}

inline EvalReport run_experiment(const ExperimentConfig& cfg, const RunHooks& hooks = {}) {
  EvalReport r;
  run_experiment(cfg, r, hooks);
  return r;
}

// ---------------------------------------------------------------------------
// Report formats

inline std::string format_percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

/// Line-delimited JSON: one meta record, one record per row (with per-example
/// bitmaps), one status record.
inline std::string report_jsonl(const EvalReport& r) {
  std::ostringstream os;
  os << nlohmann::json{{"type", "meta"},
                       {"config", r.config},
                       {"config_digest", r.config_digest},
                       {"metadata", r.metadata}}
            .dump()
     << '\n';
  for (const auto& row : r.rows) {
    nlohmann::json attacks = nlohmann::json::array();
    for (const auto& col : row.result.columns)
      attacks.push_back({{"attack", std::string(to_string(col.kind))},
                         {"robust_pct", col.accuracy},
                         {"robust_bitmap", detail::bitmap(col.robust)}});
    os << nlohmann::json{{"type", "row"},
                         {"model", row.model},
                         {"n", row.result.n},
                         {"clean_pct", row.result.clean_accuracy},
                         {"clean_bitmap", detail::bitmap(row.result.clean_correct)},
                         {"attacks", attacks},
                         {"combined_pct", row.result.combined_accuracy},
                         {"combined_bitmap", detail::bitmap(row.result.combined_robust)}}
              .dump()
       << '\n';
  }
  nlohmann::json status = {{"type", "status"}, {"complete", r.complete}};
  if (!r.complete) status["failure"] = r.failure;
  os << status.dump() << '\n';
  return os.str();
}

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "model,clean";
  if (!r.rows.empty())
    for (const auto& col : r.rows.front().result.columns) os << ',' << to_string(col.kind);
  os << ",combined\n";
  for (const auto& row : r.rows) {
    os << row.model << ',' << format_percent(row.result.clean_accuracy);
    for (const auto& col : row.result.columns) os << ',' << format_percent(col.accuracy);
    os << ',' << format_percent(row.result.combined_accuracy) << '\n';
  }
  return os.str();
}

inline std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  std::vector<std::string> header{"Model", "Clean(%)"};
  if (!r.rows.empty())
    for (const auto& col : r.rows.front().result.columns) header.push_back(std::string(to_string(col.kind)) + "(%)");
  header.push_back("Combined(%)");
  std::vector<std::vector<std::string>> cells{header};
  for (const auto& row : r.rows) {
    std::vector<std::string> line{row.model, format_percent(row.result.clean_accuracy)};
    for (const auto& col : row.result.columns) line.push_back(format_percent(col.accuracy));
    line.push_back(format_percent(row.result.combined_accuracy));
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  for (std::size_t li = 0; li < cells.size(); ++li) {
    for (std::size_t i = 0; i < cells[li].size(); ++i) {
      if (i) os << " | ";
      os << std::setw(static_cast<int>(width[i])) << (i == 0 ? std::left : std::right) << cells[li][i];
    }
    os << '\n';
    if (li == 0) {
      for (std::size_t i = 0; i < width.size(); ++i) os << (i ? "-+-" : "") << std::string(width[i], '-');
      os << '\n';
    }
  }
  if (r.metadata.contains("num_eval"))
    os << "examples: " << r.metadata["num_eval"] << ", white-box mode: " << r.metadata.value("white_box_mode", "")
       << '\n';
  if (!r.complete) os << "INCOMPLETE: " << r.failure << '\n';
  return os.str();
}

}  // namespace kse
