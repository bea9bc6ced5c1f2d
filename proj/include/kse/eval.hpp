#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kse/attacks.hpp"
#include "kse/dataset.hpp"
#include "kse/pipeline.hpp"
#include "kse/rng.hpp"

namespace kse {

namespace detail {

inline double percent(std::size_t hits, std::size_t n) {
  return n == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

inline std::size_t count_true(const std::vector<bool>& v) {
  return static_cast<std::size_t>(std::count(v.begin(), v.end(), true));
}

// Per-example stream: independent of evaluation order.
inline RngStream example_stream(std::uint64_t seed, std::string_view what, std::size_t index) {
  return RngStream(seed).derive(std::string(what) + "/" + std::to_string(index));
}

inline void check_compatible(const Oracle& pipeline, const Dataset& data) {
  data.validate();
  if (!data.empty() && data.num_classes != pipeline.num_classes())
    throw Error(Errc::shape_mismatch, "dataset and pipeline disagree on the number of classes");
}

}  // namespace detail

/// argmax-correct mask; randomized pipelines get one seeded draw per example.
inline std::vector<bool> clean_correct_mask(const Oracle& pipeline, const Dataset& data, std::uint64_t seed) {
  detail::check_compatible(pipeline, data);
  std::vector<bool> ok(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    RngStream rng = detail::example_stream(seed, "clean", i);
    ok[i] = argmax(pipeline.probs(data.images[i], rng)) == data.labels[i];
  }
  return ok;
}

/// Clean accuracy in percent.
inline double evaluate_clean(const Oracle& pipeline, const Dataset& data, std::uint64_t seed = 0) {
  const auto ok = clean_correct_mask(pipeline, data, seed);
  return detail::percent(detail::count_true(ok), data.size());
}

struct AttackColumn {
  AttackKind kind;
  std::vector<bool> robust;  // per example
  double accuracy = 0.0;
};

/// Per-attack and combined robust accuracy. An example is robust under an
/// attack if it is classified correctly when clean and the attack fails; it
/// is robust in the combined column only if it survives every attack.
struct WorstCaseResult {
  std::size_t n = 0;
  std::vector<bool> clean_correct;
  double clean_accuracy = 0.0;
  std::vector<AttackColumn> columns;
  std::vector<bool> combined_robust;
  double combined_accuracy = 0.0;
};

using OutcomeObserver = std::function<void(AttackKind, std::size_t, const AttackOutcome&)>;

inline WorstCaseResult worst_case_eval(const Oracle& pipeline, const Dataset& data, std::span<const AttackKind> attacks,
                                       const AttackConfig& cfg, const OutcomeObserver& observer = {},
                                       bool keep_trace = false) {
  if (attacks.empty()) throw Error(Errc::invalid_argument, "need at least one attack");
  cfg.validate();
  WorstCaseResult r;
  r.n = data.size();
  r.clean_correct = clean_correct_mask(pipeline, data, cfg.rng_seed);
  r.clean_accuracy = detail::percent(detail::count_true(r.clean_correct), r.n);
  r.combined_robust = r.clean_correct;

  for (AttackKind kind : attacks) {
    AttackColumn col{kind, std::vector<bool>(r.n, false), 0.0};
    for (std::size_t i = 0; i < r.n; ++i) {
      if (!r.clean_correct[i]) continue;
      AttackConfig ex_cfg = cfg;
      ex_cfg.rng_seed = detail::example_stream(cfg.rng_seed, to_string(kind), i).seed();
      const AttackOutcome out = run_attack(kind, pipeline, data.images[i], data.labels[i], ex_cfg, keep_trace);
      if (observer) observer(kind, i, out);
      col.robust[i] = !out.success;
    }
    col.accuracy = detail::percent(detail::count_true(col.robust), r.n);
    for (std::size_t i = 0; i < r.n; ++i) r.combined_robust[i] = r.combined_robust[i] && col.robust[i];
    r.columns.push_back(std::move(col));
  }
  r.combined_accuracy = detail::percent(detail::count_true(r.combined_robust), r.n);
  return r;
}

/// Crafts adversarial examples against `source` and reports the accuracy of
/// `target` on them, in percent. Target predictions use the same per-example
/// streams as evaluate_clean, so epsilon = 0 reproduces the clean accuracy.
inline double transfer_eval(const Oracle& source, const Oracle& target, const Dataset& data, AttackKind attack,
                            const AttackConfig& cfg) {
  cfg.validate();
  detail::check_compatible(target, data);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    AttackConfig ex_cfg = cfg;
    ex_cfg.rng_seed = detail::example_stream(cfg.rng_seed, "transfer", i).seed();
    const AttackOutcome out = run_attack(attack, source, data.images[i], data.labels[i], ex_cfg);
    RngStream rng = detail::example_stream(cfg.rng_seed, "clean", i);
    if (argmax(target.probs(out.adversarial, rng)) == data.labels[i]) ++hits;
  }
  return detail::percent(hits, data.size());
}

}  // namespace kse
