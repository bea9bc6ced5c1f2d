#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kse/error.hpp"
#include "kse/image.hpp"
#include "kse/model.hpp"
#include "kse/pipeline.hpp"
#include "kse/rng.hpp"

namespace kse {

/// l-inf attack hyperparameters. epsilon and step_size are fractions of the
/// [0, 1] pixel range; step_size defaults to epsilon / 4.
struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  std::optional<double> step_size;
  std::size_t iterations = 40;
  std::size_t restarts = 1;
  bool random_start = true;
  std::size_t query_budget = 1000;
  double p_init = 0.05;
  std::uint64_t rng_seed = 0;

  double step() const { return step_size.value_or(epsilon / 4.0); }

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon < 1.0)) throw Error(Errc::invalid_config, "epsilon must be in [0, 1)");
    if (step_size && !(*step_size > 0.0)) throw Error(Errc::invalid_config, "step_size must be > 0");
    if (iterations < 1 || restarts < 1) throw Error(Errc::invalid_config, "iterations and restarts must be >= 1");
    if (query_budget < 1) throw Error(Errc::invalid_config, "query_budget must be >= 1");
    if (!(p_init > 0.0 && p_init <= 1.0)) throw Error(Errc::invalid_config, "p_init must be in (0, 1]");
  }
};

struct TraceRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  bool accepted = false;
  std::size_t queries = 0;
};

struct AttackOutcome {
  Image adversarial;
  bool success = false;       // final prediction differs from the true label
  std::size_t queries_used = 0;
  double margin = 0.0;        // p_y - max_{k != y} p_k at the final evaluation
  std::vector<TraceRecord> trace;
};

enum class AttackKind { fgsm, pgd, pgd_targeted, square };

constexpr std::string_view to_string(AttackKind k) noexcept {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::pgd_targeted: return "pgd-t";
    case AttackKind::square: return "square";
  }
  return "unknown";
}

inline AttackKind parse_attack(std::string_view s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "pgd") return AttackKind::pgd;
  if (s == "pgd-t") return AttackKind::pgd_targeted;
  if (s == "square") return AttackKind::square;
  throw Error(Errc::invalid_config, "unknown attack '" + std::string(s) + "'");
}

namespace detail {

inline const WhiteBox& require_gradient(const Oracle& o) {
  const auto* wb = dynamic_cast<const WhiteBox*>(&o);
  if (wb == nullptr) throw Error(Errc::gradient_unavailable, "pipeline only exposes probabilities");
  return *wb;
}

inline double sign(double v) noexcept { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Clip into the eps-ball around x intersected with [0, 1].
inline void project(Image& adv, const Image& x, double eps) {
  for (std::size_t i = 0; i < adv.size(); ++i) {
    const double lo = std::max(0.0, x.values[i] - eps);
    const double hi = std::min(1.0, x.values[i] + eps);
    adv.values[i] = std::clamp(adv.values[i], lo, hi);
  }
}

// Final verdict. Randomized oracles get one fresh seeded draw; this draw is
// evaluation, not an attack query, and is not charged to the budget.
inline void finalize(AttackOutcome& out, const Oracle& oracle, std::size_t label, const AttackConfig& cfg) {
  RngStream eval_rng = RngStream(cfg.rng_seed).derive("evaluate");
  const auto p = oracle.probs(out.adversarial, eval_rng);
  out.margin = margin(p, label);
  out.success = argmax(p) != label;
}

}  // namespace detail

/// Single step x + eps * sign(grad CE), clamped to [0, 1].
inline AttackOutcome fgsm(const Oracle& pipeline, const Image& x, std::size_t label, const AttackConfig& cfg) {
  cfg.validate();
  const WhiteBox& wb = detail::require_gradient(pipeline);
  RngStream rng = RngStream(cfg.rng_seed).derive("gradient");
  const LossGradient lg = wb.loss_gradient(x, label, rng);
  AttackOutcome out;
  out.adversarial = x;
  for (std::size_t i = 0; i < x.size(); ++i) out.adversarial.values[i] += cfg.epsilon * detail::sign(lg.grad.values[i]);
  detail::project(out.adversarial, x, cfg.epsilon);
  detail::finalize(out, pipeline, label, cfg);
  return out;
}

/// Called with every PGD iterate after projection.
using IterateObserver = std::function<void(const Image&)>;

/// Sign-gradient PGD in the l-inf ball. Untargeted mode ascends CE(label);
/// targeted mode descends CE(target). Keeps the best post-step iterate
/// across restarts, ranked by the attacker-side loss.
inline AttackOutcome pgd(const Oracle& pipeline, const Image& x, std::size_t label, const AttackConfig& cfg,
                         std::optional<std::size_t> target = std::nullopt, const IterateObserver& observer = {}) {
  cfg.validate();
  const WhiteBox& wb = detail::require_gradient(pipeline);
  if (target && (*target == label || *target >= pipeline.num_classes()))
    throw Error(Errc::invalid_target, "target must be a valid class different from the label");

  const std::size_t cls = target.value_or(label);
  const double direction = target ? -1.0 : 1.0;
  const double step = cfg.step();
  const RngStream root(cfg.rng_seed);
  RngStream grad_rng = root.derive("gradient");

  Image best = x;
  double best_objective = -std::numeric_limits<double>::infinity();

  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    Image adv = x;
    if (cfg.random_start) {
      RngStream start_rng = root.derive("start/" + std::to_string(r));
      for (double& v : adv.values) v += start_rng.uniform(-cfg.epsilon, cfg.epsilon);
      detail::project(adv, x, cfg.epsilon);
    }
    LossGradient lg = wb.loss_gradient(adv, cls, grad_rng);
    for (std::size_t t = 0; t < cfg.iterations; ++t) {
      for (std::size_t i = 0; i < adv.size(); ++i) adv.values[i] += direction * step * detail::sign(lg.grad.values[i]);
      detail::project(adv, x, cfg.epsilon);
      if (observer) observer(adv);
      lg = wb.loss_gradient(adv, cls, grad_rng);
      const double objective = direction * lg.loss;
      if (objective > best_objective) {
        best_objective = objective;
        best = adv;
      }
    }
  }

  AttackOutcome out;
  out.adversarial = std::move(best);
  detail::finalize(out, pipeline, label, cfg);
  return out;
}

/// Fraction of the image area covered by the square at iteration `it` of
/// `n_iters`: p_init halved at the breakpoints {10, 50, 200, 500, 1000, 2000,
/// 4000, 6000, 8000} of a 10,000-iteration run, rescaled to n_iters.
inline double square_fraction(double p_init, std::size_t it, std::size_t n_iters) {
  static constexpr std::array<std::size_t, 9> breakpoints = {10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000};
  const auto scaled = static_cast<std::size_t>(static_cast<double>(it) / static_cast<double>(n_iters) * 10000.0);
  double p = p_init;
  for (std::size_t b : breakpoints) {
    if (scaled > b) p /= 2.0;
  }
  return p;
}

/// Square attack (l-inf, untargeted, margin loss on probabilities). Starts
/// from vertical +-eps stripes; every iteration redraws one random square
/// window to +-eps per channel and keeps it iff the margin strictly drops.
/// Stops at the first negative margin or when the budget is spent.
inline AttackOutcome square_attack(const Oracle& oracle, const Image& x, std::size_t label, const AttackConfig& cfg,
                                   bool keep_trace = false) {
  cfg.validate();
  const std::size_t h = x.height, w = x.width, c = x.channels;
  const double eps = cfg.epsilon;
  RngStream query_rng = RngStream(cfg.rng_seed).derive("oracle");
  RngStream rng = RngStream(cfg.rng_seed).derive("square");

  AttackOutcome out;
  auto query = [&](const Image& img) {
    ++out.queries_used;
    return margin(oracle.probs(img, query_rng), label);
  };

  Image best = x;
  for (std::size_t col = 0; col < w; ++col) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double d = rng.coin() ? eps : -eps;
      for (std::size_t row = 0; row < h; ++row) best.at(row, col, ch) += d;
    }
  }
  clamp01(best);
  double best_margin = query(best);
  if (keep_trace) out.trace.push_back({0, best_margin, true, out.queries_used});

  const std::size_t n_iters = cfg.query_budget;
  for (std::size_t it = 1; best_margin >= 0.0 && out.queries_used < cfg.query_budget && eps > 0.0; ++it) {
    const double p = square_fraction(cfg.p_init, it - 1, n_iters);
    auto side = static_cast<std::size_t>(std::lround(std::sqrt(p * static_cast<double>(h * w))));
    side = std::clamp<std::size_t>(side, 1, std::max<std::size_t>(1, std::min(h, w) - 1));
    side = std::min({side, h, w});
    const auto y0 = static_cast<std::size_t>(rng.uniform_below(h - side + 1));
    const auto x0 = static_cast<std::size_t>(rng.uniform_below(w - side + 1));

    Image candidate = best;
    // Redraw until the window actually changes.
    for (int attempt = 0; attempt < 64; ++attempt) {
      std::vector<double> signs(c);
      for (double& s : signs) s = rng.coin() ? eps : -eps;
      double changed = 0.0;
      for (std::size_t yy = y0; yy < y0 + side; ++yy) {
        for (std::size_t xx = x0; xx < x0 + side; ++xx) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double v = std::clamp(x.at(yy, xx, ch) + signs[ch], 0.0, 1.0);
            changed += std::abs(v - best.at(yy, xx, ch));
            candidate.at(yy, xx, ch) = v;
          }
        }
      }
      if (changed >= 1e-7) break;
    }

    const double m = query(candidate);
    const bool accepted = m < best_margin;
    if (accepted) {
      best_margin = m;
      best = std::move(candidate);
    }
    if (keep_trace) out.trace.push_back({it, m, accepted, out.queries_used});
  }

  out.adversarial = std::move(best);
  if (oracle.randomized()) {
    detail::finalize(out, oracle, label, cfg);
  } else {
    out.margin = best_margin;
    out.success = best_margin < 0.0;
  }
  return out;
}

/// Runs one attack of the suite. pgd-t aims at the most probable wrong class
/// on the clean input.
inline AttackOutcome run_attack(AttackKind kind, const Oracle& pipeline, const Image& x, std::size_t label,
                                const AttackConfig& cfg, bool keep_trace = false) {
  switch (kind) {
    case AttackKind::fgsm: return fgsm(pipeline, x, label, cfg);
    case AttackKind::pgd: return pgd(pipeline, x, label, cfg);
    case AttackKind::pgd_targeted: {
      RngStream rng = RngStream(cfg.rng_seed).derive("target");
      auto p = pipeline.probs(x, rng);
      p[label] = -1.0;
      return pgd(pipeline, x, label, cfg, argmax(p));
    }
    case AttackKind::square: return square_attack(pipeline, x, label, cfg, keep_trace);
  }
  throw Error(Errc::invalid_argument, "unknown attack kind");
}

}  // namespace kse
