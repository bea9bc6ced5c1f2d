#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kse/ensemble.hpp"
#include "kse/error.hpp"
#include "kse/image.hpp"
#include "kse/model.hpp"
#include "kse/rng.hpp"

namespace kse {

/// Black-box view of a classifier: probabilities only. Randomized oracles
/// draw from `rng`; deterministic ones ignore it.
class Oracle {
 public:
  virtual ~Oracle() = default;
  virtual std::vector<double> probs(const Image& x, RngStream& rng) const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual bool randomized() const noexcept { return false; }
};

struct LossGradient {
  double loss = 0.0;  // -log p(cls | x) as seen by the attacker
  Image grad;         // d loss / d x in pixel space
};

/// A pipeline that additionally hands out loss gradients to white-box attackers.
class WhiteBox : public Oracle {
 public:
  virtual LossGradient loss_gradient(const Image& x, std::size_t cls, RngStream& rng) const = 0;
};

/// What a white-box attacker differentiates.
///  full_knowledge: keys known, deterministic average over all N members.
///  stochastic:     keys known, a fresh S-subset per gradient query (random ensemble only).
///  key_unaware:    weights known but keys secret; the attacker differentiates
///                  the sub-models on the unshuffled image.
enum class GradientMode { full_knowledge, stochastic, key_unaware };

constexpr std::string_view to_string(GradientMode m) noexcept {
  switch (m) {
    case GradientMode::full_knowledge: return "full-knowledge";
    case GradientMode::stochastic: return "stochastic";
    case GradientMode::key_unaware: return "key-unaware";
  }
  return "unknown";
}

inline GradientMode parse_gradient_mode(std::string_view s) {
  if (s == "full-knowledge") return GradientMode::full_knowledge;
  if (s == "stochastic") return GradientMode::stochastic;
  if (s == "key-unaware") return GradientMode::key_unaware;
  throw Error(Errc::invalid_config, "unknown white-box mode '" + std::string(s) + "'");
}

/// Cross-entropy of the averaged softmax of members[which] and its input
/// gradient. With weights w_i = p_i[c] / sum_j p_j[c] (computed in the log
/// domain), d loss / d logits_i = w_i * (p_i - onehot(c)).
inline LossGradient averaged_ce_gradient(std::span<const Member> members, std::span<const std::size_t> which,
                                         const Image& x, std::size_t cls, bool keyed) {
  const std::size_t s = which.size();
  std::vector<ForwardCache> caches;
  std::vector<std::vector<double>> probs;
  std::vector<double> log_pc(s);
  caches.reserve(s);
  for (std::size_t k = 0; k < s; ++k) {
    const Member& m = members[which[k]];
    if (cls >= m.model.num_classes()) throw Error(Errc::invalid_label, "class index out of range");
    caches.push_back(keyed ? forward_cached(m.model, encrypt(x, m.key).values) : forward_cached(m.model, x.values));
    probs.push_back(softmax(caches.back().logits()));
    log_pc[k] = -cross_entropy(caches.back().logits(), cls);
  }
  const double mx = *std::max_element(log_pc.begin(), log_pc.end());
  double z = 0.0;
  for (double v : log_pc) z += std::exp(v - mx);

  LossGradient out;
  out.loss = -(mx + std::log(z) - std::log(static_cast<double>(s)));
  out.grad = Image(x.height, x.width, x.channels);
  for (std::size_t k = 0; k < s; ++k) {
    const Member& m = members[which[k]];
    const double w = std::exp(log_pc[k] - mx) / z;
    std::vector<double> dz = probs[k];
    dz[cls] -= 1.0;
    for (double& v : dz) v *= w;
    Image g(x.height, x.width, x.channels, backward(m.model, caches[k], dz, nullptr, true));
    if (keyed) g = backprop_through_encrypt(g, m.key);
    for (std::size_t i = 0; i < g.size(); ++i) out.grad.values[i] += g.values[i];
  }
  return out;
}

/// One key-matched sub-model. With the identity key this is the undefended baseline.
class SinglePipeline final : public WhiteBox {
 public:
  SinglePipeline(const Member& member, GradientMode mode = GradientMode::full_knowledge)
      : member_(&member), mode_(mode) {}

  std::vector<double> probs(const Image& x, RngStream&) const override { return member_probs(*member_, x); }
  std::size_t num_classes() const override { return member_->model.num_classes(); }

  LossGradient loss_gradient(const Image& x, std::size_t cls, RngStream&) const override {
    const std::size_t which[] = {0};
    return averaged_ce_gradient(std::span<const Member>(member_, 1), which, x, cls, mode_ != GradientMode::key_unaware);
  }

 private:
  const Member* member_;
  GradientMode mode_;
};

/// Simple (all-N average) or random (S-of-N average) ensemble.
class EnsemblePipeline final : public WhiteBox {
 public:
  EnsemblePipeline(const RandomEnsemble& e, bool random, GradientMode mode = GradientMode::stochastic)
      : ensemble_(&e), random_(random), mode_(mode) {}

  std::vector<double> probs(const Image& x, RngStream& rng) const override {
    return random_ ? predict_random(*ensemble_, x, rng).probs : predict_simple(*ensemble_, x).probs;
  }
  std::size_t num_classes() const override { return ensemble_->num_classes(); }
  bool randomized() const noexcept override { return random_; }

  LossGradient loss_gradient(const Image& x, std::size_t cls, RngStream& rng) const override {
    check_ensemble_input(*ensemble_, x);
    std::vector<std::size_t> which;
    if (random_ && mode_ != GradientMode::full_knowledge) {
      which = uniform_subset(rng, ensemble_->size(), ensemble_->selection_size());
    } else {
      which.resize(ensemble_->size());
      std::iota(which.begin(), which.end(), std::size_t{0});
    }
    return averaged_ce_gradient(ensemble_->members(), which, x, cls, mode_ != GradientMode::key_unaware);
  }

 private:
  const RandomEnsemble* ensemble_;
  bool random_;
  GradientMode mode_;
};

/// Hides the gradient interface of any oracle.
class BlackBoxView final : public Oracle {
 public:
  explicit BlackBoxView(const Oracle& inner) : inner_(&inner) {}
  std::vector<double> probs(const Image& x, RngStream& rng) const override { return inner_->probs(x, rng); }
  std::size_t num_classes() const override { return inner_->num_classes(); }
  bool randomized() const noexcept override { return inner_->randomized(); }

 private:
  const Oracle* inner_;
};

/// p_y - max_{k != y} p_k; negative iff misclassified.
inline double margin(std::span<const double> probs, std::size_t label) {
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < probs.size(); ++k)
    if (k != label) other = std::max(other, probs[k]);
  return probs[label] - other;
}

}  // namespace kse
