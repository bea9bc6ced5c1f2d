#include <gtest/gtest.h>

#include "kse/eval.hpp"
#include "oracles.hpp"

using kse::AttackConfig;
using kse::AttackKind;
using kse::Errc;
using kse::Member;

namespace {

// A sub-model trained briefly on a small synthetic set.
struct Fixture {
  kse::Dataset train, test;
  std::vector<Member> members;

  Fixture() {
    kse::SyntheticSpec spec;
    spec.num_classes = 4;
    spec.height = spec.width = 8;
    spec.per_class = 40;
    spec.seed = 3;
    train = kse::gen_synthetic(spec);
    spec.split = "test";
    spec.per_class = 6;
    test = kse::gen_synthetic(spec);
    kse::TrainConfig cfg;
    cfg.epochs = 5;
    cfg.hidden = {16};
    for (std::uint64_t s = 0; s < 4; ++s) {
      auto key = kse::gen_key(s + 10, 4, 3);
      cfg.rng_seed = s;
      auto model = kse::train_submodel(train, key, cfg);
      members.push_back({std::move(key), std::move(model)});
    }
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

AttackConfig quick_attack() {
  AttackConfig cfg;
  cfg.iterations = 5;
  cfg.query_budget = 40;
  cfg.rng_seed = 9;
  return cfg;
}

}  // namespace

TEST(EvaluateClean, CountsArgmaxHits) {
  const auto& f = fixture();
  const kse::SinglePipeline p(f.members[0]);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < f.test.size(); ++i) {
    const auto& m = f.members[0];
    const auto z = kse::testing::naive_forward(m.model, kse::encrypt(f.test.images[i], m.key).values);
    hits += kse::argmax(z) == f.test.labels[i];
  }
  EXPECT_DOUBLE_EQ(kse::evaluate_clean(p, f.test), 100.0 * static_cast<double>(hits) / static_cast<double>(f.test.size()));
}

TEST(EvaluateClean, RejectsClassCountMismatch) {
  const auto& f = fixture();
  const kse::SinglePipeline p(f.members[0]);
  auto d = f.test;
  d.num_classes = 7;
  EXPECT_THROW(kse::evaluate_clean(p, d), kse::Error);
}

TEST(WorstCase, CombinedNeverExceedsAnyColumn) {
  const auto& f = fixture();
  const kse::RandomEnsemble e(f.members, 3, 1);
  const kse::EnsemblePipeline random(e, true, kse::GradientMode::full_knowledge);
  const std::vector<AttackKind> attacks{AttackKind::fgsm, AttackKind::pgd, AttackKind::square};
  const auto r = kse::worst_case_eval(random, f.test, attacks, quick_attack());
  ASSERT_EQ(r.columns.size(), 3u);
  EXPECT_EQ(r.n, f.test.size());
  for (const auto& col : r.columns) {
    EXPECT_LE(r.combined_accuracy, col.accuracy);
    EXPECT_LE(col.accuracy, r.clean_accuracy);
    for (std::size_t i = 0; i < r.n; ++i) {
      if (col.robust[i]) {
        EXPECT_TRUE(r.clean_correct[i]);
      }
      if (r.combined_robust[i]) {
        EXPECT_TRUE(col.robust[i]);
      }
    }
  }
  std::size_t combined = 0;
  for (std::size_t i = 0; i < r.n; ++i) {
    bool all = r.clean_correct[i];
    for (const auto& col : r.columns) all = all && col.robust[i];
    EXPECT_EQ(r.combined_robust[i], all);
    combined += all;
  }
  EXPECT_DOUBLE_EQ(r.combined_accuracy, 100.0 * static_cast<double>(combined) / static_cast<double>(r.n));
}

TEST(WorstCase, SingleAttackCombinedEqualsColumn) {
  const auto& f = fixture();
  const kse::SinglePipeline p(f.members[1]);
  const std::vector<AttackKind> attacks{AttackKind::pgd};
  const auto r = kse::worst_case_eval(p, f.test, attacks, quick_attack());
  ASSERT_EQ(r.columns.size(), 1u);
  EXPECT_EQ(r.combined_robust, r.columns[0].robust);
  EXPECT_DOUBLE_EQ(r.combined_accuracy, r.columns[0].accuracy);
  EXPECT_THROW(kse::worst_case_eval(p, f.test, std::vector<AttackKind>{}, quick_attack()), kse::Error);
}

TEST(WorstCase, ZeroEpsilonLeavesCleanAccuracy) {
  const auto& f = fixture();
  const kse::SinglePipeline p(f.members[2]);
  AttackConfig cfg = quick_attack();
  cfg.epsilon = 0.0;
  const std::vector<AttackKind> attacks{AttackKind::fgsm, AttackKind::pgd, AttackKind::square};
  const auto r = kse::worst_case_eval(p, f.test, attacks, cfg);
  for (const auto& col : r.columns) EXPECT_EQ(col.robust, r.clean_correct);
}

TEST(WorstCase, OrderIndependentPerExampleSeeds) {
  const auto& f = fixture();
  const kse::RandomEnsemble e(f.members, 3, 1);
  const kse::EnsemblePipeline random(e, true);
  const std::vector<AttackKind> attacks{AttackKind::square};
  const auto full = kse::worst_case_eval(random, f.test, attacks, quick_attack());
  const auto head = kse::worst_case_eval(random, f.test.head(5), attacks, quick_attack());
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(head.columns[0].robust[i], full.columns[0].robust[i]);
}

TEST(Transfer, ZeroEpsilonMatchesClean) {
  const auto& f = fixture();
  const kse::SinglePipeline src(f.members[0]);
  const kse::SinglePipeline dst(f.members[1]);
  AttackConfig cfg = quick_attack();
  cfg.epsilon = 0.0;
  EXPECT_DOUBLE_EQ(kse::transfer_eval(src, dst, f.test, AttackKind::pgd, cfg), kse::evaluate_clean(dst, f.test, cfg.rng_seed));
}
