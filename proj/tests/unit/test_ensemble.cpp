#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "kse/ensemble.hpp"
#include "oracles.hpp"

using kse::Errc;
using kse::Image;
using kse::Member;
using kse::RandomEnsemble;
using kse::RngStream;

namespace {

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const kse::Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected kse::Error";
  return Errc::invalid_argument;
}

std::vector<Member> random_members(std::size_t n, std::uint64_t seed = 1) {
  std::vector<Member> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto key = kse::gen_key(seed * 100 + i, 2, 3);
    auto model = kse::init_model({4 * 4 * 3, 8, 5}, seed * 1000 + i, key.key_id());
    out.push_back({std::move(key), std::move(model)});
  }
  return out;
}

}  // namespace

TEST(RandomEnsemble, RejectsBadSizes) {
  EXPECT_EQ(code_of([] { RandomEnsemble(random_members(3), 3); }), Errc::invalid_n_or_s);
  EXPECT_EQ(code_of([] { RandomEnsemble(random_members(4), 2); }), Errc::invalid_n_or_s);
  EXPECT_EQ(code_of([] { RandomEnsemble(random_members(4), 5); }), Errc::invalid_n_or_s);
  EXPECT_NO_THROW(RandomEnsemble(random_members(4), 3));
  EXPECT_NO_THROW(RandomEnsemble(random_members(6), 6));
}

TEST(RandomEnsemble, RejectsDuplicateSeedsAndUnboundModels) {
  auto dup = random_members(4);
  dup[3] = dup[0];
  EXPECT_EQ(code_of([&] { RandomEnsemble(dup, 3); }), Errc::duplicate_seeds);
  auto unbound = random_members(4);
  unbound[1].model.key_id = "someone-else";
  EXPECT_EQ(code_of([&] { RandomEnsemble(unbound, 3); }), Errc::invalid_argument);
}

TEST(Routing, MismatchedCiphertextIsRejected) {
  const auto members = random_members(2);
  RngStream rng(3);
  const Image x = kse::testing::random_image(rng, 4, 4, 3);
  EXPECT_NO_THROW(kse::route(members[0], kse::seal(x, members[0].key)));
  EXPECT_EQ(code_of([&] { kse::route(members[0], kse::seal(x, members[1].key)); }), Errc::invalid_argument);
}

TEST(Predict, SingleMemberMatchesNaiveReduction) {
  const RandomEnsemble e(random_members(4), 3);
  RngStream rng(4);
  for (int t = 0; t < 20; ++t) {
    const Image x = kse::testing::random_image(rng, 4, 4, 3);
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& m = e.members()[i];
      const auto want = kse::testing::naive_softmax(kse::testing::naive_forward(m.model, kse::encrypt(x, m.key).values));
      const auto got = kse::predict_single(e, i, x);
      for (std::size_t k = 0; k < want.size(); ++k) ASSERT_NEAR(got.probs[k], want[k], 1e-12);
      ASSERT_EQ(got.selected, std::vector<std::size_t>{i});
    }
  }
  EXPECT_EQ(code_of([&] { kse::predict_single(e, 4, Image(4, 4, 3)); }), Errc::index_out_of_range);
  EXPECT_EQ(code_of([&] { kse::predict_simple(e, Image(8, 8, 3)); }), Errc::shape_mismatch);
}

TEST(Predict, ConstantLogitMembersAverageByHand) {
  // Zero weights; member i has biases [0, log(i + 1)], so its softmax is
  // [1/(i+2), (i+1)/(i+2)] whatever the input.
  std::vector<Member> members;
  for (std::size_t i = 0; i < 4; ++i) {
    auto key = kse::gen_key(i + 1, 2, 3);
    auto model = kse::init_model({12, 2}, i, key.key_id());
    std::fill(model.layers[0].weights.begin(), model.layers[0].weights.end(), 0.0f);
    model.layers[0].biases = {0.0f, static_cast<float>(std::log(static_cast<double>(i + 1)))};
    members.push_back({std::move(key), std::move(model)});
  }
  const RandomEnsemble e(members, 3);
  const Image x(2, 2, 3, 0.7);
  const auto p = kse::predict_simple(e, x);
  const double want1 = (1.0 / 2 + 2.0 / 3 + 3.0 / 4 + 4.0 / 5) / 4.0;
  EXPECT_NEAR(p.probs[1], want1, 1e-7);
  EXPECT_NEAR(p.probs[0], 1.0 - want1, 1e-7);
  EXPECT_EQ(p.argmax_class, 1u);

  RngStream rng(10);
  for (int t = 0; t < 50; ++t) {
    const auto r = kse::predict_random(e, x, rng);
    ASSERT_EQ(r.selected.size(), 3u);
    double w = 0;
    for (auto i : r.selected) w += static_cast<double>(i + 1) / static_cast<double>(i + 2);
    ASSERT_NEAR(r.probs[1], w / 3.0, 1e-7);
  }
}

TEST(Predict, FullSelectionEqualsSimpleBitExactly) {
  const RandomEnsemble e(random_members(5, 7), 5);
  RngStream inputs(11);
  RngStream sel = e.selection_stream();
  for (int t = 0; t < 200; ++t) {
    const Image x = kse::testing::random_image(inputs, 4, 4, 3);
    const auto a = kse::predict_random(e, x, sel);
    const auto b = kse::predict_simple(e, x);
    ASSERT_EQ(a.probs, b.probs);
    ASSERT_EQ(a.argmax_class, b.argmax_class);
  }
}

TEST(Predict, SubsetsDrawnUniformly) {
  const RandomEnsemble e(random_members(4, 2), 3);
  const Image x(4, 4, 3, 0.5);
  RngStream sel = e.selection_stream();
  std::map<std::vector<std::size_t>, std::size_t> counts;
  const int draws = 40000;
  for (int t = 0; t < draws; ++t) ++counts[kse::predict_random(e, x, sel).selected];
  ASSERT_EQ(counts.size(), 4u);
  std::vector<std::size_t> observed;
  for (const auto& s : kse::testing::all_subsets(4, 3)) {
    EXPECT_NEAR(static_cast<double>(counts[s]) / draws, 0.25, 0.01);
    observed.push_back(counts[s]);
  }
  EXPECT_GT(kse::testing::chi_square_uniform_p(observed), 0.01);
}

TEST(Predict, RandomIsReproducibleFromSeed) {
  const RandomEnsemble e(random_members(4, 3), 3, 99);
  const Image x(4, 4, 3, 0.25);
  RngStream a = e.selection_stream(), b = e.selection_stream();
  for (int t = 0; t < 20; ++t) ASSERT_EQ(kse::predict_random(e, x, a).selected, kse::predict_random(e, x, b).selected);
}

TEST(BuildEnsemble, TrainsOneModelPerKeyAndValidates) {
  kse::SyntheticSpec spec;
  spec.per_class = 4;
  spec.height = spec.width = 4;
  const auto data = kse::gen_synthetic(spec);
  kse::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.hidden = {8};
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4};
  std::size_t logged = 0;
  const auto e = kse::build_ensemble(data, 4, 3, seeds, cfg, 2, 0, [&](std::size_t, const kse::EpochRecord&) { ++logged; });
  EXPECT_EQ(logged, 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(e.members()[i].key.seed(), seeds[i]);
    EXPECT_EQ(e.members()[i].model.key_id, e.members()[i].key.key_id());
  }
  EXPECT_NE(e.members()[0].model, e.members()[1].model);
  const std::vector<std::uint64_t> dup{1, 2, 2, 4};
  EXPECT_EQ(code_of([&] { kse::build_ensemble(data, 4, 3, dup, cfg, 2); }), Errc::duplicate_seeds);
  EXPECT_EQ(code_of([&] { kse::build_ensemble(data, 3, 3, std::vector<std::uint64_t>{1, 2, 3}, cfg, 2); }),
            Errc::invalid_n_or_s);
}

TEST(Manifest, RoundTripPreservesPredictions) {
  const auto dir = std::filesystem::temp_directory_path() / "kse_test_manifest";
  std::filesystem::create_directories(dir);
  const RandomEnsemble e(random_members(4, 5), 3, 42);
  std::vector<std::string> paths;
  for (std::size_t i = 0; i < 4; ++i) {
    paths.push_back("m" + std::to_string(i) + ".ksmd");
    kse::save_model(e.members()[i].model, dir / paths.back());
  }
  {
    std::ofstream out(dir / "manifest.json");
    out << kse::manifest_json(e, paths).dump(2);
  }
  const auto loaded = kse::load_manifest(dir / "manifest.json");
  EXPECT_FALSE(loaded.baseline.has_value());
  EXPECT_EQ(loaded.ensemble.selection_size(), 3u);
  EXPECT_EQ(loaded.ensemble.rng_seed(), 42u);
  const Image x(4, 4, 3, 0.3);
  EXPECT_EQ(kse::predict_simple(loaded.ensemble, x).probs, kse::predict_simple(e, x).probs);

  auto j = kse::manifest_json(e, paths);
  j["format"] = "other";
  {
    std::ofstream out(dir / "bad.json");
    out << j.dump();
  }
  EXPECT_EQ(code_of([&] { kse::load_manifest(dir / "bad.json"); }), Errc::bad_magic);
  std::filesystem::remove_all(dir);
}
