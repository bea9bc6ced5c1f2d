#include <gtest/gtest.h>

#include <filesystem>

#include "kse/model.hpp"
#include "oracles.hpp"

using kse::Errc;
using kse::Image;
using kse::Mlp;
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

// Two Gaussian blobs in the unit square, stored as 1x1x2 images.
kse::Dataset blobs(std::size_t per_class, std::uint64_t seed) {
  RngStream rng(seed);
  kse::Dataset d{{}, {}, 2, "train"};
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t cls = 0; cls < 2; ++cls) {
      const double centre = cls == 0 ? 0.25 : 0.75;
      d.images.emplace_back(1, 1, 2, std::vector<double>{centre + 0.05 * rng.normal(), centre + 0.05 * rng.normal()});
      d.labels.push_back(cls);
    }
  }
  return d;
}

double accuracy(const Mlp& m, const kse::Dataset& d, const kse::ShuffleKey& k) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    correct += kse::argmax(kse::forward(m, kse::encrypt(d.images[i], k).values)) == d.labels[i];
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

}  // namespace

TEST(InitModel, HeVarianceAndZeroBiases) {
  const Mlp m = kse::init_model({1000, 500, 10}, 3);
  double sum = 0, sq = 0;
  for (float w : m.layers[0].weights) {
    sum += w;
    sq += static_cast<double>(w) * w;
  }
  const double n = static_cast<double>(m.layers[0].weights.size());
  const double var = sq / n - (sum / n) * (sum / n);
  EXPECT_NEAR(var, 2.0 / 1000.0, 0.2 * 2.0 / 1000.0);
  for (const auto& l : m.layers)
    for (float b : l.biases) EXPECT_EQ(b, 0.0f);
}

TEST(InitModel, RejectsBadDims) {
  EXPECT_EQ(code_of([] { kse::init_model({10}, 1); }), Errc::invalid_dimensions);
  EXPECT_EQ(code_of([] { kse::init_model({10, 0, 3}, 1); }), Errc::invalid_dimensions);
}

TEST(Forward, MatchesNaiveMatmul) {
  RngStream rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Mlp m = kse::init_model({48, 32, 16, 10}, rng.next_u64());
    std::vector<double> x(48);
    for (double& v : x) v = rng.uniform01();
    const auto got = kse::forward(m, x);
    const auto want = kse::testing::naive_forward(m, x);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], want[k], 1e-6);
    EXPECT_EQ(kse::forward_cached(m, x).logits(), got);
  }
}

TEST(Forward, RejectsWrongInputLength) {
  const Mlp m = kse::init_model({4, 3}, 1);
  EXPECT_EQ(code_of([&] { kse::forward(m, std::vector<double>(5)); }), Errc::dimension_mismatch);
}

TEST(Softmax, StableForLargeLogits) {
  const std::vector<double> z{1000.0, 1000.0, 990.0};
  const auto p = kse::softmax(z);
  EXPECT_NEAR(p[0], p[1], 1e-15);
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-12);
  EXPECT_NEAR(kse::cross_entropy(z, 2), -std::log(p[2]), 1e-9);
  EXPECT_TRUE(std::isfinite(kse::cross_entropy(z, 2)));
}

TEST(Argmax, TiesGoToLowestIndex) {
  EXPECT_EQ(kse::argmax(std::vector<double>{0.1, 0.4, 0.4, 0.1}), 1u);
}

TEST(Gradients, LinearModelInputGradientClosedForm) {
  // With no hidden layer, dCE/dx = W (softmax(W^T x + b) - e_label).
  RngStream rng(8);
  Mlp m = kse::init_model({6, 4}, 2);
  for (float& b : m.layers[0].biases) b = static_cast<float>(rng.uniform(-1, 1));
  std::vector<double> x(6);
  for (double& v : x) v = rng.uniform01();
  const std::size_t label = 2;
  const auto p = kse::testing::naive_softmax(kse::testing::naive_forward(m, x));
  const auto g = kse::loss_and_grads(m, x, label);
  for (std::size_t i = 0; i < 6; ++i) {
    double want = 0;
    for (std::size_t j = 0; j < 4; ++j) want += m.layers[0].weight(i, j) * (p[j] - (j == label ? 1.0 : 0.0));
    EXPECT_NEAR(g.input[i], want, 1e-12);
  }
  const std::vector<double> up{0.5, -1.0, 0.0, 2.0};
  const auto vjp = kse::input_gradient(m, x, up);
  for (std::size_t i = 0; i < 6; ++i) {
    double want = 0;
    for (std::size_t j = 0; j < 4; ++j) want += m.layers[0].weight(i, j) * up[j];
    EXPECT_NEAR(vjp[i], want, 1e-12);
  }
}

TEST(Gradients, MatchFiniteDifferencesThroughEncryption) {
  RngStream rng(1001);
  for (int trial = 0; trial < 5; ++trial) {
    const auto inst = kse::testing::gradient_instance(rng, {16, 12}, 10, 8, 3, 4);
    const auto check = kse::testing::check_gradients(inst.model, inst.key, inst.x, inst.label, 1e-3);
    EXPECT_LT(check.input_error, 1e-4) << "trial " << trial;
    EXPECT_LT(check.param_error, 1e-4) << "trial " << trial;
  }
}

TEST(Gradients, RejectsBadLabel) {
  const Mlp m = kse::init_model({4, 3}, 1);
  EXPECT_EQ(code_of([&] { kse::loss_and_grads(m, std::vector<double>(4), 3); }), Errc::invalid_label);
}

TEST(Train, SeparableBlobsReachNinetyNinePercent) {
  const auto train = blobs(100, 1);
  const auto test = blobs(100, 2);
  const auto key = kse::identity_key(1, 2);
  kse::TrainConfig cfg;
  cfg.epochs = 50;
  cfg.hidden = {16};
  cfg.rng_seed = 4;
  const Mlp m = kse::train_submodel(train, key, cfg);
  EXPECT_GE(accuracy(m, test, key), 0.99);
  EXPECT_EQ(m.key_id, key.key_id());
}

TEST(Train, DeterministicForFixedSeed) {
  kse::SyntheticSpec spec;
  spec.per_class = 10;
  spec.height = spec.width = 8;
  const auto data = kse::gen_synthetic(spec);
  const auto key = kse::gen_key(5, 4, 3);
  kse::TrainConfig cfg;
  cfg.epochs = 3;
  cfg.hidden = {16};
  cfg.rng_seed = 77;
  const Mlp a = kse::train_submodel(data, key, cfg);
  const Mlp b = kse::train_submodel(data, key, cfg);
  EXPECT_EQ(kse::serialize_model(a), kse::serialize_model(b));
  cfg.rng_seed = 78;
  EXPECT_NE(kse::serialize_model(kse::train_submodel(data, key, cfg)), kse::serialize_model(a));
}

TEST(Train, FullBatchLossNonIncreasingAtSmallStep) {
  const auto data = blobs(50, 9);
  kse::TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = data.size();
  cfg.learning_rate = 1e-3;
  cfg.momentum = 0.0;
  cfg.hidden = {8};
  std::vector<double> losses;
  kse::train_submodel(data, kse::identity_key(1, 2), cfg, [&](const kse::EpochRecord& r) { losses.push_back(r.loss); });
  ASSERT_EQ(losses.size(), 30u);
  for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LE(losses[i], losses[i - 1] + 1e-12) << "epoch " << i + 1;
}

TEST(Train, RejectsBadConfig) {
  const auto data = blobs(5, 1);
  kse::TrainConfig cfg;
  cfg.learning_rate = 0;
  EXPECT_EQ(code_of([&] { kse::train_submodel(data, kse::identity_key(1, 2), cfg); }), Errc::invalid_config);
  cfg = {};
  cfg.momentum = 1.0;
  EXPECT_EQ(code_of([&] { cfg.validate(); }), Errc::invalid_config);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_EQ(code_of([&] { cfg.validate(); }), Errc::invalid_config);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto path = std::filesystem::temp_directory_path() / "kse_test_model.ksmd";
  const Mlp m = kse::init_model({12, 7, 3}, 6, "ks-abc");
  kse::save_model(m, path);
  const Mlp back = kse::load_model(path);
  EXPECT_EQ(back, m);
  std::vector<double> x(12, 0.3);
  EXPECT_EQ(kse::forward(back, x), kse::forward(m, x));
  std::filesystem::remove(path);
}

TEST(Checkpoint, HeaderLayout) {
  const Mlp m = kse::init_model({2, 1}, 6, "ab");
  const auto bytes = kse::serialize_model(m);
  const std::vector<char> head{'K', 'S', 'M', 'D', 1, 0, 2, 0, 'a', 'b', 2, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0};
  ASSERT_EQ(bytes.size(), head.size() + 4 * 3);
  EXPECT_TRUE(std::equal(head.begin(), head.end(), bytes.begin()));
}

TEST(Checkpoint, RejectsCorruption) {
  const auto bytes = kse::serialize_model(kse::init_model({5, 4, 3}, 1, "k"));
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_EQ(code_of([&] { kse::deserialize_model(bad); }), Errc::bad_magic);
  bad = bytes;
  bad[4] = 2;
  EXPECT_EQ(code_of([&] { kse::deserialize_model(bad); }), Errc::version_mismatch);
  bad = bytes;
  bad.pop_back();
  EXPECT_EQ(code_of([&] { kse::deserialize_model(bad); }), Errc::io_error);
  bad = bytes;
  bad.push_back(0);
  EXPECT_EQ(code_of([&] { kse::deserialize_model(bad); }), Errc::io_error);
  EXPECT_EQ(code_of([] { kse::deserialize_model(std::vector<char>{'K', 'S'}); }), Errc::bad_magic);
}
