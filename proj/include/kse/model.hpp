#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "kse/binary_io.hpp"
#include "kse/dataset.hpp"
#include "kse/error.hpp"
#include "kse/rng.hpp"
#include "kse/transform.hpp"

namespace kse {

/// Fully connected layer. Weights are float32 stored input-major:
/// weights[i * out + j] connects input i to output j.
struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<float> weights;
  std::vector<float> biases;

  float weight(std::size_t i, std::size_t j) const { return weights[i * out + j]; }
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Multilayer perceptron: ReLU on hidden layers, identity on the output.
/// Parameters are float32; all arithmetic runs in double.
struct Mlp {
  std::string key_id;
  std::vector<std::size_t> layer_dims;
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const noexcept { return layer_dims.front(); }
  std::size_t num_classes() const noexcept { return layer_dims.back(); }

  friend bool operator==(const Mlp&, const Mlp&) = default;
};

inline void validate_layer_dims(const std::vector<std::size_t>& dims) {
  if (dims.size() < 2) throw Error(Errc::invalid_dimensions, "need at least input and output dims");
  for (auto d : dims)
    if (d == 0) throw Error(Errc::invalid_dimensions, "layer width must be >= 1");
}

/// He-normal weights (variance 2 / fan_in), zero biases.
inline Mlp init_model(const std::vector<std::size_t>& layer_dims, std::uint64_t rng_seed, std::string key_id = {}) {
  validate_layer_dims(layer_dims);
  Mlp m{std::move(key_id), layer_dims, {}};
  RngStream rng = RngStream(rng_seed).derive("init");
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    DenseLayer layer{layer_dims[l], layer_dims[l + 1], {}, {}};
    const double scale = std::sqrt(2.0 / static_cast<double>(layer.in));
    layer.weights.resize(layer.in * layer.out);
    for (float& w : layer.weights) w = static_cast<float>(scale * rng.normal());
    layer.biases.assign(layer.out, 0.0f);
    m.layers.push_back(std::move(layer));
  }
  return m;
}

namespace detail {

inline void dense_forward(const DenseLayer& layer, std::span<const double> x, std::vector<double>& out) {
  out.assign(layer.biases.begin(), layer.biases.end());
  double* o = out.data();
  const std::size_t n = layer.out;
  for (std::size_t i = 0; i < layer.in; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const float* w = layer.weights.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) o[j] += xi * static_cast<double>(w[j]);
  }
}

}  // namespace detail

/// Activations of every layer; acts[0] is the input, acts.back() the logits.
struct ForwardCache {
  std::vector<std::vector<double>> acts;
  const std::vector<double>& logits() const { return acts.back(); }
};

inline ForwardCache forward_cached(const Mlp& m, std::span<const double> x) {
  if (x.size() != m.input_dim()) throw Error(Errc::dimension_mismatch, "input length differs from layer_dims[0]");
  ForwardCache cache;
  cache.acts.reserve(m.layers.size() + 1);
  cache.acts.emplace_back(x.begin(), x.end());
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    std::vector<double> out;
    detail::dense_forward(m.layers[l], cache.acts.back(), out);
    if (l + 1 < m.layers.size())
      for (double& v : out) v = v > 0.0 ? v : 0.0;
    cache.acts.push_back(std::move(out));
  }
  return cache;
}

inline std::vector<double> forward(const Mlp& m, std::span<const double> x) {
  if (x.size() != m.input_dim()) throw Error(Errc::dimension_mismatch, "input length differs from layer_dims[0]");
  std::vector<double> cur(x.begin(), x.end());
  std::vector<double> next;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    detail::dense_forward(m.layers[l], cur, next);
    if (l + 1 < m.layers.size())
      for (double& v : next) v = v > 0.0 ? v : 0.0;
    cur.swap(next);
  }
  return cur;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) sum += (p[k] = std::exp(logits[k] - mx));
  for (double& v : p) v /= sum;
  return p;
}

/// -log softmax(logits)[label], computed through log-sum-exp.
inline double cross_entropy(std::span<const double> logits, std::size_t label) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  return mx + std::log(sum) - logits[label];
}

/// Lowest index among the maxima.
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct ParamGrads {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;

  static ParamGrads zeros_like(const Mlp& m) {
    ParamGrads g;
    for (const auto& l : m.layers) {
      g.weights.emplace_back(l.weights.size(), 0.0);
      g.biases.emplace_back(l.biases.size(), 0.0);
    }
    return g;
  }
};

/// Vector-Jacobian product of the network at the cached point. Accumulates
/// parameter gradients into `params` when given; returns dL/dx when
/// `want_input` is set (empty otherwise).
inline std::vector<double> backward(const Mlp& m, const ForwardCache& cache, std::span<const double> dlogits,
                                    ParamGrads* params, bool want_input = true) {
  if (dlogits.size() != m.num_classes()) throw Error(Errc::dimension_mismatch, "upstream gradient length");
  std::vector<double> delta(dlogits.begin(), dlogits.end());
  std::vector<double> prev;
  for (std::size_t l = m.layers.size(); l-- > 0;) {
    const DenseLayer& layer = m.layers[l];
    const std::vector<double>& a_in = cache.acts[l];
    if (params != nullptr) {
      auto& gw = params->weights[l];
      auto& gb = params->biases[l];
      for (std::size_t j = 0; j < layer.out; ++j) gb[j] += delta[j];
      for (std::size_t i = 0; i < layer.in; ++i) {
        const double ai = a_in[i];
        if (ai == 0.0) continue;
        double* g = gw.data() + i * layer.out;
        for (std::size_t j = 0; j < layer.out; ++j) g[j] += ai * delta[j];
      }
    }
    if (l == 0 && !want_input) return {};
    prev.assign(layer.in, 0.0);
    for (std::size_t i = 0; i < layer.in; ++i) {
      const float* w = layer.weights.data() + i * layer.out;
      double s = 0.0;
      for (std::size_t j = 0; j < layer.out; ++j) s += static_cast<double>(w[j]) * delta[j];
      prev[i] = s;
    }
    if (l > 0)  // ReLU: the post-activation is positive exactly where the pre-activation is.
      for (std::size_t i = 0; i < layer.in; ++i)
        if (a_in[i] <= 0.0) prev[i] = 0.0;
    delta.swap(prev);
  }
  return delta;
}

struct LossGrads {
  double loss = 0.0;
  ParamGrads params;
  std::vector<double> input;
};

/// Softmax cross-entropy with analytic gradients for every parameter and the input.
inline LossGrads loss_and_grads(const Mlp& m, std::span<const double> x, std::size_t label) {
  if (label >= m.num_classes()) throw Error(Errc::invalid_label, "label >= num_classes");
  const ForwardCache cache = forward_cached(m, x);
  LossGrads out;
  out.loss = cross_entropy(cache.logits(), label);
  std::vector<double> dz = softmax(cache.logits());
  dz[label] -= 1.0;
  out.params = ParamGrads::zeros_like(m);
  out.input = backward(m, cache, dz, &out.params, true);
  return out;
}

inline std::vector<double> input_gradient(const Mlp& m, std::span<const double> x, std::span<const double> dlogits) {
  return backward(m, forward_cached(m, x), dlogits, nullptr, true);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t rng_seed = 0;
  std::vector<std::size_t> hidden = {256};

  void validate() const {
    if (epochs < 1) throw Error(Errc::invalid_config, "epochs must be >= 1");
    if (batch_size < 1) throw Error(Errc::invalid_config, "batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw Error(Errc::invalid_config, "learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(Errc::invalid_config, "momentum must be in [0, 1)");
    for (auto h : hidden)
      if (h == 0) throw Error(Errc::invalid_config, "hidden width must be >= 1");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;  // mean over the epoch's forward passes
  double train_acc = 0.0;
};

using TrainLogger = std::function<void(const EpochRecord&)>;

/// Minibatch SGD with momentum (v <- mu * v + g; w <- w - lr * v) on images
/// encrypted with `key`. The returned model carries the key's id.
inline Mlp train_submodel(const Dataset& data, const ShuffleKey& key, const TrainConfig& cfg,
                          const TrainLogger& log = {}) {
  cfg.validate();
  data.validate();
  if (data.empty()) throw Error(Errc::shape_mismatch, "empty training set");

  std::vector<std::vector<double>> inputs;
  inputs.reserve(data.size());
  for (const auto& img : data.images) inputs.push_back(encrypt(img, key).values);

  std::vector<std::size_t> dims{inputs.front().size()};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(data.num_classes);
  Mlp model = init_model(dims, cfg.rng_seed, key.key_id());

  ParamGrads velocity = ParamGrads::zeros_like(model);
  RngStream order_rng = RngStream(cfg.rng_seed).derive("order");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i-- > 1;)
      std::swap(order[i], order[static_cast<std::size_t>(order_rng.uniform_below(i + 1))]);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      ParamGrads grads = ParamGrads::zeros_like(model);
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t idx = order[b];
        const ForwardCache cache = forward_cached(model, inputs[idx]);
        const std::size_t label = data.labels[idx];
        loss_sum += cross_entropy(cache.logits(), label);
        if (argmax(cache.logits()) == label) ++correct;
        std::vector<double> dz = softmax(cache.logits());
        dz[label] -= 1.0;
        backward(model, cache, dz, &grads, false);
      }
      const double scale = 1.0 / static_cast<double>(stop - start);
      for (std::size_t l = 0; l < model.layers.size(); ++l) {
        auto update = [&](std::vector<float>& p, std::vector<double>& v, const std::vector<double>& g) {
          for (std::size_t k = 0; k < p.size(); ++k) {
            v[k] = cfg.momentum * v[k] + g[k] * scale;
            p[k] = static_cast<float>(static_cast<double>(p[k]) - cfg.learning_rate * v[k]);
          }
        };
        update(model.layers[l].weights, velocity.weights[l], grads.weights[l]);
        update(model.layers[l].biases, velocity.biases[l], grads.biases[l]);
      }
    }
    if (log) {
      const double n = static_cast<double>(data.size());
      log(EpochRecord{epoch + 1, loss_sum / n, 100.0 * static_cast<double>(correct) / n});
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "KSMD" | version u16 | key_id length u16 | key_id bytes | dim count u32 |
// dims u32... | per layer: weights (in*out float32, input-major) then biases
// (out float32). Little-endian throughout.

inline constexpr std::uint16_t checkpoint_version = 1;

inline std::vector<char> serialize_model(const Mlp& m) {
  io::ByteWriter w;
  w.put_bytes("KSMD");
  w.put_u16(checkpoint_version);
  if (m.key_id.size() > 0xffff) throw Error(Errc::invalid_argument, "key id too long");
  w.put_u16(static_cast<std::uint16_t>(m.key_id.size()));
  w.put_bytes(m.key_id);
  w.put_u32(static_cast<std::uint32_t>(m.layer_dims.size()));
  for (auto d : m.layer_dims) w.put_u32(static_cast<std::uint32_t>(d));
  for (const auto& l : m.layers) {
    for (float v : l.weights) w.put_f32(v);
    for (float v : l.biases) w.put_f32(v);
  }
  return w.bytes();
}

inline Mlp deserialize_model(std::span<const char> bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < 4 || r.take_bytes(4) != "KSMD") throw Error(Errc::bad_magic, "not a model checkpoint");
  if (r.get_u16() != checkpoint_version) throw Error(Errc::version_mismatch, "unsupported checkpoint version");
  Mlp m;
  m.key_id = std::string(r.take_bytes(r.get_u16()));
  const std::uint32_t ndims = r.get_u32();
  if (ndims < 2 || ndims > 64) throw Error(Errc::io_error, "implausible layer count");
  for (std::uint32_t i = 0; i < ndims; ++i) m.layer_dims.push_back(r.get_u32());
  validate_layer_dims(m.layer_dims);
  for (std::size_t l = 0; l + 1 < m.layer_dims.size(); ++l) {
    DenseLayer layer{m.layer_dims[l], m.layer_dims[l + 1], {}, {}};
    if (r.remaining() / 4 < layer.in * layer.out + layer.out) throw Error(Errc::io_error, "truncated checkpoint");
    layer.weights.resize(layer.in * layer.out);
    for (float& v : layer.weights) v = r.get_f32();
    layer.biases.resize(layer.out);
    for (float& v : layer.biases) v = r.get_f32();
    m.layers.push_back(std::move(layer));
  }
  if (r.remaining() != 0) throw Error(Errc::io_error, "trailing bytes after checkpoint");
  return m;
}

inline void save_model(const Mlp& m, const std::filesystem::path& path) { io::write_file(path, serialize_model(m)); }

inline Mlp load_model(const std::filesystem::path& path) { return deserialize_model(io::read_file(path)); }

}  // namespace kse
