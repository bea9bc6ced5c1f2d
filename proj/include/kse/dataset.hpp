#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kse/binary_io.hpp"
#include "kse/error.hpp"
#include "kse/image.hpp"
#include "kse/rng.hpp"

namespace kse {

struct Dataset {
  std::vector<Image> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const noexcept { return images.size(); }
  bool empty() const noexcept { return images.empty(); }

  void validate() const {
    if (images.size() != labels.size()) throw Error(Errc::shape_mismatch, "images and labels differ in count");
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (labels[i] >= num_classes) throw Error(Errc::invalid_label, "label out of range");
      if (!images[i].same_shape(images.front())) throw Error(Errc::shape_mismatch, "images differ in shape");
    }
  }

  /// First n examples (or all of them if n exceeds the size).
  Dataset head(std::size_t n) const {
    Dataset d{{}, {}, num_classes, split};
    n = std::min(n, size());
    d.images.assign(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(n));
    d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    return d;
  }
};

/// Class-conditional Gaussian images. Each class owns a template: every entry
/// independently carries class signal with probability `density`, drawn
/// uniform in [0.5 - amplitude, 0.5 + amplitude], and is 0.5 otherwise. A
/// sample is its class template plus N(0, noise^2) per entry, clamped to [0, 1].
/// Templates depend only on `seed`; the samples also depend on `split`, so
/// train and test sets share classes but not examples.
struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t height = 12;
  std::size_t width = 12;
  std::size_t channels = 3;
  std::size_t per_class = 200;
  std::uint64_t seed = 0;
  double amplitude = 0.15;
  double noise = 0.04;
  double density = 0.08;
  std::string split = "train";
};

inline Dataset gen_synthetic(const SyntheticSpec& spec) {
  const std::size_t dim = spec.height * spec.width * spec.channels;
  if (spec.num_classes == 0 || dim < spec.num_classes)
    throw Error(Errc::invalid_dimensions, "need num_classes >= 1 and H*W*C >= num_classes");
  if (!(spec.amplitude >= 0.0) || !(spec.noise >= 0.0) || !(spec.density > 0.0 && spec.density <= 1.0))
    throw Error(Errc::invalid_argument, "need amplitude, noise >= 0 and density in (0, 1]");

  const RngStream root(spec.seed);
  std::vector<std::vector<double>> templates(spec.num_classes, std::vector<double>(dim));
  RngStream trng = root.derive("templates");
  for (auto& t : templates)
    for (double& v : t) {
      const bool active = trng.uniform01() < spec.density;
      const double u = trng.uniform(0.5 - spec.amplitude, 0.5 + spec.amplitude);
      v = active ? u : 0.5;
    }

  Dataset d{{}, {}, spec.num_classes, spec.split};
  d.images.reserve(spec.num_classes * spec.per_class);
  d.labels.reserve(spec.num_classes * spec.per_class);
  RngStream srng = root.derive("samples/" + spec.split);
  // Classes interleaved so that any prefix is close to balanced.
  for (std::size_t i = 0; i < spec.per_class; ++i) {
    for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
      Image img(spec.height, spec.width, spec.channels);
      for (std::size_t j = 0; j < dim; ++j) img.values[j] = templates[cls][j] + spec.noise * srng.normal();
      clamp01(img);
      d.images.push_back(std::move(img));
      d.labels.push_back(cls);
    }
  }
  return d;
}

// CIFAR-10 binary batch: records of 1 label byte followed by 3072 pixel bytes
// (R, G, B planes, each 32x32 row-major). Pixels are rescaled to [0, 1].
inline constexpr std::size_t cifar_side = 32;
inline constexpr std::size_t cifar_record_bytes = 1 + 3 * cifar_side * cifar_side;

inline Dataset decode_cifar10_binary(std::span<const char> bytes, std::string split = "train") {
  if (bytes.size() % cifar_record_bytes != 0)
    throw Error(Errc::malformed_record, "file length is not a multiple of 3073");
  Dataset d{{}, {}, 10, std::move(split)};
  const std::size_t plane = cifar_side * cifar_side;
  for (std::size_t off = 0; off < bytes.size(); off += cifar_record_bytes) {
    const auto label = static_cast<unsigned char>(bytes[off]);
    if (label >= 10) throw Error(Errc::malformed_record, "label byte out of range");
    Image img(cifar_side, cifar_side, 3);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < plane; ++p) {
        const auto px = static_cast<unsigned char>(bytes[off + 1 + c * plane + p]);
        img.values[p * 3 + c] = static_cast<double>(px) / 255.0;
      }
    }
    d.images.push_back(std::move(img));
    d.labels.push_back(label);
  }
  return d;
}

inline Dataset load_cifar10_binary(const std::filesystem::path& path, std::string split = "train") {
  return decode_cifar10_binary(io::read_file(path), std::move(split));
}

}  // namespace kse
