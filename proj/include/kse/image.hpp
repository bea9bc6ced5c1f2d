#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "kse/error.hpp"

namespace kse {

/// H x W x C tensor stored row-major with the channel index fastest:
/// offset(y, x, c) = (y * W + x) * C + c.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<double> values;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), values(h * w * c, fill) {}
  Image(std::size_t h, std::size_t w, std::size_t c, std::vector<double> v)
      : height(h), width(w), channels(c), values(std::move(v)) {
    if (values.size() != h * w * c) throw Error(Errc::shape_mismatch, "value count does not match H*W*C");
  }

  std::size_t size() const noexcept { return values.size(); }
  std::size_t offset(std::size_t y, std::size_t x, std::size_t c) const noexcept {
    return (y * width + x) * channels + c;
  }
  double& at(std::size_t y, std::size_t x, std::size_t c) { return values[offset(y, x, c)]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return values[offset(y, x, c)]; }

  std::span<const double> flat() const noexcept { return values; }

  bool same_shape(const Image& o) const noexcept {
    return height == o.height && width == o.width && channels == o.channels;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

inline void clamp01(Image& img) noexcept {
  for (double& v : img.values) v = std::clamp(v, 0.0, 1.0);
}

inline double linf_distance(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw Error(Errc::shape_mismatch, "linf_distance on different shapes");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
  return m;
}

}  // namespace kse
