#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kse {

enum class Errc {
  invalid_dimensions,
  shape_mismatch,
  dimension_mismatch,
  invalid_label,
  invalid_argument,
  invalid_config,
  invalid_n_or_s,
  duplicate_seeds,
  invalid_target,
  gradient_unavailable,
  index_out_of_range,
  io_error,
  bad_magic,
  version_mismatch,
  malformed_record,
};

constexpr std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_dimensions: return "invalid-dimensions";
    case Errc::shape_mismatch: return "shape-mismatch";
    case Errc::dimension_mismatch: return "dimension-mismatch";
    case Errc::invalid_label: return "invalid-label";
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::invalid_config: return "invalid-config";
    case Errc::invalid_n_or_s: return "invalid-N-or-S";
    case Errc::duplicate_seeds: return "duplicate-seeds";
    case Errc::invalid_target: return "invalid-target";
    case Errc::gradient_unavailable: return "gradient-unavailable";
    case Errc::index_out_of_range: return "index-out-of-range";
    case Errc::io_error: return "io-error";
    case Errc::bad_magic: return "bad-magic";
    case Errc::version_mismatch: return "version-mismatch";
    case Errc::malformed_record: return "malformed-record";
  }
  return "unknown";
}

// Every failure in the library surfaces as kse::Error carrying a stable code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace kse
