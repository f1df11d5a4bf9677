#pragma once

#include <stdexcept>
#include <string>

namespace ditherlab {

// Error taxonomy. InputError: bad arguments to an operation. ConfigError:
// invalid configuration detected at construction/parse time. CapacityError:
// an exact computation would exceed its enumeration budget. IoError: file
// system failures.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InputError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct CapacityError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

// Exact enumeration budget for per-prompt output spaces. Beyond this,
// expectation-style operations refuse and point the caller at the
// Monte-Carlo fallback.
inline constexpr double kEnumerationCap = 1e6;

// Gradient-health vocabulary shared by the optimizer (which logs a class per
// step) and the diagnostics module (which owns the thresholds).
enum class GradClass { Vanishing, Normal, Exploding };

struct GradClassifierConfig {
  double vanish_threshold = 0.01;
  double explode_threshold = 5.0;

  void validate() const {
    if (!(vanish_threshold > 0.0) || !(vanish_threshold < explode_threshold)) {
      throw ConfigError("GradClassifierConfig: need 0 < vanish_threshold < "
                        "explode_threshold, got vanish_threshold=" +
                        std::to_string(vanish_threshold) +
                        " explode_threshold=" + std::to_string(explode_threshold));
    }
  }
};

// Strict inequalities: the boundary values themselves classify as Normal.
inline GradClass classify_grad(double norm, const GradClassifierConfig& cfg) {
  cfg.validate();
  if (norm < cfg.vanish_threshold) return GradClass::Vanishing;
  if (norm > cfg.explode_threshold) return GradClass::Exploding;
  return GradClass::Normal;
}

inline const char* to_string(GradClass c) {
  switch (c) {
    case GradClass::Vanishing: return "vanishing";
    case GradClass::Exploding: return "exploding";
    default: return "normal";
  }
}

}  // namespace ditherlab
