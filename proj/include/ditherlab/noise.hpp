#pragma once

/**
 * The reward-dithering layer: zero-mean noise injected into each reward
 * component before advantage computation, plus the eight time-varying
 * perturbation schedules.
 *
 * Kernels are variance-matched: for a component of magnitude R the uniform
 * kernel draws from U[-a, a] with a = m * R, and the gaussian kernel draws
 * with std sigma = m * R / sqrt(3), so Var(uniform) = a^2 / 3 = sigma^2 =
 * Var(gaussian). Schedules modulate the standard deviation (not the
 * variance); the choice is recorded in run metadata.
 */

#include <cmath>
#include <string>
#include <vector>

#include "ditherlab/common.hpp"
#include "ditherlab/rewards.hpp"
#include "ditherlab/rng.hpp"

namespace ditherlab {

enum class NoiseKernel { None, Gaussian, Uniform };

enum class ScheduleKind {
  Constant,
  SquareRoot,
  SquareRootReverse,
  Factor,
  FactorReverse,
  MutilFactor,
  MutilFactorReverse,
  Cosine,
  CosineReverse,
};

struct Schedule {
  ScheduleKind kind = ScheduleKind::Constant;
  long total_steps = 1;
  std::vector<double> milestones = {0.25, 0.5, 0.75};  // MutilFactor variants
  double decay = 0.5;

  void validate() const {
    if (total_steps < 1) throw ConfigError("schedule: total_steps must be >= 1");
    if (!(decay >= 0.0)) throw ConfigError("schedule: decay must be >= 0");
    for (double ms : milestones) {
      if (!(ms >= 0.0 && ms <= 1.0)) throw ConfigError("schedule: milestones must lie in [0,1]");
    }
  }
};

namespace detail {

inline double mutil_factor(const Schedule& s, double p) {
  double v = 1.0;
  for (double ms : s.milestones) {
    if (p >= ms) v *= s.decay;
  }
  return v;
}

}  // namespace detail

/// Scale multiplier at p = step / total_steps. Every "Reverse" schedule
/// starts at 0; every non-reverse schedule starts at 1. Steps beyond
/// total_steps clamp to the endpoint; `clamped` reports when that happened.
inline double schedule_scale(const Schedule& s, long step, bool* clamped = nullptr) {
  s.validate();
  if (step < 0) throw InputError("schedule_scale: step must be >= 0");
  if (clamped != nullptr) *clamped = false;
  if (step > s.total_steps) {
    step = s.total_steps;
    if (clamped != nullptr) *clamped = true;
  }
  const double p = static_cast<double>(step) / static_cast<double>(s.total_steps);
  switch (s.kind) {
    case ScheduleKind::Constant: return 1.0;
    case ScheduleKind::SquareRoot: return std::sqrt(1.0 - p);
    case ScheduleKind::SquareRootReverse: return std::sqrt(p);
    case ScheduleKind::Factor: return 1.0 - p;
    case ScheduleKind::FactorReverse: return p;
    case ScheduleKind::MutilFactor: return detail::mutil_factor(s, p);
    case ScheduleKind::MutilFactorReverse: return 1.0 - detail::mutil_factor(s, p);
    case ScheduleKind::Cosine: return std::cos(p * 1.5707963267948966);
    case ScheduleKind::CosineReverse: return 1.0 - std::cos(p * 1.5707963267948966);
  }
  return 1.0;
}

struct NoiseSpec {
  NoiseKernel kernel = NoiseKernel::None;
  double m = 0.0;  // relative scale, unitless
  Schedule schedule;
  bool per_component = true;

  void validate() const {
    if (!(m >= 0.0) || !std::isfinite(m)) throw ConfigError("noise: m must be finite and >= 0");
    schedule.validate();
  }

  static NoiseSpec none() { return {}; }

  static NoiseSpec gaussian(double m, Schedule schedule = {}) {
    NoiseSpec s;
    s.kernel = NoiseKernel::Gaussian;
    s.m = m;
    s.schedule = schedule;
    return s;
  }

  static NoiseSpec uniform(double m, Schedule schedule = {}) {
    NoiseSpec s;
    s.kernel = NoiseKernel::Uniform;
    s.m = m;
    s.schedule = schedule;
    return s;
  }

  // Gaussian spec whose effective std on a component of magnitude r_max is
  // exactly `sigma` (at schedule scale 1): m = sigma * sqrt(3) / r_max.
  static NoiseSpec gaussian_with_sigma(double sigma, double r_max) {
    if (!(r_max > 0.0)) throw ConfigError("gaussian_with_sigma: r_max must be > 0");
    return gaussian(sigma * std::sqrt(3.0) / r_max);
  }

  static NoiseSpec uniform_with_sigma(double sigma, double r_max) {
    if (!(r_max > 0.0)) throw ConfigError("uniform_with_sigma: r_max must be > 0");
    return uniform(sigma * std::sqrt(3.0) / r_max);
  }
};

/// Effective noise std for one component of the given magnitude at `step`.
/// Identical for both kernels by the variance-matching construction.
inline double component_sigma(const NoiseSpec& spec, double magnitude, long step) {
  if (spec.kernel == NoiseKernel::None) return 0.0;
  return spec.m * magnitude * schedule_scale(spec.schedule, step) / std::sqrt(3.0);
}

/// Std of the total injected noise: sqrt(sum_i sigma_i^2) over components
/// (a single lump on the summed magnitude when per_component is off).
inline double total_sigma(const NoiseSpec& spec, std::span<const double> magnitudes, long step) {
  if (spec.kernel == NoiseKernel::None) return 0.0;
  if (!spec.per_component) {
    double total_mag = 0.0;
    for (double m : magnitudes) total_mag += m;
    return component_sigma(spec, total_mag, step);
  }
  double var = 0.0;
  for (double m : magnitudes) {
    const double s = component_sigma(spec, m, step);
    var += s * s;
  }
  return std::sqrt(var);
}

inline double total_sigma(const NoiseSpec& spec, const RewardRule& rule, long step) {
  std::vector<double> mags;
  mags.reserve(rule.components.size());
  for (const auto& c : rule.components) mags.push_back(c.magnitude);
  return total_sigma(spec, mags, step);
}

namespace detail {

inline double draw_noise(NoiseKernel kernel, double m_scaled, double magnitude,
                         rng::Engine& eng) {
  switch (kernel) {
    case NoiseKernel::Gaussian:
      return rng::gaussian(eng) * (m_scaled * magnitude / std::sqrt(3.0));
    case NoiseKernel::Uniform: {
      const double a = m_scaled * magnitude;
      return rng::uniform_range(eng, -a, a);
    }
    default: return 0.0;
  }
}

}  // namespace detail

/// Adds an independent zero-mean draw to each reward component (or one draw
/// on the total when per_component is off). Draws are independent across
/// components, samples and steps; dithered values are never clamped, so they
/// may go negative or exceed the raw maxima.
inline RewardSample dither(RewardSample sample, const NoiseSpec& spec,
                           std::span<const double> magnitudes, long step, rng::Engine& eng) {
  spec.validate();
  if (spec.kernel == NoiseKernel::None) {
    sample.noise_draws.assign(sample.raw_components.size(), 0.0);
    sample.dithered_total = sample.raw_total;
    return sample;
  }
  if (magnitudes.size() != sample.raw_components.size()) {
    throw InputError("dither: magnitude list does not match the sample's components");
  }
  const double scale = schedule_scale(spec.schedule, step);
  const double m_scaled = spec.m * scale;
  double noise = 0.0;
  if (spec.per_component) {
    sample.noise_draws.resize(sample.raw_components.size());
    for (std::size_t i = 0; i < magnitudes.size(); ++i) {
      sample.noise_draws[i] = detail::draw_noise(spec.kernel, m_scaled, magnitudes[i], eng);
      noise += sample.noise_draws[i];
    }
  } else {
    double total_mag = 0.0;
    for (double m : magnitudes) total_mag += m;
    noise = detail::draw_noise(spec.kernel, m_scaled, total_mag, eng);
    sample.noise_draws.assign(1, noise);
  }
  sample.dithered_total = sample.raw_total + noise;
  return sample;
}

inline RewardSample dither(RewardSample sample, const NoiseSpec& spec, const RewardRule& rule,
                           long step, rng::Engine& eng) {
  std::vector<double> mags;
  mags.reserve(rule.components.size());
  for (const auto& c : rule.components) mags.push_back(c.magnitude);
  return dither(std::move(sample), spec, mags, step, eng);
}

inline const char* to_string(NoiseKernel k) {
  switch (k) {
    case NoiseKernel::Gaussian: return "gaussian";
    case NoiseKernel::Uniform: return "uniform";
    default: return "none";
  }
}

inline const char* to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Constant: return "Constant";
    case ScheduleKind::SquareRoot: return "SquareRoot";
    case ScheduleKind::SquareRootReverse: return "SquareRootReverse";
    case ScheduleKind::Factor: return "Factor";
    case ScheduleKind::FactorReverse: return "FactorReverse";
    case ScheduleKind::MutilFactor: return "MutilFactor";
    case ScheduleKind::MutilFactorReverse: return "MutilFactorReverse";
    case ScheduleKind::Cosine: return "Cosine";
    default: return "CosineReverse";
  }
}

}  // namespace ditherlab
