#pragma once

/**
 * Multi-component discrete rule-based rewards and the pairwise-accuracy /
 * reward-variance estimators.
 *
 * A RewardRule is a list of named components (magnitude >= 0, predicate
 * returning a fraction in [0, 1]); the raw total is the magnitude-weighted
 * sum. Rules are deterministic in (prompt, output); all randomness lives in
 * the dithering layer (noise.hpp).
 */

#include <cmath>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ditherlab/common.hpp"

namespace ditherlab {

struct RewardComponent {
  std::string name;
  double magnitude = 0.0;
  // Fraction of the magnitude earned, in [0, 1]. Binary components return 0 or 1.
  std::function<double(int prompt, std::span<const int> output)> fraction;
};

struct RewardRule {
  std::vector<RewardComponent> components;

  void validate() const {
    std::set<std::string> names;
    for (const auto& c : components) {
      if (!(c.magnitude >= 0.0) || !std::isfinite(c.magnitude)) {
        throw ConfigError("reward component '" + c.name + "' needs a finite magnitude >= 0");
      }
      if (!c.fraction) throw ConfigError("reward component '" + c.name + "' has no predicate");
      if (!names.insert(c.name).second) {
        throw ConfigError("duplicate reward component name '" + c.name + "'");
      }
    }
  }

  double max_total() const {
    double s = 0.0;
    for (const auto& c : components) s += c.magnitude;
    return s;
  }
};

struct RewardSample {
  std::vector<double> raw_components;
  double raw_total = 0.0;
  std::vector<double> noise_draws;   // filled by dither(); empty until then
  double dithered_total = 0.0;       // == raw_total until dithered
};

inline RewardSample evaluate_reward(const RewardRule& rule, int x, std::span<const int> o) {
  RewardSample s;
  s.raw_components.reserve(rule.components.size());
  for (const auto& c : rule.components) {
    const double f = c.fraction(x, o);
    s.raw_components.push_back(c.magnitude * f);
    s.raw_total += c.magnitude * f;
  }
  s.dithered_total = s.raw_total;
  return s;
}

// ============================================================================
// Definition-style estimators
// ============================================================================

/// Population variance E[(r - mean)^2].
inline double reward_variance(std::span<const double> samples) {
  if (samples.size() < 2) {
    throw InputError("reward_variance: need at least 2 samples, got " +
                     std::to_string(samples.size()));
  }
  double mean = 0.0;
  for (double r : samples) mean += r;
  mean /= static_cast<double>(samples.size());
  double var = 0.0;
  for (double r : samples) var += (r - mean) * (r - mean);
  return var / static_cast<double>(samples.size());
}

inline int sign3(double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); }

/// Fraction of unordered pairs where sign(rm difference) equals sign of the
/// ground-truth difference. Ties count as a match only against ties.
inline double pairwise_accuracy(std::span<const std::pair<double, double>> rm_scores,
                                std::span<const std::pair<double, double>> gt_scores) {
  if (rm_scores.empty()) throw InputError("pairwise_accuracy: empty pair list");
  if (rm_scores.size() != gt_scores.size()) {
    throw InputError("pairwise_accuracy: pair lists differ in length");
  }
  long hits = 0;
  for (std::size_t i = 0; i < rm_scores.size(); ++i) {
    const int srm = sign3(rm_scores[i].first - rm_scores[i].second);
    const int sgt = sign3(gt_scores[i].first - gt_scores[i].second);
    if (srm == sgt) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rm_scores.size());
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// Probability that independent N(0, sigma^2) draws on both scores flip the
/// ranking of a pair with raw gap delta: Phi(-|delta| / (sigma sqrt(2))),
/// since the difference of the two draws is N(0, 2 sigma^2). At sigma = 0 the
/// limit convention applies: 0 for delta != 0, 0.5 for delta = 0.
inline double flip_probability(double delta, double sigma) {
  if (sigma < 0.0) throw InputError("flip_probability: sigma must be >= 0");
  if (sigma == 0.0) return delta == 0.0 ? 0.5 : 0.0;
  return normal_cdf(-std::abs(delta) / (sigma * std::sqrt(2.0)));
}

}  // namespace ditherlab
