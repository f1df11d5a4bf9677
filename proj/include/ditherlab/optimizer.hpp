#pragma once

/**
 * Group-relative policy optimization over dithered rewards.
 *
 * Advantages normalize rewards within a group of G samples per prompt
 * ((r - mean) / (pop std + 1e-6) for the group-relative method); the
 * surrogate is the clipped ratio objective with an exact tabular KL penalty
 * against a frozen reference table. Gradients are fully analytic and point
 * in the ASCENT direction: callers add them.
 *
 * A training run is single-threaded and deterministic: sampling and noise
 * draw from two separately seeded streams, so a zero-scale kernel reproduces
 * the no-noise baseline bit for bit.
 */

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ditherlab/common.hpp"
#include "ditherlab/environment.hpp"
#include "ditherlab/noise.hpp"
#include "ditherlab/policy.hpp"
#include "ditherlab/rewards.hpp"

namespace ditherlab {

enum class AdvantageMethod { GRPO, DrGRPO, ReinforcePP, DAPO };
enum class RatioLevel { Sequence, Token };

inline const char* to_string(AdvantageMethod m) {
  switch (m) {
    case AdvantageMethod::GRPO: return "grpo";
    case AdvantageMethod::DrGRPO: return "dr_grpo";
    case AdvantageMethod::ReinforcePP: return "reinforce_pp";
    default: return "dapo";
  }
}

// Stabilizer added to the population std in the advantage denominator; the
// group-relative normalization is undefined at std 0 and the sigma = 0
// baseline needs a definition.
inline constexpr double kAdvantageEpsilon = 1e-6;

struct ClipConfig {
  double eps_low = 0.2;
  double eps_high = 0.2;
  double beta = 0.0;  // KL coefficient
  std::optional<double> max_grad_norm;
  AdvantageMethod advantage_method = AdvantageMethod::GRPO;
  bool dynamic_sampling = false;

  void validate() const {
    if (!(eps_low > 0.0 && eps_low < 1.0) || !(eps_high > 0.0 && eps_high < 1.0)) {
      throw ConfigError("clip: eps_low and eps_high must lie in (0, 1)");
    }
    if (!(beta >= 0.0)) throw ConfigError("clip: beta must be >= 0");
    if (max_grad_norm && !(*max_grad_norm > 0.0)) {
      throw ConfigError("clip: max_grad_norm must be > 0 when set");
    }
  }

  // Asymmetric clipping with dynamic sampling: the 0.2 / 0.28 defaults.
  static ClipConfig dapo_defaults() {
    ClipConfig c;
    c.eps_low = 0.2;
    c.eps_high = 0.28;
    c.advantage_method = AdvantageMethod::DAPO;
    c.dynamic_sampling = true;
    return c;
  }
};

struct GroupBatch {
  int prompt = 0;
  std::vector<Trajectory> trajectories;
  std::vector<double> raw_rewards;
  std::vector<double> dithered_rewards;
  std::vector<double> advantages;
  RatioLevel ratio_level = RatioLevel::Sequence;
};

struct UpdateReport {
  double objective = 0.0;
  double grad_norm = 0.0;
  double clip_fraction = 0.0;
  double kl = 0.0;
  int groups_used = 0;
  int groups_filtered = 0;
};

// ============================================================================
// Advantages
// ============================================================================

/// Advantages for one normalization population. For the batch-normalized
/// variant (ReinforcePP) the caller passes the full step pool rather than a
/// single group.
inline std::vector<double> group_advantages(std::span<const double> rewards,
                                            AdvantageMethod method) {
  if (rewards.size() < 2) {
    throw InputError("group_advantages: need at least 2 rewards, got " +
                     std::to_string(rewards.size()));
  }
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  std::vector<double> adv(rewards.size());
  if (method == AdvantageMethod::DrGRPO) {
    for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = rewards[i] - mean;
    return adv;
  }
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double denom = std::sqrt(var / static_cast<double>(rewards.size())) + kAdvantageEpsilon;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / denom;
  return adv;
}

/// Fills advantages across a step's groups. Per-group normalization for the
/// group-relative methods; one pooled normalization over every sample in the
/// step for ReinforcePP.
inline void compute_step_advantages(std::vector<GroupBatch>& groups, AdvantageMethod method) {
  if (method != AdvantageMethod::ReinforcePP) {
    for (auto& g : groups) g.advantages = group_advantages(g.dithered_rewards, method);
    return;
  }
  std::vector<double> pool;
  for (const auto& g : groups) {
    pool.insert(pool.end(), g.dithered_rewards.begin(), g.dithered_rewards.end());
  }
  const std::vector<double> adv = group_advantages(pool, method);
  std::size_t k = 0;
  for (auto& g : groups) {
    g.advantages.assign(adv.begin() + static_cast<long>(k),
                        adv.begin() + static_cast<long>(k + g.dithered_rewards.size()));
    k += g.dithered_rewards.size();
  }
}

// ============================================================================
// Dynamic sampling
// ============================================================================

/// Drops groups whose RAW rewards are all identical (zero advantage signal).
/// Filtering keys on raw rewards even under dithering; filtering on dithered
/// values would never trigger.
inline std::pair<std::vector<GroupBatch>, int> dynamic_sampling_filter(
    std::vector<GroupBatch> groups) {
  std::vector<GroupBatch> kept;
  int filtered = 0;
  for (auto& g : groups) {
    bool constant = true;
    for (double r : g.raw_rewards) {
      if (r != g.raw_rewards.front()) {
        constant = false;
        break;
      }
    }
    if (constant) {
      ++filtered;
    } else {
      kept.push_back(std::move(g));
    }
  }
  return {std::move(kept), filtered};
}

// ============================================================================
// Surrogate gradient
// ============================================================================

namespace detail {

inline double cached_logprob(const ParamTable& pt, LogSoftmaxCache& lsm, int x,
                             std::span<const int> o) {
  if (pt.kind == PolicyKind::SequenceBandit) {
    return lsm(x)[static_cast<std::size_t>(o[0])];
  }
  double lp = 0.0;
  for (int t = 0; t < pt.seq_len; ++t) {
    const int r = pt.context_row(x, t, t == 0 ? 0 : o[t - 1]);
    lp += lsm(r)[static_cast<std::size_t>(o[t])];
  }
  return lp;
}

}  // namespace detail

/// Exact analytic gradient of the clipped surrogate minus beta * KL(pi ||
/// pi_ref), averaged over groups. Advantages must already be computed.
/// clip_fraction is the share of (sample, token) terms where the clipped
/// branch is active; those terms contribute zero gradient.
inline std::pair<GradVector, UpdateReport> surrogate_gradient(const ParamTable& params,
                                                              const ParamTable& old_params,
                                                              const ParamTable& ref_params,
                                                              std::span<const GroupBatch> groups,
                                                              const ClipConfig& cfg) {
  cfg.validate();
  if (!params.same_shape(old_params) || !params.same_shape(ref_params)) {
    throw InputError("surrogate_gradient: parameter tables differ in shape");
  }
  GradVector grad = GradVector::zeros_like(params);
  UpdateReport report;
  if (groups.empty()) return {std::move(grad), report};

  LogSoftmaxCache cur(params);
  LogSoftmaxCache old(old_params);
  const double lo = 1.0 - cfg.eps_low;
  const double hi = 1.0 + cfg.eps_high;
  long total_terms = 0;
  long clipped_terms = 0;
  double objective = 0.0;

  for (const auto& g : groups) {
    const int group_size = static_cast<int>(g.trajectories.size());
    if (group_size < 2) throw InputError("surrogate_gradient: group smaller than 2");
    if (g.advantages.size() != g.trajectories.size()) {
      throw InputError("surrogate_gradient: advantages not computed for group");
    }
    const double inv_g = 1.0 / static_cast<double>(group_size);
    for (int i = 0; i < group_size; ++i) {
      const Trajectory& tr = g.trajectories[static_cast<std::size_t>(i)];
      const double adv = g.advantages[static_cast<std::size_t>(i)];
      const std::span<const int> o(tr.output.data(), tr.output.size());
      auto accumulate_term = [&](double lp_cur, double lp_old, auto&& add_grad) {
        const double ratio = std::exp(lp_cur - lp_old);
        const double clipped_ratio = std::min(hi, std::max(lo, ratio));
        objective += inv_g * std::min(ratio * adv, clipped_ratio * adv);
        ++total_terms;
        const bool clip_active = (adv > 0.0 && ratio > hi) || (adv < 0.0 && ratio < lo);
        if (clip_active) {
          ++clipped_terms;
        } else if (adv != 0.0) {
          add_grad(inv_g * adv * ratio);
        }
      };
      if (g.ratio_level == RatioLevel::Sequence) {
        const double lp_cur = detail::cached_logprob(params, cur, g.prompt, o);
        const double lp_old = detail::cached_logprob(old_params, old, g.prompt, o);
        accumulate_term(lp_cur, lp_old, [&](double coeff) {
          detail::add_scaled_grad_logprob(grad, params, cur, g.prompt, o, coeff);
        });
      } else {
        for (int t = 0; t < params.seq_len; ++t) {
          const int prev = t == 0 ? 0 : o[t - 1];
          const int r_cur = params.context_row(g.prompt, t, prev);
          const int r_old = old_params.context_row(g.prompt, t, prev);
          const double lp_cur = cur(r_cur)[static_cast<std::size_t>(o[t])];
          const double lp_old = old(r_old)[static_cast<std::size_t>(o[t])];
          accumulate_term(lp_cur, lp_old, [&](double coeff) {
            detail::add_scaled_score_row(grad, params, cur, r_cur, o[t], coeff);
          });
        }
      }
    }
  }

  const double inv_groups = 1.0 / static_cast<double>(groups.size());
  grad.scale(inv_groups);
  objective *= inv_groups;

  double kl_mean = 0.0;
  for (const auto& g : groups) {
    kl_mean += detail::kl_with_grad(params, ref_params, g.prompt,
                                    cfg.beta > 0.0 ? &grad : nullptr, -cfg.beta * inv_groups);
  }
  kl_mean *= inv_groups;
  objective -= cfg.beta * kl_mean;

  report.objective = objective;
  report.grad_norm = grad.norm();
  report.clip_fraction =
      total_terms > 0 ? static_cast<double>(clipped_terms) / static_cast<double>(total_terms)
                      : 0.0;
  report.kl = kl_mean;
  report.groups_used = static_cast<int>(groups.size());
  return {std::move(grad), report};
}

/// If ||g|| exceeds max_norm, rescale to exactly max_norm; direction is
/// preserved and smaller gradients pass through untouched.
inline GradVector clip_gradient(GradVector g, double max_norm) {
  if (!(max_norm > 0.0)) throw InputError("clip_gradient: max_norm must be > 0");
  const double norm = g.norm();
  if (norm > max_norm) g.scale(max_norm / norm);
  return g;
}

// ============================================================================
// Training step
// ============================================================================

struct TrainLogRow {
  long step = 0;
  double objective = 0.0;
  double grad_norm = 0.0;  // pre-clipping; classification applies to this one
  GradClass grad_class = GradClass::Normal;
  double mean_raw_reward = 0.0;
  double mean_dithered_reward = 0.0;
  double reward_variance = 0.0;  // population variance of the step's dithered totals
  double clip_fraction = 0.0;
  double kl = 0.0;
  int groups_filtered = 0;
  double grad_norm_postclip = 0.0;
};

using TrainLog = std::vector<TrainLogRow>;

struct TrainState {
  ParamTable params;
  ParamTable old_params;  // synced to params at every step start
  ParamTable ref_params;  // frozen at initialization

  static TrainState init(ParamTable initial) {
    TrainState s;
    s.params = initial;
    s.old_params = initial;
    s.ref_params = std::move(initial);
    return s;
  }

  long step = 0;
};

struct TrainConfig {
  int group_size = 4;
  double learning_rate = 0.05;
  ClipConfig clip;
  GradClassifierConfig classifier;

  void validate() const {
    if (group_size < 2) throw ConfigError("group_size: must be >= 2");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate: must be > 0");
    clip.validate();
    classifier.validate();
  }
};

struct StepResult {
  TrainLogRow row;
  bool anomaly = false;
  std::string note;  // anomaly or warning text, empty otherwise
};

/// One optimization step over every prompt of the environment: sample G
/// outputs per prompt, evaluate raw rewards, dither, normalize within
/// groups, take one exact ascent step. Sampling and dithering consume two
/// independent streams. On a non-finite gradient the step aborts, keeps the
/// previous parameters and reports an anomaly.
inline StepResult train_step(TrainState& state, const Environment& env, const TrainConfig& cfg,
                             const NoiseSpec& noise, rng::Engine& sample_rng,
                             rng::Engine& noise_rng,
                             std::vector<RewardSample>* sample_sink = nullptr) {
  cfg.validate();
  noise.validate();
  state.old_params = state.params;

  const PolicyKind kind = state.params.kind;
  const RatioLevel level =
      kind == PolicyKind::SequenceBandit ? RatioLevel::Sequence : RatioLevel::Token;
  const std::vector<double> mags = env.component_magnitudes();

  std::vector<GroupBatch> groups;
  groups.reserve(static_cast<std::size_t>(env.spec.prompts));
  double sum_raw = 0.0, sum_dith = 0.0;
  std::vector<double> dithered_pool;
  dithered_pool.reserve(static_cast<std::size_t>(env.spec.prompts) * cfg.group_size);

  for (int x = 0; x < env.spec.prompts; ++x) {
    GroupBatch g;
    g.prompt = x;
    g.ratio_level = level;
    g.trajectories = sample_group(state.old_params, x, cfg.group_size, sample_rng);
    for (const auto& tr : g.trajectories) {
      const std::vector<int> tokens =
          env.output_tokens(kind, std::span<const int>(tr.output.data(), tr.output.size()));
      RewardSample rs = env.evaluate(x, tokens);
      rs = dither(std::move(rs), noise, mags, state.step, noise_rng);
      g.raw_rewards.push_back(rs.raw_total);
      g.dithered_rewards.push_back(rs.dithered_total);
      sum_raw += rs.raw_total;
      sum_dith += rs.dithered_total;
      dithered_pool.push_back(rs.dithered_total);
      if (sample_sink != nullptr) sample_sink->push_back(std::move(rs));
    }
    groups.push_back(std::move(g));
  }

  StepResult result;
  TrainLogRow& row = result.row;
  row.step = state.step;
  const double n_samples = static_cast<double>(dithered_pool.size());
  row.mean_raw_reward = sum_raw / n_samples;
  row.mean_dithered_reward = sum_dith / n_samples;
  row.reward_variance = reward_variance(dithered_pool);

  int filtered = 0;
  if (cfg.clip.dynamic_sampling || cfg.clip.advantage_method == AdvantageMethod::DAPO) {
    auto [kept, removed] = dynamic_sampling_filter(std::move(groups));
    groups = std::move(kept);
    filtered = removed;
  }
  row.groups_filtered = filtered;

  if (groups.empty()) {
    // Every group carried zero advantage signal: the step is a no-op.
    row.grad_class = classify_grad(0.0, cfg.classifier);
    result.note = "all groups filtered by dynamic sampling; step skipped";
    ++state.step;
    return result;
  }

  compute_step_advantages(groups, cfg.clip.advantage_method);
  auto [grad, report] =
      surrogate_gradient(state.params, state.old_params, state.ref_params, groups, cfg.clip);

  row.objective = report.objective;
  row.grad_norm = report.grad_norm;
  row.grad_class = classify_grad(report.grad_norm, cfg.classifier);
  row.clip_fraction = report.clip_fraction;
  row.kl = report.kl;

  if (!grad.finite() || !std::isfinite(report.objective)) {
    result.anomaly = true;
    result.note = "non-finite gradient; step aborted, parameters kept";
    row.grad_norm_postclip = row.grad_norm;
    ++state.step;
    return result;
  }

  if (cfg.clip.max_grad_norm) {
    grad = clip_gradient(std::move(grad), *cfg.clip.max_grad_norm);
  }
  row.grad_norm_postclip = grad.norm();

  for (std::size_t i = 0; i < state.params.values.size(); ++i) {
    state.params.values[i] += cfg.learning_rate * grad.values[i];
  }
  ++state.step;
  return result;
}

}  // namespace ditherlab
