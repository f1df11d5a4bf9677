#pragma once

/**
 * Gradient-health classification, convergence-time measurement and
 * Monte-Carlo verifiers for the dithering theory:
 *
 *  - unbiasedness: the mean of noisy REINFORCE gradient estimates must match
 *    the exact clean gradient component-wise within 4 standard errors;
 *  - gradient-noise variance: the trace variance of the injected gradient
 *    noise must equal sigma^2 * E[||grad log pi||^2] within 5%;
 *  - convergence trend: median t_gamma over a dither grid must not increase
 *    with the injected noise scale (within seed noise), and the dithered
 *    preset must beat the clean baseline outright.
 *
 * Verifiers are pure given (params, seed). The sweep fans grid cells out
 * across threads; each cell owns its runs and the merged table is
 * order-independent.
 */

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ditherlab/common.hpp"
#include "ditherlab/config.hpp"
#include "ditherlab/engine.hpp"
#include "ditherlab/environment.hpp"
#include "ditherlab/noise.hpp"
#include "ditherlab/policy.hpp"

namespace ditherlab {

// ============================================================================
// Stability summary
// ============================================================================

struct StabilitySummary {
  double vanish_fraction = 0.0;
  double explode_fraction = 0.0;
  long longest_vanish_streak = 0;
};

inline StabilitySummary stability_summary(std::span<const double> norms,
                                          const GradClassifierConfig& cfg) {
  cfg.validate();
  if (norms.empty()) throw InputError("stability_summary: empty log");
  StabilitySummary s;
  long vanish = 0, explode = 0, streak = 0;
  for (double n : norms) {
    const GradClass c = classify_grad(n, cfg);
    if (c == GradClass::Vanishing) {
      ++vanish;
      ++streak;
      s.longest_vanish_streak = std::max(s.longest_vanish_streak, streak);
    } else {
      streak = 0;
      if (c == GradClass::Exploding) ++explode;
    }
  }
  s.vanish_fraction = static_cast<double>(vanish) / static_cast<double>(norms.size());
  s.explode_fraction = static_cast<double>(explode) / static_cast<double>(norms.size());
  return s;
}

/// Classifies the pre-clipping norms recorded in the log.
inline StabilitySummary stability_summary(const TrainLog& log, const GradClassifierConfig& cfg) {
  std::vector<double> norms;
  norms.reserve(log.size());
  for (const auto& row : log) norms.push_back(row.grad_norm);
  return stability_summary(norms, cfg);
}

// ============================================================================
// Proposition reports
// ============================================================================

struct PropositionReport {
  std::string proposition;
  double statistic = 0.0;
  double theoretical = 0.0;
  double tolerance = 0.0;
  std::string tolerance_kind;  // "se_units" | "relative" | "absolute"
  bool pass = false;
  long sample_count = 0;
};

inline nlohmann::json to_json(const PropositionReport& r) {
  return {{"proposition", r.proposition}, {"statistic", r.statistic},
          {"theoretical", r.theoretical}, {"tolerance", r.tolerance},
          {"tolerance_kind", r.tolerance_kind}, {"pass", r.pass},
          {"sample_count", r.sample_count}};
}

namespace detail {

// Single-output sampler over a fixed parameter snapshot with cached per-row
// probability tables; the MC verifiers draw millions of outputs.
class PolicySampler {
 public:
  explicit PolicySampler(const ParamTable& pt) : pt_(&pt), probs_(pt.rows()) {}

  const std::vector<double>& row_probs(int r) {
    if (probs_[r].empty()) probs_[r] = softmax(pt_->row(r));
    return probs_[r];
  }

  void sample(int x, rng::Engine& eng, std::vector<int>& out) {
    if (pt_->kind == PolicyKind::SequenceBandit) {
      out.assign(1, rng::sample_index(eng, row_probs(x)));
      return;
    }
    out.resize(static_cast<std::size_t>(pt_->seq_len));
    for (int t = 0; t < pt_->seq_len; ++t) {
      const int r = pt_->context_row(x, t, t == 0 ? 0 : out[t - 1]);
      out[static_cast<std::size_t>(t)] = rng::sample_index(eng, row_probs(r));
    }
  }

 private:
  const ParamTable* pt_;
  std::vector<std::vector<double>> probs_;
};

// Accumulates per-component running sums of sparse score-vector estimates
// coeff * grad log pi(o|x); untouched components implicitly contribute zero.
struct ScoreMoments {
  std::vector<double> sum, sumsq;

  explicit ScoreMoments(std::size_t dim) : sum(dim, 0.0), sumsq(dim, 0.0) {}

  void add(const ParamTable& pt, PolicySampler& sampler, int x, std::span<const int> o,
           double coeff) {
    auto add_row = [&](int r, int y) {
      const auto& p = sampler.row_probs(r);
      double* s = sum.data() + pt.row_offsets[r];
      double* q = sumsq.data() + pt.row_offsets[r];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double v = coeff * ((static_cast<int>(j) == y ? 1.0 : 0.0) - p[j]);
        s[j] += v;
        q[j] += v * v;
      }
    };
    if (pt.kind == PolicyKind::SequenceBandit) {
      add_row(x, o[0]);
      return;
    }
    for (int t = 0; t < pt.seq_len; ++t) {
      add_row(pt.context_row(x, t, t == 0 ? 0 : o[t - 1]), o[t]);
    }
  }
};

inline int draw_prompt(int prompts, rng::Engine& eng) {
  return std::min(prompts - 1, static_cast<int>(rng::uniform01(eng) * prompts));
}

}  // namespace detail

/// Proposition check: dithering keeps the policy-gradient estimate unbiased.
/// Draws n one-sample REINFORCE estimates with dithered rewards and compares
/// their mean to the exact clean gradient; the statistic is the largest
/// component deviation in standard-error units (pass at <= 4).
///
/// fixture_relative_bias is a test-only hook that skews each dithered total
/// by bias * raw_total, giving the check something real to catch. A constant
/// shift would not do: it is absorbed by the zero score-function expectation.
inline PropositionReport check_unbiasedness(const ParamTable& params, const Environment& env,
                                            const NoiseSpec& spec, long n, rng::Engine& eng,
                                            long step = 0, double fixture_relative_bias = 0.0) {
  if (n < 10000) throw InputError("check_unbiasedness: need N >= 1e4");
  spec.validate();
  const int prompts = env.spec.prompts;
  const std::vector<double> mags = env.component_magnitudes();

  GradVector exact = GradVector::zeros_like(params);
  for (int x = 0; x < prompts; ++x) {
    const GradVector gx = exact_reinforce_gradient(params, x, [&](std::span<const int> o) {
      return env.evaluate(x, env.output_tokens(params.kind, o)).raw_total;
    });
    exact.axpy(1.0 / static_cast<double>(prompts), gx);
  }

  detail::PolicySampler sampler(params);
  detail::ScoreMoments moments(params.values.size());
  std::vector<int> out;
  for (long i = 0; i < n; ++i) {
    const int x = detail::draw_prompt(prompts, eng);
    sampler.sample(x, eng, out);
    RewardSample rs = env.evaluate(x, env.output_tokens(params.kind, out));
    rs = dither(std::move(rs), spec, mags, step, eng);
    const double reward = rs.dithered_total + fixture_relative_bias * rs.raw_total;
    moments.add(params, sampler, x, out, reward);
  }

  double max_z = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < params.values.size(); ++j) {
    const double mean = moments.sum[j] * inv_n;
    const double var = std::max(0.0, moments.sumsq[j] * inv_n - mean * mean);
    const double se = std::sqrt(var * inv_n);
    const double diff = std::abs(mean - exact.values[j]);
    const double z = se > 0.0 ? diff / se
                              : (diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
    max_z = std::max(max_z, z);
  }

  PropositionReport r;
  r.proposition = "prop1_unbiased_gradient";
  r.statistic = max_z;
  r.theoretical = 0.0;
  r.tolerance = 4.0;
  r.tolerance_kind = "se_units";
  r.pass = max_z <= 4.0;
  r.sample_count = n;
  return r;
}

/// Proposition check: the injected gradient noise has trace variance
/// sigma^2 * E[||grad log pi||^2]. The statistic is the empirical trace
/// variance of one-sample noise-gradient terms eps * grad log pi; pass at
/// relative error < 5% (exact zero when sigma = 0).
inline PropositionReport check_gradient_noise_variance(const ParamTable& params,
                                                       const Environment& env, double sigma,
                                                       long n, rng::Engine& eng) {
  if (n < 10000) throw InputError("check_gradient_noise_variance: need N >= 1e4");
  if (sigma < 0.0) throw InputError("check_gradient_noise_variance: sigma must be >= 0");
  const int prompts = env.spec.prompts;

  double expected_sq = 0.0;
  for (int x = 0; x < prompts; ++x) expected_sq += expected_sq_score_norm(params, x);
  expected_sq /= static_cast<double>(prompts);
  const double theoretical = sigma * sigma * expected_sq;

  detail::PolicySampler sampler(params);
  detail::ScoreMoments moments(params.values.size());
  std::vector<int> out;
  for (long i = 0; i < n; ++i) {
    const int x = detail::draw_prompt(prompts, eng);
    sampler.sample(x, eng, out);
    const double eps = rng::gaussian(eng) * sigma;
    moments.add(params, sampler, x, out, eps);
  }

  double trace_var = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < params.values.size(); ++j) {
    const double mean = moments.sum[j] * inv_n;
    trace_var += std::max(0.0, moments.sumsq[j] * inv_n - mean * mean);
  }

  PropositionReport r;
  r.proposition = "prop2_gradient_noise_variance";
  r.statistic = trace_var;
  r.theoretical = theoretical;
  r.sample_count = n;
  if (sigma == 0.0) {
    r.tolerance = 0.0;
    r.tolerance_kind = "absolute";
    r.pass = trace_var == 0.0;
  } else {
    r.tolerance = 0.05;
    r.tolerance_kind = "relative";
    r.pass = std::abs(trace_var - theoretical) <= 0.05 * theoretical;
  }
  return r;
}

// ============================================================================
// Convergence time
// ============================================================================

struct ConvergenceRecord {
  double gamma = 0.0;
  double t_gamma = std::numeric_limits<double>::infinity();  // +inf = budget exhausted
  double baseline_expected_reward = 0.0;
  std::vector<std::pair<long, double>> trace;  // (step, exact expected true reward)
};

/// Runs the configured experiment (cfg.steps is the budget) and records the
/// first step at which the exact expected true reward clears baseline +
/// gamma. The criterion is evaluated on exact expectations, so it is
/// noise-free given the parameter trajectory.
inline ConvergenceRecord measure_t_gamma(const ExperimentConfig& cfg, double gamma,
                                         std::uint64_t seed) {
  if (!(gamma > 0.0)) throw InputError("measure_t_gamma: gamma must be > 0");
  ExperimentConfig run_cfg = cfg;
  run_cfg.gamma = gamma;
  run_cfg.track_true_reward = true;
  const RunArtifacts art = execute_run(run_cfg, seed, /*collect_reward_samples=*/false);
  ConvergenceRecord rec;
  rec.gamma = gamma;
  rec.t_gamma = art.t_gamma;
  rec.baseline_expected_reward = art.baseline_true_reward;
  rec.trace.reserve(art.true_reward_trace.size());
  for (std::size_t s = 0; s < art.true_reward_trace.size(); ++s) {
    rec.trace.emplace_back(static_cast<long>(s), art.true_reward_trace[s]);
  }
  return rec;
}

// ============================================================================
// Variance sweep
// ============================================================================

inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (std::isinf(v[lo]) && std::isinf(v[hi])) return v[lo];
  return v[lo] + frac * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

struct SweepRow {
  double m = 0.0;                // dither scale (relative)
  double sigma_effective = 0.0;  // total injected std at full schedule scale
  double t_gamma_median = 0.0;
  double t_gamma_iqr_low = 0.0;
  double t_gamma_iqr_high = 0.0;
  double final_reward_median = 0.0;
  int seeds = 0;
  std::vector<double> t_gammas;       // per-seed values, seed-paired across rows
  std::vector<double> final_rewards;
};

/// One row per dither scale: medians and interquartile ranges of t_gamma and
/// the final exact expected reward over `num_seeds` paired seeds (the same
/// derived seed list is reused in every cell, which cancels most seed noise
/// out of cross-cell comparisons). Grid cells execute concurrently.
inline std::vector<SweepRow> variance_sweep(const ExperimentConfig& base,
                                            std::span<const double> m_grid, int num_seeds) {
  if (m_grid.empty()) throw InputError("variance_sweep: empty grid");
  if (num_seeds < 5) throw InputError("variance_sweep: need at least 5 seeds");
  base.validate();

  const Environment env = Environment::make(base.environment);
  const std::vector<double> mags = env.component_magnitudes();
  const std::uint64_t base_seed = base.seeds.front();

  auto run_cell = [&](double m) {
    ExperimentConfig cfg = base;
    if (cfg.noise.kernel == NoiseKernel::None) cfg.noise.kernel = NoiseKernel::Gaussian;
    cfg.noise.m = m;
    cfg.track_true_reward = true;
    SweepRow row;
    row.m = m;
    NoiseSpec full_scale = cfg.noise;
    full_scale.schedule = Schedule{};  // report sigma at schedule scale 1
    row.sigma_effective = total_sigma(full_scale, mags, 0);
    row.seeds = num_seeds;
    for (int j = 0; j < num_seeds; ++j) {
      const RunArtifacts art =
          execute_run(cfg, rng::derive_seed(base_seed, static_cast<std::uint64_t>(j)), false);
      row.t_gammas.push_back(art.t_gamma);
      row.final_rewards.push_back(art.final_true_reward);
    }
    row.t_gamma_median = median(row.t_gammas);
    row.t_gamma_iqr_low = quantile(row.t_gammas, 0.25);
    row.t_gamma_iqr_high = quantile(row.t_gammas, 0.75);
    row.final_reward_median = median(row.final_rewards);
    return row;
  };

  std::vector<std::future<SweepRow>> futures;
  futures.reserve(m_grid.size());
  for (double m : m_grid) {
    futures.push_back(std::async(std::launch::async, run_cell, m));
  }
  std::vector<SweepRow> rows;
  rows.reserve(m_grid.size());
  for (auto& f : futures) rows.push_back(f.get());
  return rows;
}

namespace detail {

// Standard error of a cell median (normal approximation over the finite
// values); infinite t_gammas carry no spread information beyond the median
// itself.
inline double median_se(const std::vector<double>& values) {
  std::vector<double> finite;
  for (double v : values) {
    if (std::isfinite(v)) finite.push_back(v);
  }
  if (finite.size() < 2) return 0.0;
  double mean = 0.0;
  for (double v : finite) mean += v;
  mean /= static_cast<double>(finite.size());
  double var = 0.0;
  for (double v : finite) var += (v - mean) * (v - mean);
  var /= static_cast<double>(finite.size() - 1);
  return 1.2533 * std::sqrt(var / static_cast<double>(finite.size()));
}

}  // namespace detail

struct TrendResult {
  PropositionReport report;
  std::vector<SweepRow> rows;
};

/// Proposition check: median t_gamma is non-increasing in the injected noise
/// scale over the grid (violations must exceed twice the combined
/// seed-noise standard error of the two medians), and the m = 0.05 cell
/// strictly beats the clean m = 0 baseline. The grid must start at 0.
inline TrendResult check_convergence_trend(const ExperimentConfig& base,
                                           std::span<const double> m_grid, int num_seeds) {
  if (m_grid.empty() || m_grid[0] != 0.0) {
    throw InputError("check_convergence_trend: grid must start at m = 0");
  }
  TrendResult result;
  result.rows = variance_sweep(base, m_grid, num_seeds);
  const auto& rows = result.rows;

  bool monotone = true;
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
    const double prev = rows[i].t_gamma_median;
    const double next = rows[i + 1].t_gamma_median;
    if (std::isinf(prev)) continue;  // anything is <= +inf
    const double slack = 2.0 * std::sqrt(std::pow(detail::median_se(rows[i].t_gammas), 2) +
                                         std::pow(detail::median_se(rows[i + 1].t_gammas), 2));
    if (next > prev + slack) monotone = false;
  }

  const SweepRow* dithered = nullptr;
  for (const auto& row : rows) {
    if (row.m == 0.05) dithered = &row;
  }
  if (dithered == nullptr && rows.size() > 1) dithered = &rows[1];

  PropositionReport& r = result.report;
  r.proposition = "prop3_convergence_trend";
  r.statistic = dithered != nullptr ? dithered->t_gamma_median
                                    : std::numeric_limits<double>::infinity();
  r.theoretical = rows[0].t_gamma_median;
  r.tolerance = 0.0;
  r.tolerance_kind = "absolute";
  r.pass = monotone && dithered != nullptr && r.statistic < r.theoretical;
  r.sample_count = static_cast<long>(m_grid.size()) * num_seeds;
  return result;
}

}  // namespace ditherlab
