#pragma once

/**
 * Tabular softmax policies over finite output spaces.
 *
 * Two parameterizations:
 *  - SequenceBandit: one logit row per prompt over a finite set of whole
 *    outputs (rows may be ragged across prompts).
 *  - Autoregressive: one logit row per (prompt, position) context over a
 *    vocabulary, optionally conditioned on the preceding token (1-token
 *    Markov window). Output probability is the product over positions.
 *
 * Everything here is a pure function over immutable parameter snapshots.
 * Sampling, log-probabilities, score-function gradients, exact expectations
 * and exact KL are all available in closed form; expectation-style
 * operations enumerate the output space and refuse past kEnumerationCap.
 * Softmax is evaluated in the log domain with max-subtraction throughout.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditherlab/common.hpp"
#include "ditherlab/rng.hpp"

namespace ditherlab {

enum class PolicyKind { SequenceBandit, Autoregressive };

inline const char* to_string(PolicyKind k) {
  return k == PolicyKind::SequenceBandit ? "sequence_bandit" : "autoregressive";
}

// ============================================================================
// ParamTable
// ============================================================================

struct ParamTable {
  PolicyKind kind = PolicyKind::SequenceBandit;
  int prompts = 0;
  int seq_len = 1;   // 1 for SequenceBandit
  int vocab = 0;     // 0 for SequenceBandit (row sizes carry the output counts)
  bool markov = false;

  std::vector<int> row_offsets;  // size rows()+1, prefix sums into values
  std::vector<double> values;    // flat logits, row-major

  static ParamTable sequence_bandit(int prompts, int outputs) {
    if (prompts < 1 || outputs < 1) {
      throw ConfigError("ParamTable: sequence bandit needs prompts >= 1 and outputs >= 1");
    }
    ParamTable pt;
    pt.kind = PolicyKind::SequenceBandit;
    pt.prompts = prompts;
    pt.row_offsets.resize(prompts + 1);
    for (int i = 0; i <= prompts; ++i) pt.row_offsets[i] = i * outputs;
    pt.values.assign(static_cast<std::size_t>(prompts) * outputs, 0.0);
    return pt;
  }

  static ParamTable sequence_bandit(const std::vector<int>& outputs_per_prompt) {
    if (outputs_per_prompt.empty()) {
      throw ConfigError("ParamTable: sequence bandit needs at least one prompt");
    }
    ParamTable pt;
    pt.kind = PolicyKind::SequenceBandit;
    pt.prompts = static_cast<int>(outputs_per_prompt.size());
    pt.row_offsets.resize(outputs_per_prompt.size() + 1);
    pt.row_offsets[0] = 0;
    for (std::size_t i = 0; i < outputs_per_prompt.size(); ++i) {
      if (outputs_per_prompt[i] < 1) {
        throw ConfigError("ParamTable: every prompt needs outputs >= 1");
      }
      pt.row_offsets[i + 1] = pt.row_offsets[i] + outputs_per_prompt[i];
    }
    pt.values.assign(static_cast<std::size_t>(pt.row_offsets.back()), 0.0);
    return pt;
  }

  static ParamTable autoregressive(int prompts, int seq_len, int vocab, bool markov = false) {
    if (prompts < 1 || seq_len < 1 || vocab < 1) {
      throw ConfigError("ParamTable: autoregressive needs prompts, seq_len, vocab >= 1");
    }
    ParamTable pt;
    pt.kind = PolicyKind::Autoregressive;
    pt.prompts = prompts;
    pt.seq_len = seq_len;
    pt.vocab = vocab;
    pt.markov = markov;
    const int rows = markov ? prompts * seq_len * vocab : prompts * seq_len;
    pt.row_offsets.resize(rows + 1);
    for (int i = 0; i <= rows; ++i) pt.row_offsets[i] = i * vocab;
    pt.values.assign(static_cast<std::size_t>(rows) * vocab, 0.0);
    return pt;
  }

  int rows() const { return static_cast<int>(row_offsets.size()) - 1; }
  int row_size(int r) const { return row_offsets[r + 1] - row_offsets[r]; }

  std::span<const double> row(int r) const {
    return {values.data() + row_offsets[r], static_cast<std::size_t>(row_size(r))};
  }
  std::span<double> row(int r) {
    return {values.data() + row_offsets[r], static_cast<std::size_t>(row_size(r))};
  }

  // Context row for autoregressive policies. With the Markov window the row
  // depends on the preceding token; position 0 always uses the prev=0 slot.
  int context_row(int x, int t, int prev) const {
    if (!markov) return x * seq_len + t;
    return (x * seq_len + t) * vocab + (t == 0 ? 0 : prev);
  }

  bool same_shape(const ParamTable& other) const {
    return kind == other.kind && prompts == other.prompts && seq_len == other.seq_len &&
           vocab == other.vocab && markov == other.markov && row_offsets == other.row_offsets;
  }

  void validate() const {
    if (prompts < 1 || rows() < 1) throw ConfigError("ParamTable: empty table");
    for (double v : values) {
      if (!std::isfinite(v)) throw ConfigError("ParamTable: non-finite logit");
    }
  }
};

// ============================================================================
// Softmax (log domain, max-subtraction)
// ============================================================================

inline std::vector<double> log_softmax(std::span<const double> logits) {
  double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out = log_softmax(logits);
  for (double& v : out) v = std::exp(v);
  return out;
}

// Lazily materialized per-row log-softmax tables for one parameter snapshot.
class LogSoftmaxCache {
 public:
  explicit LogSoftmaxCache(const ParamTable& pt) : pt_(&pt), rows_(pt.rows()) {}

  std::span<const double> operator()(int r) {
    if (rows_[r].empty()) rows_[r] = log_softmax(pt_->row(r));
    return rows_[r];
  }

 private:
  const ParamTable* pt_;
  std::vector<std::vector<double>> rows_;
};

// ============================================================================
// Trajectory / GradVector
// ============================================================================

struct Trajectory {
  int prompt = 0;
  std::vector<int> output;  // single output id for SequenceBandit, L tokens otherwise
  double logprob_current = 0.0;
  double logprob_old = 0.0;
};

/// Dense parameter-shaped gradient buffer; indexing mirrors ParamTable.values.
struct GradVector {
  std::vector<double> values;

  static GradVector zeros_like(const ParamTable& pt) {
    GradVector g;
    g.values.assign(pt.values.size(), 0.0);
    return g;
  }

  double norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
  }

  void axpy(double a, const GradVector& other) {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += a * other.values[i];
  }

  void scale(double a) {
    for (double& v : values) v *= a;
  }

  bool finite() const {
    for (double v : values) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

// ============================================================================
// Validation helpers
// ============================================================================

namespace detail {

inline void check_prompt(const ParamTable& pt, int x) {
  if (x < 0 || x >= pt.prompts) {
    throw InputError("invalid prompt id " + std::to_string(x) + " (table has " +
                     std::to_string(pt.prompts) + " prompts)");
  }
}

inline void check_output(const ParamTable& pt, int x, std::span<const int> o) {
  if (pt.kind == PolicyKind::SequenceBandit) {
    if (o.size() != 1) throw InputError("sequence bandit output must be a single id");
    if (o[0] < 0 || o[0] >= pt.row_size(x)) {
      throw InputError("output id " + std::to_string(o[0]) + " out of range for prompt " +
                       std::to_string(x));
    }
  } else {
    if (static_cast<int>(o.size()) != pt.seq_len) {
      throw InputError("output length " + std::to_string(o.size()) + " != seq_len " +
                       std::to_string(pt.seq_len));
    }
    for (int tok : o) {
      if (tok < 0 || tok >= pt.vocab) {
        throw InputError("token " + std::to_string(tok) + " out of vocabulary");
      }
    }
  }
}

}  // namespace detail

inline double output_space_size(const ParamTable& pt, int x) {
  detail::check_prompt(pt, x);
  if (pt.kind == PolicyKind::SequenceBandit) return static_cast<double>(pt.row_size(x));
  return std::pow(static_cast<double>(pt.vocab), static_cast<double>(pt.seq_len));
}

namespace detail {

inline void check_enumerable(const ParamTable& pt, int x) {
  if (output_space_size(pt, x) > kEnumerationCap) {
    throw CapacityError("output space for prompt " + std::to_string(x) +
                        " exceeds the enumeration cap of " + std::to_string(kEnumerationCap) +
                        "; use mc_expected_reward for a Monte-Carlo estimate");
  }
}

}  // namespace detail

// ============================================================================
// Core operations
// ============================================================================

/// log pi_theta(o|x); for autoregressive policies, the sum of per-token
/// softmax log-probabilities.
inline double logprob(const ParamTable& pt, int x, std::span<const int> o) {
  detail::check_prompt(pt, x);
  detail::check_output(pt, x, o);
  if (pt.kind == PolicyKind::SequenceBandit) {
    return log_softmax(pt.row(x))[static_cast<std::size_t>(o[0])];
  }
  double lp = 0.0;
  for (int t = 0; t < pt.seq_len; ++t) {
    const int r = pt.context_row(x, t, t == 0 ? 0 : o[t - 1]);
    lp += log_softmax(pt.row(r))[static_cast<std::size_t>(o[t])];
  }
  return lp;
}

/// G i.i.d. samples from pi_theta(.|x). Deterministic given the engine state;
/// logprob_current and logprob_old are both evaluated under pt (callers that
/// keep a distinct behavior policy overwrite logprob_old afterwards).
inline std::vector<Trajectory> sample_group(const ParamTable& pt, int x, int group_size,
                                            rng::Engine& eng) {
  detail::check_prompt(pt, x);
  if (group_size < 2) {
    throw ConfigError("sample_group: group statistics need G >= 2, got " +
                      std::to_string(group_size));
  }
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(group_size));
  if (pt.kind == PolicyKind::SequenceBandit) {
    const std::vector<double> lsm = log_softmax(pt.row(x));
    std::vector<double> probs(lsm.size());
    for (std::size_t i = 0; i < lsm.size(); ++i) probs[i] = std::exp(lsm[i]);
    for (int g = 0; g < group_size; ++g) {
      const int y = rng::sample_index(eng, probs);
      Trajectory tr;
      tr.prompt = x;
      tr.output = {y};
      tr.logprob_current = lsm[static_cast<std::size_t>(y)];
      tr.logprob_old = tr.logprob_current;
      out.push_back(std::move(tr));
    }
    return out;
  }
  LogSoftmaxCache lsm(pt);
  std::vector<std::vector<double>> prob_cache(pt.rows());
  auto probs_for = [&](int r) -> const std::vector<double>& {
    if (prob_cache[r].empty()) {
      auto ls = lsm(r);
      prob_cache[r].resize(ls.size());
      for (std::size_t i = 0; i < ls.size(); ++i) prob_cache[r][i] = std::exp(ls[i]);
    }
    return prob_cache[r];
  };
  for (int g = 0; g < group_size; ++g) {
    Trajectory tr;
    tr.prompt = x;
    tr.output.resize(static_cast<std::size_t>(pt.seq_len));
    double lp = 0.0;
    for (int t = 0; t < pt.seq_len; ++t) {
      const int r = pt.context_row(x, t, t == 0 ? 0 : tr.output[t - 1]);
      const int tok = rng::sample_index(eng, probs_for(r));
      tr.output[static_cast<std::size_t>(t)] = tok;
      lp += lsm(r)[static_cast<std::size_t>(tok)];
    }
    tr.logprob_current = lp;
    tr.logprob_old = lp;
    out.push_back(std::move(tr));
  }
  return out;
}

namespace detail {

// grad.row(r)[j] += coeff * (1[j == y] - softmax(row)[j]); the closed-form
// score of one softmax context. Entries of each touched row sum to zero.
inline void add_scaled_score_row(GradVector& grad, const ParamTable& pt, LogSoftmaxCache& lsm,
                                 int r, int y, double coeff) {
  const auto ls = lsm(r);
  double* g = grad.values.data() + pt.row_offsets[r];
  for (std::size_t j = 0; j < ls.size(); ++j) g[j] -= coeff * std::exp(ls[j]);
  g[y] += coeff;
}

inline void add_scaled_grad_logprob(GradVector& grad, const ParamTable& pt, LogSoftmaxCache& lsm,
                                    int x, std::span<const int> o, double coeff) {
  if (pt.kind == PolicyKind::SequenceBandit) {
    add_scaled_score_row(grad, pt, lsm, x, o[0], coeff);
    return;
  }
  for (int t = 0; t < pt.seq_len; ++t) {
    const int r = pt.context_row(x, t, t == 0 ? 0 : o[t - 1]);
    add_scaled_score_row(grad, pt, lsm, r, o[t], coeff);
  }
}

}  // namespace detail

/// Exact analytic score gradient of log pi_theta(o|x): indicator minus
/// probabilities at every context visited by o, zero elsewhere.
inline GradVector grad_logprob(const ParamTable& pt, int x, std::span<const int> o) {
  detail::check_prompt(pt, x);
  detail::check_output(pt, x, o);
  GradVector g = GradVector::zeros_like(pt);
  LogSoftmaxCache lsm(pt);
  detail::add_scaled_grad_logprob(g, pt, lsm, x, o, 1.0);
  return g;
}

// ============================================================================
// Enumeration
// ============================================================================

/// Visits every output o of prompt x as (output tokens, log pi(o|x)).
/// Throws CapacityError past the enumeration cap.
template <typename Visitor>
void enumerate_outputs(const ParamTable& pt, int x, Visitor&& visit) {
  detail::check_prompt(pt, x);
  detail::check_enumerable(pt, x);
  if (pt.kind == PolicyKind::SequenceBandit) {
    const std::vector<double> lsm = log_softmax(pt.row(x));
    for (int y = 0; y < static_cast<int>(lsm.size()); ++y) {
      visit(std::span<const int>(&y, 1), lsm[static_cast<std::size_t>(y)]);
    }
    return;
  }
  LogSoftmaxCache lsm(pt);
  std::vector<int> out(static_cast<std::size_t>(pt.seq_len));
  auto rec = [&](auto&& self, int t, double lp) -> void {
    if (t == pt.seq_len) {
      visit(std::span<const int>(out.data(), out.size()), lp);
      return;
    }
    const int r = pt.context_row(x, t, t == 0 ? 0 : out[t - 1]);
    const auto ls = lsm(r);
    for (int v = 0; v < pt.vocab; ++v) {
      out[static_cast<std::size_t>(t)] = v;
      self(self, t + 1, lp + ls[static_cast<std::size_t>(v)]);
    }
  };
  rec(rec, 0, 0.0);
}

/// Exact expected reward sum_o pi(o|x) R(x, o) over an enumerable output
/// space. Used by convergence-time measurement so the criterion is noise-free.
template <typename RewardFn>
double expected_reward(const ParamTable& pt, int x, RewardFn&& reward) {
  double acc = 0.0;
  enumerate_outputs(pt, x, [&](std::span<const int> o, double lp) {
    acc += std::exp(lp) * reward(o);
  });
  return acc;
}

struct McEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
  long samples = 0;
};

/// Monte-Carlo fallback for output spaces past the enumeration cap: sample
/// mean of R over draws from pi(.|x) with its standard error.
template <typename RewardFn>
McEstimate mc_expected_reward(const ParamTable& pt, int x, RewardFn&& reward, long n,
                              rng::Engine& eng) {
  if (n < 2) throw InputError("mc_expected_reward: need n >= 2");
  double sum = 0.0, sumsq = 0.0;
  for (long i = 0; i < n; ++i) {
    auto group = sample_group(pt, x, 2, eng);  // draw pairs to reuse the sampler
    for (auto& tr : group) {
      const double r = reward(std::span<const int>(tr.output.data(), tr.output.size()));
      sum += r;
      sumsq += r * r;
    }
  }
  McEstimate est;
  est.samples = 2 * n;
  est.mean = sum / static_cast<double>(est.samples);
  const double var =
      std::max(0.0, sumsq / static_cast<double>(est.samples) - est.mean * est.mean);
  est.standard_error = std::sqrt(var / static_cast<double>(est.samples));
  return est;
}

// ============================================================================
// KL divergence (exact)
// ============================================================================

namespace detail {

// KL between two softmax rows given their log-softmax tables; optionally
// accumulates coeff * dKL/dtheta_p into grad at the row of p.
inline double kl_row(std::span<const double> lp, std::span<const double> lq, GradVector* grad,
                     const ParamTable* pt, int r, double coeff) {
  double kl = 0.0;
  for (std::size_t j = 0; j < lp.size(); ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
  if (grad != nullptr) {
    double* g = grad->values.data() + pt->row_offsets[r];
    for (std::size_t j = 0; j < lp.size(); ++j) {
      g[j] += coeff * std::exp(lp[j]) * ((lp[j] - lq[j]) - kl);
    }
  }
  return kl;
}

// Exact D_KL(pi_theta(.|x) || pi_ref(.|x)), optionally with its gradient
// w.r.t. theta (scaled by coeff). Closed row forms where the policy
// factorizes; full enumeration for Markov-windowed autoregressive tables.
inline double kl_with_grad(const ParamTable& pt, const ParamTable& ref, int x, GradVector* grad,
                           double coeff) {
  if (!pt.same_shape(ref)) throw InputError("kl_divergence: parameter tables differ in shape");
  check_prompt(pt, x);
  LogSoftmaxCache lp_cache(pt);
  LogSoftmaxCache lq_cache(ref);
  if (pt.kind == PolicyKind::SequenceBandit) {
    return kl_row(lp_cache(x), lq_cache(x), grad, &pt, x, coeff);
  }
  if (!pt.markov) {
    // Product of independent per-position distributions: KL sums by row.
    double kl = 0.0;
    for (int t = 0; t < pt.seq_len; ++t) {
      const int r = pt.context_row(x, t, 0);
      kl += kl_row(lp_cache(r), lq_cache(r), grad, &pt, r, coeff);
    }
    return kl;
  }
  check_enumerable(pt, x);
  double kl = 0.0;
  std::vector<int> out(static_cast<std::size_t>(pt.seq_len));
  auto rec = [&](auto&& self, int t, double lp, double lq) -> void {
    if (t == pt.seq_len) {
      const double w = std::exp(lp);
      kl += w * (lp - lq);
      if (grad != nullptr) {
        add_scaled_grad_logprob(*grad, pt, lp_cache, x,
                                std::span<const int>(out.data(), out.size()),
                                coeff * w * (lp - lq));
      }
      return;
    }
    const int r = pt.context_row(x, t, t == 0 ? 0 : out[t - 1]);
    const auto lps = lp_cache(r);
    const auto lqs = lq_cache(r);
    for (int v = 0; v < pt.vocab; ++v) {
      out[static_cast<std::size_t>(t)] = v;
      self(self, t + 1, lp + lps[static_cast<std::size_t>(v)],
           lq + lqs[static_cast<std::size_t>(v)]);
    }
  };
  rec(rec, 0, 0.0, 0.0);
  return kl;
}

}  // namespace detail

inline double kl_divergence(const ParamTable& pt, const ParamTable& ref, int x) {
  return detail::kl_with_grad(pt, ref, x, nullptr, 0.0);
}

// ============================================================================
// Exact expectations used by the proposition verifiers
// ============================================================================

/// Exact REINFORCE gradient sum_o pi(o|x) R(x,o) grad log pi(o|x).
template <typename RewardFn>
GradVector exact_reinforce_gradient(const ParamTable& pt, int x, RewardFn&& reward) {
  GradVector g = GradVector::zeros_like(pt);
  LogSoftmaxCache lsm(pt);
  enumerate_outputs(pt, x, [&](std::span<const int> o, double lp) {
    const double w = std::exp(lp) * reward(o);
    if (w != 0.0) detail::add_scaled_grad_logprob(g, pt, lsm, x, o, w);
  });
  return g;
}

/// Exact E_{o~pi}[ ||grad log pi(o|x)||^2 ].
inline double expected_sq_score_norm(const ParamTable& pt, int x) {
  detail::check_prompt(pt, x);
  LogSoftmaxCache lsm(pt);
  // Per touched row: ||e_y - pi||^2 = 1 - 2 pi_y + sum_k pi_k^2.
  std::vector<double> row_sumsq(pt.rows(), -1.0);
  auto sumsq_for = [&](int r) {
    if (row_sumsq[r] < 0.0) {
      double s = 0.0;
      for (double l : lsm(r)) s += std::exp(2.0 * l);
      row_sumsq[r] = s;
    }
    return row_sumsq[r];
  };
  double acc = 0.0;
  enumerate_outputs(pt, x, [&](std::span<const int> o, double lp) {
    double sq = 0.0;
    if (pt.kind == PolicyKind::SequenceBandit) {
      const auto ls = lsm(x);
      sq = 1.0 - 2.0 * std::exp(ls[static_cast<std::size_t>(o[0])]) + sumsq_for(x);
    } else {
      for (int t = 0; t < pt.seq_len; ++t) {
        const int r = pt.context_row(x, t, t == 0 ? 0 : o[t - 1]);
        const auto ls = lsm(r);
        sq += 1.0 - 2.0 * std::exp(ls[static_cast<std::size_t>(o[t])]) + sumsq_for(r);
      }
    }
    acc += std::exp(lp) * sq;
  });
  return acc;
}

// ============================================================================
// Serialization: {kind, dims, logits} with bit-exact round trip
// ============================================================================

inline nlohmann::json to_json(const ParamTable& pt) {
  nlohmann::json j;
  j["kind"] = to_string(pt.kind);
  nlohmann::json dims;
  dims["prompts"] = pt.prompts;
  dims["seq_len"] = pt.seq_len;
  dims["vocab"] = pt.vocab;
  dims["markov"] = pt.markov;
  if (pt.kind == PolicyKind::SequenceBandit) {
    std::vector<int> sizes(static_cast<std::size_t>(pt.rows()));
    for (int r = 0; r < pt.rows(); ++r) sizes[static_cast<std::size_t>(r)] = pt.row_size(r);
    dims["row_sizes"] = sizes;
  }
  j["dims"] = dims;
  j["logits"] = pt.values;
  return j;
}

inline ParamTable param_table_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  const auto& dims = j.at("dims");
  ParamTable pt;
  if (kind == "sequence_bandit") {
    pt = ParamTable::sequence_bandit(dims.at("row_sizes").get<std::vector<int>>());
  } else if (kind == "autoregressive") {
    pt = ParamTable::autoregressive(dims.at("prompts").get<int>(), dims.at("seq_len").get<int>(),
                                    dims.at("vocab").get<int>(), dims.at("markov").get<bool>());
  } else {
    throw ConfigError("param table: unknown kind '" + kind + "'");
  }
  const auto logits = j.at("logits").get<std::vector<double>>();
  if (logits.size() != pt.values.size()) {
    throw ConfigError("param table: logits length " + std::to_string(logits.size()) +
                      " does not match dims (" + std::to_string(pt.values.size()) + ")");
  }
  pt.values = logits;
  pt.validate();
  return pt;
}

}  // namespace ditherlab
