#pragma once

/**
 * Synthetic task environments with exact, rule-based rewards.
 *
 *  - SparseSeq: one exact-match component of magnitude 1 per prompt. Under a
 *    uniform initial policy the hit probability is V^-L per prompt.
 *  - MultiRewardSeq: five components with magnitudes (2.0, 0.5, 1.0, 1.0,
 *    0.5): exact-match, integer-shape, strict-format, soft-format and a
 *    graded structure-count.
 *  - SignedBandit: fully enumerable bandit (|Y| <= 64) whose ground-truth
 *    scores are reals in [-1, 1] per output.
 *
 * Targets and scores are derived from a fixed stable hash of the indices, so
 * an environment is a deterministic function of its spec (never of the run
 * seed).
 */

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ditherlab/common.hpp"
#include "ditherlab/policy.hpp"
#include "ditherlab/rewards.hpp"
#include "ditherlab/rng.hpp"

namespace ditherlab {

enum class EnvKind { SparseSeq, MultiRewardSeq, SignedBandit };

inline const char* to_string(EnvKind k) {
  switch (k) {
    case EnvKind::SparseSeq: return "sparse_seq";
    case EnvKind::MultiRewardSeq: return "multi_reward_seq";
    default: return "signed_bandit";
  }
}

struct EnvironmentSpec {
  EnvKind kind = EnvKind::SparseSeq;
  int prompts = 8;
  int vocab = 8;       // sequence environments
  int seq_len = 3;     // sequence environments
  int num_outputs = 16;  // SignedBandit

  void validate() const {
    if (prompts < 1) throw ConfigError("environment.prompts: must be >= 1");
    if (kind == EnvKind::SignedBandit) {
      if (num_outputs < 2 || num_outputs > 64) {
        throw ConfigError("environment.num_outputs: signed bandit needs 2..64 outputs");
      }
      return;
    }
    if (vocab < 2) throw ConfigError("environment.vocab: must be >= 2");
    if (seq_len < 1) throw ConfigError("environment.seq_len: must be >= 1");
    if (std::pow(static_cast<double>(vocab), static_cast<double>(seq_len)) > kEnumerationCap) {
      throw ConfigError("environment: vocab^seq_len exceeds the enumeration cap");
    }
  }
};

namespace detail {

inline std::uint64_t env_hash(std::uint64_t a, std::uint64_t b) {
  return rng::splitmix64(rng::splitmix64(a) ^ (b + 0x1234567890ABCDEFULL));
}

inline double env_unit(std::uint64_t a, std::uint64_t b) {
  return static_cast<double>(env_hash(a, b) >> 11) * 0x1.0p-53;
}

}  // namespace detail

struct Environment {
  EnvironmentSpec spec;
  RewardRule rule;
  std::vector<std::vector<int>> targets;          // per prompt, sequence envs
  std::vector<std::vector<double>> signed_scores;  // per prompt per output, SignedBandit

  static Environment make(const EnvironmentSpec& spec);

  // Reward evaluated on token outputs (sequence envs) or {output id}
  // (SignedBandit). The signed bandit bypasses the rule machinery: its score
  // table is the reward, signed values included.
  RewardSample evaluate(int x, std::span<const int> o) const {
    if (spec.kind == EnvKind::SignedBandit) {
      if (o.size() != 1 || o[0] < 0 || o[0] >= spec.num_outputs) {
        throw InputError("signed bandit output must be a single id in range");
      }
      RewardSample s;
      s.raw_components = {signed_scores[static_cast<std::size_t>(x)][static_cast<std::size_t>(o[0])]};
      s.raw_total = s.raw_components[0];
      s.dithered_total = s.raw_total;
      return s;
    }
    return evaluate_reward(rule, x, o);
  }

  // Ground-truth reward r_G. For rule environments the discrete rule IS the
  // ground truth; for the signed bandit it is the score table. Allocation-free:
  // this sits inside per-step exact-expectation enumerations.
  double ground_truth(int x, std::span<const int> o) const {
    if (spec.kind == EnvKind::SignedBandit) {
      if (o.size() != 1 || o[0] < 0 || o[0] >= spec.num_outputs) {
        throw InputError("signed bandit output must be a single id in range");
      }
      return signed_scores[static_cast<std::size_t>(x)][static_cast<std::size_t>(o[0])];
    }
    double total = 0.0;
    for (const auto& c : rule.components) total += c.magnitude * c.fraction(x, o);
    return total;
  }

  std::vector<double> component_magnitudes() const {
    if (spec.kind == EnvKind::SignedBandit) return {1.0};  // |r_G| <= 1
    std::vector<double> mags;
    mags.reserve(rule.components.size());
    for (const auto& c : rule.components) mags.push_back(c.magnitude);
    return mags;
  }

  // Token sequence for a policy output: identity for autoregressive outputs,
  // base-V digit decode for sequence-bandit outputs over a sequence space.
  std::vector<int> output_tokens(PolicyKind policy, std::span<const int> output) const {
    if (spec.kind == EnvKind::SignedBandit || policy == PolicyKind::Autoregressive) {
      return {output.begin(), output.end()};
    }
    std::vector<int> tokens(static_cast<std::size_t>(spec.seq_len));
    int y = output[0];
    for (int t = spec.seq_len - 1; t >= 0; --t) {
      tokens[static_cast<std::size_t>(t)] = y % spec.vocab;
      y /= spec.vocab;
    }
    return tokens;
  }

  // Uniform-initialized policy table matching this environment.
  ParamTable make_policy(PolicyKind kind, bool markov = false) const {
    if (spec.kind == EnvKind::SignedBandit) {
      if (kind != PolicyKind::SequenceBandit) {
        throw ConfigError("signed bandit environments require a sequence-bandit policy");
      }
      return ParamTable::sequence_bandit(spec.prompts, spec.num_outputs);
    }
    if (kind == PolicyKind::SequenceBandit) {
      const double size =
          std::pow(static_cast<double>(spec.vocab), static_cast<double>(spec.seq_len));
      return ParamTable::sequence_bandit(spec.prompts, static_cast<int>(size));
    }
    return ParamTable::autoregressive(spec.prompts, spec.seq_len, spec.vocab, markov);
  }
};

namespace detail {

inline std::vector<int> sparse_target(const EnvironmentSpec& spec, int x) {
  std::vector<int> t(static_cast<std::size_t>(spec.seq_len));
  for (int i = 0; i < spec.seq_len; ++i) {
    t[static_cast<std::size_t>(i)] =
        static_cast<int>(env_hash(static_cast<std::uint64_t>(x), static_cast<std::uint64_t>(i)) %
                         static_cast<std::uint64_t>(spec.vocab));
  }
  return t;
}

// Format-compliant target: begin marker (token 0) first, end marker (token
// V-1) last, a digit-like answer token in the next-to-last slot. Middle
// slots stay off the end marker so the target itself carries no trailing
// penalty.
inline std::vector<int> multi_target(const EnvironmentSpec& spec, int x) {
  const int digit_cut = (spec.vocab + 1) / 2;
  std::vector<int> t(static_cast<std::size_t>(spec.seq_len));
  for (int i = 0; i < spec.seq_len; ++i) {
    t[static_cast<std::size_t>(i)] =
        static_cast<int>(env_hash(static_cast<std::uint64_t>(x), static_cast<std::uint64_t>(i)) %
                         static_cast<std::uint64_t>(spec.vocab - 1));
  }
  t.front() = 0;
  t.back() = spec.vocab - 1;
  if (spec.seq_len >= 2) {
    t[static_cast<std::size_t>(spec.seq_len - 2)] =
        static_cast<int>(env_hash(static_cast<std::uint64_t>(x), 977) %
                         static_cast<std::uint64_t>(digit_cut));
  }
  return t;
}

}  // namespace detail

inline Environment Environment::make(const EnvironmentSpec& spec) {
  spec.validate();
  Environment env;
  env.spec = spec;

  if (spec.kind == EnvKind::SignedBandit) {
    env.signed_scores.resize(static_cast<std::size_t>(spec.prompts));
    for (int x = 0; x < spec.prompts; ++x) {
      auto& row = env.signed_scores[static_cast<std::size_t>(x)];
      row.resize(static_cast<std::size_t>(spec.num_outputs));
      for (int y = 0; y < spec.num_outputs; ++y) {
        row[static_cast<std::size_t>(y)] =
            2.0 * detail::env_unit(static_cast<std::uint64_t>(x) * 1000003ULL,
                                   static_cast<std::uint64_t>(y)) -
            1.0;
      }
    }
    return env;
  }

  env.targets.resize(static_cast<std::size_t>(spec.prompts));
  for (int x = 0; x < spec.prompts; ++x) {
    env.targets[static_cast<std::size_t>(x)] = spec.kind == EnvKind::SparseSeq
                                                   ? detail::sparse_target(spec, x)
                                                   : detail::multi_target(spec, x);
  }

  auto targets = env.targets;  // captured by value: rule outlives nothing
  if (spec.kind == EnvKind::SparseSeq) {
    env.rule.components.push_back(
        {"exact_match", 1.0, [targets](int x, std::span<const int> o) {
           const auto& t = targets[static_cast<std::size_t>(x)];
           return std::equal(t.begin(), t.end(), o.begin(), o.end()) ? 1.0 : 0.0;
         }});
    env.rule.validate();
    return env;
  }

  const int vocab = spec.vocab;
  const int seq_len = spec.seq_len;
  const int digit_cut = (vocab + 1) / 2;
  const int end_marker = vocab - 1;

  env.rule.components.push_back(
      {"exact_match", 2.0, [targets](int x, std::span<const int> o) {
         const auto& t = targets[static_cast<std::size_t>(x)];
         return std::equal(t.begin(), t.end(), o.begin(), o.end()) ? 1.0 : 0.0;
       }});
  env.rule.components.push_back(
      {"integer_shape", 0.5, [seq_len, digit_cut](int, std::span<const int> o) {
         const int slot = seq_len >= 2 ? seq_len - 2 : 0;
         return o[static_cast<std::size_t>(slot)] < digit_cut ? 1.0 : 0.0;
       }});
  env.rule.components.push_back(
      {"strict_format", 1.0, [end_marker](int, std::span<const int> o) {
         return (o.front() == 0 && o.back() == end_marker) ? 1.0 : 0.0;
       }});
  env.rule.components.push_back(
      {"soft_format", 1.0, [end_marker](int, std::span<const int> o) {
         return o.back() == end_marker ? 1.0 : 0.0;
       }});
  // Graded structure count: up to four template markers at 1/4 fraction
  // each, minus 0.002 fraction (0.001 of the 0.5 magnitude) per token
  // trailing the first end marker; clamped into [0, 1].
  env.rule.components.push_back(
      {"structure_count", 0.5, [targets, end_marker](int x, std::span<const int> o) {
         const auto& t = targets[static_cast<std::size_t>(x)];
         const int checked = std::min<int>(4, static_cast<int>(t.size()));
         int markers = 0;
         for (int i = 0; i < checked; ++i) {
           if (o[static_cast<std::size_t>(i)] == t[static_cast<std::size_t>(i)]) ++markers;
         }
         int first_end = static_cast<int>(o.size()) - 1;
         for (std::size_t i = 0; i < o.size(); ++i) {
           if (o[i] == end_marker) {
             first_end = static_cast<int>(i);
             break;
           }
         }
         const int extra = static_cast<int>(o.size()) - 1 - first_end;
         const double f = static_cast<double>(markers) / 4.0 - 0.002 * extra;
         return std::min(1.0, std::max(0.0, f));
       }});
  env.rule.validate();
  return env;
}

}  // namespace ditherlab
