#pragma once

/**
 * Experiment configuration: a single self-describing JSON document per run.
 * parse -> serialize -> parse is an identity. A config may name a preset;
 * explicit keys are merged over the preset with RFC 7386 semantics.
 */

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditherlab/common.hpp"
#include "ditherlab/environment.hpp"
#include "ditherlab/noise.hpp"
#include "ditherlab/optimizer.hpp"

namespace ditherlab {

struct PolicySpec {
  PolicyKind kind = PolicyKind::Autoregressive;
  bool markov = false;
};

struct ExperimentConfig {
  std::string name = "custom";
  EnvironmentSpec environment;
  PolicySpec policy;
  int group_size = 4;
  double learning_rate = 0.05;
  long steps = 5000;
  ClipConfig clip;
  NoiseSpec noise;
  GradClassifierConfig classifier;
  std::vector<std::uint64_t> seeds = {1};
  std::string out_dir = "runs";
  double gamma = 0.1;
  bool track_true_reward = true;

  TrainConfig train_config() const {
    TrainConfig t;
    t.group_size = group_size;
    t.learning_rate = learning_rate;
    t.clip = clip;
    t.classifier = classifier;
    return t;
  }

  void validate() const {
    environment.validate();
    if (environment.kind == EnvKind::SignedBandit && policy.kind != PolicyKind::SequenceBandit) {
      throw ConfigError("policy.kind: signed_bandit environments require sequence_bandit");
    }
    if (group_size < 2) throw ConfigError("group_size: must be >= 2");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate: must be > 0");
    if (steps < 1) throw ConfigError("steps: must be >= 1");
    clip.validate();
    noise.validate();
    classifier.validate();
    if (seeds.empty()) throw ConfigError("seeds: must be nonempty");
    if (!(gamma > 0.0)) throw ConfigError("gamma: must be > 0");
  }
};

// ============================================================================
// Enum <-> string
// ============================================================================

namespace detail {

template <typename T>
T parse_enum(const std::string& value, std::span<const std::pair<const char*, T>> table,
             const std::string& path) {
  for (const auto& [name, v] : table) {
    if (value == name) return v;
  }
  std::string names;
  for (const auto& [name, v] : table) {
    if (!names.empty()) names += ", ";
    names += name;
  }
  throw ConfigError(path + ": unknown value '" + value + "' (expected one of: " + names + ")");
}

inline const std::pair<const char*, EnvKind> kEnvKinds[] = {
    {"sparse_seq", EnvKind::SparseSeq},
    {"multi_reward_seq", EnvKind::MultiRewardSeq},
    {"signed_bandit", EnvKind::SignedBandit},
};
inline const std::pair<const char*, PolicyKind> kPolicyKinds[] = {
    {"sequence_bandit", PolicyKind::SequenceBandit},
    {"autoregressive", PolicyKind::Autoregressive},
};
inline const std::pair<const char*, NoiseKernel> kKernels[] = {
    {"none", NoiseKernel::None},
    {"gaussian", NoiseKernel::Gaussian},
    {"uniform", NoiseKernel::Uniform},
};
inline const std::pair<const char*, ScheduleKind> kScheduleKinds[] = {
    {"Constant", ScheduleKind::Constant},
    {"SquareRoot", ScheduleKind::SquareRoot},
    {"SquareRootReverse", ScheduleKind::SquareRootReverse},
    {"Factor", ScheduleKind::Factor},
    {"FactorReverse", ScheduleKind::FactorReverse},
    {"MutilFactor", ScheduleKind::MutilFactor},
    {"MutilFactorReverse", ScheduleKind::MutilFactorReverse},
    {"Cosine", ScheduleKind::Cosine},
    {"CosineReverse", ScheduleKind::CosineReverse},
};
inline const std::pair<const char*, AdvantageMethod> kMethods[] = {
    {"grpo", AdvantageMethod::GRPO},
    {"dr_grpo", AdvantageMethod::DrGRPO},
    {"reinforce_pp", AdvantageMethod::ReinforcePP},
    {"dapo", AdvantageMethod::DAPO},
};

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + "." + key + ": " + e.what());
  }
}

template <typename T, std::size_t N>
void read_enum_field(const nlohmann::json& j, const char* key, T& out,
                     const std::pair<const char*, T> (&table)[N], const std::string& path) {
  if (!j.contains(key)) return;
  std::string s;
  read_field(j, key, s, path);
  out = parse_enum<T>(s, std::span<const std::pair<const char*, T>>(table, N),
                      path + "." + key);
}

}  // namespace detail

// ============================================================================
// JSON
// ============================================================================

inline nlohmann::json to_json(const Schedule& s) {
  return {{"kind", to_string(s.kind)},
          {"total_steps", s.total_steps},
          {"milestones", s.milestones},
          {"decay", s.decay}};
}

inline nlohmann::json to_json(const NoiseSpec& s) {
  return {{"kernel", to_string(s.kernel)},
          {"m", s.m},
          {"schedule", to_json(s.schedule)},
          {"per_component", s.per_component}};
}

inline nlohmann::json to_json(const EnvironmentSpec& e) {
  return {{"kind", to_string(e.kind)},
          {"prompts", e.prompts},
          {"vocab", e.vocab},
          {"seq_len", e.seq_len},
          {"num_outputs", e.num_outputs}};
}

inline nlohmann::json to_json(const ClipConfig& c) {
  nlohmann::json j = {{"eps_low", c.eps_low},
                      {"eps_high", c.eps_high},
                      {"beta", c.beta},
                      {"advantage_method", to_string(c.advantage_method)},
                      {"dynamic_sampling", c.dynamic_sampling}};
  j["max_grad_norm"] = c.max_grad_norm ? nlohmann::json(*c.max_grad_norm) : nlohmann::json();
  return j;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"name", c.name},
          {"environment", to_json(c.environment)},
          {"policy", {{"kind", to_string(c.policy.kind)}, {"markov", c.policy.markov}}},
          {"group_size", c.group_size},
          {"learning_rate", c.learning_rate},
          {"steps", c.steps},
          {"clip", to_json(c.clip)},
          {"noise", to_json(c.noise)},
          {"classifier",
           {{"vanish_threshold", c.classifier.vanish_threshold},
            {"explode_threshold", c.classifier.explode_threshold}}},
          {"seeds", c.seeds},
          {"out_dir", c.out_dir},
          {"gamma", c.gamma},
          {"track_true_reward", c.track_true_reward}};
}

inline Schedule schedule_from_json(const nlohmann::json& j, const std::string& path) {
  Schedule s;
  detail::read_enum_field(j, "kind", s.kind, detail::kScheduleKinds, path);
  detail::read_field(j, "total_steps", s.total_steps, path);
  detail::read_field(j, "milestones", s.milestones, path);
  detail::read_field(j, "decay", s.decay, path);
  return s;
}

inline NoiseSpec noise_from_json(const nlohmann::json& j, const std::string& path) {
  NoiseSpec s;
  detail::read_enum_field(j, "kernel", s.kernel, detail::kKernels, path);
  detail::read_field(j, "m", s.m, path);
  if (j.contains("schedule")) s.schedule = schedule_from_json(j.at("schedule"), path + ".schedule");
  detail::read_field(j, "per_component", s.per_component, path);
  return s;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::read_field(j, "name", c.name, "config");
  if (j.contains("environment")) {
    const auto& e = j.at("environment");
    detail::read_enum_field(e, "kind", c.environment.kind, detail::kEnvKinds, "environment");
    detail::read_field(e, "prompts", c.environment.prompts, "environment");
    detail::read_field(e, "vocab", c.environment.vocab, "environment");
    detail::read_field(e, "seq_len", c.environment.seq_len, "environment");
    detail::read_field(e, "num_outputs", c.environment.num_outputs, "environment");
  }
  if (j.contains("policy")) {
    const auto& p = j.at("policy");
    detail::read_enum_field(p, "kind", c.policy.kind, detail::kPolicyKinds, "policy");
    detail::read_field(p, "markov", c.policy.markov, "policy");
  }
  detail::read_field(j, "group_size", c.group_size, "config");
  detail::read_field(j, "learning_rate", c.learning_rate, "config");
  detail::read_field(j, "steps", c.steps, "config");
  if (j.contains("clip")) {
    const auto& cl = j.at("clip");
    detail::read_field(cl, "eps_low", c.clip.eps_low, "clip");
    detail::read_field(cl, "eps_high", c.clip.eps_high, "clip");
    detail::read_field(cl, "beta", c.clip.beta, "clip");
    detail::read_enum_field(cl, "advantage_method", c.clip.advantage_method, detail::kMethods,
                            "clip");
    detail::read_field(cl, "dynamic_sampling", c.clip.dynamic_sampling, "clip");
    if (cl.contains("max_grad_norm") && !cl.at("max_grad_norm").is_null()) {
      double v = 0.0;
      detail::read_field(cl, "max_grad_norm", v, "clip");
      c.clip.max_grad_norm = v;
    }
  }
  if (j.contains("noise")) c.noise = noise_from_json(j.at("noise"), "noise");
  if (j.contains("classifier")) {
    const auto& g = j.at("classifier");
    detail::read_field(g, "vanish_threshold", c.classifier.vanish_threshold, "classifier");
    detail::read_field(g, "explode_threshold", c.classifier.explode_threshold, "classifier");
  }
  detail::read_field(j, "seeds", c.seeds, "config");
  detail::read_field(j, "out_dir", c.out_dir, "config");
  detail::read_field(j, "gamma", c.gamma, "config");
  detail::read_field(j, "track_true_reward", c.track_true_reward, "config");

  // An unset schedule horizon follows the run length.
  if (!j.contains("noise") || !j.at("noise").contains("schedule") ||
      !j.at("noise").at("schedule").contains("total_steps")) {
    c.noise.schedule.total_steps = c.steps;
  }
  c.validate();
  return c;
}

// ============================================================================
// Presets
// ============================================================================

inline std::vector<std::string> preset_names() {
  return {"sparse-vanilla", "sparse-dither",  "multi-vanilla",
          "multi-dither",   "signed-vanilla", "signed-dither"};
}

/// Built-in experiment presets. The "-dither" variants add a constant
/// Gaussian kernel at m = 0.05; everything else matches the vanilla runs.
inline ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  const bool dithered = name.ends_with("-dither");
  if (name == "sparse-vanilla" || name == "sparse-dither") {
    c.environment = {EnvKind::SparseSeq, 8, 8, 3, 16};
    c.policy = {PolicyKind::Autoregressive, false};
    c.steps = 5000;
  } else if (name == "multi-vanilla" || name == "multi-dither") {
    c.environment = {EnvKind::MultiRewardSeq, 8, 8, 4, 16};
    c.policy = {PolicyKind::Autoregressive, false};
    c.steps = 5000;
  } else if (name == "signed-vanilla" || name == "signed-dither") {
    c.environment = {EnvKind::SignedBandit, 2, 8, 3, 16};
    c.policy = {PolicyKind::SequenceBandit, false};
    c.steps = 2000;
  } else {
    throw ConfigError("preset: unknown preset '" + name + "'");
  }
  if (dithered) c.noise = NoiseSpec::gaussian(0.05);
  c.noise.schedule.total_steps = c.steps;
  c.validate();
  return c;
}

/// Parses a config document, resolving an optional {"preset": name} base;
/// the remaining keys are merged over the preset (RFC 7386 merge-patch).
inline ExperimentConfig resolve_config(const nlohmann::json& doc) {
  if (!doc.contains("preset")) return config_from_json(doc);
  nlohmann::json base = to_json(preset(doc.at("preset").get<std::string>()));
  nlohmann::json patch = doc;
  patch.erase("preset");
  base.merge_patch(patch);
  return config_from_json(base);
}

}  // namespace ditherlab
