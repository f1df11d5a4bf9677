#pragma once

/**
 * Result emission and run-directory tooling.
 *
 * A run directory contains:
 *   config.json      resolved config, seed included
 *   trainlog.csv     one row per step (schema below)
 *   trainlog.jsonl   same rows as JSON lines
 *   rewards.csv      one row per reward sample: step,prompt,sample,
 *                    raw_total,dithered_total,noise_sigma_effective
 *   true_reward.csv  exact expected true reward per step (enumerable envs)
 *   params_final.json
 *   summary.json     stability metrics, t_gamma, anomalies, metadata
 *
 * All CSV files are UTF-8 with LF line endings, '.' decimal separators and a
 * header on line 1. Doubles are printed with shortest round-trip formatting,
 * so identical runs produce byte-identical directories.
 */

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ditherlab/config.hpp"
#include "ditherlab/diagnostics.hpp"
#include "ditherlab/engine.hpp"

namespace ditherlab {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

// ============================================================================
// Train log emission
// ============================================================================

inline constexpr const char* kTrainLogHeader =
    "step,objective,grad_norm,grad_class,mean_raw_reward,mean_dithered_reward,"
    "reward_variance,clip_fraction,kl,groups_filtered,grad_norm_postclip";

inline std::string train_log_csv(const TrainLog& log) {
  std::string out(kTrainLogHeader);
  out += '\n';
  for (const auto& r : log) {
    out += std::to_string(r.step);
    out += ',';
    out += format_double(r.objective);
    out += ',';
    out += format_double(r.grad_norm);
    out += ',';
    out += to_string(r.grad_class);
    out += ',';
    out += format_double(r.mean_raw_reward);
    out += ',';
    out += format_double(r.mean_dithered_reward);
    out += ',';
    out += format_double(r.reward_variance);
    out += ',';
    out += format_double(r.clip_fraction);
    out += ',';
    out += format_double(r.kl);
    out += ',';
    out += std::to_string(r.groups_filtered);
    out += ',';
    out += format_double(r.grad_norm_postclip);
    out += '\n';
  }
  return out;
}

inline nlohmann::json to_json(const TrainLogRow& r) {
  return {{"step", r.step},
          {"objective", r.objective},
          {"grad_norm", r.grad_norm},
          {"grad_class", to_string(r.grad_class)},
          {"mean_raw_reward", r.mean_raw_reward},
          {"mean_dithered_reward", r.mean_dithered_reward},
          {"reward_variance", r.reward_variance},
          {"clip_fraction", r.clip_fraction},
          {"kl", r.kl},
          {"groups_filtered", r.groups_filtered},
          {"grad_norm_postclip", r.grad_norm_postclip}};
}

inline std::string train_log_jsonl(const TrainLog& log) {
  std::string out;
  for (const auto& r : log) {
    out += to_json(r).dump();
    out += '\n';
  }
  return out;
}

// ============================================================================
// run_experiment
// ============================================================================

inline nlohmann::json t_gamma_json(double t_gamma) {
  if (std::isnan(t_gamma)) return nullptr;
  if (std::isinf(t_gamma)) return "inf";
  return t_gamma;
}

/// Executes one seeded run and writes the run directory. Deterministic: the
/// same config and seed reproduce the directory byte for byte.
inline std::filesystem::path run_experiment(const ExperimentConfig& cfg, std::uint64_t seed,
                                            const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

  const RunArtifacts art = execute_run(cfg, seed, /*collect_reward_samples=*/true);
  const Environment env = Environment::make(cfg.environment);
  const std::vector<double> mags = env.component_magnitudes();

  nlohmann::json config_doc = to_json(cfg);
  config_doc["seed"] = seed;
  detail::write_text(out_dir / "config.json", config_doc.dump(2) + "\n");

  detail::write_text(out_dir / "trainlog.csv", train_log_csv(art.log));
  detail::write_text(out_dir / "trainlog.jsonl", train_log_jsonl(art.log));

  {
    std::string csv = "step,prompt,sample,raw_total,dithered_total,noise_sigma_effective\n";
    const std::size_t per_step =
        static_cast<std::size_t>(cfg.environment.prompts) * static_cast<std::size_t>(cfg.group_size);
    for (std::size_t i = 0; i < art.reward_samples.size(); ++i) {
      const long step = static_cast<long>(i / per_step);
      const std::size_t within = i % per_step;
      csv += std::to_string(step);
      csv += ',';
      csv += std::to_string(within / static_cast<std::size_t>(cfg.group_size));
      csv += ',';
      csv += std::to_string(within % static_cast<std::size_t>(cfg.group_size));
      csv += ',';
      csv += format_double(art.reward_samples[i].raw_total);
      csv += ',';
      csv += format_double(art.reward_samples[i].dithered_total);
      csv += ',';
      csv += format_double(total_sigma(cfg.noise, mags, step));
      csv += '\n';
    }
    detail::write_text(out_dir / "rewards.csv", csv);
  }

  if (!art.true_reward_trace.empty()) {
    std::string csv = "step,expected_true_reward\n";
    for (std::size_t s = 0; s < art.true_reward_trace.size(); ++s) {
      csv += std::to_string(s);
      csv += ',';
      csv += format_double(art.true_reward_trace[s]);
      csv += '\n';
    }
    detail::write_text(out_dir / "true_reward.csv", csv);
  }

  detail::write_text(out_dir / "params_final.json", to_json(art.final_params).dump(2) + "\n");

  const StabilitySummary stab = stability_summary(art.log, cfg.classifier);
  nlohmann::json summary;
  summary["name"] = cfg.name;
  summary["seed"] = seed;
  summary["steps"] = cfg.steps;
  summary["gamma"] = cfg.gamma;
  summary["baseline_true_reward"] = std::isnan(art.baseline_true_reward)
                                        ? nlohmann::json()
                                        : nlohmann::json(art.baseline_true_reward);
  summary["final_true_reward"] = std::isnan(art.final_true_reward)
                                     ? nlohmann::json()
                                     : nlohmann::json(art.final_true_reward);
  summary["t_gamma"] = t_gamma_json(art.t_gamma);
  summary["final_mean_raw_reward"] = art.log.empty() ? 0.0 : art.log.back().mean_raw_reward;
  summary["stability"] = {{"vanish_fraction", stab.vanish_fraction},
                          {"explode_fraction", stab.explode_fraction},
                          {"longest_vanish_streak", stab.longest_vanish_streak}};
  nlohmann::json anomalies = nlohmann::json::array();
  for (const auto& a : art.anomalies) anomalies.push_back({{"step", a.step}, {"note", a.note}});
  summary["anomalies"] = anomalies;
  summary["metadata"] = {{"schedule_modulates", "std"},
                         {"advantage_std", "population"},
                         {"seed_streams", {{"sample", 1}, {"noise", 2}}}};
  detail::write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  return out_dir;
}

// ============================================================================
// Run-directory loading
// ============================================================================

struct CsvTable {
  std::string file;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw InputError("missing column '" + name + "' in " + file);
  }

  double number(std::size_t row, std::size_t col) const {
    const std::string& s = rows[row][col];
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    return std::stod(s);
  }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  CsvTable t;
  t.file = path.string();
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      t.rows.push_back(std::move(cells));
    }
  }
  if (first) throw InputError("empty CSV file " + path.string());
  return t;
}

struct LoadedRun {
  std::string id;
  std::filesystem::path dir;
  nlohmann::json config;
  nlohmann::json summary;
  CsvTable trainlog;
  std::optional<CsvTable> true_reward;
};

inline LoadedRun load_run(const std::filesystem::path& dir) {
  LoadedRun run;
  run.dir = dir;
  run.id = dir.filename().string().empty() ? dir.parent_path().filename().string()
                                           : dir.filename().string();
  std::ifstream cfg(dir / "config.json");
  if (!cfg) throw IoError("cannot read " + (dir / "config.json").string());
  cfg >> run.config;
  std::ifstream sum(dir / "summary.json");
  if (!sum) throw IoError("cannot read " + (dir / "summary.json").string());
  sum >> run.summary;
  run.trainlog = read_csv(dir / "trainlog.csv");
  if (std::filesystem::exists(dir / "true_reward.csv")) {
    run.true_reward = read_csv(dir / "true_reward.csv");
  }
  return run;
}

// ============================================================================
// compare
// ============================================================================

struct CompareOutput {
  std::string summary_csv;  // one row per run
  std::string steps_csv;    // aligned per-step series with deltas vs run 0
};

/// Aligned comparison across >= 2 run directories. The summary includes
/// "steps for run i to reach run 0's final expected true reward"; the
/// per-step table carries reward and gradient-norm series plus deltas
/// against the first run.
inline CompareOutput compare_runs(std::span<const std::filesystem::path> dirs) {
  if (dirs.size() < 2) throw InputError("compare_runs: need at least 2 run directories");
  std::vector<LoadedRun> runs;
  runs.reserve(dirs.size());
  for (const auto& d : dirs) runs.push_back(load_run(d));

  // Validates the shared trainlog schema up front; a missing column is
  // reported by name.
  for (const auto& run : runs) {
    run.trainlog.column("step");
    run.trainlog.column("mean_raw_reward");
    run.trainlog.column("grad_norm");
  }

  const bool have_true =
      std::all_of(runs.begin(), runs.end(), [](const LoadedRun& r) { return r.true_reward.has_value(); });

  double ref_final_true = std::numeric_limits<double>::quiet_NaN();
  if (have_true) {
    const CsvTable& t = *runs[0].true_reward;
    ref_final_true = t.number(t.rows.size() - 1, t.column("expected_true_reward"));
  }

  CompareOutput out;
  out.summary_csv =
      "run_index,run_id,steps,final_mean_raw_reward,final_true_reward,t_gamma,"
      "vanish_fraction,explode_fraction,steps_to_reach_ref_final\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& run = runs[i];
    const auto& stab = run.summary.at("stability");
    double final_true = std::numeric_limits<double>::quiet_NaN();
    double steps_to_ref = std::numeric_limits<double>::quiet_NaN();
    if (have_true) {
      const CsvTable& t = *run.true_reward;
      const std::size_t col = t.column("expected_true_reward");
      final_true = t.number(t.rows.size() - 1, col);
      steps_to_ref = std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < t.rows.size(); ++s) {
        if (t.number(s, col) >= ref_final_true) {
          steps_to_ref = t.number(s, t.column("step"));
          break;
        }
      }
    }
    const nlohmann::json& tg = run.summary.at("t_gamma");
    std::string tg_str = "nan";
    if (tg.is_number()) {
      tg_str = format_double(tg.get<double>());
    } else if (tg.is_string()) {
      tg_str = tg.get<std::string>();
    }
    out.summary_csv += std::to_string(i) + ',' + run.id + ',' +
                       std::to_string(run.trainlog.rows.size()) + ',' +
                       format_double(run.summary.at("final_mean_raw_reward").get<double>()) + ',' +
                       format_double(final_true) + ',' + tg_str + ',' +
                       format_double(stab.at("vanish_fraction").get<double>()) + ',' +
                       format_double(stab.at("explode_fraction").get<double>()) + ',' +
                       format_double(steps_to_ref) + '\n';
  }

  std::size_t min_steps = runs[0].trainlog.rows.size();
  for (const auto& run : runs) min_steps = std::min(min_steps, run.trainlog.rows.size());

  std::string header = "step";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    header += ",r" + std::to_string(i) + "_reward,r" + std::to_string(i) + "_grad_norm";
  }
  for (std::size_t i = 1; i < runs.size(); ++i) {
    header += ",delta_reward_r" + std::to_string(i);
  }
  out.steps_csv = header + '\n';
  std::vector<std::size_t> reward_col(runs.size()), grad_col(runs.size());
  for (std::size_t i = 0; i < runs.size(); ++i) {
    reward_col[i] = runs[i].trainlog.column("mean_raw_reward");
    grad_col[i] = runs[i].trainlog.column("grad_norm");
  }
  for (std::size_t s = 0; s < min_steps; ++s) {
    std::string line = runs[0].trainlog.rows[s][runs[0].trainlog.column("step")];
    for (std::size_t i = 0; i < runs.size(); ++i) {
      line += ',' + runs[i].trainlog.rows[s][reward_col[i]];
      line += ',' + runs[i].trainlog.rows[s][grad_col[i]];
    }
    for (std::size_t i = 1; i < runs.size(); ++i) {
      line += ',' + format_double(runs[i].trainlog.number(s, reward_col[i]) -
                                  runs[0].trainlog.number(s, reward_col[0]));
    }
    out.steps_csv += line + '\n';
  }
  return out;
}

// ============================================================================
// plotdata
// ============================================================================

inline const std::vector<std::string>& plot_series_names() {
  static const std::vector<std::string> names = {"grad_norm", "reward", "variance", "accuracy",
                                                 "schedule"};
  return names;
}

/// Long-format (run_id, step, series, value) CSV for external plotting.
/// Series: grad_norm, reward (mean raw reward), variance (per-step dithered
/// reward variance), accuracy (exact expected true reward), schedule
/// (effective injected noise std per step, recomputed from the run config).
inline std::string emit_plotdata(std::span<const std::filesystem::path> dirs,
                                 const std::string& series) {
  const auto& names = plot_series_names();
  if (std::find(names.begin(), names.end(), series) == names.end()) {
    std::string known;
    for (const auto& n : names) {
      if (!known.empty()) known += ", ";
      known += n;
    }
    throw InputError("unknown series '" + series + "' (expected one of: " + known + ")");
  }
  std::string out = "run_id,step,series,value\n";
  for (const auto& dir : dirs) {
    const LoadedRun run = load_run(dir);
    auto emit = [&](long step, const std::string& value) {
      out += run.id + ',' + std::to_string(step) + ',' + series + ',' + value + '\n';
    };
    if (series == "accuracy") {
      if (!run.true_reward) {
        throw InputError("series 'accuracy' needs true_reward.csv, absent in " + dir.string());
      }
      const CsvTable& t = *run.true_reward;
      const std::size_t step_col = t.column("step");
      const std::size_t val_col = t.column("expected_true_reward");
      for (std::size_t s = 0; s < t.rows.size(); ++s) {
        emit(static_cast<long>(t.number(s, step_col)), t.rows[s][val_col]);
      }
    } else if (series == "schedule") {
      const ExperimentConfig cfg = config_from_json(run.config);
      const Environment env = Environment::make(cfg.environment);
      const std::vector<double> mags = env.component_magnitudes();
      // Inclusive horizon, like the true-reward trace: the last row sits at
      // p = 1, so ramps end at their full scale.
      for (long s = 0; s <= cfg.steps; ++s) {
        emit(s, format_double(total_sigma(cfg.noise, mags, s)));
      }
    } else {
      const std::string col_name = series == "reward"     ? "mean_raw_reward"
                                   : series == "variance" ? "reward_variance"
                                                          : "grad_norm";
      const CsvTable& t = run.trainlog;
      const std::size_t step_col = t.column("step");
      const std::size_t val_col = t.column(col_name);
      for (std::size_t s = 0; s < t.rows.size(); ++s) {
        emit(static_cast<long>(t.number(s, step_col)), t.rows[s][val_col]);
      }
    }
  }
  return out;
}

// ============================================================================
// Proposition report / sweep emission
// ============================================================================

inline std::string proposition_reports_csv(std::span<const PropositionReport> reports) {
  std::string out = "proposition,statistic,theoretical,tolerance,tolerance_kind,pass,sample_count\n";
  for (const auto& r : reports) {
    out += r.proposition + ',' + format_double(r.statistic) + ',' + format_double(r.theoretical) +
           ',' + format_double(r.tolerance) + ',' + r.tolerance_kind + ',' +
           (r.pass ? "true" : "false") + ',' + std::to_string(r.sample_count) + '\n';
  }
  return out;
}

inline std::string sweep_csv(std::span<const SweepRow> rows) {
  std::string out =
      "m,sigma_effective,t_gamma_median,t_gamma_iqr_low,t_gamma_iqr_high,"
      "final_reward_median,seeds\n";
  for (const auto& r : rows) {
    out += format_double(r.m) + ',' + format_double(r.sigma_effective) + ',' +
           format_double(r.t_gamma_median) + ',' + format_double(r.t_gamma_iqr_low) + ',' +
           format_double(r.t_gamma_iqr_high) + ',' + format_double(r.final_reward_median) + ',' +
           std::to_string(r.seeds) + '\n';
  }
  return out;
}

inline nlohmann::json to_json(const SweepRow& r) {
  return {{"m", r.m},
          {"sigma_effective", r.sigma_effective},
          {"t_gamma_median", t_gamma_json(r.t_gamma_median)},
          {"t_gamma_iqr_low", t_gamma_json(r.t_gamma_iqr_low)},
          {"t_gamma_iqr_high", t_gamma_json(r.t_gamma_iqr_high)},
          {"final_reward_median", r.final_reward_median},
          {"seeds", r.seeds}};
}

}  // namespace ditherlab
