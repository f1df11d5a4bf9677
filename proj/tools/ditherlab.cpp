// Command-line front end: run experiments, sweep dither scales, verify the
// theory-level properties, and post-process run directories.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "ditherlab/diagnostics.hpp"
#include "ditherlab/runner.hpp"

namespace fs = std::filesystem;
using namespace ditherlab;

namespace {

ExperimentConfig load_cli_config(const std::string& config_path, const std::string& preset_name) {
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw IoError("cannot read config file " + config_path);
    nlohmann::json doc;
    in >> doc;
    return resolve_config(doc);
  }
  if (!preset_name.empty()) return preset(preset_name);
  throw ConfigError("either --config or --preset is required");
}

std::vector<double> parse_grid(const std::string& grid) {
  std::string values = grid;
  const auto eq = grid.find('=');
  if (eq != std::string::npos) {
    const std::string key = grid.substr(0, eq);
    if (key != "sigma" && key != "m") {
      throw ConfigError("sweep grid: unknown key '" + key + "' (expected sigma=... or m=...)");
    }
    values = grid.substr(eq + 1);
  }
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= values.size()) {
    const std::size_t comma = values.find(',', start);
    const std::string cell = values.substr(start, comma - start);
    if (!cell.empty()) out.push_back(std::stod(cell));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) throw ConfigError("sweep grid: no values parsed from '" + grid + "'");
  return out;
}

void write_or_print(const std::string& content, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << content;
    return;
  }
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw IoError("cannot write " + out_path);
  out << content;
}

void print_report(const PropositionReport& r) {
  std::printf("[%s] %s: statistic=%g theoretical=%g tolerance=%g (%s), N=%ld\n",
              r.pass ? "pass" : "FAIL", r.proposition.c_str(), r.statistic, r.theoretical,
              r.tolerance, r.tolerance_kind.c_str(), r.sample_count);
}

int run_verify(const std::string& props, long n, int seeds, long steps,
               const std::string& out_dir) {
  std::vector<PropositionReport> reports;
  std::vector<SweepRow> sweep_rows;

  const bool want1 = props.find('1') != std::string::npos;
  const bool want2 = props.find('2') != std::string::npos;
  const bool want3 = props.find('3') != std::string::npos;

  ExperimentConfig signed_cfg = preset("signed-vanilla");
  const Environment env = Environment::make(signed_cfg.environment);
  ParamTable params = env.make_policy(PolicyKind::SequenceBandit);
  rng::Engine init(99);
  for (auto& v : params.values) v = rng::uniform_range(init, -1.0, 1.0);

  if (want1) {
    int idx = 0;
    for (double sigma : {0.05, 0.5}) {
      for (NoiseKernel kernel : {NoiseKernel::Gaussian, NoiseKernel::Uniform}) {
        const NoiseSpec spec = kernel == NoiseKernel::Gaussian
                                   ? NoiseSpec::gaussian_with_sigma(sigma, 1.0)
                                   : NoiseSpec::uniform_with_sigma(sigma, 1.0);
        rng::Engine eng(rng::derive_seed(1001, static_cast<std::uint64_t>(idx++)));
        PropositionReport r = check_unbiasedness(params, env, spec, n, eng);
        r.proposition += std::string("[") + to_string(kernel) + ",sigma=" + format_double(sigma) + "]";
        reports.push_back(r);
      }
    }
  }
  if (want2) {
    const std::vector<double> sigmas = {0.1, 0.2, 0.4};
    std::vector<double> stats;
    int idx = 0;
    for (double sigma : sigmas) {
      rng::Engine eng(rng::derive_seed(2002, static_cast<std::uint64_t>(idx++)));
      PropositionReport r = check_gradient_noise_variance(params, env, sigma, n, eng);
      stats.push_back(r.statistic);
      r.proposition += "[sigma=" + format_double(sigma) + "]";
      reports.push_back(r);
    }
    // log-log slope across the three sigmas; quadratic scaling means 2.
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
      const double lx = std::log(sigmas[i]);
      const double ly = std::log(stats[i]);
      sx += lx; sy += ly; sxx += lx * lx; sxy += lx * ly;
    }
    const double k = static_cast<double>(sigmas.size());
    PropositionReport slope;
    slope.proposition = "prop2_loglog_slope";
    slope.statistic = (k * sxy - sx * sy) / (k * sxx - sx * sx);
    slope.theoretical = 2.0;
    slope.tolerance = 0.05;
    slope.tolerance_kind = "absolute";
    slope.pass = std::abs(slope.statistic - 2.0) <= 0.05;
    slope.sample_count = n * static_cast<long>(sigmas.size());
    reports.push_back(slope);
  }
  if (want3) {
    ExperimentConfig base = preset("sparse-vanilla");
    base.steps = steps;
    base.noise.schedule.total_steps = steps;
    const std::vector<double> grid = {0.0, 0.01, 0.05, 0.1};
    TrendResult trend = check_convergence_trend(base, grid, seeds);
    reports.push_back(trend.report);
    sweep_rows = std::move(trend.rows);
  }

  for (const auto& r : reports) print_report(r);
  if (!sweep_rows.empty()) std::cout << sweep_csv(sweep_rows);

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_or_print(proposition_reports_csv(reports), (fs::path(out_dir) / "props.csv").string());
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : reports) arr.push_back(to_json(r));
    write_or_print(arr.dump(2) + "\n", (fs::path(out_dir) / "props.json").string());
    if (!sweep_rows.empty()) {
      write_or_print(sweep_csv(sweep_rows), (fs::path(out_dir) / "trend_sweep.csv").string());
    }
  }
  int fails = 0;
  for (const auto& r : reports) fails += r.pass ? 0 : 1;
  return fails;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Policy-optimization laboratory for dithered discrete rewards"};
  app.require_subcommand(1);

  std::string config_path, preset_name, out, grid = "sigma=0.01,0.02,0.05,0.1,0.3,0.5";
  std::string props = "1,2,3", series;
  std::vector<std::string> dirs;
  std::uint64_t seed = 0;
  bool seed_set = false;
  long steps_override = 0;
  long n = 1000000;
  int seeds = 5;
  double gamma = 0.0;

  auto* run = app.add_subcommand("run", "Execute one seeded training run");
  run->add_option("--config", config_path, "Config JSON file");
  run->add_option("--preset", preset_name, "Built-in preset name");
  run->add_option("--seed", seed, "Run seed (default: first config seed)")
      ->each([&](const std::string&) { seed_set = true; });
  run->add_option("--steps", steps_override, "Override the step count");
  run->add_option("--out", out, "Run directory (default: <out_dir>/<name>-seed<seed>)");

  auto* sweep = app.add_subcommand("sweep", "Dither-scale sweep with per-cell medians");
  sweep->add_option("--config", config_path, "Config JSON file");
  sweep->add_option("--preset", preset_name, "Built-in preset name");
  sweep->add_option("--grid", grid, "Grid, e.g. sigma=0.01,0.05,0.1");
  sweep->add_option("--seeds", seeds, "Seeds per grid cell (>= 5)");
  sweep->add_option("--gamma", gamma, "Convergence threshold (default: config gamma)");
  sweep->add_option("--steps", steps_override, "Override the step budget");
  sweep->add_option("--out", out, "Output directory for sweep.csv/json");

  auto* verify = app.add_subcommand("verify", "Run the proposition checks");
  verify->add_option("--props", props, "Comma list from {1,2,3}");
  verify->add_option("--n", n, "Monte-Carlo sample count");
  verify->add_option("--seeds", seeds, "Seeds per cell for the trend check (prop 3)");
  verify->add_option("--steps", steps_override, "Step budget for the trend check");
  verify->add_option("--out", out, "Directory for props.csv/json");

  auto* compare = app.add_subcommand("compare", "Compare completed run directories");
  compare->add_option("dirs", dirs, "Run directories")->expected(-2);
  compare->add_option("--out", out, "Directory for compare_summary.csv / compare_steps.csv");

  auto* plot = app.add_subcommand("plotdata", "Long-format series CSV for plotting");
  plot->add_option("dirs", dirs, "Run directories")->expected(-1);
  plot->add_option("--series", series, "grad_norm | reward | variance | accuracy | schedule")
      ->required();
  plot->add_option("--out", out, "Output file (default: stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      ExperimentConfig cfg = load_cli_config(config_path, preset_name);
      if (steps_override > 0) {
        cfg.steps = steps_override;
        cfg.noise.schedule.total_steps = steps_override;
      }
      if (!seed_set) seed = cfg.seeds.front();
      const fs::path dir = out.empty()
                               ? fs::path(cfg.out_dir) / (cfg.name + "-seed" + std::to_string(seed))
                               : fs::path(out);
      run_experiment(cfg, seed, dir);
      std::cout << dir.string() << "\n";
    } else if (sweep->parsed()) {
      ExperimentConfig cfg = load_cli_config(config_path, preset_name);
      if (steps_override > 0) {
        cfg.steps = steps_override;
        cfg.noise.schedule.total_steps = steps_override;
      }
      if (gamma > 0.0) cfg.gamma = gamma;
      const std::vector<double> m_grid = parse_grid(grid);
      const std::vector<SweepRow> rows = variance_sweep(cfg, m_grid, seeds);
      std::cout << sweep_csv(rows);
      if (!out.empty()) {
        fs::create_directories(out);
        write_or_print(sweep_csv(rows), (fs::path(out) / "sweep.csv").string());
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : rows) arr.push_back(to_json(r));
        write_or_print(arr.dump(2) + "\n", (fs::path(out) / "sweep.json").string());
      }
    } else if (verify->parsed()) {
      return run_verify(props, n, seeds, steps_override > 0 ? steps_override : 20000, out);
    } else if (compare->parsed()) {
      std::vector<fs::path> paths(dirs.begin(), dirs.end());
      const CompareOutput cmp = compare_runs(paths);
      if (out.empty()) {
        std::cout << cmp.summary_csv;
      } else {
        fs::create_directories(out);
        write_or_print(cmp.summary_csv, (fs::path(out) / "compare_summary.csv").string());
        write_or_print(cmp.steps_csv, (fs::path(out) / "compare_steps.csv").string());
      }
    } else if (plot->parsed()) {
      std::vector<fs::path> paths(dirs.begin(), dirs.end());
      write_or_print(emit_plotdata(paths, series), out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
