#include "udnloc/harness.hpp"
#include "udnloc/report_io.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace udnloc;

namespace {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::string> filter;
};

void apply(ScenarioConfig& cfg, const Overrides& o) {
  if (o.seed) cfg.seeds = {*o.seed};
  if (o.mode) cfg.sim.mode = fidelity_from_string(*o.mode);
  if (o.filter) cfg.filter.kind = filter_from_string(*o.filter);
}

fs::path default_out() {
  if (const char* env = std::getenv("UDNLOC_OUT_DIR"); env && *env) return env;
  return "udnloc_out";
}

void print_run(const RunMetrics& r) {
  if (!r.ok) {
    std::cout << "  seed " << r.seed << ": FAILED: " << r.error << "\n";
    return;
  }
  std::cout << "  seed " << r.seed << ": position RMSE " << r.position_rmse << " m, UN offset RMSE "
            << r.un_offset_rmse << " s, AN offset RMSE " << r.an_offset_rmse << " s, mean NEES " << r.mean_nees
            << "\n";
}

int cmd_run(const std::string& config, const fs::path& out, const Overrides& o, unsigned workers, bool artifacts) {
  ScenarioConfig cfg = load_scenario(config);
  apply(cfg, o);
  cfg.validate();
  std::vector<RunArtifacts> arts;
  const MetricsReport rep = run_scenario(cfg, workers, artifacts ? &arts : nullptr);
  const fs::path dir = out / cfg.label;
  write_run_directory(dir, rep, arts);
  std::cout << cfg.label << " (" << to_string(cfg.filter.kind) << ", " << to_string(cfg.sim.mode) << ")\n";
  for (const RunMetrics& r : rep.runs) print_run(r);
  std::cout << "aggregate position RMSE " << rep.aggregate.position_rmse << " m (median "
            << rep.aggregate.position_rmse_median << " m), " << rep.aggregate.failed << " failed; written to "
            << dir.string() << "\n";
  return rep.aggregate.failed == 0 ? 0 : 1;
}

int cmd_sweep(const fs::path& dir, const fs::path& out, const Overrides& o, unsigned workers) {
  if (!fs::is_directory(dir)) throw std::runtime_error(dir.string() + ": not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".yaml" || ext == ".yml")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<SweepRow> rows;
  std::vector<ScenarioConfig> cfgs;
  std::vector<std::size_t> slot;
  for (const auto& f : files) {
    try {
      ScenarioConfig cfg = load_scenario(f.string());
      apply(cfg, o);
      cfg.validate();
      slot.push_back(rows.size());
      rows.push_back({cfg.label, {}, false, ""});
      cfgs.push_back(std::move(cfg));
    } catch (const std::exception& e) {
      std::cerr << e.what() << "\n";
      rows.push_back({f.stem().string(), {}, false, e.what()});
    }
  }
  std::vector<MetricsReport> reports;
  const auto done = sweep(cfgs, workers, &reports);
  for (std::size_t i = 0; i < done.size(); ++i) rows[slot[i]] = done[i];
  for (const auto& rep : reports) write_run_directory(out / rep.label, rep, {});
  write_sweep_directory(out, rows);

  bool all_ok = true;
  for (const SweepRow& r : rows) {
    all_ok = all_ok && r.ok;
    std::cout << r.label << ": " << (r.ok ? "ok" : "FAILED") << ", mean position RMSE " << r.metrics.position_rmse
              << " m, median " << r.metrics.position_rmse_median << " m" << (r.error.empty() ? "" : " (" + r.error + ")")
              << "\n";
  }
  std::cout << rows.size() << " scenario(s); table written to " << (out / "sweep.csv").string() << "\n";
  return all_ok ? 0 : 1;
}

int cmd_replay(const fs::path& trace_arg, const std::string& config, const fs::path& out, const Overrides& o) {
  fs::path trace_dir = fs::absolute(trace_arg).lexically_normal();
  if (trace_dir.filename().empty()) trace_dir = trace_dir.parent_path();
  const std::string cfg_path = config.empty() ? (trace_dir.parent_path() / "scenario.yaml").string() : config;
  ScenarioConfig cfg = load_scenario(cfg_path);
  apply(cfg, o);
  std::ifstream truth(trace_dir / "truth.csv"), meas(trace_dir / "measurements.csv"), ans(trace_dir / "ans.csv");
  if (!truth || !meas || !ans) throw std::runtime_error(trace_dir.string() + ": missing truth/measurements/ans CSV");
  const SimulationResult sim = read_simulation_csv(truth, meas, ans);

  RunTrace trace;
  RunMetrics m = replay(sim, cfg.filter, cfg.label, &trace);
  // seed_<n> directories written by `run` carry the seed in their name
  const std::string name = trace_dir.filename().string();
  if (name.rfind("seed_", 0) == 0) {
    try {
      m.seed = std::stoull(name.substr(5));
    } catch (const std::exception&) {
    }
  }
  fs::create_directories(out);
  std::ofstream t(out / "replay_trace.csv");
  write_trace_csv(t, trace);
  MetricsReport rep;
  rep.label = cfg.label;
  rep.config = cfg;
  rep.runs = {m};
  rep.aggregate = aggregate(rep.runs);
  std::ofstream r(out / "replay_runs.csv");
  write_runs_csv(r, rep);
  std::cout << "replay of " << trace_dir.string() << " (" << to_string(cfg.filter.kind) << ")\n";
  print_run(m);
  return m.ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cascaded EKF positioning and clock synchronization simulator"};
  app.require_subcommand(1);

  Overrides o;
  std::uint64_t seed = 0;
  std::string mode, filter, out_dir;
  unsigned workers = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Run a single seed instead of the config's seed list");
    sub->add_option("--mode", mode, "Fidelity override: measurement | channel");
    sub->add_option("--filter", filter, "Filter override: doa-only | pos-clock | pos-sync");
    sub->add_option("--out", out_dir, "Output directory (default $UDNLOC_OUT_DIR or ./udnloc_out)");
  };

  std::string config;
  bool no_artifacts = false;
  auto* run = app.add_subcommand("run", "Run one scenario config");
  run->add_option("config", config, "Scenario YAML")->required();
  run->add_option("--workers", workers, "Worker threads (0 = all cores)");
  run->add_flag("--no-artifacts", no_artifacts, "Skip per-seed truth/measurement/trace CSVs");
  add_common(run);

  std::string sweep_dir;
  auto* sw = app.add_subcommand("sweep", "Run every *.yaml in a directory and compare");
  sw->add_option("dir", sweep_dir, "Directory of scenario configs")->required();
  sw->add_option("--workers", workers, "Worker threads (0 = all cores)");
  add_common(sw);

  std::string trace_dir, replay_config;
  auto* rp = app.add_subcommand("replay", "Rerun the filter on a stored seed_<n> directory");
  rp->add_option("trace", trace_dir, "Directory with truth.csv, measurements.csv and ans.csv")->required();
  rp->add_option("--config", replay_config, "Scenario YAML (default: ../scenario.yaml)");
  add_common(rp);

  CLI11_PARSE(app, argc, argv);

  try {
    for (auto* sub : {run, sw, rp}) {
      if (sub->count("--seed")) o.seed = seed;
    }
    if (!mode.empty()) o.mode = mode;
    if (!filter.empty()) o.filter = filter;
    const fs::path out = out_dir.empty() ? default_out() : fs::path(out_dir);
    if (*run) return cmd_run(config, out, o, workers, !no_artifacts);
    if (*sw) return cmd_sweep(sweep_dir, out, o, workers);
    if (*rp) return cmd_replay(trace_dir, replay_config, out, o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
