#pragma once

// Experiment driver: scenario configs, filter runs over simulated routes,
// metrics (RMSE, NEES), Monte Carlo batteries and sweeps.

#include "udnloc/fusion_ekf.hpp"
#include "udnloc/initializer.hpp"
#include "udnloc/scenario_sim.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace udnloc {

enum class FilterKind { DoaOnly, PosClock, PosSync };

std::string to_string(FilterKind k);
FilterKind filter_from_string(const std::string& s);

struct FilterConfig {
  FilterKind kind = FilterKind::PosClock;
  FusionParams fusion;
  InitConfig init;
  int burn_in = 10;                   // main-filter steps excluded from the metrics
  double an_offset_prior_std = 100e-6;  // prior STD of a newly admitted AN offset

  void validate() const;
};

struct ScenarioConfig {
  std::string label = "scenario";
  SimConfig sim;
  FilterConfig filter;
  std::vector<std::uint64_t> seeds = {1};

  void validate() const;
};

/// Thrown for malformed configs; what() carries "<source>:<line>:<col>: ...".
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Parses the YAML scenario schema documented in docs/formats.md. Unknown
/// keys, wrong types and out-of-range values are rejected with the line of
/// the offending node.
ScenarioConfig parse_scenario(const std::string& text, const std::string& source = "<config>");
ScenarioConfig load_scenario(const std::string& path);
/// Inverse of parse_scenario (all fields written explicitly).
std::string dump_scenario(const ScenarioConfig& cfg);

// ---------------------------------------------------------------------------
// Filter runs

struct AnOffsetEstimate {
  AnId id = 0;
  double estimate = 0.0;
  double variance = 0.0;
  double truth = 0.0;  // relative to the reference AN
};

struct TraceStep {
  std::size_t step = 0;   // index into the simulation steps
  double t = 0.0;
  bool scored = false;    // after warm-up and burn-in
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();
  Eigen::Matrix2d position_cov = Eigen::Matrix2d::Zero();
  Eigen::Vector2d true_position = Eigen::Vector2d::Zero();
  Eigen::Vector2d true_velocity = Eigen::Vector2d::Zero();
  double clock_offset = 0.0;       // NaN for the DoA-only filter
  double clock_offset_var = 0.0;
  double true_clock_offset = 0.0;  // includes the reference AN offset for Pos&Sync
  int measurement_count = 0;
  std::vector<AnOffsetEstimate> an_offsets;  // measured non-reference ANs, post update
};

struct RunTrace {
  FilterKind kind = FilterKind::PosClock;
  std::size_t first_step = 0;  // first step with measurements (centroid fix)
  AnId reference_an = -1;      // Pos&Sync only
  std::vector<TraceStep> steps;  // main filter steps only
};

/// Centroid fix at the first step with measurements, N_I DoA-only steps,
/// then the selected filter until the end of the simulation. Throws
/// std::runtime_error if the run is too short for the warm-up.
RunTrace run_filter(const SimulationResult& sim, const FilterConfig& cfg);

struct NeesSeries {
  std::vector<double> values;   // NaN where flagged
  std::vector<bool> flagged;    // singular covariance
};

/// (x - x_hat)^T P^-1 (x - x_hat) per step; steps whose P is not positive
/// definite are flagged and skipped.
NeesSeries nees(const std::vector<Eigen::VectorXd>& estimates, const std::vector<Eigen::VectorXd>& truths,
                const std::vector<Eigen::MatrixXd>& covs);

struct RunMetrics {
  std::string label;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::size_t scored_steps = 0;
  int burn_in = 0;
  double position_rmse = 0.0;
  double un_offset_rmse = 0.0;   // NaN for DoA-only
  double an_offset_rmse = 0.0;   // NaN unless Pos&Sync with measured non-reference ANs
  double doa_rmse = 0.0;
  double toa_rmse = 0.0;
  double mean_nees = 0.0;
  std::size_t nees_flagged = 0;
  std::vector<double> nees;      // per scored step
};

RunMetrics compute_metrics(const SimulationResult& sim, const RunTrace& trace, int burn_in);

struct AggregateMetrics {
  std::size_t runs = 0;
  std::size_t failed = 0;
  double position_rmse = 0.0;      // mean over runs
  double position_rmse_median = 0.0;
  double un_offset_rmse = 0.0;
  double an_offset_rmse = 0.0;
  double doa_rmse = 0.0;
  double toa_rmse = 0.0;
  double mean_nees = 0.0;
};

struct MetricsReport {
  std::string label;
  ScenarioConfig config;
  std::vector<RunMetrics> runs;    // in seed order
  AggregateMetrics aggregate;
};

AggregateMetrics aggregate(const std::vector<RunMetrics>& runs);

/// Optional per-seed artifacts kept by run_scenario.
struct RunArtifacts {
  std::uint64_t seed = 0;
  std::optional<SimulationResult> sim;
  std::optional<RunTrace> trace;
};

/// One simulation + filter run per seed on a pool of `workers` threads (0 =
/// hardware concurrency). Deterministic per seed set regardless of worker
/// count. Failed runs are recorded with ok = false.
MetricsReport run_scenario(const ScenarioConfig& cfg, unsigned workers = 0,
                           std::vector<RunArtifacts>* artifacts = nullptr);

/// Filter-only rerun over a stored simulation.
RunMetrics replay(const SimulationResult& sim, const FilterConfig& cfg, const std::string& label,
                  RunTrace* trace_out = nullptr);

struct SweepRow {
  std::string label;
  AggregateMetrics metrics;
  bool ok = false;
  std::string error;
};

/// Runs every config in order; a config that fails entirely is recorded and
/// the sweep continues.
std::vector<SweepRow> sweep(const std::vector<ScenarioConfig>& cfgs, unsigned workers = 0,
                            std::vector<MetricsReport>* reports = nullptr);

// ---------------------------------------------------------------------------
// Filter consistency on a model-matched scenario

struct ConsistencyConfig {
  int runs = 50;
  int steps = 200;
  double isd = 50.0;
  int k_max = 2;
  FusionParams fusion;
  MeasurementNoise noise;
  double sigma_p0 = 5.0;           // prior position STD
  double sigma_v0 = 2.0;
  double sigma_rho0 = 1e-6;
  double sigma_alpha0 = 1e-6;
  double confidence = 0.95;
};

struct ConsistencyResult {
  std::vector<double> mean_nees;  // averaged over runs, per step
  double lower = 0.0;             // chi-square band on the run-averaged NEES
  double upper = 0.0;
  double fraction_inside = 0.0;
};

/// Truth drawn from the Pos&Clock filter's own transition and process noise,
/// initial state drawn from the filter prior, K nearest ANs of an open grid
/// with measurement noise matching R.
ConsistencyResult run_consistency(const ConsistencyConfig& cfg, std::uint64_t seed, unsigned workers = 0);

/// Two-sided band for the mean of `runs` chi-square(dof) draws.
std::pair<double, double> chi_square_band(int dof, int runs, double confidence);

}  // namespace udnloc
