#pragma once

// File outputs of the harness: per-run and aggregate CSV tables, per-step
// filter traces, the JSON metrics report and grouped-bar SVG plots.
// Column schemas are listed in docs/formats.md.

#include "udnloc/harness.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace udnloc {

inline constexpr const char* kReportSchema = "udnloc.metrics/1";

void write_runs_csv(std::ostream& os, const MetricsReport& report);
void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);
void write_trace_csv(std::ostream& os, const RunTrace& trace);
void write_an_offsets_csv(std::ostream& os, const RunTrace& trace);
/// Scored steps only: step index and position NEES (empty cell when flagged).
void write_nees_csv(std::ostream& os, const RunTrace& trace, const RunMetrics& metrics);

std::string report_json(const MetricsReport& report);

struct BarSeries {
  std::string name;
  std::vector<double> values;  // one per group; non-finite values are drawn as gaps
};

/// Static SVG with one group of bars per label.
void write_grouped_bar_svg(std::ostream& os, const std::string& title, const std::string& y_label,
                           const std::vector<std::string>& groups, const std::vector<BarSeries>& series);

/// Writes scenario.yaml, runs.csv, report.json, position_rmse.svg and, for
/// every run with artifacts, seed_<seed>/{truth,measurements,ans,trace,
/// an_offsets,nees}.csv under `dir`.
void write_run_directory(const std::filesystem::path& dir, const MetricsReport& report,
                         const std::vector<RunArtifacts>& artifacts);

/// Writes sweep.csv and sweep.svg (mean and median position RMSE per label).
void write_sweep_directory(const std::filesystem::path& dir, const std::vector<SweepRow>& rows);

}  // namespace udnloc
