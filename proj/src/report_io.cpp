#include "udnloc/report_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <stdexcept>

namespace udnloc {

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string csv_text(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += (c == '\n' || c == '\r') ? ' ' : c;
  }
  return out + "\"";
}

std::string xml_text(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

}  // namespace

void write_runs_csv(std::ostream& os, const MetricsReport& report) {
  os << "label,seed,ok,scored_steps,burn_in,position_rmse_m,un_offset_rmse_s,an_offset_rmse_s,doa_rmse_rad,"
        "toa_rmse_s,mean_nees,nees_flagged,error\n";
  for (const RunMetrics& r : report.runs) {
    os << csv_text(report.label) << ',' << r.seed << ',' << (r.ok ? 1 : 0) << ',' << r.scored_steps << ','
       << r.burn_in << ',' << num(r.position_rmse) << ',' << num(r.un_offset_rmse) << ',' << num(r.an_offset_rmse)
       << ',' << num(r.doa_rmse) << ',' << num(r.toa_rmse) << ',' << num(r.mean_nees) << ',' << r.nees_flagged << ','
       << csv_text(r.error) << '\n';
  }
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "label,ok,runs,failed,position_rmse_mean_m,position_rmse_median_m,un_offset_rmse_s,an_offset_rmse_s,"
        "doa_rmse_rad,toa_rmse_s,mean_nees,error\n";
  for (const SweepRow& r : rows) {
    const AggregateMetrics& m = r.metrics;
    os << csv_text(r.label) << ',' << (r.ok ? 1 : 0) << ',' << m.runs << ',' << m.failed << ','
       << num(m.position_rmse) << ',' << num(m.position_rmse_median) << ',' << num(m.un_offset_rmse) << ','
       << num(m.an_offset_rmse) << ',' << num(m.doa_rmse) << ',' << num(m.toa_rmse) << ',' << num(m.mean_nees)
       << ',' << csv_text(r.error) << '\n';
  }
}

void write_trace_csv(std::ostream& os, const RunTrace& trace) {
  os << "step,t,scored,x,y,vx,vy,p_xx,p_xy,p_yy,true_x,true_y,true_vx,true_vy,rho,rho_var,true_rho,measurements\n";
  for (const TraceStep& s : trace.steps) {
    os << s.step << ',' << num(s.t) << ',' << (s.scored ? 1 : 0) << ',' << num(s.position.x()) << ','
       << num(s.position.y()) << ',' << num(s.velocity.x()) << ',' << num(s.velocity.y()) << ','
       << num(s.position_cov(0, 0)) << ',' << num(s.position_cov(0, 1)) << ',' << num(s.position_cov(1, 1)) << ','
       << num(s.true_position.x()) << ',' << num(s.true_position.y()) << ',' << num(s.true_velocity.x()) << ','
       << num(s.true_velocity.y()) << ',' << num(s.clock_offset) << ',' << num(s.clock_offset_var) << ','
       << num(s.true_clock_offset) << ',' << s.measurement_count << '\n';
  }
}

void write_an_offsets_csv(std::ostream& os, const RunTrace& trace) {
  os << "step,an_id,estimate,variance,truth\n";
  for (const TraceStep& s : trace.steps) {
    for (const AnOffsetEstimate& a : s.an_offsets) {
      os << s.step << ',' << a.id << ',' << num(a.estimate) << ',' << num(a.variance) << ',' << num(a.truth) << '\n';
    }
  }
}

void write_nees_csv(std::ostream& os, const RunTrace& trace, const RunMetrics& metrics) {
  os << "step,nees\n";
  std::size_t k = 0;
  for (const TraceStep& s : trace.steps) {
    if (!s.scored) continue;
    os << s.step << ',';
    if (k < metrics.nees.size() && std::isfinite(metrics.nees[k])) os << num(metrics.nees[k]);
    os << '\n';
    ++k;
  }
}

std::string report_json(const MetricsReport& report) {
  using nlohmann::json;
  json runs = json::array();
  for (const RunMetrics& r : report.runs) {
    runs.push_back({{"seed", r.seed},
                    {"ok", r.ok},
                    {"error", r.error},
                    {"scored_steps", r.scored_steps},
                    {"burn_in", r.burn_in},
                    {"position_rmse_m", finite_or_null(r.position_rmse)},
                    {"un_offset_rmse_s", finite_or_null(r.un_offset_rmse)},
                    {"an_offset_rmse_s", finite_or_null(r.an_offset_rmse)},
                    {"doa_rmse_rad", finite_or_null(r.doa_rmse)},
                    {"toa_rmse_s", finite_or_null(r.toa_rmse)},
                    {"mean_nees", finite_or_null(r.mean_nees)},
                    {"nees_flagged", r.nees_flagged}});
  }
  const AggregateMetrics& a = report.aggregate;
  json doc = {{"schema", kReportSchema},
              {"label", report.label},
              {"filter", to_string(report.config.filter.kind)},
              {"mode", to_string(report.config.sim.mode)},
              {"map", to_string(report.config.sim.map.variant)},
              {"isd_m", report.config.sim.isd},
              {"k_max", report.config.sim.k_max},
              {"p_nlos", report.config.sim.detection.p_nlos},
              {"burn_in", report.config.filter.burn_in},
              {"aggregate",
               {{"runs", a.runs},
                {"failed", a.failed},
                {"position_rmse_m", finite_or_null(a.position_rmse)},
                {"position_rmse_median_m", finite_or_null(a.position_rmse_median)},
                {"un_offset_rmse_s", finite_or_null(a.un_offset_rmse)},
                {"an_offset_rmse_s", finite_or_null(a.an_offset_rmse)},
                {"doa_rmse_rad", finite_or_null(a.doa_rmse)},
                {"toa_rmse_s", finite_or_null(a.toa_rmse)},
                {"mean_nees", finite_or_null(a.mean_nees)}}},
              {"runs", runs}};
  return doc.dump(2) + "\n";
}

void write_grouped_bar_svg(std::ostream& os, const std::string& title, const std::string& y_label,
                           const std::vector<std::string>& groups, const std::vector<BarSeries>& series) {
  static const char* kColors[] = {"#4472c4", "#ed7d31", "#a5a5a5", "#ffc000", "#5b9bd5", "#70ad47"};
  constexpr double left = 70, right = 20, top = 40, bottom = 70, plot_h = 300;
  const double group_w = std::max(60.0, 28.0 * static_cast<double>(std::max<std::size_t>(series.size(), 1)) + 20.0);
  const double plot_w = group_w * static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  const double width = left + plot_w + right, height = top + plot_h + bottom;

  double vmax = 0.0;
  for (const auto& s : series) {
    for (double v : s.values) {
      if (std::isfinite(v)) vmax = std::max(vmax, v);
    }
  }
  if (vmax <= 0.0) vmax = 1.0;
  vmax *= 1.1;

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << num(width / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << xml_text(title)
     << "</text>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = vmax * i / 5.0, y = top + plot_h - plot_h * i / 5.0;
    os << "<line x1=\"" << num(left) << "\" x2=\"" << num(left + plot_w) << "\" y1=\"" << num(y) << "\" y2=\""
       << num(y) << "\" stroke=\"#dddddd\"/>\n";
    os << "<text x=\"" << num(left - 5) << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << short_num(v)
       << "</text>\n";
  }
  os << "<text transform=\"translate(15," << num(top + plot_h / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
     << xml_text(y_label) << "</text>\n";

  const double bar_w = (group_w - 20.0) / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = left + group_w * static_cast<double>(g) + 10.0;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = g < series[s].values.size() ? series[s].values[g] : std::nan("");
      if (!std::isfinite(v)) continue;
      const double h = plot_h * std::max(0.0, v) / vmax;
      os << "<rect x=\"" << num(gx + bar_w * static_cast<double>(s)) << "\" y=\"" << num(top + plot_h - h)
         << "\" width=\"" << num(bar_w * 0.9) << "\" height=\"" << num(h) << "\" fill=\"" << kColors[s % 6]
         << "\"><title>" << xml_text(series[s].name) << ": " << short_num(v) << "</title></rect>\n";
    }
    os << "<text x=\"" << num(gx + (group_w - 20.0) / 2) << "\" y=\"" << num(top + plot_h + 15)
       << "\" text-anchor=\"middle\">" << xml_text(groups[g]) << "</text>\n";
  }
  os << "<line x1=\"" << num(left) << "\" x2=\"" << num(left + plot_w) << "\" y1=\"" << num(top + plot_h)
     << "\" y2=\"" << num(top + plot_h) << "\" stroke=\"black\"/>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double lx = left + 120.0 * static_cast<double>(s), ly = top + plot_h + 40;
    os << "<rect x=\"" << num(lx) << "\" y=\"" << num(ly) << "\" width=\"10\" height=\"10\" fill=\"" << kColors[s % 6]
       << "\"/>\n";
    os << "<text x=\"" << num(lx + 14) << "\" y=\"" << num(ly + 9) << "\">" << xml_text(series[s].name)
       << "</text>\n";
  }
  os << "</svg>\n";
}

void write_run_directory(const std::filesystem::path& dir, const MetricsReport& report,
                         const std::vector<RunArtifacts>& artifacts) {
  std::filesystem::create_directories(dir);
  {
    auto os = open_out(dir / "scenario.yaml");
    os << dump_scenario(report.config);
  }
  {
    auto os = open_out(dir / "runs.csv");
    write_runs_csv(os, report);
  }
  {
    auto os = open_out(dir / "report.json");
    os << report_json(report);
  }
  {
    std::vector<std::string> groups;
    BarSeries pos{"position RMSE", {}};
    for (const RunMetrics& r : report.runs) {
      groups.push_back(std::to_string(r.seed));
      pos.values.push_back(r.ok ? r.position_rmse : std::nan(""));
    }
    auto os = open_out(dir / "position_rmse.svg");
    write_grouped_bar_svg(os, report.label + ": position RMSE per seed (data: runs.csv)", "RMSE [m]", groups, {pos});
  }
  for (std::size_t i = 0; i < artifacts.size(); ++i) {
    const RunArtifacts& a = artifacts[i];
    if (!a.sim && !a.trace) continue;
    const auto sub = dir / ("seed_" + std::to_string(a.seed));
    std::filesystem::create_directories(sub);
    if (a.sim) {
      auto t = open_out(sub / "truth.csv");
      write_truth_csv(t, *a.sim);
      auto m = open_out(sub / "measurements.csv");
      write_measurements_csv(m, *a.sim);
      auto n = open_out(sub / "ans.csv");
      write_ans_csv(n, a.sim->ans);
    }
    if (a.trace) {
      auto t = open_out(sub / "trace.csv");
      write_trace_csv(t, *a.trace);
      auto o = open_out(sub / "an_offsets.csv");
      write_an_offsets_csv(o, *a.trace);
      if (i < report.runs.size()) {
        auto n = open_out(sub / "nees.csv");
        write_nees_csv(n, *a.trace, report.runs[i]);
      }
    }
  }
}

void write_sweep_directory(const std::filesystem::path& dir, const std::vector<SweepRow>& rows) {
  std::filesystem::create_directories(dir);
  {
    auto os = open_out(dir / "sweep.csv");
    write_sweep_csv(os, rows);
  }
  std::vector<std::string> groups;
  BarSeries mean{"mean", {}}, med{"median", {}};
  for (const SweepRow& r : rows) {
    groups.push_back(r.label);
    mean.values.push_back(r.metrics.position_rmse);
    med.values.push_back(r.metrics.position_rmse_median);
  }
  auto os = open_out(dir / "sweep.svg");
  write_grouped_bar_svg(os, "Position RMSE by scenario (data: sweep.csv)", "RMSE [m]", groups, {mean, med});
}

}  // namespace udnloc
