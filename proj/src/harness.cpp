#include "udnloc/harness.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <thread>

namespace udnloc {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Runs job(i) for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& job) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t threads = std::min<std::size_t>(workers, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) job(i);
    });
  }
  for (auto& th : pool) th.join();
}

double mean_finite(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v) {
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  }
  return n ? s / static_cast<double>(n) : kNaN;
}

double median(std::vector<double> v) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

double rms(double sum_sq, std::size_t n) { return n ? std::sqrt(sum_sq / static_cast<double>(n)) : kNaN; }

// ---------------------------------------------------------------------------
// YAML reading with line-precise errors

class Section {
 public:
  Section(YAML::Node node, std::string path, const std::string& source)
      : node_(std::move(node)), path_(std::move(path)), source_(source) {
    if (node_ && node_.IsNull()) node_ = YAML::Node(YAML::NodeType::Undefined);
    if (node_ && !node_.IsMap()) fail(node_, "'" + path_ + "' must be a mapping");
  }

  [[noreturn]] void fail(const YAML::Node& at, const std::string& msg) const {
    const YAML::Mark m = at.Mark();
    std::ostringstream os;
    os << source_ << ':' << (m.line + 1) << ':' << (m.column + 1) << ": " << msg;
    throw ConfigError(os.str());
  }

  template <class T>
  void get(const char* key, T& out, const std::function<bool(const T&)>& ok = nullptr, const char* rule = "") {
    seen_.insert(key);
    if (!node_) return;
    const YAML::Node v = node_[key];
    if (!v) return;
    T value;
    try {
      value = v.as<T>();
    } catch (const YAML::Exception&) {
      fail(v, "'" + qualified(key) + "' has the wrong type");
    }
    if (ok && !ok(value)) fail(v, "'" + qualified(key) + "' " + rule);
    out = value;
  }

  Section sub(const char* key) {
    seen_.insert(key);
    return Section(node_ ? node_[key] : YAML::Node(YAML::NodeType::Undefined), qualified(key), source_);
  }

  YAML::Node raw(const char* key) {
    seen_.insert(key);
    return node_ ? node_[key] : YAML::Node(YAML::NodeType::Undefined);
  }

  void finish() const {
    if (!node_) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) fail(kv.first, "unknown key '" + qualified(key) + "'");
    }
  }

  const std::string& source() const { return source_; }

 private:
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  YAML::Node node_;
  std::string path_;
  const std::string& source_;
  std::set<std::string> seen_;
};

template <class T>
std::function<bool(const T&)> positive() {
  return [](const T& v) { return v > T(0); };
}
template <class T>
std::function<bool(const T&)> non_negative() {
  return [](const T& v) { return v >= T(0); };
}

}  // namespace

std::string to_string(FilterKind k) {
  switch (k) {
    case FilterKind::DoaOnly: return "doa-only";
    case FilterKind::PosClock: return "pos-clock";
    case FilterKind::PosSync: return "pos-sync";
  }
  return "pos-clock";
}

FilterKind filter_from_string(const std::string& s) {
  if (s == "doa-only") return FilterKind::DoaOnly;
  if (s == "pos-clock") return FilterKind::PosClock;
  if (s == "pos-sync") return FilterKind::PosSync;
  throw std::invalid_argument("unknown filter '" + s + "' (doa-only, pos-clock, pos-sync)");
}

void FilterConfig::validate() const {
  fusion.validate();
  init.validate();
  if (burn_in < 0) throw std::invalid_argument("FilterConfig: burn_in must be >= 0");
  if (!(an_offset_prior_std > 0.0)) throw std::invalid_argument("FilterConfig: an_offset_prior_std must be positive");
}

void ScenarioConfig::validate() const {
  sim.validate();
  filter.validate();
  if (std::abs(sim.dt - filter.fusion.dt) > 1e-12) {
    throw std::invalid_argument("ScenarioConfig: simulation and filter step differ");
  }
  if (seeds.empty()) throw std::invalid_argument("ScenarioConfig: no seeds");
}

ScenarioConfig parse_scenario(const std::string& text, const std::string& source) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    std::ostringstream os;
    os << source << ':' << (e.mark.line + 1) << ':' << (e.mark.column + 1) << ": " << e.msg;
    throw ConfigError(os.str());
  }
  if (!root || root.IsNull()) throw ConfigError(source + ":1:1: empty config");

  ScenarioConfig cfg;
  Section top(root, "", source);
  top.get<std::string>("label", cfg.label);

  if (YAML::Node seeds = top.raw("seeds")) {
    if (seeds.IsSequence()) {
      cfg.seeds.clear();
      for (const auto& s : seeds) {
        try {
          cfg.seeds.push_back(s.as<std::uint64_t>());
        } catch (const YAML::Exception&) {
          top.fail(s, "'seeds' entries must be non-negative integers");
        }
      }
      if (cfg.seeds.empty()) top.fail(seeds, "'seeds' is empty");
    } else if (seeds.IsMap()) {
      Section s(seeds, "seeds", source);
      std::uint64_t first = 1;
      int count = 1;
      s.get<std::uint64_t>("first", first);
      s.get<int>("count", count, positive<int>(), "must be positive");
      s.finish();
      cfg.seeds.clear();
      for (int i = 0; i < count; ++i) cfg.seeds.push_back(first + static_cast<std::uint64_t>(i));
    } else {
      top.fail(seeds, "'seeds' must be a list or {first, count}");
    }
  }

  SimConfig& sim = cfg.sim;
  {
    Section m = top.sub("map");
    std::string variant = to_string(sim.map.variant);
    m.get<std::string>("variant", variant);
    try {
      sim.map.variant = map_variant_from_string(variant);
    } catch (const std::invalid_argument& e) {
      m.fail(root["map"]["variant"], e.what());
    }
    m.get<double>("corridor_length", sim.map.corridor_length, positive<double>(), "must be positive");
    m.finish();
  }
  top.get<double>("isd", sim.isd, positive<double>(), "must be positive");
  top.get<double>("dt", sim.dt, positive<double>(), "must be positive");
  cfg.filter.fusion.dt = sim.dt;
  top.get<int>("k_max", sim.k_max, positive<int>(), "must be >= 1");
  top.get<int>("route_intersections", sim.route_intersections, positive<int>(), "must be >= 1");
  {
    Section d = top.sub("detection");
    d.get<double>("p_nlos", sim.detection.p_nlos, [](const double& p) { return p >= 0.0 && p <= 1.0; },
                  "must lie in [0, 1]");
    d.finish();
  }
  {
    std::string mode = to_string(sim.mode);
    top.get<std::string>("mode", mode);
    try {
      sim.mode = fidelity_from_string(mode);
    } catch (const std::invalid_argument& e) {
      top.fail(root["mode"], e.what());
    }
  }
  {
    Section n = top.sub("noise");
    double deg = sim.noise.sigma_azimuth * 180.0 / kPi;
    n.get<double>("sigma_azimuth_deg", deg, non_negative<double>(), "must be >= 0");
    sim.noise.sigma_azimuth = deg * kPi / 180.0;
    n.get<double>("sigma_toa", sim.noise.sigma_toa, non_negative<double>(), "must be >= 0");
    n.finish();
  }
  {
    Section c = top.sub("clocks");
    ClockTruthConfig& k = sim.clocks;
    c.get<double>("sigma_eta", k.sigma_eta, non_negative<double>(), "must be >= 0");
    c.get<double>("beta", k.beta, [](const double& b) { return std::abs(b) <= 1.0; }, "must satisfy |beta| <= 1");
    c.get<double>("sigma_rho", k.sigma_rho, non_negative<double>(), "must be >= 0");
    c.get<double>("an_offset_std", k.an_offset_std, non_negative<double>(), "must be >= 0");
    c.get<double>("un_offset_std", k.un_offset_std, non_negative<double>(), "must be >= 0");
    c.get<double>("un_skew_mean_ppm", k.un_skew_mean_ppm);
    c.get<double>("un_skew_std_ppm", k.un_skew_std_ppm, non_negative<double>(), "must be >= 0");
    c.finish();
  }
  {
    Section c = top.sub("channel");
    ChannelConfig& ch = sim.channel;
    c.get<int>("pilot_count", ch.pilot_count, [](const int& v) { return v >= 2; }, "must be >= 2");
    c.get<int>("pilot_step", ch.pilot_step, positive<int>(), "must be >= 1");
    c.get<double>("subcarrier_spacing", ch.subcarrier_spacing, positive<double>(), "must be positive");
    c.get<int>("modes_azimuth", ch.modes_azimuth, positive<int>(), "must be positive");
    c.get<int>("modes_elevation", ch.modes_elevation, positive<int>(), "must be positive");
    c.get<double>("sinr_min_db", ch.sinr_min_db);
    c.get<double>("sinr_max_db", ch.sinr_max_db);
    c.get<double>("window_quantum", ch.window_quantum, positive<double>(), "must be positive");
    c.get<int>("snapshots_per_step", ch.snapshots_per_step, positive<int>(), "must be >= 1");
    c.get<int>("fft_padding", ch.tracker.fft_padding, positive<int>(), "must be positive");
    c.get<int>("refine_iterations", ch.tracker.refine_iterations, non_negative<int>(), "must be >= 0");
    c.get<bool>("estimate_noise", ch.tracker.estimate_noise);
    if (YAML::Node w = c.raw("tracker_sigma_w")) {
      std::vector<double> v;
      try {
        v = w.as<std::vector<double>>();
      } catch (const YAML::Exception&) {
        c.fail(w, "'channel.tracker_sigma_w' must be a list of three numbers");
      }
      if (v.size() != 3 || std::any_of(v.begin(), v.end(), [](double x) { return !(x > 0.0); })) {
        c.fail(w, "'channel.tracker_sigma_w' must hold three positive numbers (delay, coelevation, azimuth)");
      }
      ch.tracker.process.sigma_w = Eigen::Vector3d(v[0], v[1], v[2]);
    }
    ch.tracker.process.dt = sim.dt / ch.snapshots_per_step;
    c.finish();
  }
  {
    Section m = top.sub("motion");
    MotionLimits& mo = sim.motion;
    double v_max = mo.v_max * 3.6, v_turn = mo.v_turn * 3.6, v_start = mo.start_speed * 3.6;
    m.get<double>("v_max_kmh", v_max, positive<double>(), "must be positive");
    m.get<double>("v_turn_kmh", v_turn, positive<double>(), "must be positive");
    m.get<double>("start_speed_kmh", v_start, positive<double>(), "must be positive");
    mo.v_max = v_max / 3.6;
    mo.v_turn = v_turn / 3.6;
    mo.start_speed = v_start / 3.6;
    m.get<double>("accel_time", mo.accel_time, positive<double>(), "must be positive");
    m.get<double>("decel_time", mo.decel_time, positive<double>(), "must be positive");
    m.get<double>("turn_radius", mo.turn_radius, positive<double>(), "must be positive");
    m.get<double>("lane_offset", mo.lane_offset, non_negative<double>(), "must be >= 0");
    m.finish();
  }
  {
    Section h = top.sub("heights");
    h.get<double>("un", sim.un_height, positive<double>(), "must be positive");
    h.get<double>("an", sim.an_height, positive<double>(), "must be positive");
    h.finish();
  }
  {
    Section f = top.sub("filter");
    FilterConfig& fc = cfg.filter;
    std::string kind = to_string(fc.kind);
    f.get<std::string>("kind", kind);
    try {
      fc.kind = filter_from_string(kind);
    } catch (const std::invalid_argument& e) {
      f.fail(root["filter"]["kind"], e.what());
    }
    f.get<double>("sigma_v", fc.fusion.sigma_v, non_negative<double>(), "must be >= 0");
    f.get<double>("sigma_eta", fc.fusion.sigma_eta, non_negative<double>(), "must be >= 0");
    f.get<double>("beta", fc.fusion.beta, [](const double& b) { return std::abs(b) <= 1.0; }, "must satisfy |beta| <= 1");
    f.get<double>("sigma_rho", fc.fusion.sigma_rho, non_negative<double>(), "must be >= 0");
    f.get<int>("burn_in", fc.burn_in, non_negative<int>(), "must be >= 0");
    f.get<double>("an_offset_prior_std", fc.an_offset_prior_std, positive<double>(), "must be positive");
    f.get<int>("warmup_steps", fc.init.warmup_steps, positive<int>(), "must be >= 1");
    f.get<double>("sigma_v0", fc.init.sigma_v0, positive<double>(), "must be positive");
    f.get<double>("mu_alpha0_ppm", fc.init.mu_alpha0_ppm);
    f.get<double>("sigma_alpha0_ppm", fc.init.sigma_alpha0_ppm, positive<double>(), "must be positive");
    f.get<double>("sigma_rho0", fc.init.sigma_rho0, positive<double>(), "must be positive");
    f.get<double>("single_an_floor", fc.init.single_an_floor, positive<double>(), "must be positive");
    f.finish();
  }
  top.finish();

  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(source + ":1:1: " + e.what());
  }
  return cfg;
}

ScenarioConfig load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str(), path);
}

std::string dump_scenario(const ScenarioConfig& cfg) {
  const SimConfig& s = cfg.sim;
  const FilterConfig& f = cfg.filter;
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e << YAML::BeginMap;
  e << YAML::Key << "label" << YAML::Value << cfg.label;
  e << YAML::Key << "seeds" << YAML::Value << YAML::Flow << cfg.seeds;
  e << YAML::Key << "map" << YAML::Value << YAML::BeginMap << YAML::Key << "variant" << YAML::Value
    << to_string(s.map.variant) << YAML::Key << "corridor_length" << YAML::Value << s.map.corridor_length
    << YAML::EndMap;
  e << YAML::Key << "isd" << YAML::Value << s.isd;
  e << YAML::Key << "dt" << YAML::Value << s.dt;
  e << YAML::Key << "k_max" << YAML::Value << s.k_max;
  e << YAML::Key << "route_intersections" << YAML::Value << s.route_intersections;
  e << YAML::Key << "detection" << YAML::Value << YAML::BeginMap << YAML::Key << "p_nlos" << YAML::Value
    << s.detection.p_nlos << YAML::EndMap;
  e << YAML::Key << "mode" << YAML::Value << to_string(s.mode);
  e << YAML::Key << "noise" << YAML::Value << YAML::BeginMap << YAML::Key << "sigma_azimuth_deg" << YAML::Value
    << s.noise.sigma_azimuth * 180.0 / kPi << YAML::Key << "sigma_toa" << YAML::Value << s.noise.sigma_toa
    << YAML::EndMap;
  e << YAML::Key << "clocks" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "sigma_eta" << YAML::Value << s.clocks.sigma_eta;
  e << YAML::Key << "beta" << YAML::Value << s.clocks.beta;
  e << YAML::Key << "sigma_rho" << YAML::Value << s.clocks.sigma_rho;
  e << YAML::Key << "an_offset_std" << YAML::Value << s.clocks.an_offset_std;
  e << YAML::Key << "un_offset_std" << YAML::Value << s.clocks.un_offset_std;
  e << YAML::Key << "un_skew_mean_ppm" << YAML::Value << s.clocks.un_skew_mean_ppm;
  e << YAML::Key << "un_skew_std_ppm" << YAML::Value << s.clocks.un_skew_std_ppm;
  e << YAML::EndMap;
  const ChannelConfig& c = s.channel;
  e << YAML::Key << "channel" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "pilot_count" << YAML::Value << c.pilot_count;
  e << YAML::Key << "pilot_step" << YAML::Value << c.pilot_step;
  e << YAML::Key << "subcarrier_spacing" << YAML::Value << c.subcarrier_spacing;
  e << YAML::Key << "modes_azimuth" << YAML::Value << c.modes_azimuth;
  e << YAML::Key << "modes_elevation" << YAML::Value << c.modes_elevation;
  e << YAML::Key << "sinr_min_db" << YAML::Value << c.sinr_min_db;
  e << YAML::Key << "sinr_max_db" << YAML::Value << c.sinr_max_db;
  e << YAML::Key << "window_quantum" << YAML::Value << c.window_quantum;
  e << YAML::Key << "snapshots_per_step" << YAML::Value << c.snapshots_per_step;
  e << YAML::Key << "fft_padding" << YAML::Value << c.tracker.fft_padding;
  e << YAML::Key << "refine_iterations" << YAML::Value << c.tracker.refine_iterations;
  e << YAML::Key << "estimate_noise" << YAML::Value << c.tracker.estimate_noise;
  e << YAML::Key << "tracker_sigma_w" << YAML::Value << YAML::Flow
    << std::vector<double>{c.tracker.process.sigma_w(0), c.tracker.process.sigma_w(1), c.tracker.process.sigma_w(2)};
  e << YAML::EndMap;
  const MotionLimits& m = s.motion;
  e << YAML::Key << "motion" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "v_max_kmh" << YAML::Value << m.v_max * 3.6;
  e << YAML::Key << "v_turn_kmh" << YAML::Value << m.v_turn * 3.6;
  e << YAML::Key << "start_speed_kmh" << YAML::Value << m.start_speed * 3.6;
  e << YAML::Key << "accel_time" << YAML::Value << m.accel_time;
  e << YAML::Key << "decel_time" << YAML::Value << m.decel_time;
  e << YAML::Key << "turn_radius" << YAML::Value << m.turn_radius;
  e << YAML::Key << "lane_offset" << YAML::Value << m.lane_offset;
  e << YAML::EndMap;
  e << YAML::Key << "heights" << YAML::Value << YAML::BeginMap << YAML::Key << "un" << YAML::Value << s.un_height
    << YAML::Key << "an" << YAML::Value << s.an_height << YAML::EndMap;
  e << YAML::Key << "filter" << YAML::Value << YAML::BeginMap;
  e << YAML::Key << "kind" << YAML::Value << to_string(f.kind);
  e << YAML::Key << "sigma_v" << YAML::Value << f.fusion.sigma_v;
  e << YAML::Key << "sigma_eta" << YAML::Value << f.fusion.sigma_eta;
  e << YAML::Key << "beta" << YAML::Value << f.fusion.beta;
  e << YAML::Key << "sigma_rho" << YAML::Value << f.fusion.sigma_rho;
  e << YAML::Key << "burn_in" << YAML::Value << f.burn_in;
  e << YAML::Key << "an_offset_prior_std" << YAML::Value << f.an_offset_prior_std;
  e << YAML::Key << "warmup_steps" << YAML::Value << f.init.warmup_steps;
  e << YAML::Key << "sigma_v0" << YAML::Value << f.init.sigma_v0;
  e << YAML::Key << "mu_alpha0_ppm" << YAML::Value << f.init.mu_alpha0_ppm;
  e << YAML::Key << "sigma_alpha0_ppm" << YAML::Value << f.init.sigma_alpha0_ppm;
  e << YAML::Key << "sigma_rho0" << YAML::Value << f.init.sigma_rho0;
  e << YAML::Key << "single_an_floor" << YAML::Value << f.init.single_an_floor;
  e << YAML::EndMap;
  e << YAML::EndMap;
  return std::string(e.c_str()) + "\n";
}

// ---------------------------------------------------------------------------
// Filter runs

RunTrace run_filter(const SimulationResult& sim, const FilterConfig& cfg) {
  cfg.validate();
  const AnTable table = make_an_table(sim.ans);
  std::map<AnId, std::size_t> column;
  for (std::size_t i = 0; i < sim.ans.size(); ++i) column[sim.ans[i].id] = i;

  auto truth_offset = [&](std::size_t n, AnId id) {
    const StepRecord& s = sim.steps[n];
    if (!s.all_an_offsets.empty()) return s.all_an_offsets[column.at(id)];
    for (std::size_t k = 0; k < s.selection.ids.size() && k < s.an_offsets.size(); ++k) {
      if (s.selection.ids[k] == id) return s.an_offsets[k];
    }
    return table.at(id).clock_offset;
  };
  auto ans_of = [&](std::size_t n) {
    std::vector<AnInfo> out;
    for (const Measurement& m : sim.steps[n].measurements) out.push_back(table.at(m.an_id));
    return out;
  };

  std::size_t n0 = 0;
  while (n0 < sim.steps.size() && sim.steps[n0].measurements.empty()) ++n0;
  const auto warmup = static_cast<std::size_t>(cfg.init.warmup_steps);
  if (n0 + warmup >= sim.steps.size()) throw std::runtime_error("run too short for the DoA-only warm-up");

  const CentroidFix fix = centroid_init(ans_of(n0), cfg.init.single_an_floor);
  KinematicState kin = initial_kinematics(fix, cfg.init);
  // A fix on top of a measuring AN (single-AN start) leaves the bearing
  // undefined; start one sigma_p0 out along that AN's measured bearing.
  for (const Measurement& m : sim.steps[n0].measurements) {
    const Eigen::Vector2d a = table.at(m.an_id).position.vec();
    if ((kin.mean.head<2>() - a).norm() < kMinRange) {
      kin.mean.head<2>() = a + fix.sigma * Eigen::Vector2d(std::cos(m.azimuth), std::sin(m.azimuth));
    }
  }
  std::vector<std::vector<Measurement>> stream;
  for (std::size_t n = n0; n < n0 + warmup; ++n) stream.push_back(sim.steps[n].measurements);
  kin = warmup_doa_only(kin, stream, table, cfg.init.warmup_steps, cfg.fusion);

  RunTrace trace;
  trace.kind = cfg.kind;
  trace.first_step = n0;
  const std::size_t start = n0 + warmup;
  const FusionParams& p = cfg.fusion;
  const double prior_var = cfg.an_offset_prior_std * cfg.an_offset_prior_std;

  UnFusionState un;
  SyncFusionState sync;
  if (cfg.kind != FilterKind::DoaOnly) un = attach_clock_prior(kin, cfg.init);
  if (cfg.kind == FilterKind::PosSync) {
    std::size_t last = start - 1;
    while (last > n0 && sim.steps[last].measurements.empty()) --last;
    trace.reference_an = select_reference_an(ans_of(last), Position2D{kin.mean(0), kin.mean(1)});
    sync = SyncFusionState::from_un(un, trace.reference_an, sim.steps[start - 1].truth.t);
  }

  for (std::size_t n = start; n < sim.steps.size(); ++n) {
    const StepRecord& rec = sim.steps[n];
    std::vector<Measurement> meas;
    auto usable = [&](const Eigen::Vector2d& at) {
      // The measurement models are undefined on top of an AN; such
      // measurements are dropped for this step.
      meas.clear();
      for (const Measurement& m : rec.measurements) {
        if ((table.at(m.an_id).position.vec() - at).norm() >= kMinRange) meas.push_back(m);
      }
    };
    TraceStep ts;
    ts.step = n;
    ts.t = rec.truth.t;
    ts.scored = (n - start) >= static_cast<std::size_t>(cfg.burn_in);
    ts.true_position = rec.truth.position;
    ts.true_velocity = rec.truth.velocity;

    Eigen::Vector4d k_mean;
    Eigen::Matrix4d k_cov;
    switch (cfg.kind) {
      case FilterKind::DoaOnly:
        kin = predict_kinematic(kin, p);
        usable(kin.mean.head<2>());
        if (!meas.empty()) kin = update_doa_only(kin, meas, table, p);
        k_mean = kin.mean;
        k_cov = kin.cov;
        ts.clock_offset = kNaN;
        ts.clock_offset_var = kNaN;
        ts.true_clock_offset = rec.truth.un_clock.offset;
        break;
      case FilterKind::PosClock:
        un = predict_pos_clock(un, p);
        usable(un.mean.head<2>());
        if (!meas.empty()) un = update_pos_clock(un, meas, table, p);
        k_mean = un.mean.head<4>();
        k_cov = un.cov.topLeftCorner<4, 4>();
        ts.clock_offset = un.mean(4);
        ts.clock_offset_var = un.cov(4, 4);
        ts.true_clock_offset = rec.truth.un_clock.offset;
        break;
      case FilterKind::PosSync: {
        sync = predict_pos_sync(sync, p);
        usable(sync.mean.head<2>());
        if (!meas.empty()) {
          std::vector<AnId> ids;
          for (const Measurement& m : meas) ids.push_back(m.an_id);
          sync = sync_offsets(sync, ids, prior_var, p);
          sync = update_pos_sync(sync, meas, table, p);
        }
        k_mean = sync.mean.head<4>();
        k_cov = sync.cov.topLeftCorner<4, 4>();
        ts.clock_offset = sync.mean(4);
        ts.clock_offset_var = sync.cov(4, 4);
        const double ref = truth_offset(n, sync.reference_an);
        ts.true_clock_offset = rec.truth.un_clock.offset + ref;
        for (const Measurement& m : meas) {
          if (m.an_id == sync.reference_an) continue;
          const Eigen::Index idx = *sync.offset_index(m.an_id);
          ts.an_offsets.push_back({m.an_id, sync.mean(idx), sync.cov(idx, idx), truth_offset(n, m.an_id) - ref});
        }
        break;
      }
    }
    ts.measurement_count = static_cast<int>(meas.size());
    ts.position = k_mean.head<2>();
    ts.velocity = k_mean.tail<2>();
    ts.position_cov = k_cov.topLeftCorner<2, 2>();
    trace.steps.push_back(std::move(ts));
  }
  return trace;
}

NeesSeries nees(const std::vector<Eigen::VectorXd>& estimates, const std::vector<Eigen::VectorXd>& truths,
                const std::vector<Eigen::MatrixXd>& covs) {
  if (estimates.size() != truths.size() || estimates.size() != covs.size()) {
    throw std::invalid_argument("nees: series lengths differ");
  }
  NeesSeries out;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const Eigen::VectorXd e = truths[i] - estimates[i];
    if (covs[i].rows() != e.size() || covs[i].cols() != e.size()) throw std::invalid_argument("nees: size mismatch");
    const Eigen::LLT<Eigen::MatrixXd> llt(covs[i]);
    bool singular = llt.info() != Eigen::Success;
    if (!singular) {
      const Eigen::VectorXd d = llt.matrixL().toDenseMatrix().diagonal();
      singular = d.minCoeff() <= 1e-12 * std::max(1e-300, d.maxCoeff());
    }
    if (singular) {
      out.values.push_back(kNaN);
      out.flagged.push_back(true);
      continue;
    }
    out.values.push_back(e.dot(llt.solve(e)));
    out.flagged.push_back(false);
  }
  return out;
}

RunMetrics compute_metrics(const SimulationResult& sim, const RunTrace& trace, int burn_in) {
  RunMetrics m;
  m.burn_in = burn_in;
  std::vector<Eigen::VectorXd> est, tru;
  std::vector<Eigen::MatrixXd> cov;
  double pos_sq = 0.0, clk_sq = 0.0, an_sq = 0.0, az_sq = 0.0, toa_sq = 0.0;
  std::size_t n_pos = 0, n_clk = 0, n_an = 0, n_meas = 0;
  for (const TraceStep& s : trace.steps) {
    if (!s.scored) continue;
    ++n_pos;
    pos_sq += (s.position - s.true_position).squaredNorm();
    if (std::isfinite(s.clock_offset)) {
      clk_sq += std::pow(s.clock_offset - s.true_clock_offset, 2);
      ++n_clk;
    }
    for (const AnOffsetEstimate& a : s.an_offsets) {
      an_sq += std::pow(a.estimate - a.truth, 2);
      ++n_an;
    }
    const StepRecord& rec = sim.steps[s.step];
    for (std::size_t k = 0; k < rec.measurements.size(); ++k) {
      az_sq += std::pow(wrap_angle(rec.measurements[k].azimuth - rec.true_azimuth[k]), 2);
      toa_sq += std::pow(rec.measurements[k].toa - rec.true_toa[k], 2);
      ++n_meas;
    }
    est.emplace_back(s.position);
    tru.emplace_back(s.true_position);
    cov.emplace_back(s.position_cov);
  }
  m.scored_steps = n_pos;
  if (n_pos == 0) {
    m.ok = false;
    m.error = "no scored steps after burn-in";
    return m;
  }
  m.position_rmse = rms(pos_sq, n_pos);
  m.un_offset_rmse = rms(clk_sq, n_clk);
  m.an_offset_rmse = rms(an_sq, n_an);
  m.doa_rmse = rms(az_sq, n_meas);
  m.toa_rmse = rms(toa_sq, n_meas);
  const NeesSeries ns = nees(est, tru, cov);
  m.nees = ns.values;
  m.nees_flagged = static_cast<std::size_t>(std::count(ns.flagged.begin(), ns.flagged.end(), true));
  m.mean_nees = mean_finite(ns.values);
  m.ok = true;
  return m;
}

AggregateMetrics aggregate(const std::vector<RunMetrics>& runs) {
  AggregateMetrics a;
  a.runs = runs.size();
  std::vector<double> pos, clk, an, doa, toa, ne;
  for (const RunMetrics& r : runs) {
    if (!r.ok) {
      ++a.failed;
      continue;
    }
    pos.push_back(r.position_rmse);
    clk.push_back(r.un_offset_rmse);
    an.push_back(r.an_offset_rmse);
    doa.push_back(r.doa_rmse);
    toa.push_back(r.toa_rmse);
    ne.push_back(r.mean_nees);
  }
  a.position_rmse = mean_finite(pos);
  a.position_rmse_median = median(pos);
  a.un_offset_rmse = mean_finite(clk);
  a.an_offset_rmse = mean_finite(an);
  a.doa_rmse = mean_finite(doa);
  a.toa_rmse = mean_finite(toa);
  a.mean_nees = mean_finite(ne);
  return a;
}

RunMetrics replay(const SimulationResult& sim, const FilterConfig& cfg, const std::string& label, RunTrace* trace_out) {
  RunTrace trace = run_filter(sim, cfg);
  RunMetrics m = compute_metrics(sim, trace, cfg.burn_in);
  m.label = label;
  if (trace_out) *trace_out = std::move(trace);
  return m;
}

MetricsReport run_scenario(const ScenarioConfig& cfg, unsigned workers, std::vector<RunArtifacts>* artifacts) {
  cfg.validate();
  MetricsReport report;
  report.label = cfg.label;
  report.config = cfg;
  report.runs.resize(cfg.seeds.size());
  if (artifacts) artifacts->assign(cfg.seeds.size(), RunArtifacts{});

  parallel_for(cfg.seeds.size(), workers, [&](std::size_t i) {
    const std::uint64_t seed = cfg.seeds[i];
    RunMetrics& m = report.runs[i];
    try {
      SimulationResult sim = simulate(cfg.sim, seed);
      RunTrace trace;
      m = replay(sim, cfg.filter, cfg.label, &trace);
      if (artifacts) {
        (*artifacts)[i].sim = std::move(sim);
        (*artifacts)[i].trace = std::move(trace);
      }
    } catch (const std::exception& e) {
      m = RunMetrics{};
      m.label = cfg.label;
      m.ok = false;
      m.error = e.what();
    }
    m.seed = seed;
    if (artifacts) (*artifacts)[i].seed = seed;
  });
  report.aggregate = aggregate(report.runs);
  return report;
}

std::vector<SweepRow> sweep(const std::vector<ScenarioConfig>& cfgs, unsigned workers,
                            std::vector<MetricsReport>* reports) {
  std::vector<SweepRow> rows;
  for (const ScenarioConfig& cfg : cfgs) {
    SweepRow row;
    row.label = cfg.label;
    try {
      MetricsReport rep = run_scenario(cfg, workers);
      row.metrics = rep.aggregate;
      row.ok = rep.aggregate.failed == 0;
      for (const RunMetrics& r : rep.runs) {
        if (!r.ok) {
          row.error = "seed " + std::to_string(r.seed) + ": " + r.error;
          break;
        }
      }
      if (reports) reports->push_back(std::move(rep));
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Consistency

std::pair<double, double> chi_square_band(int dof, int runs, double confidence) {
  if (dof < 1 || runs < 1 || !(confidence > 0.0 && confidence < 1.0)) {
    throw std::invalid_argument("chi_square_band: bad arguments");
  }
  const boost::math::chi_squared dist(static_cast<double>(dof) * runs);
  const double tail = 0.5 * (1.0 - confidence);
  return {boost::math::quantile(dist, tail) / runs, boost::math::quantile(dist, 1.0 - tail) / runs};
}

ConsistencyResult run_consistency(const ConsistencyConfig& cfg, std::uint64_t seed, unsigned workers) {
  if (cfg.runs < 1 || cfg.steps < 1 || cfg.k_max < 1) throw std::invalid_argument("run_consistency: bad sizes");
  cfg.fusion.validate();
  const GridMap map = build_map({MapVariant::Open, 300.0});
  const std::vector<AnInfo> ans = deploy_ans(map, cfg.isd);
  const AnTable table = make_an_table(ans);

  const Matrix6d f = un_transition(cfg.fusion);
  const Eigen::LLT<Matrix6d> q_chol(un_process_noise(cfg.fusion));
  Vector6d p0_diag;
  p0_diag << cfg.sigma_p0, cfg.sigma_p0, cfg.sigma_v0, cfg.sigma_v0, cfg.sigma_rho0, cfg.sigma_alpha0;
  Vector6d m0;
  m0 << map.width / 2, map.height / 2 + 9.0, 0.0, 0.0, 0.0, 25e-6;

  std::vector<std::vector<double>> per_run(static_cast<std::size_t>(cfg.runs));
  parallel_for(per_run.size(), workers, [&](std::size_t r) {
    auto rng = make_stream(seed, r);
    std::normal_distribution<double> n01(0.0, 1.0);
    auto draw = [&] {
      Vector6d z;
      for (int i = 0; i < 6; ++i) z(i) = n01(rng);
      return z;
    };
    Vector6d x = m0 + p0_diag.cwiseProduct(draw());
    UnFusionState est;
    est.mean = m0;
    est.cov = p0_diag.cwiseAbs2().asDiagonal();

    std::vector<double>& out = per_run[r];
    for (int n = 0; n < cfg.steps; ++n) {
      if (n > 0) {
        x = f * x + q_chol.matrixL() * draw();
        est = predict_pos_clock(est, cfg.fusion);
      }
      const Eigen::Vector2d pos = x.head<2>();
      std::vector<std::pair<double, AnId>> near;
      for (const AnInfo& a : ans) {
        const double d = (a.position.vec() - pos).norm();
        if (d >= 1.0) near.push_back({d, a.id});
      }
      std::sort(near.begin(), near.end());
      std::vector<Measurement> meas;
      for (int k = 0; k < cfg.k_max && k < static_cast<int>(near.size()); ++k) {
        const AnInfo& a = table.at(near[static_cast<std::size_t>(k)].second);
        const Eigen::Vector2d d = pos - a.position.vec();
        const double az = std::atan2(d.y(), d.x());
        meas.push_back(measurement_level(a.id, az, d.norm() / cfg.fusion.c + x(4), cfg.noise, rng));
      }
      if (!meas.empty()) est = update_pos_clock(est, meas, table, cfg.fusion);
      const Eigen::Vector2d e = pos - est.mean.head<2>();
      out.push_back(e.dot(est.cov.topLeftCorner<2, 2>().ldlt().solve(e)));
    }
  });

  ConsistencyResult res;
  std::tie(res.lower, res.upper) = chi_square_band(2, cfg.runs, cfg.confidence);
  std::size_t inside = 0;
  for (int n = 0; n < cfg.steps; ++n) {
    double s = 0.0;
    for (const auto& run : per_run) s += run[static_cast<std::size_t>(n)];
    const double mean = s / cfg.runs;
    res.mean_nees.push_back(mean);
    if (mean >= res.lower && mean <= res.upper) ++inside;
  }
  res.fraction_inside = static_cast<double>(inside) / cfg.steps;
  return res;
}

}  // namespace udnloc
