#pragma once

// Ground truth and measurement generation: grid maps with axis-aligned
// building blocks, AN deployment along road edges, vehicle trajectories,
// clock evolution, geometric LoS selection and the two measurement front
// ends (direct noisy draws, or synthetic array snapshots fed to per-AN
// trackers).

#include "udnloc/array_channel.hpp"
#include "udnloc/doa_toa_ekf.hpp"
#include "udnloc/state_space.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace udnloc {

// ---------------------------------------------------------------------------
// Map

struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool contains_strict(const Eigen::Vector2d& p) const { return p.x() > x0 && p.x() < x1 && p.y() > y0 && p.y() < y1; }
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
};

struct Segment {
  Eigen::Vector2d a = Eigen::Vector2d::Zero();
  Eigen::Vector2d b = Eigen::Vector2d::Zero();
  double length() const { return (b - a).norm(); }
};

enum class MapVariant {
  Desk,      // 3x3 square blocks
  Madrid,    // square and 120 x 30 blocks with a central park
  Corridor,  // one straight road, no buildings
  Open,      // empty square, roads on a grid, no buildings
};

std::string to_string(MapVariant v);
MapVariant map_variant_from_string(const std::string& s);

struct MapSpec {
  MapVariant variant = MapVariant::Desk;
  double corridor_length = 300.0;  // Corridor only
};

/// Roads are full-length straight lines at the listed coordinates; every
/// crossing of a vertical and a horizontal line is an intersection.
struct GridMap {
  std::vector<Rect> buildings;
  std::vector<double> road_x;  // vertical road centerlines
  std::vector<double> road_y;  // horizontal road centerlines
  double width = 0.0;
  double height = 0.0;
  double road_width = 18.0;    // curb to curb incl. parking
  double lane_width = 3.0;
  double an_setback = 9.0;     // AN distance from the road centerline

  std::vector<Segment> road_segments() const;
  bool inside_building(const Eigen::Vector2d& p) const;
};

/// Desk: 120 m blocks on a 150 m pitch (18 m road plus 6 m setback on each
/// side), extent 480 m. Madrid: 120 m squares and 120 x 30 m blocks with 18 m
/// roads (3 m lanes, 3 m parking, 3 m sidewalks) and a park in the center.
GridMap build_map(const MapSpec& spec);

/// ANs every `isd` meters along each road line at `an_setback` from its
/// centerline, 7 m high; ANs closer than isd/2 to an existing one are
/// skipped. Throws std::invalid_argument for isd <= 0 or isd larger than the map.
std::vector<AnInfo> deploy_ans(const GridMap& map, double isd, double antenna_height = 7.0);

/// Strict-interior segment/rectangle intersection (Liang-Barsky clipping).
bool segment_hits_rect(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Rect& r);
bool line_of_sight(const GridMap& map, const Eigen::Vector2d& a, const Eigen::Vector2d& b);

// ---------------------------------------------------------------------------
// Motion

struct MotionLimits {
  double v_max = 50.0 / 3.6;
  double v_turn = 20.0 / 3.6;
  double start_speed = 20.0 / 3.6;
  double accel_time = 6.0;  // duration of a v_turn -> v_max ramp
  double decel_time = 5.0;  // duration of a v_max -> v_turn ramp
  double turn_radius = 6.0;
  double lane_offset = 1.5;  // right of the centerline

  void validate() const;
};

/// Distance covered by a constant-jerk speed ramp of the given duration.
double ramp_distance(double v_from, double v_to, double duration);

struct RouteSpec {
  std::vector<Eigen::Vector2d> waypoints;  // road centerline vertices
};

struct TrajectorySample {
  double t = 0.0;
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();
  Eigen::Vector2d acceleration = Eigen::Vector2d::Zero();
  double speed = 0.0;
  bool turning = false;
};

/// Lane-offset polyline with filleted corners traversed with constant-jerk
/// speed ramps between v_turn (on arcs) and v_max; no slow-down after the
/// last corner. Sampled every dt until the end of the path (inclusive of t=0).
/// Throws std::invalid_argument for fewer than two waypoints, zero-length or
/// reversing legs, and for turns that are not 90 degrees.
std::vector<TrajectorySample> generate_trajectory(const RouteSpec& route, const MotionLimits& limits, double dt);

/// Starts at a map-edge road end and drives through `intersections`
/// intersections with random turns, never leaving the map or reversing.
RouteSpec random_route(const GridMap& map, std::mt19937_64& rng, int intersections = 6);

/// True if every sample lies outside all building interiors.
bool trajectory_clear(const GridMap& map, const std::vector<TrajectorySample>& samples);

// ---------------------------------------------------------------------------
// Clocks

/// alpha <- beta alpha + eta, rho <- rho + alpha dt.
ClockState evolve_un_clock(const ClockState& clock, const ClockModelParams& p, double dt, std::mt19937_64& rng);

/// Random walk with STD sigma_rho sqrt(dt) per step; no-op for sigma_rho = 0.
void evolve_an_offsets(std::vector<double>& offsets, const ClockModelParams& p, double dt, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// LoS selection and measurements

struct DetectionModel {
  double p_nlos = 0.0;  // probability that one selected AN is swapped for an NLoS AN
};

struct LosSelection {
  std::vector<AnId> ids;          // nearest first
  std::optional<AnId> nlos;       // swapped-in AN, if any
};

/// Up to k_max nearest LoS ANs. With probability p_nlos one entry (chosen
/// uniformly) is replaced by the nearest NLoS AN.
LosSelection los_set(const GridMap& map, const Eigen::Vector2d& un, const std::vector<AnInfo>& ans, int k_max,
                     const DetectionModel& detection, std::mt19937_64& rng);

/// Shortest path from AN to UN through one building corner that is visible
/// from both ends; the corner is pushed 1 cm out of the block.
std::optional<Eigen::Vector2d> diffraction_corner(const GridMap& map, const Eigen::Vector2d& an,
                                                  const Eigen::Vector2d& un);

enum class FidelityMode { MeasurementLevel, ChannelLevel };

std::string to_string(FidelityMode m);
FidelityMode fidelity_from_string(const std::string& s);

struct MeasurementNoise {
  double sigma_azimuth = kPi / 180.0;  // rad
  double sigma_toa = 1e-9;             // s
};

/// Geometric truth seen by one AN: azimuth of arrival and apparent path
/// length (via the corner for NLoS). `length` is planar.
struct PathTruth {
  double azimuth = 0.0;
  double coelevation = kPi / 2;
  double length = 0.0;
};

PathTruth path_truth(const GridMap& map, const AnInfo& an, const Eigen::Vector2d& un, double un_height,
                     bool nlos);

/// Direct noisy draw: azimuth + N(0, sigma^2) wrapped, toa + N(0, sigma^2),
/// R = diag(sigma^2).
Measurement measurement_level(AnId id, double azimuth, double toa, const MeasurementNoise& noise,
                              std::mt19937_64& rng);

struct ChannelConfig {
  int pilot_count = 256;
  int pilot_step = 5;               // 5 -> sparse over 96 MHz, 1 -> continuous 19.2 MHz
  double subcarrier_spacing = 75e3;
  int modes_azimuth = 13;
  int modes_elevation = 15;
  double sinr_min_db = 5.0;
  double sinr_max_db = 40.0;
  double window_quantum = 1e-6;     // FFT window start resolution
  int snapshots_per_step = 10;      // tracker snapshots per fusion step
  // Delay noise covers the truth UN skew walk at the snapshot rate;
  // process.dt is set to dt / snapshots_per_step by the simulator.
  TrackerConfig tracker{CwnaParams(Eigen::Vector3d(2e-7, 0.5, 1.0), 0.01)};

  PilotGrid grid() const;
  void validate() const;
};

/// Channel-level measurement front end: one tracker per AN session. A session
/// starts when an AN first appears in the selection (or re-appears after
/// dropping out) and draws its SINR uniformly in dB. Within a session every
/// observe() feeds snapshots_per_step snapshots, with the path parameters
/// interpolated linearly from the previous call, and returns the last
/// tracker output.
class ChannelFrontEnd {
 public:
  ChannelFrontEnd(const ChannelConfig& cfg, std::shared_ptr<const ArrayManifold> manifold, std::uint64_t seed);

  /// Snapshot for one AN with the true delay `toa` and angles, then tracker step.
  Measurement observe(AnId id, double azimuth, double coelevation, double toa);
  /// Ends sessions of ANs not in `active`.
  void end_sessions_except(const std::vector<AnId>& active);

  const ChannelConfig& config() const { return cfg_; }

 private:
  struct Session {
    AnTracker tracker;
    double sinr_db;
    Eigen::Vector2cd weights;
    Eigen::Vector3d last;  // (azimuth, coelevation, toa) of the previous call
  };

  Measurement snapshot(Session& session, double azimuth, double coelevation, double toa);

  ChannelConfig cfg_;
  std::shared_ptr<const ArrayManifold> manifold_;
  std::shared_ptr<const PilotGrid> grid_;
  std::mt19937_64 rng_;
  std::map<AnId, Session> sessions_;
};

/// Calibration data for the AN array used by the channel-level mode.
std::shared_ptr<const ArrayManifold> default_manifold(int modes_azimuth, int modes_elevation);

// ---------------------------------------------------------------------------
// Full scenario

struct ClockTruthConfig {
  double sigma_eta = 6.3e-8;
  double beta = 1.0;
  double sigma_rho = 0.0;          // AN offset walk; 0 = phase-locked
  double an_offset_std = 0.0;      // 0 = synchronized network
  double un_offset_std = 100e-6;
  double un_skew_mean_ppm = 25.0;
  double un_skew_std_ppm = 30.0;
};

struct SimConfig {
  MapSpec map;
  double isd = 50.0;
  double dt = 0.1;
  int k_max = 2;
  int route_intersections = 6;
  DetectionModel detection;
  FidelityMode mode = FidelityMode::MeasurementLevel;
  MeasurementNoise noise;
  ClockTruthConfig clocks;
  ChannelConfig channel;
  MotionLimits motion;
  double un_height = 1.5;
  double an_height = 7.0;

  void validate() const;
};

struct TruthStep {
  double t = 0.0;
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  Eigen::Vector2d velocity = Eigen::Vector2d::Zero();
  ClockState un_clock;
};

struct StepRecord {
  TruthStep truth;
  LosSelection selection;
  std::vector<double> an_offsets;        // truth offsets aligned with selection.ids
  std::vector<Measurement> measurements; // aligned with selection.ids
  std::vector<double> true_azimuth;      // geometric truth (direct path)
  std::vector<double> true_toa;          // direct-path d/c + rho + rho_an
  std::vector<double> all_an_offsets;    // every AN in deployment order; empty after CSV import
};

struct SimulationResult {
  GridMap map;
  std::vector<AnInfo> ans;  // clock_offset = initial truth offset
  RouteSpec route;
  std::vector<StepRecord> steps;
};

/// Deterministic per (cfg, seed): route, clocks, LoS draws and measurement
/// noise come from independent streams derived from the seed.
SimulationResult simulate(const SimConfig& cfg, std::uint64_t seed);

/// Same, with an explicit route.
SimulationResult simulate_route(const SimConfig& cfg, const RouteSpec& route, std::uint64_t seed);

/// Engine seeded from (seed, stream) through std::seed_seq.
std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t stream);

// CSV export; column schemas are listed in docs/formats.md.
void write_truth_csv(std::ostream& os, const SimulationResult& sim);
void write_measurements_csv(std::ostream& os, const SimulationResult& sim);
void write_ans_csv(std::ostream& os, const std::vector<AnInfo>& ans);
std::vector<AnInfo> read_ans_csv(std::istream& is);
/// Rebuilds the step records (truth and measurements) written by the two
/// writers above; map and route are not restored.
SimulationResult read_simulation_csv(std::istream& truth, std::istream& measurements, std::istream& ans);

}  // namespace udnloc
