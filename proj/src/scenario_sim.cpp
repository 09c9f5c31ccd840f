#include "udnloc/scenario_sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace udnloc {

namespace {

Eigen::Vector2d right_normal(const Eigen::Vector2d& u) { return {u.y(), -u.x()}; }
Eigen::Vector2d left_normal(const Eigen::Vector2d& u) { return {-u.y(), u.x()}; }
double cross(const Eigen::Vector2d& a, const Eigen::Vector2d& b) { return a.x() * b.y() - a.y() * b.x(); }

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// ---------------------------------------------------------------------------
// Path geometry: straight pieces and circular arcs laid end to end.

struct Piece {
  bool arc = false;
  Eigen::Vector2d start = Eigen::Vector2d::Zero();
  Eigen::Vector2d dir = Eigen::Vector2d::Zero();  // line direction or arc start tangent
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  double radius = 0.0;
  double turn = 0.0;  // +1 left, -1 right
  double length = 0.0;
};

struct PathPoint {
  Eigen::Vector2d position;
  Eigen::Vector2d tangent;
  double curvature;  // signed, +left
};

PathPoint eval_piece(const Piece& p, double s) {
  if (!p.arc) return {p.start + s * p.dir, p.dir, 0.0};
  const double ang = p.turn * s / p.radius;
  const Eigen::Rotation2Dd rot(ang);
  const Eigen::Vector2d r0 = p.start - p.center;
  const Eigen::Vector2d tangent = rot * p.dir;
  return {p.center + rot * r0, tangent, p.turn / p.radius};
}

// One speed phase: constant-jerk s-curve from v_a to v_b over `duration`
// (acceleration rises linearly to its peak at mid-phase, then falls to zero).
struct Phase {
  double duration = 0.0;
  double v_a = 0.0;
  double v_b = 0.0;

  double distance(double t) const {
    if (duration <= 0.0) return 0.0;
    const double dv = v_b - v_a, u = t / duration;
    if (u <= 0.5) return v_a * t + dv * (2.0 / 3.0) * u * u * u * duration;
    const double r = 1.0 - u;
    return total() - (v_b * (duration - t) - dv * (2.0 / 3.0) * r * r * r * duration);
  }
  double speed(double t) const {
    if (duration <= 0.0) return v_b;
    const double dv = v_b - v_a, u = t / duration;
    if (u <= 0.5) return v_a + 2.0 * dv * u * u;
    return v_b - 2.0 * dv * (1.0 - u) * (1.0 - u);
  }
  double accel(double t) const {
    if (duration <= 0.0) return 0.0;
    const double dv = v_b - v_a, u = t / duration;
    return 4.0 * dv / duration * (u <= 0.5 ? u : 1.0 - u);
  }
  double total() const { return 0.5 * duration * (v_a + v_b); }
};

double ramp_time(double v_from, double v_to, const MotionLimits& m) {
  const double span = m.v_max - m.v_turn;
  const double dv = std::abs(v_to - v_from);
  if (dv == 0.0) return 0.0;
  const double base = v_to > v_from ? m.accel_time : m.decel_time;
  return span > 0.0 ? base * dv / span : base;
}

Phase ramp(double v_from, double v_to, const MotionLimits& m) { return {ramp_time(v_from, v_to, m), v_from, v_to}; }

// Speed phases covering a straight piece of length `len`.
std::vector<Phase> plan_line(double len, double v_in, std::optional<double> v_out, const MotionLimits& m) {
  auto need = [&](double peak) {
    double d = ramp(v_in, peak, m).total();
    if (v_out) d += ramp(peak, *v_out, m).total();
    return d;
  };
  std::vector<Phase> out;
  const double floor_peak = v_out ? std::max(v_in, *v_out) : v_in;
  if (need(floor_peak) > len) {
    // Not enough room for the planned ramps: one direct ramp over the piece.
    const double v_end = v_out ? *v_out : v_in;
    const double mean_v = 0.5 * (v_in + v_end);
    out.push_back({len / mean_v, v_in, v_end});
    return out;
  }
  double peak = m.v_max;
  if (need(peak) > len) {
    double lo = floor_peak, hi = m.v_max;
    for (int i = 0; i < 100; ++i) {
      const double mid = 0.5 * (lo + hi);
      (need(mid) > len ? hi : lo) = mid;
    }
    peak = lo;
  }
  const Phase up = ramp(v_in, peak, m);
  if (up.duration > 0.0) out.push_back(up);
  const double cruise = len - need(peak);
  if (cruise > 0.0) out.push_back({cruise / peak, peak, peak});
  if (v_out) {
    const Phase down = ramp(peak, *v_out, m);
    if (down.duration > 0.0) out.push_back(down);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Map

std::string to_string(MapVariant v) {
  switch (v) {
    case MapVariant::Desk: return "desk";
    case MapVariant::Madrid: return "madrid";
    case MapVariant::Corridor: return "corridor";
    case MapVariant::Open: return "open";
  }
  return "desk";
}

MapVariant map_variant_from_string(const std::string& s) {
  if (s == "desk") return MapVariant::Desk;
  if (s == "madrid") return MapVariant::Madrid;
  if (s == "corridor") return MapVariant::Corridor;
  if (s == "open") return MapVariant::Open;
  throw std::invalid_argument("unknown map variant '" + s + "'");
}

std::vector<Segment> GridMap::road_segments() const {
  std::vector<Segment> out;
  for (double y : road_y) out.push_back({{0.0, y}, {width, y}});
  for (double x : road_x) out.push_back({{x, 0.0}, {x, height}});
  return out;
}

bool GridMap::inside_building(const Eigen::Vector2d& p) const {
  return std::any_of(buildings.begin(), buildings.end(), [&](const Rect& r) { return r.contains_strict(p); });
}

GridMap build_map(const MapSpec& spec) {
  GridMap map;
  switch (spec.variant) {
    case MapVariant::Desk:
    case MapVariant::Open: {
      constexpr double block = 120.0, gap = 30.0, pitch = block + gap;
      for (int i = 0; i < 4; ++i) {
        map.road_x.push_back(gap / 2 + pitch * i);
        map.road_y.push_back(gap / 2 + pitch * i);
      }
      map.width = map.height = 3 * pitch + gap;
      if (spec.variant == MapVariant::Desk) {
        for (int j = 0; j < 3; ++j) {
          for (int i = 0; i < 3; ++i) {
            const double x0 = gap + pitch * i, y0 = gap + pitch * j;
            map.buildings.push_back({x0, y0, x0 + block, y0 + block});
          }
        }
      }
      map.an_setback = 9.0;
      break;
    }
    case MapVariant::Madrid: {
      constexpr double road = 18.0, block = 120.0, slim = 30.0;
      const std::vector<double> rows = {block, slim, block, slim, block};
      constexpr int cols = 5;
      for (int i = 0; i <= cols; ++i) map.road_x.push_back(road / 2 + i * (block + road));
      double y = road / 2;
      map.road_y.push_back(y);
      for (double h : rows) {
        y += road / 2 + h + road / 2;
        map.road_y.push_back(y);
      }
      map.width = cols * (block + road) + road;
      map.height = map.road_y.back() + road / 2;
      double y0 = road;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        for (int i = 0; i < cols; ++i) {
          const bool park = (r == 2 && i == 2);
          if (!park) {
            const double x0 = road + i * (block + road);
            map.buildings.push_back({x0, y0, x0 + block, y0 + rows[r]});
          }
        }
        y0 += rows[r] + road;
      }
      map.an_setback = 7.5;
      break;
    }
    case MapVariant::Corridor: {
      if (!(spec.corridor_length > 0.0)) throw std::invalid_argument("corridor length must be positive");
      map.width = spec.corridor_length;
      map.height = 40.0;
      map.road_y = {20.0};
      map.an_setback = 9.0;
      break;
    }
  }
  return map;
}

std::vector<AnInfo> deploy_ans(const GridMap& map, double isd, double antenna_height) {
  if (!(isd > 0.0)) throw std::invalid_argument("deploy_ans: isd must be positive");
  if (isd > std::max(map.width, map.height)) throw std::invalid_argument("deploy_ans: isd larger than the map");
  std::vector<AnInfo> ans;
  auto try_add = [&](const Eigen::Vector2d& p) {
    if (p.x() < 0.0 || p.y() < 0.0 || p.x() > map.width || p.y() > map.height) return;
    if (map.inside_building(p)) return;
    for (const auto& a : ans) {
      if ((a.position.vec() - p).norm() < isd / 2) return;
    }
    AnInfo a;
    a.id = static_cast<AnId>(ans.size());
    a.position = Position2D::from(p);
    a.antenna_height = antenna_height;
    ans.push_back(a);
  };
  const double eps = 1e-9 * std::max(map.width, map.height);
  for (double y : map.road_y) {
    for (double s = 0.0; s <= map.width + eps; s += isd) try_add({s, y + map.an_setback});
  }
  for (double x : map.road_x) {
    for (double s = 0.0; s <= map.height + eps; s += isd) try_add({x + map.an_setback, s});
  }
  return ans;
}

bool segment_hits_rect(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Rect& r) {
  const Eigen::Vector2d d = b - a;
  double t0 = 0.0, t1 = 1.0;
  const double p[4] = {-d.x(), d.x(), -d.y(), d.y()};
  const double q[4] = {a.x() - r.x0, r.x1 - a.x(), a.y() - r.y0, r.y1 - a.y()};
  for (int i = 0; i < 4; ++i) {
    if (p[i] == 0.0) {
      if (q[i] <= 0.0) return false;
      continue;
    }
    const double t = q[i] / p[i];
    if (p[i] < 0.0) {
      t0 = std::max(t0, t);
    } else {
      t1 = std::min(t1, t);
    }
    if (t0 >= t1) return false;
  }
  return r.contains_strict(a + 0.5 * (t0 + t1) * d);
}

bool line_of_sight(const GridMap& map, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  return std::none_of(map.buildings.begin(), map.buildings.end(),
                      [&](const Rect& r) { return segment_hits_rect(a, b, r); });
}

// ---------------------------------------------------------------------------
// Motion

void MotionLimits::validate() const {
  if (!(v_turn > 0.0) || !(v_max >= v_turn)) throw std::invalid_argument("MotionLimits: need 0 < v_turn <= v_max");
  if (!(start_speed > 0.0) || start_speed > v_max) throw std::invalid_argument("MotionLimits: start speed out of range");
  if (!(accel_time > 0.0) || !(decel_time > 0.0)) throw std::invalid_argument("MotionLimits: ramp times must be positive");
  if (!(turn_radius > 0.0) || !(lane_offset >= 0.0)) throw std::invalid_argument("MotionLimits: bad turn geometry");
}

double ramp_distance(double v_from, double v_to, double duration) { return Phase{duration, v_from, v_to}.total(); }

std::vector<TrajectorySample> generate_trajectory(const RouteSpec& route, const MotionLimits& limits, double dt) {
  limits.validate();
  if (!(dt > 0.0)) throw std::invalid_argument("generate_trajectory: dt must be positive");
  if (route.waypoints.size() < 2) throw std::invalid_argument("generate_trajectory: need two waypoints");

  // Drop repeated points and merge collinear legs.
  std::vector<Eigen::Vector2d> w;
  for (const auto& p : route.waypoints) {
    if (w.empty() || (p - w.back()).norm() > 1e-9) w.push_back(p);
  }
  if (w.size() < 2) throw std::invalid_argument("generate_trajectory: zero-length route");
  std::vector<Eigen::Vector2d> v{w.front()};
  for (std::size_t i = 1; i + 1 < w.size(); ++i) {
    const Eigen::Vector2d a = (w[i] - v.back()).normalized(), b = (w[i + 1] - w[i]).normalized();
    if (std::abs(cross(a, b)) < 1e-9 && a.dot(b) > 0.0) continue;
    v.push_back(w[i]);
  }
  v.push_back(w.back());

  const std::size_t legs = v.size() - 1;
  std::vector<Eigen::Vector2d> u(legs);
  for (std::size_t i = 0; i < legs; ++i) u[i] = (v[i + 1] - v[i]).normalized();
  for (std::size_t i = 1; i < legs; ++i) {
    if (std::abs(u[i - 1].dot(u[i])) > 1e-9) throw std::invalid_argument("generate_trajectory: turns must be 90 degrees");
  }

  const double lo = limits.lane_offset, R = limits.turn_radius;
  std::vector<Eigen::Vector2d> corners(legs + 1);
  corners[0] = v[0] + lo * right_normal(u[0]);
  corners[legs] = v[legs] + lo * right_normal(u[legs - 1]);
  for (std::size_t i = 1; i < legs; ++i) corners[i] = v[i] + lo * right_normal(u[i - 1]) + lo * right_normal(u[i]);

  std::vector<Piece> pieces;
  Eigen::Vector2d cursor = corners[0];
  for (std::size_t i = 0; i < legs; ++i) {
    const Eigen::Vector2d end = (i + 1 < legs) ? Eigen::Vector2d(corners[i + 1] - R * u[i]) : corners[legs];
    const double len = (end - cursor).dot(u[i]);
    if (len < -1e-9) throw std::invalid_argument("generate_trajectory: leg too short for the turn radius");
    pieces.push_back({false, cursor, u[i], {}, 0.0, 0.0, std::max(len, 0.0)});
    if (i + 1 < legs) {
      const double turn = cross(u[i], u[i + 1]) > 0.0 ? 1.0 : -1.0;
      const Eigen::Vector2d center = end + R * (turn > 0 ? left_normal(u[i]) : right_normal(u[i]));
      pieces.push_back({true, end, u[i], center, R, turn, R * kPi / 2});
      cursor = corners[i + 1] + R * u[i + 1];
    }
  }

  // Speed phases aligned with the pieces.
  struct Span {
    std::size_t piece;
    Phase phase;
  };
  std::vector<Span> spans;
  double v_now = limits.start_speed;
  for (std::size_t k = 0; k < pieces.size(); ++k) {
    const Piece& p = pieces[k];
    if (p.arc) {
      spans.push_back({k, {p.length / limits.v_turn, limits.v_turn, limits.v_turn}});
      v_now = limits.v_turn;
      continue;
    }
    const bool last = (k + 1 == pieces.size());
    const std::optional<double> v_out = last ? std::nullopt : std::optional<double>(limits.v_turn);
    if (p.length <= 0.0) {
      continue;
    }
    for (const Phase& ph : plan_line(p.length, v_now, v_out, limits)) {
      spans.push_back({k, ph});
      v_now = ph.v_b;
    }
  }

  std::vector<double> piece_offset(pieces.size() + 1, 0.0);
  for (std::size_t k = 0; k < pieces.size(); ++k) piece_offset[k + 1] = piece_offset[k] + pieces[k].length;
  std::vector<double> span_t0(spans.size() + 1, 0.0), span_s0(spans.size() + 1, 0.0);
  for (std::size_t k = 0; k < spans.size(); ++k) {
    span_t0[k + 1] = span_t0[k] + spans[k].phase.duration;
    span_s0[k + 1] = span_s0[k] + spans[k].phase.total();
  }
  const double total_t = span_t0.back();
  const double total_s = piece_offset.back();

  std::vector<TrajectorySample> out;
  std::size_t sp = 0;
  for (long n = 0;; ++n) {
    const double t = n * dt;
    if (t > total_t + 1e-9) break;
    while (sp + 1 < spans.size() && t >= span_t0[sp + 1]) ++sp;
    const Span& span = spans[sp];
    const double tau = std::min(t - span_t0[sp], span.phase.duration);
    double s = std::min(span_s0[sp] + span.phase.distance(tau), total_s);
    const double speed = span.phase.speed(tau);
    const double along = span.phase.accel(tau);

    std::size_t pk = span.piece;
    while (pk + 1 < pieces.size() && s > piece_offset[pk + 1]) ++pk;
    const PathPoint pp = eval_piece(pieces[pk], std::clamp(s - piece_offset[pk], 0.0, pieces[pk].length));

    TrajectorySample smp;
    smp.t = t;
    smp.position = pp.position;
    smp.speed = speed;
    smp.velocity = speed * pp.tangent;
    smp.acceleration = along * pp.tangent + speed * speed * pp.curvature * left_normal(pp.tangent);
    smp.turning = pieces[pk].arc;
    out.push_back(smp);
  }
  return out;
}

RouteSpec random_route(const GridMap& map, std::mt19937_64& rng, int intersections) {
  if (map.road_x.empty() || map.road_y.empty()) throw std::invalid_argument("random_route: map has no intersections");
  if (intersections < 1) throw std::invalid_argument("random_route: need at least one intersection");

  struct Start {
    Eigen::Vector2d p, d;
  };
  std::vector<Start> starts;
  for (double y : map.road_y) {
    starts.push_back({{0.0, y}, {1.0, 0.0}});
    starts.push_back({{map.width, y}, {-1.0, 0.0}});
  }
  for (double x : map.road_x) {
    starts.push_back({{x, 0.0}, {0.0, 1.0}});
    starts.push_back({{x, map.height}, {0.0, -1.0}});
  }
  std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
  const Start st = starts[pick(rng)];

  // Next intersection along direction d from p, if any.
  auto next_crossing = [&](const Eigen::Vector2d& p, const Eigen::Vector2d& d) -> std::optional<Eigen::Vector2d> {
    const auto& lines = d.x() != 0.0 ? map.road_x : map.road_y;
    const double pos = d.x() != 0.0 ? p.x() : p.y();
    const double sgn = d.x() != 0.0 ? d.x() : d.y();
    std::optional<double> best;
    for (double c : lines) {
      if ((c - pos) * sgn > 1e-6 && (!best || std::abs(c - pos) < std::abs(*best - pos))) best = c;
    }
    if (!best) return std::nullopt;
    return d.x() != 0.0 ? Eigen::Vector2d(*best, p.y()) : Eigen::Vector2d(p.x(), *best);
  };
  auto edge_point = [&](const Eigen::Vector2d& p, const Eigen::Vector2d& d) -> Eigen::Vector2d {
    if (d.x() > 0) return {map.width, p.y()};
    if (d.x() < 0) return {0.0, p.y()};
    if (d.y() > 0) return {p.x(), map.height};
    return {p.x(), 0.0};
  };

  RouteSpec route;
  route.waypoints.push_back(st.p);
  Eigen::Vector2d p = *next_crossing(st.p, st.d);
  Eigen::Vector2d d = st.d;
  for (int k = 1; k <= intersections; ++k) {
    route.waypoints.push_back(p);
    std::vector<Eigen::Vector2d> options;
    for (const Eigen::Vector2d& cand : {d, left_normal(d), right_normal(d)}) {
      if (k == intersections || next_crossing(p, cand)) options.push_back(cand);
    }
    std::uniform_int_distribution<std::size_t> choose(0, options.size() - 1);
    d = options[choose(rng)];
    if (auto nxt = next_crossing(p, d)) {
      p = *nxt;
    } else {
      p = edge_point(p, d);
    }
  }
  route.waypoints.push_back(p);
  return route;
}

bool trajectory_clear(const GridMap& map, const std::vector<TrajectorySample>& samples) {
  return std::none_of(samples.begin(), samples.end(),
                      [&](const TrajectorySample& s) { return map.inside_building(s.position); });
}

// ---------------------------------------------------------------------------
// Clocks

ClockState evolve_un_clock(const ClockState& clock, const ClockModelParams& p, double dt, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  ClockState next;
  next.skew = p.beta * clock.skew + p.sigma_eta * n01(rng);
  next.offset = clock.offset + next.skew * dt;
  return next;
}

void evolve_an_offsets(std::vector<double>& offsets, const ClockModelParams& p, double dt, std::mt19937_64& rng) {
  if (p.sigma_rho == 0.0) return;
  std::normal_distribution<double> n01(0.0, 1.0);
  const double s = p.sigma_rho * std::sqrt(dt);
  for (double& o : offsets) o += s * n01(rng);
}

// ---------------------------------------------------------------------------
// LoS and measurements

LosSelection los_set(const GridMap& map, const Eigen::Vector2d& un, const std::vector<AnInfo>& ans, int k_max,
                     const DetectionModel& detection, std::mt19937_64& rng) {
  struct Cand {
    double d;
    AnId id;
  };
  std::vector<Cand> los, nlos;
  for (const auto& a : ans) {
    const double d = (a.position.vec() - un).norm();
    (line_of_sight(map, a.position.vec(), un) ? los : nlos).push_back({d, a.id});
  }
  auto by_distance = [](const Cand& a, const Cand& b) { return a.d < b.d || (a.d == b.d && a.id < b.id); };
  std::sort(los.begin(), los.end(), by_distance);
  std::sort(nlos.begin(), nlos.end(), by_distance);

  LosSelection sel;
  for (std::size_t i = 0; i < los.size() && static_cast<int>(i) < k_max; ++i) sel.ids.push_back(los[i].id);

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const bool swap = u01(rng) < detection.p_nlos;
  if (swap && !sel.ids.empty() && !nlos.empty()) {
    std::uniform_int_distribution<std::size_t> which(0, sel.ids.size() - 1);
    sel.ids[which(rng)] = nlos.front().id;
    sel.nlos = nlos.front().id;
  }
  return sel;
}

std::optional<Eigen::Vector2d> diffraction_corner(const GridMap& map, const Eigen::Vector2d& an,
                                                  const Eigen::Vector2d& un) {
  std::optional<Eigen::Vector2d> best;
  double best_len = std::numeric_limits<double>::infinity();
  constexpr double push = 0.01;
  for (const Rect& r : map.buildings) {
    const Eigen::Vector2d corners[4] = {{r.x0 - push, r.y0 - push},
                                        {r.x1 + push, r.y0 - push},
                                        {r.x1 + push, r.y1 + push},
                                        {r.x0 - push, r.y1 + push}};
    for (const auto& c : corners) {
      const double len = (c - an).norm() + (un - c).norm();
      if (len < best_len && line_of_sight(map, an, c) && line_of_sight(map, c, un)) {
        best_len = len;
        best = c;
      }
    }
  }
  return best;
}

std::string to_string(FidelityMode m) {
  return m == FidelityMode::ChannelLevel ? "channel" : "measurement";
}

FidelityMode fidelity_from_string(const std::string& s) {
  if (s == "channel") return FidelityMode::ChannelLevel;
  if (s == "measurement") return FidelityMode::MeasurementLevel;
  throw std::invalid_argument("unknown fidelity mode '" + s + "'");
}

PathTruth path_truth(const GridMap& map, const AnInfo& an, const Eigen::Vector2d& un, double un_height, bool nlos) {
  const Eigen::Vector2d a = an.position.vec();
  PathTruth t;
  Eigen::Vector2d toward = un - a;
  t.length = toward.norm();
  if (nlos) {
    if (auto c = diffraction_corner(map, a, un)) {
      toward = *c - a;
      t.length = toward.norm() + (un - *c).norm();
    }
  }
  t.azimuth = wrap_to_two_pi(std::atan2(toward.y(), toward.x()));
  t.coelevation = kPi / 2 + std::atan2(an.antenna_height - un_height, t.length);
  return t;
}

Measurement measurement_level(AnId id, double azimuth, double toa, const MeasurementNoise& noise,
                              std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Measurement m;
  m.an_id = id;
  m.azimuth = wrap_to_two_pi(azimuth + noise.sigma_azimuth * n01(rng));
  m.toa = toa + noise.sigma_toa * n01(rng);
  m.covariance = Eigen::Vector2d(noise.sigma_azimuth * noise.sigma_azimuth, noise.sigma_toa * noise.sigma_toa)
                     .asDiagonal();
  return m;
}

PilotGrid ChannelConfig::grid() const {
  return PilotGrid::sparse(pilot_count, pilot_step, subcarrier_spacing);
}

void ChannelConfig::validate() const {
  if (pilot_count < 2 || pilot_step < 1) throw std::invalid_argument("ChannelConfig: bad pilot allocation");
  if (!(sinr_max_db >= sinr_min_db)) throw std::invalid_argument("ChannelConfig: sinr_max_db < sinr_min_db");
  if (!(window_quantum > 0.0)) throw std::invalid_argument("ChannelConfig: window quantum must be positive");
  if (snapshots_per_step < 1) throw std::invalid_argument("ChannelConfig: snapshots_per_step must be >= 1");
  tracker.process.validate();
}

std::shared_ptr<const ArrayManifold> default_manifold(int modes_azimuth, int modes_elevation) {
  return std::make_shared<const ArrayManifold>(
      build_synthetic_manifold(ArrayGeometry::cylindrical_dual_polarized(), modes_azimuth, modes_elevation));
}

ChannelFrontEnd::ChannelFrontEnd(const ChannelConfig& cfg, std::shared_ptr<const ArrayManifold> manifold,
                                 std::uint64_t seed)
    : cfg_(cfg), manifold_(std::move(manifold)), grid_(std::make_shared<const PilotGrid>(cfg.grid())), rng_(seed) {
  cfg_.validate();
  if (!manifold_) throw std::invalid_argument("ChannelFrontEnd: null manifold");
}

Measurement ChannelFrontEnd::observe(AnId id, double azimuth, double coelevation, double toa) {
  const Eigen::Vector3d now(azimuth, coelevation, toa);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) {
    std::uniform_real_distribution<double> sinr(cfg_.sinr_min_db, cfg_.sinr_max_db);
    std::uniform_real_distribution<double> phase(0.0, kTwoPi);
    const double s = sinr(rng_);
    // Vertical dipole at the UN: mostly V, some depolarization into H.
    const Eigen::Vector2cd w(std::polar(0.3, phase(rng_)), std::polar(1.0, phase(rng_)));
    Session fresh{AnTracker(id, manifold_, grid_, cfg_.tracker), s, w, now};
    it = sessions_.emplace(id, std::move(fresh)).first;
    return snapshot(it->second, azimuth, coelevation, toa);
  }
  Session& session = it->second;
  const Eigen::Vector3d prev = session.last;
  const double d_az = wrap_angle(azimuth - prev(0));
  Measurement out;
  const int sub = cfg_.snapshots_per_step;
  for (int j = 1; j <= sub; ++j) {
    const double f = static_cast<double>(j) / sub;
    out = snapshot(session, prev(0) + f * d_az, prev(1) + f * (coelevation - prev(1)), prev(2) + f * (toa - prev(2)));
  }
  session.last = now;
  return out;
}

Measurement ChannelFrontEnd::snapshot(Session& session, double azimuth, double coelevation, double toa) {
  const double window = std::floor(toa / cfg_.window_quantum) * cfg_.window_quantum;
  PathParams path;
  path.delay = toa - window;
  path.coelevation = std::clamp(coelevation, kCoelevationGuard, kPi - kCoelevationGuard);
  path.azimuth = wrap_to_two_pi(azimuth);
  path.weights = session.weights;
  const Eigen::VectorXcd clean = polarimetric_response(path, *manifold_, *grid_) * path.weights;
  const double power = clean.squaredNorm() / static_cast<double>(clean.size());
  const double noise = power / std::pow(10.0, session.sinr_db / 10.0);
  const ChannelSnapshot snap = synth_snapshot(path, *manifold_, *grid_, noise, rng_);
  return session.tracker.process(snap, window);
}

void ChannelFrontEnd::end_sessions_except(const std::vector<AnId>& active) {
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (std::find(active.begin(), active.end(), it->first) == active.end()) {
      it = sessions_.erase(it);
    } else {
      ++it;
    }
  }
}

// ---------------------------------------------------------------------------
// Full scenario

void SimConfig::validate() const {
  if (!(dt > 0.0)) throw std::invalid_argument("SimConfig: dt must be positive");
  if (!(isd > 0.0)) throw std::invalid_argument("SimConfig: isd must be positive");
  if (k_max < 1) throw std::invalid_argument("SimConfig: k_max must be >= 1");
  if (!(detection.p_nlos >= 0.0 && detection.p_nlos <= 1.0)) {
    throw std::invalid_argument("SimConfig: p_nlos outside [0, 1]");
  }
  if (!(noise.sigma_azimuth >= 0.0) || !(noise.sigma_toa >= 0.0)) {
    throw std::invalid_argument("SimConfig: measurement STDs must be non-negative");
  }
  if (!(un_height > 0.0) || !(an_height > 0.0)) throw std::invalid_argument("SimConfig: heights must be positive");
  motion.validate();
  if (mode == FidelityMode::ChannelLevel) channel.validate();
}

std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

SimulationResult simulate(const SimConfig& cfg, std::uint64_t seed) {
  const GridMap map = build_map(cfg.map);
  RouteSpec route;
  if (map.road_x.empty()) {
    const double y = map.road_y.front();
    route.waypoints = {{0.0, y}, {map.width, y}};
  } else {
    auto rng = make_stream(seed, 0);
    route = random_route(map, rng, cfg.route_intersections);
  }
  return simulate_route(cfg, route, seed);
}

SimulationResult simulate_route(const SimConfig& cfg, const RouteSpec& route, std::uint64_t seed) {
  cfg.validate();
  SimulationResult sim;
  sim.map = build_map(cfg.map);
  sim.ans = deploy_ans(sim.map, cfg.isd, cfg.an_height);
  sim.route = route;

  auto clock_rng = make_stream(seed, 1);
  auto los_rng = make_stream(seed, 2);
  auto noise_rng = make_stream(seed, 3);
  std::normal_distribution<double> n01(0.0, 1.0);

  std::vector<double> offsets(sim.ans.size(), 0.0);
  for (std::size_t i = 0; i < sim.ans.size(); ++i) {
    offsets[i] = cfg.clocks.an_offset_std * n01(clock_rng);
    sim.ans[i].clock_offset = offsets[i];
  }
  ClockState un;
  un.offset = cfg.clocks.un_offset_std * n01(clock_rng);
  un.skew = (cfg.clocks.un_skew_mean_ppm + cfg.clocks.un_skew_std_ppm * n01(clock_rng)) * 1e-6;
  const ClockModelParams clock_params{cfg.clocks.beta, cfg.clocks.sigma_eta, cfg.clocks.sigma_rho};

  std::unique_ptr<ChannelFrontEnd> front;
  if (cfg.mode == FidelityMode::ChannelLevel) {
    auto seeder = make_stream(seed, 4);
    ChannelConfig ch = cfg.channel;
    ch.tracker.process.dt = cfg.dt / ch.snapshots_per_step;
    front = std::make_unique<ChannelFrontEnd>(
        ch, default_manifold(cfg.channel.modes_azimuth, cfg.channel.modes_elevation), seeder());
  }

  const auto samples = generate_trajectory(route, cfg.motion, cfg.dt);
  const std::map<AnId, AnInfo> table = [&] {
    std::map<AnId, AnInfo> t;
    for (const auto& a : sim.ans) t.emplace(a.id, a);
    return t;
  }();

  sim.steps.reserve(samples.size());
  for (std::size_t n = 0; n < samples.size(); ++n) {
    if (n > 0) {
      un = evolve_un_clock(un, clock_params, cfg.dt, clock_rng);
      evolve_an_offsets(offsets, clock_params, cfg.dt, clock_rng);
    }
    StepRecord rec;
    rec.truth.t = samples[n].t;
    rec.truth.position = samples[n].position;
    rec.truth.velocity = samples[n].velocity;
    rec.truth.un_clock = un;
    rec.selection = los_set(sim.map, samples[n].position, sim.ans, cfg.k_max, cfg.detection, los_rng);
    rec.all_an_offsets = offsets;

    for (AnId id : rec.selection.ids) {
      const AnInfo& an = table.at(id);
      const double rho_an = offsets[static_cast<std::size_t>(id)];
      const bool nlos = rec.selection.nlos && *rec.selection.nlos == id;
      const PathTruth direct = path_truth(sim.map, an, samples[n].position, cfg.un_height, false);
      const PathTruth seen = nlos ? path_truth(sim.map, an, samples[n].position, cfg.un_height, true) : direct;
      const double toa = seen.length / kSpeedOfLight + un.offset + rho_an;

      rec.an_offsets.push_back(rho_an);
      rec.true_azimuth.push_back(direct.azimuth);
      rec.true_toa.push_back(direct.length / kSpeedOfLight + un.offset + rho_an);
      if (front) {
        rec.measurements.push_back(front->observe(id, seen.azimuth, seen.coelevation, toa));
      } else {
        rec.measurements.push_back(measurement_level(id, seen.azimuth, toa, cfg.noise, noise_rng));
      }
    }
    if (front) front->end_sessions_except(rec.selection.ids);
    sim.steps.push_back(std::move(rec));
  }
  return sim;
}

// ---------------------------------------------------------------------------
// CSV

void write_truth_csv(std::ostream& os, const SimulationResult& sim) {
  os << "step,t,x,y,vx,vy,rho,alpha\n";
  for (std::size_t n = 0; n < sim.steps.size(); ++n) {
    const TruthStep& t = sim.steps[n].truth;
    os << n << ',' << fmt(t.t) << ',' << fmt(t.position.x()) << ',' << fmt(t.position.y()) << ','
       << fmt(t.velocity.x()) << ',' << fmt(t.velocity.y()) << ',' << fmt(t.un_clock.offset) << ','
       << fmt(t.un_clock.skew) << '\n';
  }
}

void write_measurements_csv(std::ostream& os, const SimulationResult& sim) {
  os << "step,an_id,azimuth,toa,r_aa,r_at,r_tt,nlos,true_azimuth,true_toa,an_offset\n";
  for (std::size_t n = 0; n < sim.steps.size(); ++n) {
    const StepRecord& s = sim.steps[n];
    for (std::size_t k = 0; k < s.measurements.size(); ++k) {
      const Measurement& m = s.measurements[k];
      const bool nlos = s.selection.nlos && *s.selection.nlos == m.an_id;
      os << n << ',' << m.an_id << ',' << fmt(m.azimuth) << ',' << fmt(m.toa) << ',' << fmt(m.covariance(0, 0)) << ','
         << fmt(m.covariance(0, 1)) << ',' << fmt(m.covariance(1, 1)) << ',' << (nlos ? 1 : 0) << ','
         << fmt(s.true_azimuth[k]) << ',' << fmt(s.true_toa[k]) << ',' << fmt(s.an_offsets[k]) << '\n';
    }
  }
}

void write_ans_csv(std::ostream& os, const std::vector<AnInfo>& ans) {
  os << "id,x,y,height,clock_offset\n";
  for (const auto& a : ans) {
    os << a.id << ',' << fmt(a.position.x) << ',' << fmt(a.position.y) << ',' << fmt(a.antenna_height) << ','
       << fmt(a.clock_offset) << '\n';
  }
}

namespace {

// Reads a CSV with the expected header; returns rows of cells.
std::vector<std::vector<std::string>> read_table(std::istream& is, const std::string& header, const char* what) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(std::string(what) + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header) throw std::runtime_error(std::string(what) + ": unexpected header '" + line + "'");
  const std::size_t cols = split_csv(header).size();
  std::vector<std::vector<std::string>> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != cols) {
      throw std::runtime_error(std::string(what) + ": line " + std::to_string(lineno) + " has " +
                               std::to_string(cells.size()) + " columns, expected " + std::to_string(cols));
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

double num(const std::string& s) {
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::runtime_error("malformed number '" + s + "'");
  return v;
}

}  // namespace

std::vector<AnInfo> read_ans_csv(std::istream& is) {
  std::vector<AnInfo> ans;
  for (const auto& r : read_table(is, "id,x,y,height,clock_offset", "ans csv")) {
    AnInfo a;
    a.id = std::stoi(r[0]);
    a.position = {num(r[1]), num(r[2])};
    a.antenna_height = num(r[3]);
    a.clock_offset = num(r[4]);
    a.validate();
    ans.push_back(a);
  }
  return ans;
}

SimulationResult read_simulation_csv(std::istream& truth, std::istream& measurements, std::istream& ans) {
  SimulationResult sim;
  sim.ans = read_ans_csv(ans);
  for (const auto& r : read_table(truth, "step,t,x,y,vx,vy,rho,alpha", "truth csv")) {
    const auto n = static_cast<std::size_t>(std::stoul(r[0]));
    if (n != sim.steps.size()) throw std::runtime_error("truth csv: steps must be consecutive from 0");
    StepRecord s;
    s.truth.t = num(r[1]);
    s.truth.position = {num(r[2]), num(r[3])};
    s.truth.velocity = {num(r[4]), num(r[5])};
    s.truth.un_clock = {num(r[6]), num(r[7])};
    sim.steps.push_back(std::move(s));
  }
  for (const auto& r : read_table(measurements, "step,an_id,azimuth,toa,r_aa,r_at,r_tt,nlos,true_azimuth,true_toa,an_offset",
                                  "measurement csv")) {
    const auto n = static_cast<std::size_t>(std::stoul(r[0]));
    if (n >= sim.steps.size()) throw std::runtime_error("measurement csv: step beyond the truth trace");
    StepRecord& s = sim.steps[n];
    Measurement m;
    m.an_id = std::stoi(r[1]);
    m.azimuth = num(r[2]);
    m.toa = num(r[3]);
    m.covariance << num(r[4]), num(r[5]), num(r[5]), num(r[6]);
    s.measurements.push_back(m);
    s.selection.ids.push_back(m.an_id);
    if (r[7] == "1") s.selection.nlos = m.an_id;
    s.true_azimuth.push_back(num(r[8]));
    s.true_toa.push_back(num(r[9]));
    s.an_offsets.push_back(num(r[10]));
  }
  return sim;
}

}  // namespace udnloc
