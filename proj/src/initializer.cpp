#include "udnloc/initializer.hpp"

#include <cmath>
#include <stdexcept>

namespace udnloc {

void InitConfig::validate() const {
  if (warmup_steps < 1) throw std::invalid_argument("InitConfig: warmup_steps must be >= 1");
  if (!(sigma_v0 > 0.0) || !(sigma_alpha0_ppm > 0.0) || !(sigma_rho0 > 0.0) || !(single_an_floor > 0.0)) {
    throw std::invalid_argument("InitConfig: standard deviations must be positive");
  }
  if (!std::isfinite(mu_alpha0_ppm)) throw std::invalid_argument("InitConfig: non-finite skew prior");
}

CentroidFix centroid_init(const std::vector<AnInfo>& los_ans, double single_an_floor) {
  if (los_ans.empty()) throw std::invalid_argument("centroid_init: no LoS ANs");
  Eigen::Vector2d sum = Eigen::Vector2d::Zero();
  for (const auto& an : los_ans) sum += an.position.vec();
  const Eigen::Vector2d c = sum / static_cast<double>(los_ans.size());

  double spread = 0.0;
  for (const auto& an : los_ans) spread = std::max(spread, (an.position.vec() - c).norm());
  CentroidFix fix;
  fix.position = Position2D::from(c);
  fix.sigma = spread > 0.0 ? spread : single_an_floor;
  fix.cov = fix.sigma * fix.sigma * Eigen::Matrix2d::Identity();
  return fix;
}

KinematicState initial_kinematics(const CentroidFix& fix, const InitConfig& cfg) {
  cfg.validate();
  KinematicState s;
  s.mean << fix.position.x, fix.position.y, 0.0, 0.0;
  s.cov.setZero();
  s.cov.topLeftCorner<2, 2>() = fix.cov;
  s.cov(2, 2) = s.cov(3, 3) = cfg.sigma_v0 * cfg.sigma_v0;
  return s;
}

KinematicState warmup_doa_only(const KinematicState& init, const std::vector<std::vector<Measurement>>& stream,
                               const AnTable& ans, int warmup_steps, const FusionParams& params) {
  if (warmup_steps < 1) throw std::invalid_argument("warmup_doa_only: warmup_steps must be >= 1");
  if (stream.size() < static_cast<std::size_t>(warmup_steps)) {
    throw std::invalid_argument("warmup_doa_only: stream shorter than the warmup length");
  }
  KinematicState s = init;
  for (int n = 0; n < warmup_steps; ++n) {
    if (n > 0) s = predict_kinematic(s, params);
    const auto& meas = stream[static_cast<std::size_t>(n)];
    if (!meas.empty()) s = update_doa_only(s, meas, ans, params);
  }
  return s;
}

UnFusionState attach_clock_prior(const KinematicState& state, const InitConfig& cfg) {
  cfg.validate();
  UnFusionState out;
  out.mean.head<4>() = state.mean;
  out.mean(4) = 0.0;
  out.mean(5) = cfg.mu_alpha0_ppm * 1e-6;
  out.cov.setZero();
  out.cov.topLeftCorner<4, 4>() = state.cov;
  out.cov(4, 4) = cfg.sigma_rho0 * cfg.sigma_rho0;
  const double sa = cfg.sigma_alpha0_ppm * 1e-6;
  out.cov(5, 5) = sa * sa;
  return out;
}

AnId select_reference_an(const std::vector<AnInfo>& los_ans, const Position2D& estimate) {
  if (los_ans.empty()) throw std::invalid_argument("select_reference_an: no LoS ANs");
  const AnInfo* best = nullptr;
  double best_d = 0.0;
  for (const auto& an : los_ans) {
    const double d = (an.position.vec() - estimate.vec()).norm();
    if (!best || d < best_d || (d == best_d && an.id < best->id)) {
      best = &an;
      best_d = d;
    }
  }
  return best->id;
}

}  // namespace udnloc
