#pragma once

// Central fusion filters: DoA-only (position/velocity from bearings),
// Pos&Clock (synchronized ANs, UN clock offset and skew) and Pos&Sync
// (additionally per-AN clock offsets relative to a pinned reference AN).
// All updates use the Kalman-gain form in Joseph form.

#include "udnloc/state_space.hpp"

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <vector>

namespace udnloc {

struct FusionParams {
  double dt = 0.1;
  double sigma_v = 3.5;       // m/s per sqrt(s)
  double sigma_eta = 1e-4;    // filter-side skew noise
  double beta = 1.0;
  double sigma_rho = 0.0;     // AN offset walk, s per sqrt(s)
  double c = kSpeedOfLight;

  void validate() const;
};

/// [x, y, vx, vy]
struct KinematicState {
  Eigen::Vector4d mean = Eigen::Vector4d::Zero();
  Eigen::Matrix4d cov = Eigen::Matrix4d::Identity();
};

/// [x, y, vx, vy, rho, alpha]
struct UnFusionState {
  Vector6d mean = Vector6d::Zero();
  Matrix6d cov = Matrix6d::Identity();

  Position2D position() const { return {mean(0), mean(1)}; }
  KinematicState kinematics() const;
};

struct RetiredOffset {
  double mean = 0.0;
  double variance = 0.0;
  double time = 0.0;
};

/// [x, y, vx, vy, rho, alpha, rho_l1, ..., rho_lK]; offset_ids[k] owns
/// coordinate 6 + k. The reference AN's offset is held at exactly zero.
struct SyncFusionState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::vector<AnId> offset_ids;
  AnId reference_an = -1;
  double time = 0.0;
  std::map<AnId, RetiredOffset> retired;

  /// Wraps a Pos&Clock state; the reference AN is admitted immediately.
  static SyncFusionState from_un(const UnFusionState& un, AnId reference, double time = 0.0);
  UnFusionState un() const;
  std::optional<Eigen::Index> offset_index(AnId id) const;
  /// Offset estimate (0 for the reference) if the AN is in the state.
  std::optional<double> offset(AnId id) const;
};

using AnTable = std::map<AnId, AnInfo>;

AnTable make_an_table(const std::vector<AnInfo>& ans);

/// Minimum AN-UN planar distance accepted by the measurement models.
inline constexpr double kMinRange = 0.1;

Matrix6d un_transition(const FusionParams& p);
Matrix6d un_process_noise(const FusionParams& p);
Eigen::Matrix4d kinematic_transition(const FusionParams& p);
Eigen::Matrix4d kinematic_process_noise(const FusionParams& p);

UnFusionState predict_pos_clock(const UnFusionState& state, const FusionParams& p);
KinematicState predict_kinematic(const KinematicState& state, const FusionParams& p);

/// (azimuth in [0, 2pi), d/c + rho). Throws std::domain_error for d < 0.1 m.
Eigen::Vector2d measurement_model_pos_clock(const Vector6d& mean, const AnInfo& an, double c = kSpeedOfLight);

/// 2K x 6 Jacobian; rows ordered (azimuth, toa) per AN.
Eigen::MatrixXd jacobian_pos_clock(const Vector6d& mean, const std::vector<AnInfo>& ans,
                                   double c = kSpeedOfLight);

UnFusionState update_pos_clock(const UnFusionState& state, const std::vector<Measurement>& meas,
                               const AnTable& ans, const FusionParams& p);

/// Azimuth rows only; the clock coordinates of the state are left untouched.
UnFusionState update_doa_only(const UnFusionState& state, const std::vector<Measurement>& meas,
                              const AnTable& ans, const FusionParams& p);
KinematicState update_doa_only(const KinematicState& state, const std::vector<Measurement>& meas,
                               const AnTable& ans, const FusionParams& p);

SyncFusionState predict_pos_sync(const SyncFusionState& state, const FusionParams& p);

/// Measurement model with the AN offset added to the ToA.
Eigen::Vector2d measurement_model_pos_sync(const SyncFusionState& state, const AnInfo& an,
                                           double c = kSpeedOfLight);
Eigen::MatrixXd jacobian_pos_sync(const SyncFusionState& state, const std::vector<AnInfo>& ans,
                                  double c = kSpeedOfLight);

/// Every measuring AN must already hold an offset coordinate; throws
/// std::out_of_range otherwise.
SyncFusionState update_pos_sync(const SyncFusionState& state, const std::vector<Measurement>& meas,
                                const AnTable& ans, const FusionParams& p);

/// Adds an offset coordinate. A previously retired AN comes back with its
/// cached mean and variance + sigma_rho^2 * (time since retirement); a new AN
/// gets mean 0 and `prior_offset_var`. The reference AN is always pinned.
/// Throws std::invalid_argument on duplicate admission.
SyncFusionState admit_an(const SyncFusionState& state, AnId id, double prior_offset_var, const FusionParams& p);

/// Marginalizes an offset coordinate out and caches it. The reference AN is
/// never retired. Throws std::out_of_range for an unknown AN.
SyncFusionState retire_an(const SyncFusionState& state, AnId id);

/// Admits missing ANs of `active` and retires the ones no longer listed.
SyncFusionState sync_offsets(const SyncFusionState& state, const std::vector<AnId>& active,
                             double prior_offset_var, const FusionParams& p);

}  // namespace udnloc
