#pragma once

// Two-phase start-up of the fusion filters: centroid of the LoS-AN
// positions, then N_I DoA-only iterations, then the clock prior.

#include "udnloc/fusion_ekf.hpp"
#include "udnloc/state_space.hpp"

#include <vector>

namespace udnloc {

struct InitConfig {
  int warmup_steps = 20;          // N_I
  double sigma_v0 = 5.0;          // m/s
  double mu_alpha0_ppm = 25.0;
  double sigma_alpha0_ppm = 30.0;
  double sigma_rho0 = 100e-6;     // s
  double single_an_floor = 10.0;  // sigma_p0 when the centroid sits on the only AN

  void validate() const;
};

struct CentroidFix {
  Position2D position;
  double sigma = 0.0;  // sigma_p0
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
};

/// Mean of the AN positions with sigma_p0 = largest AN distance from it.
/// Throws std::invalid_argument for an empty list.
CentroidFix centroid_init(const std::vector<AnInfo>& los_ans, double single_an_floor = 10.0);

/// Position from the centroid, zero velocity with variance sigma_v0^2.
KinematicState initial_kinematics(const CentroidFix& fix, const InitConfig& cfg);

/// Runs N_I DoA-only iterations over the first N_I entries of `stream`
/// (one entry per fusion step). Every iteration except the first begins with
/// a prediction; an empty entry only predicts. Throws std::invalid_argument
/// when the stream is shorter than N_I.
KinematicState warmup_doa_only(const KinematicState& init, const std::vector<std::vector<Measurement>>& stream,
                               const AnTable& ans, int warmup_steps, const FusionParams& params);

/// Extends the kinematic state with rho ~ N(0, sigma_rho0^2) and
/// alpha ~ N(mu_alpha0, sigma_alpha0^2), uncorrelated with the kinematics.
UnFusionState attach_clock_prior(const KinematicState& state, const InitConfig& cfg);

/// Nearest AN to the estimate; ties go to the lowest id.
AnId select_reference_an(const std::vector<AnInfo>& los_ans, const Position2D& estimate);

}  // namespace udnloc
