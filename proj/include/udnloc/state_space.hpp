#pragma once

// Shared domain types for the positioning pipeline: planar geometry, clocks,
// fused measurements and Gaussian state containers, plus the covariance
// conditioning helpers every filter stage relies on.
//
// Units: meters, seconds, radians. Clock offsets are seconds, skews are
// dimensionless (s/s). Azimuth is measured counterclockwise from +x.

#include <Eigen/Dense>

#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

namespace udnloc {

inline constexpr double kSpeedOfLight = 299792458.0;
inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

using AnId = int;

using Vector6d = Eigen::Matrix<double, 6, 1>;
using Matrix6d = Eigen::Matrix<double, 6, 6>;

struct Position2D {
  double x = 0.0;
  double y = 0.0;

  Eigen::Vector2d vec() const { return {x, y}; }
  static Position2D from(const Eigen::Vector2d& v) { return {v.x(), v.y()}; }
  bool finite() const;
};

struct Velocity2D {
  double vx = 0.0;
  double vy = 0.0;

  Eigen::Vector2d vec() const { return {vx, vy}; }
  bool finite() const;
};

struct ClockState {
  double offset = 0.0;  // rho, seconds
  double skew = 0.0;    // alpha, s/s (25 ppm = 2.5e-5)

  /// Throws std::invalid_argument for non-finite values or |skew| >= 1e-3.
  void validate() const;
};

/// First-order AR skew model plus the random-walk rate of AN offsets.
struct ClockModelParams {
  double beta = 1.0;
  double sigma_eta = 0.0;  // skew driving noise STD per step
  double sigma_rho = 0.0;  // AN offset walk STD per sqrt(second)

  void validate() const;
};

/// Azimuth/ToA pair reported by one access node, with its 2x2 covariance
/// ordered (azimuth, toa).
struct Measurement {
  AnId an_id = 0;
  double azimuth = 0.0;  // [0, 2pi)
  double toa = 0.0;      // seconds
  Eigen::Matrix2d covariance = Eigen::Matrix2d::Identity();

  void validate() const;
};

struct GaussianState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  Eigen::Index dim() const { return mean.size(); }
  /// Finite, symmetric to 1e-12 relative and numerically PSD.
  bool is_valid() const;
};

struct AnInfo {
  AnId id = 0;
  Position2D position;
  double antenna_height = 7.0;
  double clock_offset = 0.0;  // truth side only

  void validate() const;
};

/// Maps an angle to (-pi, pi]; -pi maps to +pi.
double wrap_angle(double a);

/// Maps an angle to [0, 2pi).
double wrap_to_two_pi(double a);

/// (M + M^T)/2 with every eigenvalue below 1e-12 * trace raised to that floor.
/// Throws std::invalid_argument for non-square or non-finite input.
Eigen::MatrixXd symmetrize_psd(const Eigen::MatrixXd& m);

/// symmetrize_psd applied to the correlation form of a covariance, so that
/// coordinates with very different units (m^2 next to s^2) keep their own
/// scale. Coordinates with zero (or negative) variance are treated as pinned:
/// their rows and columns come back exactly zero.
Eigen::MatrixXd condition_covariance(const Eigen::MatrixXd& p);

/// Smallest eigenvalue >= -tol * trace and symmetric to tol relative.
bool is_psd(const Eigen::MatrixXd& m, double tol = 1e-10);

}  // namespace udnloc
