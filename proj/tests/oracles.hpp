#pragma once

// Independent reference computations shared by the unit and acceptance tests.

#include "udnloc/array_channel.hpp"
#include "udnloc/doa_toa_ekf.hpp"
#include "udnloc/fusion_ekf.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <random>

namespace oracle {

using udnloc::cd;

/// Central differences of a complex vector function; `steps` per coordinate.
inline Eigen::MatrixXcd central_diff(const std::function<Eigen::VectorXcd(const Eigen::Vector3d&)>& f,
                                     const Eigen::Vector3d& x, const Eigen::Vector3d& steps) {
  const Eigen::VectorXcd f0 = f(x);
  Eigen::MatrixXcd d(f0.size(), 3);
  for (int i = 0; i < 3; ++i) {
    Eigen::Vector3d a = x, b = x;
    a(i) += steps(i);
    b(i) -= steps(i);
    d.col(i) = (f(a) - f(b)) / (2.0 * steps(i));
  }
  return d;
}

inline Eigen::MatrixXd central_diff_real(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                                         const Eigen::VectorXd& x, double step) {
  const Eigen::VectorXd f0 = f(x);
  Eigen::MatrixXd d(f0.size(), x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd a = x, b = x;
    const double h = step * std::max(1.0, std::abs(x(i)));
    a(i) += h;
    b(i) -= h;
    d.col(i) = (f(a) - f(b)) / (2.0 * h);
  }
  return d;
}

/// Steps of `rel` in units of the delay and angle resolution of the grid.
inline Eigen::Vector3d path_steps(const udnloc::PilotGrid& grid, double rel) {
  double m_max = 0.0;
  for (double m : grid.centered_indices()) m_max = std::max(m_max, std::abs(m));
  const double tau_unit = 1.0 / (2.0 * M_PI * grid.subcarrier_spacing * std::max(m_max, 1.0));
  return {rel * tau_unit, rel, rel};
}

/// Column-wise worst relative error of `a` against `ref`.
template <typename A, typename B>
double max_column_rel_error(const A& a, const B& ref) {
  double worst = 0.0;
  for (Eigen::Index c = 0; c < ref.cols(); ++c) {
    const double n = ref.col(c).norm();
    if (n == 0.0) {
      worst = std::max(worst, a.col(c).norm());
      continue;
    }
    worst = std::max(worst, (a.col(c) - ref.col(c)).norm() / n);
  }
  return worst;
}

/// Kalman-gain update of a linear-Gaussian model y = H x + e, e ~ N(0, R).
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> gain_update(const Eigen::VectorXd& x, const Eigen::MatrixXd& p,
                                                               const Eigen::MatrixXd& h, const Eigen::MatrixXd& r,
                                                               const Eigen::VectorXd& y) {
  const Eigen::MatrixXd s = h * p * h.transpose() + r;
  const Eigen::MatrixXd k = p * h.transpose() * s.inverse();
  const Eigen::MatrixXd i = Eigen::MatrixXd::Identity(x.size(), x.size());
  return {x + k * (y - h * x), (i - k * h) * p};
}

/// Random SPD matrix with the given per-coordinate standard deviations.
inline Eigen::MatrixXd random_cov(const Eigen::VectorXd& stds, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  const Eigen::Index d = stds.size();
  Eigen::MatrixXd a(d, d);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = n(rng);
  Eigen::MatrixXd c = a * a.transpose() / static_cast<double>(d) + 0.1 * Eigen::MatrixXd::Identity(d, d);
  const Eigen::VectorXd s = c.diagonal().cwiseSqrt().cwiseInverse();
  c = s.asDiagonal() * c * s.asDiagonal();
  return stds.asDiagonal() * c * stds.asDiagonal();
}

/// Small dual-polarized manifold shared by the tracker tests.
inline std::shared_ptr<const udnloc::ArrayManifold> cylinder_manifold() {
  static const auto m = std::make_shared<const udnloc::ArrayManifold>(
      udnloc::build_synthetic_manifold(udnloc::ArrayGeometry::cylindrical_dual_polarized(), 13, 15));
  return m;
}

}  // namespace oracle
