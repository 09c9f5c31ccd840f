#include "udnloc/state_space.hpp"

#include <cmath>
#include <vector>

namespace udnloc {

bool Position2D::finite() const { return std::isfinite(x) && std::isfinite(y); }

bool Velocity2D::finite() const { return std::isfinite(vx) && std::isfinite(vy); }

void ClockState::validate() const {
  if (!std::isfinite(offset) || !std::isfinite(skew)) {
    throw std::invalid_argument("ClockState: non-finite offset or skew");
  }
  if (std::abs(skew) >= 1e-3) {
    throw std::invalid_argument("ClockState: |skew| must stay below 1e-3");
  }
}

void ClockModelParams::validate() const {
  if (!(std::abs(beta) <= 1.0)) throw std::invalid_argument("ClockModelParams: |beta| > 1");
  if (!(sigma_eta >= 0.0)) throw std::invalid_argument("ClockModelParams: sigma_eta < 0");
  if (!(sigma_rho >= 0.0)) throw std::invalid_argument("ClockModelParams: sigma_rho < 0");
}

void Measurement::validate() const {
  if (!std::isfinite(azimuth) || azimuth < 0.0 || azimuth >= kTwoPi) {
    throw std::invalid_argument("Measurement: azimuth outside [0, 2pi)");
  }
  if (!std::isfinite(toa)) throw std::invalid_argument("Measurement: non-finite toa");
  if (!covariance.allFinite()) throw std::invalid_argument("Measurement: non-finite covariance");
  const double asym = std::abs(covariance(0, 1) - covariance(1, 0));
  if (asym > 1e-12 * (std::abs(covariance(0, 1)) + std::sqrt(covariance(0, 0) * covariance(1, 1)))) {
    throw std::invalid_argument("Measurement: covariance not symmetric");
  }
  // PSD test on the correlation form; raw entries mix rad^2 and s^2.
  if (covariance(0, 0) < 0.0 || covariance(1, 1) < 0.0 ||
      covariance(0, 1) * covariance(0, 1) > covariance(0, 0) * covariance(1, 1) * (1.0 + 1e-12)) {
    throw std::invalid_argument("Measurement: covariance not PSD");
  }
}

bool GaussianState::is_valid() const {
  if (cov.rows() != mean.size() || cov.cols() != mean.size()) return false;
  if (!mean.allFinite() || !cov.allFinite()) return false;
  return is_psd(cov);
}

void AnInfo::validate() const {
  if (!position.finite()) throw std::invalid_argument("AnInfo: non-finite position");
  if (!(antenna_height > 0.0)) throw std::invalid_argument("AnInfo: antenna height must be positive");
}

double wrap_angle(double a) {
  double r = std::remainder(a, kTwoPi);
  if (r <= -kPi) r += kTwoPi;
  return r;
}

double wrap_to_two_pi(double a) {
  double r = std::fmod(a, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  if (r >= kTwoPi) r = 0.0;
  return r;
}

Eigen::MatrixXd symmetrize_psd(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw std::invalid_argument("symmetrize_psd: matrix is not square");
  if (!m.allFinite()) throw std::invalid_argument("symmetrize_psd: non-finite entries");
  Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  if (sym.size() == 0) return sym;
  const double floor = 1e-12 * sym.trace();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  if (eig.eigenvalues().minCoeff() >= floor) return sym;
  const Eigen::VectorXd clamped = eig.eigenvalues().cwiseMax(floor);
  Eigen::MatrixXd out = eig.eigenvectors() * clamped.asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

Eigen::MatrixXd condition_covariance(const Eigen::MatrixXd& p) {
  if (p.rows() != p.cols()) throw std::invalid_argument("condition_covariance: matrix is not square");
  const Eigen::Index n = p.rows();
  std::vector<Eigen::Index> live;
  live.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (p(i, i) > 0.0) live.push_back(i);
  }
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  const auto k = static_cast<Eigen::Index>(live.size());
  if (k == 0) return out;

  Eigen::VectorXd scale(k);
  Eigen::MatrixXd corr(k, k);
  for (Eigen::Index a = 0; a < k; ++a) scale(a) = std::sqrt(p(live[a], live[a]));
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = 0; b < k; ++b) {
      corr(a, b) = p(live[a], live[b]) / (scale(a) * scale(b));
    }
  }
  corr = symmetrize_psd(corr);
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = 0; b < k; ++b) {
      out(live[a], live[b]) = corr(a, b) * scale(a) * scale(b);
    }
  }
  return out;
}

bool is_psd(const Eigen::MatrixXd& m, double tol) {
  if (m.rows() != m.cols()) return false;
  if (m.size() == 0) return true;
  if (!m.allFinite()) return false;
  const double mag = m.cwiseAbs().maxCoeff();
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > tol * std::max(mag, 1e-300)) return false;
  // Equilibrate before the eigenvalue test so mixed units do not hide a
  // negative direction inside a tiny-variance coordinate.
  Eigen::VectorXd d = m.diagonal();
  if (d.minCoeff() < 0.0) return false;
  Eigen::VectorXd s(d.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) s(i) = d(i) > 0.0 ? 1.0 / std::sqrt(d(i)) : 0.0;
  Eigen::MatrixXd c = s.asDiagonal() * (0.5 * (m + m.transpose())) * s.asDiagonal();
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (d(i) == 0.0 && m.row(i).cwiseAbs().maxCoeff() > 0.0) return false;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(c, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().minCoeff() >= -tol * std::max(c.trace(), 1.0);
}

}  // namespace udnloc
