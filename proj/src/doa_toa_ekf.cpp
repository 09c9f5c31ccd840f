#include "udnloc/doa_toa_ekf.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace udnloc {

namespace {

// FFTW planning touches global state.
std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}

void check_snapshot(const ChannelSnapshot& snapshot, const ArrayManifold& manifold, const PilotGrid& grid) {
  if (snapshot.g.size() != static_cast<Eigen::Index>(grid.size()) * manifold.ports) {
    throw std::invalid_argument("snapshot length does not match manifold ports x pilots");
  }
}

// Pins positive scale factors for the correlation frame; zero-variance
// coordinates keep unit scale.
Vector6d correlation_scale(const Matrix6d& p) {
  Vector6d s;
  for (int i = 0; i < 6; ++i) s(i) = p(i, i) > 0.0 ? std::sqrt(p(i, i)) : 1.0;
  return s;
}

Eigen::Matrix3d solve_scaled_inverse(const Eigen::Matrix3d& a) {
  Eigen::Vector3d s;
  for (int i = 0; i < 3; ++i) s(i) = a(i, i) > 0.0 ? 1.0 / std::sqrt(a(i, i)) : 1.0;
  const Eigen::Matrix3d c = s.asDiagonal() * a * s.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(0.5 * (c + c.transpose()));
  const double floor = 1e-12 * std::max(eig.eigenvalues().maxCoeff(), 1e-300);
  const Eigen::Vector3d inv = eig.eigenvalues().cwiseMax(floor).cwiseInverse();
  const Eigen::Matrix3d ci = eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
  return s.asDiagonal() * ci * s.asDiagonal();
}

}  // namespace

void CwnaParams::validate() const {
  if (!(sigma_w.minCoeff() > 0.0) || !sigma_w.allFinite()) {
    throw std::invalid_argument("CwnaParams: sigma_w must be positive");
  }
  if (!(dt > 0.0) || !std::isfinite(dt)) throw std::invalid_argument("CwnaParams: dt must be positive");
}

CwnaMatrices cwna_matrices(const CwnaParams& params) {
  params.validate();
  const double dt = params.dt;
  CwnaMatrices out;
  out.transition.setIdentity();
  out.transition.topRightCorner<3, 3>() = dt * Eigen::Matrix3d::Identity();
  out.process_noise.setZero();
  for (int i = 0; i < 3; ++i) {
    const double q = params.sigma_w(i) * params.sigma_w(i);
    out.process_noise(i, i) = q * dt * dt * dt / 3.0;
    out.process_noise(i, i + 3) = q * dt * dt / 2.0;
    out.process_noise(i + 3, i) = q * dt * dt / 2.0;
    out.process_noise(i + 3, i + 3) = q * dt;
  }
  return out;
}

AnTrackState predict(const AnTrackState& state, const CwnaParams& params) {
  const auto [f, q] = cwna_matrices(params);
  AnTrackState out;
  out.mean = f * state.mean;
  out.cov = condition_covariance(f * state.cov * f.transpose() + q);
  return out;
}

ProjectedResidual concentrated_residual(const Eigen::Vector3d& path, const ChannelSnapshot& snapshot,
                                        const ArrayManifold& manifold, const PilotGrid& grid) {
  check_snapshot(snapshot, manifold, grid);
  PathParams p;
  p.delay = path(0);
  p.coelevation = path(1);
  p.azimuth = path(2);
  const Eigen::MatrixXcd b = polarimetric_response(p, manifold, grid);

  ProjectedResidual out;
  const double n0 = b.col(0).squaredNorm(), n1 = b.col(1).squaredNorm();
  if (n0 > 0.0) out.active_columns.push_back(0);
  if (n1 > 0.0) out.active_columns.push_back(1);
  if (out.active_columns.size() == 2) {
    const double cross = std::norm(b.col(0).dot(b.col(1)));
    if (n0 * n1 - cross <= 1e-12 * n0 * n1) {
      out.degenerate = true;
      out.active_columns = {n0 >= n1 ? 0 : 1};
    }
  }
  if (out.active_columns.empty()) {
    out.degenerate = true;
    out.residual = snapshot.g;
    out.basis.resize(b.rows(), 0);
    out.gram_inverse.resize(0, 0);
    out.weights.resize(0);
    return out;
  }

  out.basis.resize(b.rows(), static_cast<Eigen::Index>(out.active_columns.size()));
  for (std::size_t k = 0; k < out.active_columns.size(); ++k) {
    out.basis.col(static_cast<Eigen::Index>(k)) = b.col(out.active_columns[k]);
  }
  const Eigen::MatrixXcd gram = out.basis.adjoint() * out.basis;
  out.gram_inverse = gram.inverse();
  out.weights = out.gram_inverse * (out.basis.adjoint() * snapshot.g);
  out.residual = snapshot.g - out.basis * out.weights;
  return out;
}

Eigen::MatrixXcd residual_jacobian(const Eigen::Vector3d& path, const ChannelSnapshot& snapshot,
                                   const ArrayManifold& manifold, const PilotGrid& grid) {
  const ProjectedResidual pr = concentrated_residual(path, snapshot, manifold, grid);
  if (pr.degenerate) throw std::domain_error("residual_jacobian: response columns are degenerate");
  const ResponseJacobian rj = polarimetric_response_jacobian(path(0), path(1), path(2), manifold, grid);

  // dr = -(P_perp dB B^+ g + (B^+)^H dB^H r), using B^+ = (B^H B)^-1 B^H.
  Eigen::MatrixXcd d(pr.residual.size(), 3);
  for (int i = 0; i < 3; ++i) {
    Eigen::MatrixXcd db(pr.basis.rows(), pr.basis.cols());
    for (std::size_t k = 0; k < pr.active_columns.size(); ++k) {
      db.col(static_cast<Eigen::Index>(k)) = rj.partials[static_cast<std::size_t>(i)].col(pr.active_columns[k]);
    }
    const Eigen::VectorXcd x = db * pr.weights;
    const Eigen::VectorXcd proj_x = x - pr.basis * (pr.gram_inverse * (pr.basis.adjoint() * x));
    const Eigen::VectorXcd back = pr.basis * (pr.gram_inverse * (db.adjoint() * pr.residual));
    d.col(i) = -(proj_x + back);
  }
  return d;
}

FimScore fim_and_score(const Eigen::Vector3d& path, const ChannelSnapshot& snapshot,
                       const ArrayManifold& manifold, const PilotGrid& grid, double noise_variance) {
  if (!(noise_variance > 0.0)) throw std::invalid_argument("fim_and_score: noise variance must be positive");
  const ProjectedResidual pr = concentrated_residual(path, snapshot, manifold, grid);
  if (pr.degenerate) throw std::domain_error("fim_and_score: response columns are degenerate");
  const Eigen::MatrixXcd d = residual_jacobian(path, snapshot, manifold, grid);
  const double s = 2.0 / noise_variance;
  FimScore out;
  Eigen::Matrix3d j = s * (d.adjoint() * d).real();
  out.fim.topLeftCorner<3, 3>() = 0.5 * (j + j.transpose());
  out.score.head<3>() = -s * (d.adjoint() * pr.residual).real();
  return out;
}

void normalize_angles(AnTrackState& state) {
  state.mean(1) = std::clamp(state.mean(1), kCoelevationGuard, kPi - kCoelevationGuard);
  state.mean(2) = wrap_to_two_pi(state.mean(2));
}

AnTrackState information_update(const AnTrackState& state, const Matrix6d& fim, const Vector6d& score,
                                UpdateDiagnostics* diag) {
  const Vector6d s = correlation_scale(state.cov);
  Matrix6d p = s.cwiseInverse().asDiagonal() * state.cov * s.cwiseInverse().asDiagonal();
  p = 0.5 * (p + p.transpose());
  const Matrix6d j = s.asDiagonal() * fim * s.asDiagonal();
  const Vector6d v = s.cwiseProduct(score);

  Eigen::LLT<Matrix6d> llt(p);
  if (llt.info() != Eigen::Success || llt.matrixL().toDenseMatrix().diagonal().minCoeff() < 1e-8) {
    p.diagonal().array() += 1e-12 * p.trace();
    llt.compute(p);
    if (diag) diag->regularized = true;
    if (llt.info() != Eigen::Success) throw std::domain_error("information_update: prior covariance not PSD");
  }
  const Matrix6d info = llt.solve(Matrix6d::Identity()) + j;
  Eigen::LDLT<Matrix6d> ldlt(0.5 * (info + info.transpose()));
  if (ldlt.info() != Eigen::Success) throw std::domain_error("information_update: singular posterior information");
  Matrix6d post = ldlt.solve(Matrix6d::Identity());
  post = 0.5 * (post + post.transpose());

  AnTrackState out;
  out.mean = state.mean + s.cwiseProduct(post * v);
  out.cov = condition_covariance(s.asDiagonal() * post * s.asDiagonal());
  normalize_angles(out);
  return out;
}

Eigen::Vector3d beamformer_bin_widths(const ArrayManifold& manifold, const PilotGrid& grid, int fft_padding) {
  const int stride = grid.index_stride();
  const int span = grid.subcarrier_indices.back() - grid.subcarrier_indices.front();
  const int n1 = fft_padding * (span / stride + 1);
  const int n2 = fft_padding * manifold.modes_azimuth;
  const int n3 = fft_padding * manifold.modes_elevation;
  return {1.0 / (n1 * stride * grid.subcarrier_spacing), kTwoPi / n2, kTwoPi / n3};
}

BeamformerEstimate init_beamformer(const ChannelSnapshot& snapshot, const ArrayManifold& manifold,
                                   const PilotGrid& grid, int fft_padding) {
  manifold.validate();
  grid.validate();
  check_snapshot(snapshot, manifold, grid);
  if (fft_padding < 1) throw std::invalid_argument("init_beamformer: padding must be >= 1");
  if (snapshot.g.cwiseAbs2().maxCoeff() == 0.0) throw std::invalid_argument("init_beamformer: all-zero snapshot");

  const int mf = grid.size();
  const int ma = manifold.modes_azimuth, me = manifold.modes_elevation;
  const int stride = grid.index_stride();
  const int first = grid.subcarrier_indices.front();
  const int span = grid.subcarrier_indices.back() - first;
  const int n1 = fft_padding * (span / stride + 1);
  const int n2 = fft_padding * ma;
  const int n3 = fft_padding * me;
  const std::size_t total = static_cast<std::size_t>(n1) * n2 * n3;

  // H is M_f x M_AN; projecting onto the EADF gives M_f x (M_a M_e) harmonic
  // coefficients, after removing the receiver gains.
  const Eigen::Map<const Eigen::MatrixXcd> h(snapshot.g.data(), mf, manifold.ports);
  Eigen::MatrixXcd hg = h;
  if (manifold.rx_gain.size() != 0) hg = manifold.rx_gain.conjugate().asDiagonal() * h;

  std::vector<double> power(total, 0.0);
  fftw_complex* buf = fftw_alloc_complex(total);
  if (!buf) throw std::bad_alloc();
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_plan_mutex());
    plan = fftw_plan_dft_3d(n3, n2, n1, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  const int half_a = (ma - 1) / 2, half_e = (me - 1) / 2;
  for (const Eigen::MatrixXcd* g_pol : {&manifold.eadf_h, &manifold.eadf_v}) {
    const Eigen::MatrixXcd a = hg * g_pol->conjugate();
    std::fill(reinterpret_cast<double*>(buf), reinterpret_cast<double*>(buf) + 2 * total, 0.0);
    for (int e = 0; e < me; ++e) {
      const int ke = ((e - half_e) % n3 + n3) % n3;
      for (int az = 0; az < ma; ++az) {
        const int ka = ((az - half_a) % n2 + n2) % n2;
        const int col = e * ma + az;
        for (int f = 0; f < mf; ++f) {
          const int kf = (grid.subcarrier_indices[static_cast<std::size_t>(f)] - first) / stride;
          const std::size_t idx = (static_cast<std::size_t>(ke) * n2 + ka) * n1 + kf;
          buf[idx][0] = a(f, col).real();
          buf[idx][1] = a(f, col).imag();
        }
      }
    }
    fftw_execute(plan);
    for (std::size_t i = 0; i < total; ++i) power[i] += buf[i][0] * buf[i][0] + buf[i][1] * buf[i][1];
  }
  {
    std::lock_guard<std::mutex> lock(fftw_plan_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(buf);

  const auto best = static_cast<std::size_t>(std::max_element(power.begin(), power.end()) - power.begin());
  const int k1 = static_cast<int>(best % static_cast<std::size_t>(n1));
  const int k2 = static_cast<int>((best / static_cast<std::size_t>(n1)) % static_cast<std::size_t>(n2));
  const int k3 = static_cast<int>(best / (static_cast<std::size_t>(n1) * n2));

  BeamformerEstimate est;
  est.peak = power[best];
  est.delay = k1 / (static_cast<double>(n1) * stride * grid.subcarrier_spacing);
  double phi = kTwoPi * k2 / n2;
  double theta = kTwoPi * k3 / n3;
  if (theta > kPi) {
    theta = kTwoPi - theta;
    phi += kPi;
  }
  est.azimuth = wrap_to_two_pi(phi);
  est.coelevation = std::clamp(theta, kCoelevationGuard, kPi - kCoelevationGuard);
  return est;
}

PathFix refine_path(const Eigen::Vector3d& start, const ChannelSnapshot& snapshot, const ArrayManifold& manifold,
                    const PilotGrid& grid, int iterations) {
  auto clamp_path = [](Eigen::Vector3d x) {
    x(1) = std::clamp(x(1), kCoelevationGuard, kPi - kCoelevationGuard);
    x(2) = wrap_to_two_pi(x(2));
    return x;
  };
  auto cost = [&](const Eigen::Vector3d& x) {
    return concentrated_residual(x, snapshot, manifold, grid).residual.squaredNorm();
  };

  Eigen::Vector3d x = clamp_path(start);
  double c = cost(x);
  for (int it = 0; it < iterations; ++it) {
    const FimScore fs = fim_and_score(x, snapshot, manifold, grid, 1.0);
    const Eigen::Matrix3d j = fs.fim.topLeftCorner<3, 3>();
    const Eigen::Vector3d step = solve_scaled_inverse(j) * fs.score.head<3>();
    double t = 1.0;
    bool improved = false;
    for (int ls = 0; ls < 10; ++ls, t *= 0.5) {
      const Eigen::Vector3d trial = clamp_path(x + t * step);
      const double ct = cost(trial);
      if (ct < c) {
        x = trial;
        c = ct;
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }

  PathFix fix;
  fix.path = x;
  const FimScore fs = fim_and_score(x, snapshot, manifold, grid, snapshot.noise_variance);
  fix.cov = solve_scaled_inverse(fs.fim.topLeftCorner<3, 3>());
  return fix;
}

RateInit init_rates(const Eigen::Vector3d& first, const Eigen::Vector3d& first_var, const Eigen::Vector3d& second,
                    const Eigen::Vector3d& second_var, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("init_rates: dt must be positive");
  RateInit out;
  out.rates = (second - first) / dt;
  out.rates(2) = wrap_angle(second(2) - first(2)) / dt;
  out.variances = (first_var + second_var) / (dt * dt);
  return out;
}

Measurement to_measurement(const AnTrackState& state, AnId an_id, double window_start) {
  Measurement m;
  m.an_id = an_id;
  m.azimuth = wrap_to_two_pi(state.mean(2));
  m.toa = window_start + state.mean(0);
  m.covariance << state.cov(2, 2), state.cov(2, 0), state.cov(0, 2), state.cov(0, 0);
  m.covariance = 0.5 * (m.covariance + m.covariance.transpose()).eval();
  return m;
}

std::pair<AnTrackState, Measurement> track_step(const AnTrackState& state, const ChannelSnapshot& snapshot,
                                                const ArrayManifold& manifold, const PilotGrid& grid,
                                                const CwnaParams& params, AnId an_id) {
  const AnTrackState prior = predict(state, params);
  AnTrackState pn = prior;
  normalize_angles(pn);
  const FimScore fs = fim_and_score(pn.path(), snapshot, manifold, grid, snapshot.noise_variance);
  AnTrackState post = information_update(pn, fs.fim, fs.score);
  return {post, to_measurement(post, an_id)};
}

double estimate_noise_variance(const Eigen::VectorXcd& residual) {
  if (residual.size() == 0) throw std::invalid_argument("estimate_noise_variance: empty residual");
  std::vector<double> e(static_cast<std::size_t>(residual.size()));
  for (Eigen::Index i = 0; i < residual.size(); ++i) e[static_cast<std::size_t>(i)] = std::norm(residual(i));
  auto mid = e.begin() + static_cast<std::ptrdiff_t>(e.size() / 2);
  std::nth_element(e.begin(), mid, e.end());
  // |r|^2 is exponential with mean sigma^2; its median is sigma^2 ln 2.
  return *mid / std::numbers::ln2;
}

// ---------------------------------------------------------------------------
// AnTracker

AnTracker::AnTracker(AnId id, std::shared_ptr<const ArrayManifold> manifold, std::shared_ptr<const PilotGrid> grid,
                     TrackerConfig config)
    : id_(id), manifold_(std::move(manifold)), grid_(std::move(grid)), config_(config) {
  if (!manifold_ || !grid_) throw std::invalid_argument("AnTracker: null manifold or grid");
  manifold_->validate();
  grid_->validate();
  config_.process.validate();
}

ChannelSnapshot AnTracker::with_noise_level(const ChannelSnapshot& snapshot) const {
  if (!config_.estimate_noise || seen_ == 0) return snapshot;
  ChannelSnapshot s = snapshot;
  const auto pr = concentrated_residual(state_.path(), snapshot, *manifold_, *grid_);
  s.noise_variance = estimate_noise_variance(pr.residual);
  return s;
}

Measurement AnTracker::process(const ChannelSnapshot& raw, double window_start) {
  const ChannelSnapshot snapshot = with_noise_level(raw);
  if (seen_ == 0) {
    const BeamformerEstimate bf = init_beamformer(snapshot, *manifold_, *grid_, config_.fft_padding);
    first_fix_ = refine_path({bf.delay, bf.coelevation, bf.azimuth}, snapshot, *manifold_, *grid_,
                             config_.refine_iterations);
    first_window_ = window_start;
    window_ = window_start;
    state_.mean.setZero();
    state_.mean.head<3>() = first_fix_.path;
    state_.cov.setZero();
    state_.cov.topLeftCorner<3, 3>() = first_fix_.cov;
    const Eigen::Vector3d q = config_.process.sigma_w.cwiseAbs2();
    state_.cov.bottomRightCorner<3, 3>() = (q * config_.process.dt).asDiagonal();
    ++seen_;
    return to_measurement(state_, id_, window_);
  }

  // Keep tau relative to the current window.
  state_.mean(0) -= window_start - window_;
  window_ = window_start;

  if (seen_ == 1) {
    // Independent fix: the first one, shifted by an unknown rate, can sit in
    // a delay sidelobe of this snapshot.
    const BeamformerEstimate bf = init_beamformer(snapshot, *manifold_, *grid_, config_.fft_padding);
    const PathFix second = refine_path({bf.delay, bf.coelevation, bf.azimuth}, snapshot, *manifold_, *grid_,
                                       config_.refine_iterations);
    Eigen::Vector3d first = first_fix_.path;
    first(0) -= window_ - first_window_;
    const RateInit r = init_rates(first, first_fix_.cov.diagonal(), second.path, second.cov.diagonal(),
                                  config_.process.dt);
    state_.mean.head<3>() = second.path;
    state_.mean.tail<3>() = r.rates;
    state_.cov.setZero();
    state_.cov.topLeftCorner<3, 3>() = second.cov;
    state_.cov.bottomRightCorner<3, 3>() = r.variances.asDiagonal();
    normalize_angles(state_);
    ++seen_;
    return to_measurement(state_, id_, window_);
  }

  auto [next, meas] = track_step(state_, snapshot, *manifold_, *grid_, config_.process, id_);
  state_ = next;
  ++seen_;
  meas.toa += window_;
  return meas;
}

}  // namespace udnloc
