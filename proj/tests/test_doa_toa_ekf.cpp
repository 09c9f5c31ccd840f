#include <doctest.h>

#include "oracles.hpp"
#include "udnloc/doa_toa_ekf.hpp"

#include <cmath>
#include <functional>
#include <random>

using namespace udnloc;

namespace {

ChannelSnapshot noisy_snapshot(const Eigen::Vector3d& path, const ArrayManifold& m, const PilotGrid& g,
                               double snr_db, std::mt19937_64& rng) {
  PathParams p;
  p.delay = path(0);
  p.coelevation = path(1);
  p.azimuth = path(2);
  p.weights = Eigen::Vector2cd(cd{0.3, 0.2}, cd{0.9, -0.1});
  const double signal = (polarimetric_response(p, m, g) * p.weights).squaredNorm() / static_cast<double>(g.size() * m.ports);
  return synth_snapshot(p, m, g, signal / std::pow(10.0, snr_db / 10.0), rng);
}

// Unitary EADF: every harmonic has its own port, so the conventional
// beamformer peaks exactly at the path.
ArrayManifold identity_manifold(int ma, int me) {
  ArrayManifold m;
  m.ports = ma * me;
  m.modes_azimuth = ma;
  m.modes_elevation = me;
  m.eadf_h = Eigen::MatrixXcd::Identity(ma * me, ma * me);
  m.eadf_v = Eigen::MatrixXcd::Zero(ma * me, ma * me);
  return m;
}

}  // namespace

TEST_CASE("cwna_matrices") {
  const CwnaMatrices a = cwna_matrices(CwnaParams(1.0, 1.0));
  CHECK(a.process_noise.topLeftCorner<3, 3>().isApprox(Eigen::Matrix3d::Identity() / 3.0));
  CHECK(a.process_noise.topRightCorner<3, 3>().isApprox(Eigen::Matrix3d::Identity() / 2.0));
  CHECK(a.process_noise.bottomRightCorner<3, 3>().isApprox(Eigen::Matrix3d::Identity()));
  CHECK(a.transition.topRightCorner<3, 3>().isApprox(Eigen::Matrix3d::Identity()));

  const CwnaMatrices tiny = cwna_matrices(CwnaParams(1.0, 1e-12));
  CHECK((tiny.transition - Matrix6d::Identity()).norm() < 1e-11);
  CHECK(tiny.process_noise.norm() < 1e-11);

  // Q = int_0^dt Phi(s) L q L^T Phi(s)^T ds, Phi(s) = [[1, s], [0, 1]], L = [0; 1]
  const Eigen::Vector3d sigma(2e-9, 0.3, 1.7);
  const double dt = 0.37;
  const CwnaMatrices m = cwna_matrices(CwnaParams(sigma, dt));
  const int n = 2000;  // Simpson panels
  for (int i = 0; i < 3; ++i) {
    const double q = sigma(i) * sigma(i);
    Eigen::Matrix2d acc = Eigen::Matrix2d::Zero();
    for (int k = 0; k <= n; ++k) {
      const double s = dt * k / n;
      const double w = (k == 0 || k == n) ? 1.0 : (k % 2 ? 4.0 : 2.0);
      Eigen::Vector2d col(s, 1.0);
      acc += w * q * col * col.transpose();
    }
    acc *= dt / (3.0 * n);
    CHECK(m.process_noise(i, i) == doctest::Approx(acc(0, 0)).epsilon(1e-9));
    CHECK(m.process_noise(i, i + 3) == doctest::Approx(acc(0, 1)).epsilon(1e-9));
    CHECK(m.process_noise(i + 3, i + 3) == doctest::Approx(acc(1, 1)).epsilon(1e-9));
  }
  CHECK_THROWS(cwna_matrices(CwnaParams(0.0, 0.1)));
}

TEST_CASE("predict") {
  AnTrackState s;
  s.mean << 1e-7, 1.0, 2.0, 0, 0, 0;
  const AnTrackState p = predict(s, CwnaParams(1e-30, 0.1));
  CHECK((p.mean - s.mean).norm() == 0.0);

  s.mean(3) = 1e-9;
  const AnTrackState q = predict(s, CwnaParams(1.0, 0.2e-3));
  CHECK(q.mean(0) - s.mean(0) == doctest::Approx(2e-13).epsilon(1e-6));
}

TEST_CASE("predict covariance matches a Monte Carlo of the continuous model") {
  const Eigen::Vector3d sigma(3e-8, 0.5, 1.0);
  const double dt = 0.1;
  AnTrackState s;
  s.mean << 5e-8, 1.2, 0.7, 1e-7, 0.05, -0.2;
  Vector6d stds;
  stds << 1e-9, 0.01, 0.02, 5e-8, 0.1, 0.2;
  s.cov = Matrix6d::Zero();
  s.cov.diagonal() = stds.cwiseAbs2();
  const AnTrackState pred = predict(s, CwnaParams(sigma, dt));

  std::mt19937_64 rng(21);
  std::normal_distribution<double> n;
  const int draws = 10000, sub = 50;
  const double h = dt / sub;
  std::vector<Vector6d> out(draws);
  Vector6d mean = Vector6d::Zero();
  for (int k = 0; k < draws; ++k) {
    Vector6d x;
    for (int i = 0; i < 6; ++i) x(i) = s.mean(i) + stds(i) * n(rng);
    for (int j = 0; j < sub; ++j) {
      for (int i = 0; i < 3; ++i) {
        const double dw = sigma(i) * std::sqrt(h) * n(rng);
        // exact integration of the value over a substep with a linear rate change
        x(i) += h * x(i + 3) + 0.5 * h * dw;
        x(i + 3) += dw;
      }
    }
    out[static_cast<std::size_t>(k)] = x;
    mean += x;
  }
  mean /= draws;
  Matrix6d cov = Matrix6d::Zero();
  for (const auto& x : out) cov += (x - mean) * (x - mean).transpose();
  cov /= draws - 1;
  for (int i = 0; i < 6; ++i) CHECK(cov(i, i) == doctest::Approx(pred.cov(i, i)).epsilon(0.05));
  for (int i = 0; i < 3; ++i) {
    const double corr_mc = cov(i, i + 3) / std::sqrt(cov(i, i) * cov(i + 3, i + 3));
    const double corr = pred.cov(i, i + 3) / std::sqrt(pred.cov(i, i) * pred.cov(i + 3, i + 3));
    CHECK(std::abs(corr_mc - corr) < 0.05);
  }
}

TEST_CASE("concentrated_residual projector") {
  const auto m = oracle::cylinder_manifold();
  const PilotGrid g = PilotGrid::sparse(32, 5);
  const Eigen::Vector3d path(4e-8, 1.4, 2.2);
  PathParams p;
  p.delay = path(0);
  p.coelevation = path(1);
  p.azimuth = path(2);
  const Eigen::MatrixXcd b = polarimetric_response(p, *m, g);

  ChannelSnapshot in_span;
  in_span.g = b * Eigen::Vector2cd(cd{1, 2}, cd{-0.5, 0.1});
  CHECK(concentrated_residual(path, in_span, *m, g).residual.norm() < 1e-10 * in_span.g.norm());

  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  Eigen::VectorXcd z(b.rows());
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = cd{n(rng), n(rng)};
  ChannelSnapshot orth;
  orth.g = z - b * (b.adjoint() * b).inverse() * (b.adjoint() * z);
  CHECK((concentrated_residual(path, orth, *m, g).residual - orth.g).norm() < 1e-10 * orth.g.norm());

  for (int trial = 0; trial < 20; ++trial) {
    ChannelSnapshot rnd;
    rnd.g.resize(b.rows());
    for (Eigen::Index i = 0; i < rnd.g.size(); ++i) rnd.g(i) = cd{n(rng), n(rng)};
    const ProjectedResidual pr = concentrated_residual(path, rnd, *m, g);
    const Eigen::VectorXcd proj = rnd.g - pr.residual;
    CHECK(rnd.g.squaredNorm() == doctest::Approx(pr.residual.squaredNorm() + proj.squaredNorm()).epsilon(1e-10));
    CHECK(std::abs(b.col(0).dot(pr.residual)) <= 1e-10 * rnd.g.norm() * b.col(0).norm());
    CHECK(std::abs(b.col(1).dot(pr.residual)) <= 1e-10 * rnd.g.norm() * b.col(1).norm());
  }

  // parallel columns: a manifold whose vertical EADF copies the horizontal one
  ArrayManifold parallel = *m;
  parallel.eadf_v = 2.0 * parallel.eadf_h;
  ChannelSnapshot s;
  s.g = z;
  CHECK(concentrated_residual(path, s, parallel, g).degenerate);
  CHECK_THROWS_AS(fim_and_score(path, s, parallel, g, 1.0), std::domain_error);
}

TEST_CASE("fim_and_score structure and residual derivative") {
  const auto m = oracle::cylinder_manifold();
  const PilotGrid g = PilotGrid::sparse(32, 5);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 25; ++trial) {
    const Eigen::Vector3d truth(2e-7 * u(rng), 0.3 + 2.5 * u(rng), kTwoPi * u(rng));
    const ChannelSnapshot snap = noisy_snapshot(truth, *m, g, 15.0, rng);
    const Eigen::Vector3d at = truth + Eigen::Vector3d(1e-9 * (u(rng) - 0.5), 0.02 * (u(rng) - 0.5), 0.02 * (u(rng) - 0.5));
    const FimScore fs = fim_and_score(at, snap, *m, g, snap.noise_variance);
    CHECK(fs.fim.bottomRows<3>().norm() == 0.0);
    CHECK(fs.fim.rightCols<3>().norm() == 0.0);
    CHECK(fs.score.tail<3>().norm() == 0.0);
    CHECK((fs.fim - fs.fim.transpose()).norm() == 0.0);
    Eigen::SelfAdjointEigenSolver<Matrix6d> es(fs.fim);
    CHECK(es.eigenvalues().minCoeff() >= -1e-12 * es.eigenvalues().maxCoeff());

    const auto r = [&](const Eigen::Vector3d& x) { return concentrated_residual(x, snap, *m, g).residual; };
    const Eigen::MatrixXcd fd = oracle::central_diff(r, at, oracle::path_steps(g, 1e-7));
    const Eigen::MatrixXcd an = residual_jacobian(at, snap, *m, g);
    CHECK(oracle::max_column_rel_error(an, fd) <= 1e-4);
  }
}

TEST_CASE("information_update") {
  AnTrackState s;
  s.mean << 1e-7, 1.0, 2.0, 0.0, 0.0, 0.0;
  const AnTrackState same = information_update(s, Matrix6d::Zero(), Vector6d::Zero());
  CHECK((same.mean - s.mean).norm() < 1e-15);
  CHECK((same.cov - s.cov).norm() < 1e-12);

  // scalar analog on the azimuth coordinate
  AnTrackState one;
  one.mean << 0.0, 1.0, 1.0, 0, 0, 0;
  Matrix6d j = Matrix6d::Zero();
  j(2, 2) = 1.0;
  Vector6d v = Vector6d::Zero();
  v(2) = 1.0;
  const AnTrackState half = information_update(one, j, v);
  CHECK(half.cov(2, 2) == doctest::Approx(0.5));
  CHECK(half.mean(2) == doctest::Approx(1.5));

  // singular prior gets regularized
  AnTrackState sing = s;
  sing.cov = Matrix6d::Zero();
  sing.cov.diagonal() << 1.0, 1.0, 1.0, 1.0, 1.0, 1.0;
  sing.cov(0, 1) = sing.cov(1, 0) = 1.0;
  UpdateDiagnostics diag;
  const AnTrackState reg = information_update(sing, j, v, &diag);
  CHECK(diag.regularized);
  CHECK(reg.mean.allFinite());
}

TEST_CASE("information form equals gain form on linear-Gaussian instances") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  Eigen::VectorXd stds(6);
  stds << 1e-9, 0.01, 0.02, 1e-8, 0.05, 0.1;
  for (int trial = 0; trial < 100; ++trial) {
    AnTrackState s;
    s.mean << 1e-7, 1.5, 3.0, 1e-8, 0.01, -0.02;
    s.cov = oracle::random_cov(stds, rng);
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(4, 6);
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 3; ++c) h(r, c) = n(rng) / stds(c);
    }
    const Eigen::MatrixXd rcov = oracle::random_cov(Eigen::VectorXd::Constant(4, 0.5), rng);
    Eigen::VectorXd y = h * s.mean;
    for (int r = 0; r < 4; ++r) y(r) += 0.3 * n(rng);
    const Eigen::MatrixXd ri = rcov.inverse();
    const Matrix6d j = h.transpose() * ri * h;
    const Vector6d v = h.transpose() * ri * (y - h * s.mean);
    const AnTrackState info = information_update(s, j, v);
    const auto [xg, pg] = oracle::gain_update(s.mean, s.cov, h, rcov, y);
    for (int i = 0; i < 6; ++i) {
      CHECK(std::abs(info.mean(i) - xg(i)) <= 1e-9 * stds(i));
      for (int k = 0; k < 6; ++k) CHECK(std::abs(info.cov(i, k) - pg(i, k)) <= 1e-9 * stds(i) * stds(k));
    }
  }
}

TEST_CASE("init_beamformer") {
  const ArrayManifold m = identity_manifold(7, 5);
  const PilotGrid g = PilotGrid::sparse(16, 5);
  const Eigen::Vector3d bins = beamformer_bin_widths(m, g, 4);
  CHECK(bins(0) == doctest::Approx(1.0 / (64 * 5 * 75e3)));

  PathParams p;
  p.delay = 13 * bins(0);
  p.azimuth = 9 * bins(1);
  p.coelevation = 4 * bins(2);
  ChannelSnapshot s;
  s.g = polarimetric_response(p, m, g) * p.weights;
  const BeamformerEstimate on = init_beamformer(s, m, g, 4);
  CHECK(on.delay == doctest::Approx(p.delay).epsilon(1e-12));
  CHECK(on.azimuth == doctest::Approx(p.azimuth).epsilon(1e-12));
  CHECK(on.coelevation == doctest::Approx(p.coelevation).epsilon(1e-12));

  // Off-grid: with a unitary EADF the beamformer objective factors into
  // delay, azimuth and coelevation terms, so each exhaustive search is 1D.
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto argmax = [](const std::function<double(double)>& f, double lo, double hi, int n) {
    double best = -1.0, arg = lo;
    for (int i = 0; i <= n; ++i) {
      const double x = lo + (hi - lo) * i / n;
      const double v = f(x);
      if (v > best) {
        best = v;
        arg = x;
      }
    }
    return arg;
  };
  for (int trial = 0; trial < 20; ++trial) {
    p.delay = 60 * bins(0) * u(rng);
    p.azimuth = kTwoPi * u(rng);
    p.coelevation = 0.4 + 2.3 * u(rng);
    s.g = polarimetric_response(p, m, g) * p.weights;
    const BeamformerEstimate est = init_beamformer(s, m, g, 4);
    const Eigen::VectorXcd dt0 = delay_steering(p.delay, g);
    const Eigen::VectorXcd da0 = harmonic_vector(p.azimuth, 7);
    const Eigen::VectorXcd de0 = harmonic_vector(p.coelevation, 5);
    const double tau = argmax([&](double x) { return std::norm(delay_steering(x, g).dot(dt0)); }, 0.0,
                              64 * bins(0), 20000);
    const double az = argmax([&](double x) { return std::norm(harmonic_vector(x, 7).dot(da0)); }, 0.0, kTwoPi, 20000);
    const double el = argmax([&](double x) { return std::norm(harmonic_vector(x, 5).dot(de0)); }, 0.0, kPi, 20000);
    CHECK(std::abs(est.delay - tau) <= bins(0) * (1 + 1e-9));
    CHECK(std::abs(est.coelevation - el) <= bins(2) * (1 + 1e-9));
    CHECK(std::abs(wrap_angle(est.azimuth - az)) <= bins(1) * (1 + 1e-9));
  }

  ChannelSnapshot zero;
  zero.g = Eigen::VectorXcd::Zero(s.g.size());
  CHECK_THROWS_AS(init_beamformer(zero, m, g, 4), std::invalid_argument);
}

TEST_CASE("init_beamformer azimuth accuracy at 20 dB") {
  const auto m = oracle::cylinder_manifold();
  const PilotGrid g = PilotGrid::sparse(16, 5);
  const Eigen::Vector3d bins = beamformer_bin_widths(*m, g, 4);
  std::mt19937_64 rng(14);
  const Eigen::Vector3d truth(2e-7, 1.45, 2.0);
  double acc = 0.0;
  const int draws = 1000;
  for (int k = 0; k < draws; ++k) {
    const ChannelSnapshot s = noisy_snapshot(truth, *m, g, 20.0, rng);
    const double e = wrap_angle(init_beamformer(s, *m, g, 4).azimuth - truth(2));
    acc += e * e;
  }
  CHECK(std::sqrt(acc / draws) < 2.0 * bins(1));
}

TEST_CASE("init_rates") {
  const Eigen::Vector3d x(1e-8, 1.0, 2.0);
  const RateInit z = init_rates(x, Eigen::Vector3d::Ones(), x, Eigen::Vector3d::Ones(), 0.1);
  CHECK(z.rates.norm() == 0.0);

  const RateInit r = init_rates(Eigen::Vector3d(10e-9, 1, 1), Eigen::Vector3d(1e-20, 0, 0),
                                Eigen::Vector3d(12e-9, 1, 1), Eigen::Vector3d(1e-20, 0, 0), 0.1);
  CHECK(r.rates(0) == doctest::Approx(2e-7));
  CHECK(r.variances(0) == doctest::Approx(2e-18));

  // azimuth difference taken on the circle
  const RateInit w = init_rates(Eigen::Vector3d(0, 1, kTwoPi - 0.01), Eigen::Vector3d::Zero(),
                                Eigen::Vector3d(0, 1, 0.01), Eigen::Vector3d::Zero(), 0.1);
  CHECK(w.rates(2) == doctest::Approx(0.2));
  CHECK_THROWS(init_rates(x, x, x, x, 0.0));
}

TEST_CASE("noise-free on-model tracking converges to the path") {
  const auto m = oracle::cylinder_manifold();
  const PilotGrid g = PilotGrid::sparse(64, 5);
  const Eigen::Vector3d truth(1.3e-7, 1.5, 0.8);
  AnTrackState s;
  s.mean.head<3>() = truth + Eigen::Vector3d(2e-10, 0.01, -0.01);
  s.cov = Matrix6d::Zero();
  s.cov.diagonal() << 1e-20, 1e-4, 1e-4, 1e-18, 1e-4, 1e-4;
  PathParams p;
  p.delay = truth(0);
  p.coelevation = truth(1);
  p.azimuth = truth(2);
  ChannelSnapshot snap;
  snap.g = polarimetric_response(p, *m, g) * p.weights;
  snap.noise_variance = 1e-12;
  const CwnaParams proc(Eigen::Vector3d(1e-9, 0.1, 0.1), 0.01);
  for (int k = 0; k < 20; ++k) s = track_step(s, snap, *m, g, proc, 0).first;
  CHECK(std::abs(s.mean(0) - truth(0)) < 1e-16);
  CHECK(std::abs(s.mean(1) - truth(1)) < 1e-9);
  CHECK(std::abs(wrap_angle(s.mean(2) - truth(2))) < 1e-9);
}

TEST_CASE("static high-SNR tracking on the sparse 96 MHz grid") {
  const auto m = oracle::cylinder_manifold();
  const auto g = std::make_shared<const PilotGrid>(PilotGrid::sparse(256, 5));
  AnTracker tracker(3, m, g, TrackerConfig{});
  std::mt19937_64 rng(31);
  const Eigen::Vector3d truth(3.1e-7, 1.52, 4.0);
  double acc = 0.0;
  std::vector<double> r_tt;
  for (int k = 0; k < 100; ++k) {
    const ChannelSnapshot s = noisy_snapshot(truth, *m, *g, 20.0, rng);
    const Measurement meas = tracker.process(s, 0.0);
    CHECK(meas.an_id == 3);
    CHECK(meas.azimuth == doctest::Approx(tracker.state().azimuth()));
    acc += (meas.toa - truth(0)) * (meas.toa - truth(0));
    r_tt.push_back(meas.covariance(1, 1));
  }
  CHECK(std::sqrt(acc / 100) < 1e-9);
  // variance shrinks as information accumulates; allow small noise wiggles
  int rises = 0;
  for (std::size_t k = 2; k < r_tt.size(); ++k) rises += r_tt[k] > 1.05 * r_tt[k - 1];
  CHECK(rises <= 5);
  CHECK(r_tt.back() < r_tt[2]);
}

TEST_CASE("noise level estimate") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, std::sqrt(0.5 * 3.0));
  Eigen::VectorXcd r(20000);
  for (Eigen::Index i = 0; i < r.size(); ++i) r(i) = cd{n(rng), n(rng)};
  CHECK(estimate_noise_variance(r) == doctest::Approx(3.0).epsilon(0.05));
}
