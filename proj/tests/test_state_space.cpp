#include <doctest.h>

#include "udnloc/state_space.hpp"

#include <cmath>
#include <limits>
#include <random>

using namespace udnloc;

TEST_CASE("wrap_angle examples") {
  CHECK(wrap_angle(0.0) == doctest::Approx(0.0));
  CHECK(wrap_angle(1.5 * kPi) == doctest::Approx(-0.5 * kPi));
  CHECK(wrap_angle(-kPi) == doctest::Approx(kPi));
  CHECK(wrap_angle(kPi) == doctest::Approx(kPi));
  CHECK(wrap_to_two_pi(-0.5 * kPi) == doctest::Approx(1.5 * kPi));
  CHECK(wrap_to_two_pi(kTwoPi) == doctest::Approx(0.0));
}

TEST_CASE("wrap_angle is idempotent and 2pi periodic") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  for (int i = 0; i < 2000; ++i) {
    const double a = u(rng);
    const double w = wrap_angle(a);
    CHECK(w > -kPi);
    CHECK(w <= kPi);
    CHECK(wrap_angle(w) == doctest::Approx(w).epsilon(1e-12));
    const double shifted = wrap_angle(a + kTwoPi);
    // compare on the circle so values near +-pi do not flip
    CHECK(std::abs(wrap_angle(shifted - w)) < 1e-9);
  }
}

TEST_CASE("symmetrize_psd examples") {
  const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(3, 3);
  CHECK((symmetrize_psd(id) - id).norm() < 1e-15);

  Eigen::MatrixXd m(2, 2);
  m << 1, 2, 0, 1;
  const Eigen::MatrixXd s = symmetrize_psd(m);
  CHECK(s(0, 1) == doctest::Approx(s(1, 0)));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  // eigenvalues of [[1,1],[1,1]] are {0, 2}; 0 is lifted to 1e-12 * trace
  CHECK(es.eigenvalues()(0) == doctest::Approx(2e-12).epsilon(1e-3));
  CHECK(es.eigenvalues()(1) == doctest::Approx(2.0));

  CHECK_THROWS_AS(symmetrize_psd(Eigen::MatrixXd::Ones(2, 3)), std::invalid_argument);
}

TEST_CASE("symmetrize_psd output factors for random filter covariances") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::MatrixXd a(6, 6);
    for (int i = 0; i < 36; ++i) a.data()[i] = n(rng);
    // rank-deficient, slightly asymmetric covariance
    Eigen::MatrixXd p = a.leftCols(3) * a.leftCols(3).transpose();
    p(0, 1) += 1e-9;
    const Eigen::MatrixXd s = symmetrize_psd(p);
    CHECK((s - s.transpose()).norm() == 0.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    // the eigen oracle itself is only accurate to a few ulps of the norm
    const double slack = 64 * std::numeric_limits<double>::epsilon() * es.eigenvalues().maxCoeff();
    CHECK(es.eigenvalues().minCoeff() >= 1e-12 * s.trace() - slack);
    CHECK(Eigen::LLT<Eigen::MatrixXd>(s).info() == Eigen::Success);
  }
}

TEST_CASE("condition_covariance keeps scales and pinned coordinates") {
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(3, 3);
  p(0, 0) = 4.0;
  p(1, 1) = 1e-18;
  p(0, 1) = p(1, 0) = 1.9e-9;
  const Eigen::MatrixXd c = condition_covariance(p);
  CHECK(c(0, 0) == doctest::Approx(4.0));
  CHECK(c(1, 1) == doctest::Approx(1e-18));
  CHECK(c.row(2).norm() == 0.0);
  CHECK(c.col(2).norm() == 0.0);
  CHECK(is_psd(c));
}

TEST_CASE("domain validation") {
  CHECK_THROWS(ClockState{0.0, 2e-3}.validate());
  CHECK_NOTHROW(ClockState{1e-6, 2.5e-5}.validate());
  Measurement m;
  m.covariance << 1, 0, 0, -1;
  CHECK_THROWS(m.validate());
  GaussianState g{Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)};
  CHECK(g.is_valid());
  g.cov(0, 0) = -1;
  CHECK_FALSE(g.is_valid());
}
