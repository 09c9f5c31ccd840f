#include <doctest.h>

#include "udnloc/initializer.hpp"

#include <cmath>
#include <random>

using namespace udnloc;

namespace {

AnInfo an_at(AnId id, double x, double y) {
  AnInfo a;
  a.id = id;
  a.position = {x, y};
  return a;
}

Measurement bearing(AnId id, const AnInfo& an, const Eigen::Vector2d& un, double sigma, double noise = 0.0) {
  Measurement m;
  m.an_id = id;
  m.azimuth = wrap_to_two_pi(std::atan2(un.y() - an.position.y, un.x() - an.position.x) + noise);
  m.toa = 0.0;
  m.covariance << sigma * sigma, 0, 0, 1e-18;
  return m;
}

}  // namespace

TEST_CASE("centroid_init") {
  const CentroidFix a = centroid_init({an_at(1, 0, 0), an_at(2, 10, 0)});
  CHECK(a.position.x == doctest::Approx(5.0));
  CHECK(a.position.y == doctest::Approx(0.0));
  CHECK(a.sigma == doctest::Approx(5.0));
  CHECK(a.cov(0, 0) == doctest::Approx(25.0));

  const CentroidFix b = centroid_init({an_at(1, 0, 0), an_at(2, 10, 0), an_at(3, 5, 15)});
  CHECK(b.position.x == doctest::Approx(5.0));
  CHECK(b.position.y == doctest::Approx(5.0));

  const CentroidFix c = centroid_init({an_at(4, 7, 9)});
  CHECK(c.position.x == 7.0);
  CHECK(c.position.y == 9.0);
  CHECK(c.sigma == 10.0);

  CHECK_THROWS_AS(centroid_init({}), std::invalid_argument);
}

TEST_CASE("warmup_doa_only") {
  const std::vector<AnInfo> list = {an_at(1, 0, 0), an_at(2, 50, 0)};
  const AnTable ans = make_an_table(list);
  const FusionParams p;
  InitConfig cfg;
  const Eigen::Vector2d truth(25, 12);
  const KinematicState init = initial_kinematics(centroid_init(list), cfg);
  const double initial_error = (init.mean.head<2>() - truth).norm();

  std::vector<std::vector<Measurement>> stream;
  for (int n = 0; n < 20; ++n) stream.push_back({bearing(1, list[0], truth, 1e-4), bearing(2, list[1], truth, 1e-4)});
  const KinematicState out = warmup_doa_only(init, stream, ans, 20, p);
  CHECK((out.mean.head<2>() - truth).norm() < 0.01 * initial_error);

  // one iteration is a single DoA-only update
  const KinematicState one = warmup_doa_only(init, stream, ans, 1, p);
  const KinematicState direct = update_doa_only(init, stream[0], ans, p);
  CHECK((one.mean - direct.mean).norm() == 0.0);
  CHECK((one.cov - direct.cov).norm() == 0.0);

  CHECK_THROWS_AS(warmup_doa_only(init, stream, ans, 21, p), std::invalid_argument);
}

TEST_CASE("warmup velocity estimate for a moving UN") {
  const std::vector<AnInfo> list = {an_at(1, 0, 9), an_at(2, 50, 9), an_at(3, 100, 9)};
  const AnTable ans = make_an_table(list);
  const FusionParams p;
  const InitConfig cfg;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  const double sigma = kPi / 180;
  double acc = 0.0;
  const int trials = 200;
  for (int trial = 0; trial < trials; ++trial) {
    Eigen::Vector2d pos(20, 0);
    const Eigen::Vector2d vel(13.9, 0);
    std::vector<std::vector<Measurement>> stream;
    std::vector<AnInfo> first;
    for (int k = 0; k < 20; ++k) {
      std::vector<Measurement> step;
      // the two nearest ANs see the UN
      std::vector<AnInfo> near = list;
      std::sort(near.begin(), near.end(), [&](const AnInfo& a, const AnInfo& b) {
        return (a.position.vec() - pos).norm() < (b.position.vec() - pos).norm();
      });
      near.resize(2);
      if (k == 0) first = near;
      for (const auto& a : near) step.push_back(bearing(a.id, a, pos, sigma, sigma * n(rng)));
      stream.push_back(step);
      pos += p.dt * vel;
    }
    const KinematicState out = warmup_doa_only(initial_kinematics(centroid_init(first), cfg), stream, ans, 20, p);
    acc += (out.mean.tail<2>() - vel).squaredNorm();
  }
  CHECK(std::sqrt(acc / trials) < 2.0);
}

TEST_CASE("attach_clock_prior") {
  KinematicState k;
  k.mean << 1, 2, 3, 4;
  k.cov = Eigen::Matrix4d::Identity() * 2.0;
  k.cov(0, 1) = k.cov(1, 0) = 0.5;
  const InitConfig cfg;
  const UnFusionState s = attach_clock_prior(k, cfg);
  CHECK(s.mean(5) == doctest::Approx(2.5e-5));
  CHECK(std::sqrt(s.cov(5, 5)) == doctest::Approx(3e-5));
  CHECK(s.mean(4) == 0.0);
  CHECK(std::sqrt(s.cov(4, 4)) == doctest::Approx(100e-6));
  CHECK(s.cov.topLeftCorner<4, 4>() == k.cov);
  CHECK(s.mean.head<4>() == k.mean);
  CHECK(s.cov.topRightCorner<4, 2>().norm() == 0.0);
  CHECK(is_psd(s.cov));
}

TEST_CASE("select_reference_an") {
  const Position2D est{0, 0};
  CHECK(select_reference_an({an_at(5, 30, 0), an_at(9, 0, 20)}, est) == 9);
  CHECK(select_reference_an({an_at(7, 10, 0), an_at(3, 0, 10), an_at(4, -10, 0)}, est) == 3);
  CHECK_THROWS(select_reference_an({}, est));
}
