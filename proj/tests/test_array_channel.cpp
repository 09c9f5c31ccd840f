#include <doctest.h>

#include "udnloc/array_channel.hpp"
#include "udnloc/state_space.hpp"

#include <cmath>
#include <random>
#include <sstream>

using namespace udnloc;

namespace {

// One port, one mode, horizontal response only.
ArrayManifold scalar_manifold() {
  ArrayManifold m;
  m.ports = 1;
  m.modes_azimuth = 1;
  m.modes_elevation = 1;
  m.eadf_h = Eigen::MatrixXcd::Ones(1, 1);
  m.eadf_v = Eigen::MatrixXcd::Zero(1, 1);
  return m;
}

ArrayManifold random_manifold(int ports, int ma, int me, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  ArrayManifold m;
  m.ports = ports;
  m.modes_azimuth = ma;
  m.modes_elevation = me;
  m.eadf_h.resize(ports, ma * me);
  m.eadf_v.resize(ports, ma * me);
  for (Eigen::Index i = 0; i < m.eadf_h.size(); ++i) {
    m.eadf_h.data()[i] = cd{n(rng), n(rng)};
    m.eadf_v.data()[i] = cd{n(rng), n(rng)};
  }
  return m;
}

}  // namespace

TEST_CASE("delay_steering") {
  const PilotGrid g3 = PilotGrid::continuous(3, 75e3);
  const Eigen::VectorXcd z = delay_steering(0.0, g3);
  CHECK((z - Eigen::VectorXcd::Ones(3)).norm() < 1e-15);

  const Eigen::VectorXcd d = delay_steering(1e-6, g3);
  CHECK(std::arg(d(0)) == doctest::Approx(-0.4712).epsilon(1e-4));
  CHECK(std::arg(d(1)) == doctest::Approx(0.0));
  CHECK(std::arg(d(2)) == doctest::Approx(0.4712).epsilon(1e-4));

  PilotGrid sparse;
  sparse.subcarrier_spacing = 75e3;
  sparse.subcarrier_indices = {0, 4, 8};
  const Eigen::VectorXcd s = delay_steering(2e-6, sparse);
  const double center = 4.0;
  for (int i = 0; i < 3; ++i) {
    const double k = sparse.subcarrier_indices[static_cast<std::size_t>(i)] - center;
    const cd oracle = std::exp(cd{0.0, 2.0 * kPi * 75e3 * k * 2e-6});
    CHECK(std::abs(s(i) - oracle) < 1e-12);
    CHECK(std::abs(s(i)) == doctest::Approx(1.0));
  }

  PilotGrid empty;
  CHECK_THROWS(delay_steering(0.0, empty));
}

TEST_CASE("delay_steering group property") {
  const PilotGrid g = PilotGrid::sparse(256, 5);
  const double t1 = 3.7e-8, t2 = -1.1e-7;
  const Eigen::VectorXcd lhs = delay_steering(t1 + t2, g);
  const Eigen::VectorXcd rhs = delay_steering(t1, g).cwiseProduct(delay_steering(t2, g));
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("angle_steering") {
  CHECK((angle_steering(0, 0, 5, 3) - Eigen::VectorXcd::Ones(15)).norm() < 1e-15);
  const Eigen::VectorXcd a = angle_steering(kPi / 2, 0.0, 3, 1);
  CHECK(std::abs(a(0) - std::exp(cd{0, -kPi / 2})) < 1e-15);
  CHECK(std::abs(a(1) - cd{1, 0}) < 1e-15);
  CHECK(std::abs(a(2) - std::exp(cd{0, kPi / 2})) < 1e-15);
  CHECK_THROWS_AS(angle_steering(0, 0, 4, 3), std::invalid_argument);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, kTwoPi);
  for (int trial = 0; trial < 20; ++trial) {
    const double phi = u(rng), theta = 0.5 * u(rng);
    const Eigen::VectorXcd k = angle_steering(phi, theta, 5, 3);
    // outer product d(phi) d(theta)^T flattened column-major
    for (int e = 0; e < 3; ++e) {
      for (int m = 0; m < 5; ++m) {
        const cd oracle = std::exp(cd{0, (m - 2) * phi}) * std::exp(cd{0, (e - 1) * theta});
        CHECK(std::abs(k(e * 5 + m) - oracle) < 1e-12);
      }
    }
  }
}

TEST_CASE("polarimetric_response") {
  const ArrayManifold s = scalar_manifold();
  const PilotGrid g = PilotGrid::continuous(8);
  PathParams p;
  const Eigen::MatrixXcd b = polarimetric_response(p, s, g);
  CHECK((b.col(0) - Eigen::VectorXcd::Ones(8)).norm() < 1e-15);
  CHECK(b.col(1).norm() == 0.0);

  std::mt19937_64 rng(5);
  const ArrayManifold m = random_manifold(20, 5, 3, rng);
  const PilotGrid gs = PilotGrid::sparse(16, 5);
  p.delay = 2.3e-7;
  p.azimuth = 1.2;
  p.coelevation = 1.9;
  const Eigen::MatrixXcd full = polarimetric_response(p, m, gs);
  PathParams p0 = p;
  p0.delay = 0.0;
  const Eigen::MatrixXcd zero = polarimetric_response(p0, m, gs);
  CHECK(full.col(0).norm() == doctest::Approx(zero.col(0).norm()));
  CHECK(full.col(1).norm() == doctest::Approx(zero.col(1).norm()));

  // elementwise loop over antenna/subcarrier pairs
  const auto centered = gs.centered_indices();
  for (int port = 0; port < 20; ++port) {
    cd ah{0, 0}, av{0, 0};
    for (int e = 0; e < 3; ++e) {
      for (int a = 0; a < 5; ++a) {
        const cd h = std::exp(cd{0, (a - 2) * p.azimuth + (e - 1) * p.coelevation});
        ah += m.eadf_h(port, e * 5 + a) * h;
        av += m.eadf_v(port, e * 5 + a) * h;
      }
    }
    for (int f = 0; f < gs.size(); ++f) {
      const cd ph = std::exp(cd{0, 2 * kPi * gs.subcarrier_spacing * centered[static_cast<std::size_t>(f)] * p.delay});
      CHECK(std::abs(full(f + gs.size() * port, 0) - ah * ph) < 1e-9);
      CHECK(std::abs(full(f + gs.size() * port, 1) - av * ph) < 1e-9);
    }
  }

  PathParams wrapped = p;
  wrapped.azimuth += kTwoPi;
  CHECK((polarimetric_response(wrapped, m, gs) - full).norm() < 1e-9 * full.norm());

  ArrayManifold bad = m;
  bad.eadf_v.resize(20, 4);
  CHECK_THROWS(polarimetric_response(p, bad, gs));
}

TEST_CASE("synth_snapshot") {
  std::mt19937_64 rng(9);
  const ArrayManifold m = random_manifold(4, 3, 3, rng);
  const PilotGrid g = PilotGrid::continuous(32);
  PathParams p;
  p.delay = 1e-7;
  p.azimuth = 0.4;
  p.coelevation = 1.3;
  p.weights = Eigen::Vector2cd(cd{0.3, 0.1}, cd{-0.7, 0.2});
  const Eigen::VectorXcd clean = polarimetric_response(p, m, g) * p.weights;

  const ChannelSnapshot tiny = synth_snapshot(p, m, g, 1e-300, 1u);
  CHECK((tiny.g - clean).norm() < 1e-140);

  const ChannelSnapshot a = synth_snapshot(p, m, g, 0.5, 42u);
  const ChannelSnapshot b = synth_snapshot(p, m, g, 0.5, 42u);
  CHECK((a.g - b.g).norm() == 0.0);

  std::mt19937_64 noise_rng(17);
  double acc = 0.0;
  int count = 0;
  for (int i = 0; i < 80; ++i) {
    const ChannelSnapshot s = synth_snapshot(p, m, g, 0.25, noise_rng);
    acc += (s.g - clean).squaredNorm();
    count += static_cast<int>(s.g.size());
  }
  CHECK(count >= 10000);
  CHECK(acc / count == doctest::Approx(0.25).epsilon(0.05));

  CHECK_THROWS(synth_snapshot(p, m, g, 0.0, 1u));
}

TEST_CASE("synthetic manifold: isotropic element") {
  ArrayGeometry geo;
  geo.ports.push_back(AntennaElement{});
  const ArrayManifold m = build_synthetic_manifold(geo, 5, 5);
  const int dc = 2 * 5 + 2;
  CHECK(std::abs(m.eadf_h(0, dc)) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(m.eadf_h.cwiseAbs().sum() - std::abs(m.eadf_h(0, dc)) < 1e-9);
  for (double az : {0.0, 1.0, 2.5, 5.0}) {
    for (double el : {0.3, 1.57, 2.9}) {
      CHECK(std::abs(array_response(m, el, az)(0, 0) - cd{1, 0}) < 1e-9);
    }
  }
}

TEST_CASE("synthetic manifold: two elements half a wavelength apart") {
  ArrayGeometry geo;
  AntennaElement e;
  e.position = Eigen::Vector3d(-0.25, 0, 0);
  geo.ports.push_back(e);
  e.position = Eigen::Vector3d(0.25, 0, 0);
  geo.ports.push_back(e);
  const ArrayManifold m = build_synthetic_manifold(geo, 15, 15);
  for (double az = 0.05; az < kTwoPi; az += 0.3) {
    const Eigen::MatrixXcd r = array_response(m, kPi / 2, az);
    const double measured = std::arg(r(1, 0) / r(0, 0));
    const double plane_wave = kPi * std::cos(az);  // 2 pi (lambda/2) cos(az)
    CHECK(std::abs(wrap_angle(measured - plane_wave)) < 1e-3);
  }
}

TEST_CASE("synthetic manifold: cylindrical dual-polarized array") {
  const ArrayGeometry geo = ArrayGeometry::cylindrical_dual_polarized();
  CHECK(geo.ports.size() == 20);  // ten elements, two polarizations each
  const ArrayManifold m = build_synthetic_manifold(geo, 13, 15);
  CHECK(eadf_reconstruction_error(geo, m, 60, 60) <= 0.01);
  CHECK_THROWS(build_synthetic_manifold(geo, 13, 15, 20, 64));
  CHECK_THROWS(build_synthetic_manifold(ArrayGeometry{}, 3, 3));
}

TEST_CASE("manifold text round trip") {
  std::mt19937_64 rng(1);
  ArrayManifold m = random_manifold(3, 3, 1, rng);
  m.rx_gain = Eigen::VectorXcd::Constant(4, cd{0.5, -0.5});
  std::stringstream ss;
  write_manifold(ss, m);
  const ArrayManifold back = read_manifold(ss);
  CHECK(back.ports == 3);
  CHECK((back.eadf_h - m.eadf_h).norm() == 0.0);
  CHECK((back.eadf_v - m.eadf_v).norm() == 0.0);
  CHECK((back.rx_gain - m.rx_gain).norm() == 0.0);

  std::stringstream bad("udnloc-manifold 7\n");
  CHECK_THROWS(read_manifold(bad));
}
