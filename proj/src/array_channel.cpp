#include "udnloc/array_channel.hpp"

#include "udnloc/state_space.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace udnloc {

namespace {

constexpr cd kJ{0.0, 1.0};

void require_odd(int modes, const char* what) {
  if (modes < 1 || modes % 2 == 0) {
    throw std::invalid_argument(std::string(what) + ": mode count must be odd and positive");
  }
}

Eigen::VectorXd harmonic_indices(int modes) {
  Eigen::VectorXd m(modes);
  const double half = 0.5 * (modes - 1);
  for (int i = 0; i < modes; ++i) m(i) = i - half;
  return m;
}

Eigen::VectorXcd kron(const Eigen::VectorXcd& a, const Eigen::VectorXcd& b) {
  Eigen::VectorXcd out(a.size() * b.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) out.segment(i * b.size(), b.size()) = a(i) * b;
  return out;
}

Eigen::VectorXcd frequency_response(const ArrayManifold& manifold, const Eigen::VectorXcd& d_tau) {
  if (manifold.rx_gain.size() == 0) return d_tau;
  return manifold.rx_gain.cwiseProduct(d_tau);
}

void check_dims(const ArrayManifold& manifold, const PilotGrid& grid) {
  manifold.validate();
  grid.validate();
  if (manifold.rx_gain.size() != 0 && manifold.rx_gain.size() != grid.size()) {
    throw std::invalid_argument("receiver gain length does not match the pilot grid");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// PilotGrid

PilotGrid PilotGrid::continuous(int count, double spacing) { return sparse(count, 1, spacing); }

PilotGrid PilotGrid::sparse(int count, int step, double spacing) {
  if (count < 1 || step < 1) throw std::invalid_argument("PilotGrid: count and step must be positive");
  PilotGrid grid;
  grid.subcarrier_spacing = spacing;
  grid.subcarrier_indices.resize(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) grid.subcarrier_indices[static_cast<std::size_t>(i)] = i * step;
  return grid;
}

std::vector<double> PilotGrid::centered_indices() const {
  std::vector<double> m(subcarrier_indices.size());
  if (m.empty()) return m;
  const double center = 0.5 * (subcarrier_indices.front() + subcarrier_indices.back());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = subcarrier_indices[i] - center;
  return m;
}

int PilotGrid::index_stride() const {
  int g = 0;
  for (std::size_t i = 1; i < subcarrier_indices.size(); ++i) {
    g = std::gcd(g, subcarrier_indices[i] - subcarrier_indices[0]);
  }
  return g == 0 ? 1 : g;
}

void PilotGrid::validate() const {
  if (subcarrier_indices.empty()) throw std::invalid_argument("PilotGrid: empty grid");
  if (!(subcarrier_spacing > 0.0)) throw std::invalid_argument("PilotGrid: spacing must be positive");
  for (std::size_t i = 1; i < subcarrier_indices.size(); ++i) {
    if (subcarrier_indices[i] <= subcarrier_indices[i - 1]) {
      throw std::invalid_argument("PilotGrid: indices must be strictly increasing");
    }
  }
}

void ArrayManifold::validate() const {
  require_odd(modes_azimuth, "ArrayManifold azimuth");
  require_odd(modes_elevation, "ArrayManifold elevation");
  if (ports < 1) throw std::invalid_argument("ArrayManifold: no ports");
  if (eadf_h.rows() != ports || eadf_v.rows() != ports || eadf_h.cols() != modes() ||
      eadf_v.cols() != modes()) {
    throw std::invalid_argument("ArrayManifold: EADF dimensions inconsistent");
  }
}

// ---------------------------------------------------------------------------
// Steering vectors and response

Eigen::VectorXcd delay_steering(double delay, const PilotGrid& grid) {
  grid.validate();
  const auto m = grid.centered_indices();
  Eigen::VectorXcd d(grid.size());
  const double w = kTwoPi * grid.subcarrier_spacing * delay;
  for (std::size_t i = 0; i < m.size(); ++i) d(static_cast<Eigen::Index>(i)) = std::polar(1.0, w * m[i]);
  return d;
}

Eigen::VectorXcd harmonic_vector(double angle, int modes) {
  require_odd(modes, "harmonic_vector");
  Eigen::VectorXcd d(modes);
  const int half = (modes - 1) / 2;
  for (int i = 0; i < modes; ++i) d(i) = std::polar(1.0, (i - half) * angle);
  return d;
}

Eigen::VectorXcd angle_steering(double azimuth, double coelevation, int modes_azimuth,
                                int modes_elevation) {
  return kron(harmonic_vector(coelevation, modes_elevation), harmonic_vector(azimuth, modes_azimuth));
}

Eigen::MatrixXcd polarimetric_response(const PathParams& path, const ArrayManifold& manifold,
                                       const PilotGrid& grid) {
  check_dims(manifold, grid);
  const Eigen::VectorXcd d_ang =
      angle_steering(path.azimuth, path.coelevation, manifold.modes_azimuth, manifold.modes_elevation);
  const Eigen::VectorXcd f = frequency_response(manifold, delay_steering(path.delay, grid));
  Eigen::MatrixXcd b(static_cast<Eigen::Index>(manifold.ports) * grid.size(), 2);
  b.col(0) = kron(manifold.eadf_h * d_ang, f);
  b.col(1) = kron(manifold.eadf_v * d_ang, f);
  return b;
}

ResponseJacobian polarimetric_response_jacobian(double delay, double coelevation, double azimuth,
                                                const ArrayManifold& manifold,
                                                const PilotGrid& grid) {
  check_dims(manifold, grid);
  const Eigen::VectorXcd d_el = harmonic_vector(coelevation, manifold.modes_elevation);
  const Eigen::VectorXcd d_az = harmonic_vector(azimuth, manifold.modes_azimuth);
  const Eigen::VectorXcd d_el_dot =
      (kJ * harmonic_indices(manifold.modes_elevation).cast<cd>()).cwiseProduct(d_el);
  const Eigen::VectorXcd d_az_dot =
      (kJ * harmonic_indices(manifold.modes_azimuth).cast<cd>()).cwiseProduct(d_az);

  const Eigen::VectorXcd d_tau = delay_steering(delay, grid);
  const auto m = grid.centered_indices();
  Eigen::VectorXcd d_tau_dot(grid.size());
  for (Eigen::Index i = 0; i < d_tau.size(); ++i) {
    d_tau_dot(i) = kJ * (kTwoPi * grid.subcarrier_spacing * m[static_cast<std::size_t>(i)]) * d_tau(i);
  }
  const Eigen::VectorXcd f = frequency_response(manifold, d_tau);
  const Eigen::VectorXcd f_dot = frequency_response(manifold, d_tau_dot);

  const Eigen::VectorXcd ang = kron(d_el, d_az);
  const Eigen::VectorXcd ang_el = kron(d_el_dot, d_az);
  const Eigen::VectorXcd ang_az = kron(d_el, d_az_dot);

  const Eigen::Index rows = static_cast<Eigen::Index>(manifold.ports) * grid.size();
  ResponseJacobian out;
  out.response.resize(rows, 2);
  for (auto& p : out.partials) p.resize(rows, 2);
  const std::array<const Eigen::MatrixXcd*, 2> eadf{&manifold.eadf_h, &manifold.eadf_v};
  for (int c = 0; c < 2; ++c) {
    const Eigen::VectorXcd a = *eadf[c] * ang;
    out.response.col(c) = kron(a, f);
    out.partials[0].col(c) = kron(a, f_dot);
    out.partials[1].col(c) = kron(*eadf[c] * ang_el, f);
    out.partials[2].col(c) = kron(*eadf[c] * ang_az, f);
  }
  return out;
}

ChannelSnapshot synth_snapshot(const PathParams& path, const ArrayManifold& manifold,
                               const PilotGrid& grid, double noise_variance, std::mt19937_64& rng) {
  if (!(noise_variance > 0.0)) throw std::invalid_argument("synth_snapshot: noise variance must be positive");
  ChannelSnapshot snap;
  snap.noise_variance = noise_variance;
  snap.g = polarimetric_response(path, manifold, grid) * path.weights;
  std::normal_distribution<double> normal(0.0, std::sqrt(0.5 * noise_variance));
  for (Eigen::Index i = 0; i < snap.g.size(); ++i) {
    const double re = normal(rng);
    const double im = normal(rng);
    snap.g(i) += cd{re, im};
  }
  return snap;
}

ChannelSnapshot synth_snapshot(const PathParams& path, const ArrayManifold& manifold,
                               const PilotGrid& grid, double noise_variance, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return synth_snapshot(path, manifold, grid, noise_variance, rng);
}

// ---------------------------------------------------------------------------
// Synthetic calibration

ArrayGeometry ArrayGeometry::cylindrical_dual_polarized() {
  ArrayGeometry geo;
  const double radius = 0.25 / std::sin(kPi / 5.0);  // chord of lambda/2 between neighbours
  for (int ring = 0; ring < 2; ++ring) {
    const double z = ring == 0 ? 0.25 : -0.25;
    const double shift = ring == 0 ? 0.0 : kTwoPi / 10.0;
    for (int k = 0; k < 5; ++k) {
      const double a = kTwoPi * k / 5.0 + shift;
      const Eigen::Vector3d radial(std::cos(a), std::sin(a), 0.0);
      AntennaElement h;
      h.position = radius * radial + Eigen::Vector3d(0.0, 0.0, z);
      h.boresight = radial;
      h.pattern = ElementPattern::Patch;
      h.polarization = Eigen::Vector3d(-std::sin(a), std::cos(a), 0.0);
      AntennaElement v = h;
      v.polarization = Eigen::Vector3d::UnitZ();
      geo.ports.push_back(h);
      geo.ports.push_back(v);
    }
  }
  return geo;
}

ArrayGeometry ArrayGeometry::uniform_circular(int count, double radius_wavelengths) {
  if (count < 1) throw std::invalid_argument("uniform_circular: need at least one element");
  ArrayGeometry geo;
  for (int k = 0; k < count; ++k) {
    const double a = kTwoPi * k / count;
    AntennaElement e;
    e.position = radius_wavelengths * Eigen::Vector3d(std::cos(a), std::sin(a), 0.0);
    e.boresight = Eigen::Vector3d(std::cos(a), std::sin(a), 0.0);
    e.pattern = ElementPattern::Isotropic;
    geo.ports.push_back(e);
  }
  return geo;
}

std::array<cd, 2> element_response(const AntennaElement& element, double coelevation, double azimuth) {
  const double st = std::sin(coelevation), ct = std::cos(coelevation);
  const double sp = std::sin(azimuth), cp = std::cos(azimuth);
  const Eigen::Vector3d u(st * cp, st * sp, ct);
  const cd phase = std::polar(1.0, kTwoPi * u.dot(element.position));
  if (element.pattern == ElementPattern::Isotropic) return {phase, phase};

  const Eigen::Vector3d e_theta(ct * cp, ct * sp, -st);
  const Eigen::Vector3d e_phi(-sp, cp, 0.0);
  double amp = 1.0;
  if (element.pattern == ElementPattern::Patch) {
    const double back = std::pow(10.0, -kPatchFrontToBackDb / 20.0);
    amp = back + (1.0 - back) * 0.5 * (1.0 + u.dot(element.boresight));
  }
  return {amp * element.polarization.dot(e_phi) * phase, amp * element.polarization.dot(e_theta) * phase};
}

namespace {

struct TorusGrid {
  int n_az;
  int n_el;
  double az(int p) const { return kTwoPi * p / n_az; }
  double el(int q) const { return kTwoPi * q / n_el; }
};

// Rows: harmonic m, cols: sample; entries exp(sign * j m angle_p) * scale.
Eigen::MatrixXcd harmonic_matrix(int modes, int samples, double sign, double scale) {
  const Eigen::VectorXd m = harmonic_indices(modes);
  Eigen::MatrixXcd e(modes, samples);
  for (int i = 0; i < modes; ++i) {
    for (int p = 0; p < samples; ++p) e(i, p) = scale * std::polar(1.0, sign * m(i) * kTwoPi * p / samples);
  }
  return e;
}

int default_samples(int modes) { return std::max(64, 4 * modes); }

}  // namespace

ArrayManifold build_synthetic_manifold(const ArrayGeometry& geometry, int modes_azimuth,
                                       int modes_elevation, int samples_azimuth,
                                       int samples_elevation) {
  require_odd(modes_azimuth, "build_synthetic_manifold azimuth");
  require_odd(modes_elevation, "build_synthetic_manifold elevation");
  if (geometry.ports.empty()) throw std::invalid_argument("build_synthetic_manifold: no elements");
  if (samples_azimuth == 0) samples_azimuth = default_samples(modes_azimuth);
  if (samples_elevation == 0) samples_elevation = default_samples(modes_elevation);
  if (samples_azimuth < 2 * modes_azimuth || samples_elevation < 2 * modes_elevation) {
    throw std::invalid_argument("build_synthetic_manifold: angular sampling below twice the mode count");
  }
  const TorusGrid grid{samples_azimuth, samples_elevation};
  const Eigen::MatrixXcd e_az = harmonic_matrix(modes_azimuth, samples_azimuth, -1.0, 1.0 / samples_azimuth);
  const Eigen::MatrixXcd e_el =
      harmonic_matrix(modes_elevation, samples_elevation, -1.0, 1.0 / samples_elevation);

  ArrayManifold m;
  m.ports = static_cast<int>(geometry.ports.size());
  m.modes_azimuth = modes_azimuth;
  m.modes_elevation = modes_elevation;
  m.eadf_h.resize(m.ports, m.modes());
  m.eadf_v.resize(m.ports, m.modes());

  Eigen::MatrixXcd sh(samples_elevation, samples_azimuth), sv(samples_elevation, samples_azimuth);
  for (int port = 0; port < m.ports; ++port) {
    const auto& el = geometry.ports[static_cast<std::size_t>(port)];
    for (int q = 0; q < samples_elevation; ++q) {
      for (int p = 0; p < samples_azimuth; ++p) {
        const auto r = element_response(el, grid.el(q), grid.az(p));
        sh(q, p) = r[0];
        sv(q, p) = r[1];
      }
    }
    const Eigen::MatrixXcd ch = e_el * sh * e_az.transpose();  // M_e x M_a
    const Eigen::MatrixXcd cv = e_el * sv * e_az.transpose();
    for (int e = 0; e < modes_elevation; ++e) {
      for (int a = 0; a < modes_azimuth; ++a) {
        m.eadf_h(port, e * modes_azimuth + a) = ch(e, a);
        m.eadf_v(port, e * modes_azimuth + a) = cv(e, a);
      }
    }
  }
  return m;
}

double eadf_reconstruction_error(const ArrayGeometry& geometry, const ArrayManifold& manifold,
                                 int samples_azimuth, int samples_elevation) {
  manifold.validate();
  if (static_cast<int>(geometry.ports.size()) != manifold.ports) {
    throw std::invalid_argument("eadf_reconstruction_error: geometry/manifold port mismatch");
  }
  const TorusGrid grid{samples_azimuth, samples_elevation};
  const Eigen::MatrixXcd r_az = harmonic_matrix(manifold.modes_azimuth, samples_azimuth, 1.0, 1.0);
  const Eigen::MatrixXcd r_el = harmonic_matrix(manifold.modes_elevation, samples_elevation, 1.0, 1.0);
  double err = 0.0, ref = 0.0;
  Eigen::MatrixXcd ch(manifold.modes_elevation, manifold.modes_azimuth), cv = ch;
  for (int port = 0; port < manifold.ports; ++port) {
    for (int e = 0; e < manifold.modes_elevation; ++e) {
      for (int a = 0; a < manifold.modes_azimuth; ++a) {
        ch(e, a) = manifold.eadf_h(port, e * manifold.modes_azimuth + a);
        cv(e, a) = manifold.eadf_v(port, e * manifold.modes_azimuth + a);
      }
    }
    const Eigen::MatrixXcd rh = r_el.transpose() * ch * r_az;  // N_el x N_az
    const Eigen::MatrixXcd rv = r_el.transpose() * cv * r_az;
    const auto& el = geometry.ports[static_cast<std::size_t>(port)];
    for (int q = 0; q < samples_elevation; ++q) {
      for (int p = 0; p < samples_azimuth; ++p) {
        const auto s = element_response(el, grid.el(q), grid.az(p));
        err += std::norm(s[0] - rh(q, p)) + std::norm(s[1] - rv(q, p));
        ref += std::norm(s[0]) + std::norm(s[1]);
      }
    }
  }
  return ref > 0.0 ? std::sqrt(err / ref) : 0.0;
}

Eigen::MatrixXcd array_response(const ArrayManifold& manifold, double coelevation, double azimuth) {
  manifold.validate();
  const Eigen::VectorXcd d = angle_steering(azimuth, coelevation, manifold.modes_azimuth, manifold.modes_elevation);
  Eigen::MatrixXcd out(manifold.ports, 2);
  out.col(0) = manifold.eadf_h * d;
  out.col(1) = manifold.eadf_v * d;
  return out;
}

// ---------------------------------------------------------------------------
// Text cache

namespace {

void write_row(std::ostream& os, const Eigen::RowVectorXcd& row) {
  for (Eigen::Index i = 0; i < row.size(); ++i) {
    if (i) os << ' ';
    os << row(i).real() << ' ' << row(i).imag();
  }
  os << '\n';
}

void expect_token(std::istream& is, const std::string& want) {
  std::string tok;
  if (!(is >> tok) || tok != want) {
    throw std::runtime_error("read_manifold: expected '" + want + "', got '" + tok + "'");
  }
}

Eigen::MatrixXcd read_matrix(std::istream& is, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXcd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      double re = 0.0, im = 0.0;
      if (!(is >> re >> im)) throw std::runtime_error("read_manifold: truncated matrix data");
      m(r, c) = cd{re, im};
    }
  }
  return m;
}

}  // namespace

void write_manifold(std::ostream& os, const ArrayManifold& manifold) {
  manifold.validate();
  const auto old_flags = os.flags();
  const auto old_prec = os.precision();
  os << std::setprecision(17);
  os << "udnloc-manifold 1\n";
  os << "ports " << manifold.ports << '\n';
  os << "modes " << manifold.modes_azimuth << ' ' << manifold.modes_elevation << '\n';
  os << "rx_gain " << manifold.rx_gain.size() << '\n';
  if (manifold.rx_gain.size() > 0) write_row(os, manifold.rx_gain.transpose());
  os << "eadf_h\n";
  for (Eigen::Index r = 0; r < manifold.eadf_h.rows(); ++r) write_row(os, manifold.eadf_h.row(r));
  os << "eadf_v\n";
  for (Eigen::Index r = 0; r < manifold.eadf_v.rows(); ++r) write_row(os, manifold.eadf_v.row(r));
  os << "end\n";
  os.flags(old_flags);
  os.precision(old_prec);
}

ArrayManifold read_manifold(std::istream& is) {
  expect_token(is, "udnloc-manifold");
  int version = 0;
  if (!(is >> version) || version != 1) throw std::runtime_error("read_manifold: unsupported version");
  ArrayManifold m;
  Eigen::Index gains = 0;
  expect_token(is, "ports");
  is >> m.ports;
  expect_token(is, "modes");
  is >> m.modes_azimuth >> m.modes_elevation;
  expect_token(is, "rx_gain");
  is >> gains;
  if (!is || m.ports < 1 || gains < 0) throw std::runtime_error("read_manifold: malformed header");
  if (gains > 0) m.rx_gain = read_matrix(is, 1, gains).transpose();
  expect_token(is, "eadf_h");
  m.eadf_h = read_matrix(is, m.ports, static_cast<Eigen::Index>(m.modes_azimuth) * m.modes_elevation);
  expect_token(is, "eadf_v");
  m.eadf_v = read_matrix(is, m.ports, static_cast<Eigen::Index>(m.modes_azimuth) * m.modes_elevation);
  expect_token(is, "end");
  m.validate();
  return m;
}

}  // namespace udnloc
