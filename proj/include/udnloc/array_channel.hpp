#pragma once

// Polarimetric multicarrier/multiantenna single-path channel model.
//
// A snapshot is g = B(theta, phi, tau) * gamma + n, where the two columns of B
// are the horizontal and vertical array responses, each the Kronecker product
// of the angular response (EADF times 2D harmonic vector) with the frequency
// response (receiver gains times the delay phase vector). Entry ordering of g
// is subcarrier-fastest: g[f + M_f * port].

#include <Eigen/Dense>

#include <array>
#include <complex>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <vector>

namespace udnloc {

using cd = std::complex<double>;

/// Subcarriers carrying UL pilots. Indices are physical subcarrier numbers on
/// the carrier; the phase reference sits at the band center of the allocation.
struct PilotGrid {
  double subcarrier_spacing = 75e3;  // f0, Hz
  std::vector<int> subcarrier_indices;

  static PilotGrid continuous(int count, double spacing = 75e3);
  /// `count` pilots on every `step`-th subcarrier.
  static PilotGrid sparse(int count, int step, double spacing = 75e3);

  int size() const { return static_cast<int>(subcarrier_indices.size()); }
  /// Index minus band center, (first + last) / 2.
  std::vector<double> centered_indices() const;
  /// Greatest common divisor of all index differences (1 for one pilot).
  int index_stride() const;
  void validate() const;
};

struct ArrayManifold {
  int ports = 0;
  int modes_azimuth = 0;    // M_a, odd
  int modes_elevation = 0;  // M_e, odd
  Eigen::MatrixXcd eadf_h;  // ports x (M_a * M_e)
  Eigen::MatrixXcd eadf_v;
  Eigen::VectorXcd rx_gain;  // per-subcarrier receiver gain, empty = identity

  int modes() const { return modes_azimuth * modes_elevation; }
  void validate() const;
};

struct PathParams {
  double delay = 0.0;        // tau, s
  double coelevation = 0.0;  // theta, [0, pi]
  double azimuth = 0.0;      // phi, [0, 2pi)
  Eigen::Vector2cd weights{cd{1.0, 0.0}, cd{0.0, 0.0}};
};

struct ChannelSnapshot {
  Eigen::VectorXcd g;
  double noise_variance = 1.0;  // per complex sample
};

/// exp(j 2 pi f0 m tau) for centered index m, ascending m.
Eigen::VectorXcd delay_steering(double delay, const PilotGrid& grid);

/// exp(j m angle) for the symmetric harmonic set m = -(n-1)/2 .. (n-1)/2.
Eigen::VectorXcd harmonic_vector(double angle, int modes);

/// d(theta) (x) d(phi); throws std::invalid_argument for even mode counts.
Eigen::VectorXcd angle_steering(double azimuth, double coelevation, int modes_azimuth,
                                int modes_elevation);

/// The M x 2 response matrix B. Throws on dimension mismatch.
Eigen::MatrixXcd polarimetric_response(const PathParams& path, const ArrayManifold& manifold,
                                       const PilotGrid& grid);

/// B together with its partial derivatives in (tau, theta, phi) order.
struct ResponseJacobian {
  Eigen::MatrixXcd response;
  std::array<Eigen::MatrixXcd, 3> partials;
};
ResponseJacobian polarimetric_response_jacobian(double delay, double coelevation, double azimuth,
                                                const ArrayManifold& manifold,
                                                const PilotGrid& grid);

/// g = B * gamma + n with circular white Gaussian n of variance noise_variance.
ChannelSnapshot synth_snapshot(const PathParams& path, const ArrayManifold& manifold,
                               const PilotGrid& grid, double noise_variance, std::uint64_t seed);
ChannelSnapshot synth_snapshot(const PathParams& path, const ArrayManifold& manifold,
                               const PilotGrid& grid, double noise_variance,
                               std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Synthetic calibration data

enum class ElementPattern { Isotropic, Patch, Dipole };

/// One antenna port. Positions are in wavelengths. `boresight` is used by the
/// patch pattern; `polarization` is the unit vector the port is sensitive to.
/// Isotropic ports respond with unit gain to both excitations.
struct AntennaElement {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Vector3d boresight = Eigen::Vector3d::UnitX();
  Eigen::Vector3d polarization = Eigen::Vector3d::UnitZ();
  ElementPattern pattern = ElementPattern::Isotropic;
};

struct ArrayGeometry {
  std::vector<AntennaElement> ports;

  /// Two rings of five dual-polarized patches, lambda/2 neighbour spacing in
  /// each ring, rings lambda/2 apart vertically and rotated by 2pi/10.
  static ArrayGeometry cylindrical_dual_polarized();
  /// Single-polarized uniform circular array of isotropic ports.
  static ArrayGeometry uniform_circular(int count, double radius_wavelengths);
};

/// Patch amplitude with this front-to-back power ratio (25 dB).
inline constexpr double kPatchFrontToBackDb = 25.0;

/// Far-field response (horizontal, vertical excitation) of one port.
/// Coelevation may range over [0, 2pi) (periodic extension of the sphere).
std::array<cd, 2> element_response(const AntennaElement& element, double coelevation,
                                   double azimuth);

/// Samples every port on a uniform azimuth x coelevation torus grid and keeps
/// the central M_a x M_e 2D Fourier coefficients. Sample counts default to a
/// value comfortably above twice the mode counts.
ArrayManifold build_synthetic_manifold(const ArrayGeometry& geometry, int modes_azimuth,
                                       int modes_elevation, int samples_azimuth = 0,
                                       int samples_elevation = 0);

/// Relative RMS error of EADF-reconstructed responses against direct sampling
/// on the given torus grid, both polarizations pooled.
double eadf_reconstruction_error(const ArrayGeometry& geometry, const ArrayManifold& manifold,
                                 int samples_azimuth, int samples_elevation);

/// Reconstructed (H, V) response column of one port, i.e. G d(phi, theta).
Eigen::MatrixXcd array_response(const ArrayManifold& manifold, double coelevation, double azimuth);

// Text cache format; see docs/formats.md.
void write_manifold(std::ostream& os, const ArrayManifold& manifold);
ArrayManifold read_manifold(std::istream& is);

}  // namespace udnloc
