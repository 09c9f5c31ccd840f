#pragma once

// Per-AN information-form EKF tracking delay, coelevation and azimuth of the
// dominant path together with their rates. Path weights are concentrated out
// of the likelihood; the measurement information enters through the observed
// Fisher information and score of the projected residual.

#include "udnloc/array_channel.hpp"
#include "udnloc/state_space.hpp"

#include <Eigen/Dense>

#include <memory>
#include <utility>

namespace udnloc {

/// State ordering: [tau, theta, phi, dtau, dtheta, dphi].
struct AnTrackState {
  Vector6d mean = Vector6d::Zero();
  Matrix6d cov = Matrix6d::Identity();

  double delay() const { return mean(0); }
  double coelevation() const { return mean(1); }
  double azimuth() const { return mean(2); }
  Eigen::Vector3d path() const { return mean.head<3>(); }
};

/// Continuous white-noise acceleration model. The rate noise spectral density
/// is sigma_w^2 per coordinate; delay and angles need separate values because
/// their units differ by many orders of magnitude.
struct CwnaParams {
  Eigen::Vector3d sigma_w = Eigen::Vector3d::Ones();  // (tau s/s, theta rad/s, phi rad/s) per sqrt(s)
  double dt = 0.1;

  CwnaParams() = default;
  CwnaParams(double sigma, double dt_) : sigma_w(Eigen::Vector3d::Constant(sigma)), dt(dt_) {}
  CwnaParams(const Eigen::Vector3d& sigma, double dt_) : sigma_w(sigma), dt(dt_) {}
  void validate() const;
};

struct CwnaMatrices {
  Matrix6d transition;
  Matrix6d process_noise;
};

CwnaMatrices cwna_matrices(const CwnaParams& params);

AnTrackState predict(const AnTrackState& state, const CwnaParams& params);

/// r = g - B B^+ g at the given (tau, theta, phi). All-zero columns of B are
/// dropped (single-polarized arrays); two parallel nonzero columns mark the
/// geometry degenerate and the projector falls back to the stronger column.
struct ProjectedResidual {
  Eigen::VectorXcd residual;
  Eigen::VectorXcd weights;        // B^+ g over the active columns
  Eigen::MatrixXcd basis;          // active columns of B
  Eigen::MatrixXcd gram_inverse;   // (B^H B)^-1 over the active columns
  std::vector<int> active_columns;
  bool degenerate = false;
};

ProjectedResidual concentrated_residual(const Eigen::Vector3d& path, const ChannelSnapshot& snapshot,
                                        const ArrayManifold& manifold, const PilotGrid& grid);

/// Analytic M x 3 derivative of the projected residual in (tau, theta, phi).
Eigen::MatrixXcd residual_jacobian(const Eigen::Vector3d& path, const ChannelSnapshot& snapshot,
                                   const ArrayManifold& manifold, const PilotGrid& grid);

struct FimScore {
  Matrix6d fim = Matrix6d::Zero();
  Vector6d score = Vector6d::Zero();
};

/// Observed FIM (2/sigma^2) Re{D^H D} and score -(2/sigma^2) Re{D^H r}; rate
/// rows and columns are zero. Throws std::domain_error for degenerate B.
FimScore fim_and_score(const Eigen::Vector3d& path, const ChannelSnapshot& snapshot,
                       const ArrayManifold& manifold, const PilotGrid& grid, double noise_variance);

struct UpdateDiagnostics {
  bool regularized = false;
};

/// P+ = (P-^-1 + J)^-1, s+ = s- + P+ v, evaluated in the correlation frame of
/// P-. A singular prior gets 1e-12 * trace added to its diagonal.
AnTrackState information_update(const AnTrackState& state, const Matrix6d& fim, const Vector6d& score,
                                UpdateDiagnostics* diag = nullptr);

/// Wraps azimuth to [0, 2pi) and clamps coelevation 1e-3 rad inside [0, pi].
void normalize_angles(AnTrackState& state);

inline constexpr double kCoelevationGuard = 1e-3;

struct BeamformerEstimate {
  double delay = 0.0;
  double coelevation = 0.0;
  double azimuth = 0.0;
  double peak = 0.0;
};

/// Space-time conventional beamformer over a zero-padded 3D FFT grid
/// (delay x azimuth harmonics x coelevation harmonics). The delay axis
/// covers [0, 1 / (stride * f0)); a coelevation bin above pi is folded back
/// through (theta, phi) -> (2pi - theta, phi + pi). Ties go to the lowest
/// linear FFT index. Throws std::invalid_argument for an all-zero snapshot.
BeamformerEstimate init_beamformer(const ChannelSnapshot& snapshot, const ArrayManifold& manifold,
                                   const PilotGrid& grid, int fft_padding = 4);

/// FFT bin widths used by init_beamformer: (delay s, azimuth rad, coelevation rad).
Eigen::Vector3d beamformer_bin_widths(const ArrayManifold& manifold, const PilotGrid& grid,
                                      int fft_padding = 4);

struct PathFix {
  Eigen::Vector3d path = Eigen::Vector3d::Zero();
  Eigen::Matrix3d cov = Eigen::Matrix3d::Identity();
};

/// Gauss-Newton refinement of a coarse path estimate on the concentrated
/// likelihood; returns the refined path with the inverse observed FIM.
PathFix refine_path(const Eigen::Vector3d& start, const ChannelSnapshot& snapshot,
                    const ArrayManifold& manifold, const PilotGrid& grid, int iterations = 8);

struct RateInit {
  Eigen::Vector3d rates = Eigen::Vector3d::Zero();
  Eigen::Vector3d variances = Eigen::Vector3d::Zero();
};

/// Finite-difference rates from two consecutive fixes, variance
/// (P11[1] + P11[2]) / dt^2 per coordinate. Throws for dt <= 0.
RateInit init_rates(const Eigen::Vector3d& first, const Eigen::Vector3d& first_var,
                    const Eigen::Vector3d& second, const Eigen::Vector3d& second_var, double dt);

/// Extracts (azimuth, delay) and their marginal covariance from a state.
Measurement to_measurement(const AnTrackState& state, AnId an_id, double window_start = 0.0);

/// predict + FIM/score + information update; the emitted measurement carries
/// the posterior marginal of (phi, tau).
std::pair<AnTrackState, Measurement> track_step(const AnTrackState& state, const ChannelSnapshot& snapshot,
                                                const ArrayManifold& manifold, const PilotGrid& grid,
                                                const CwnaParams& params, AnId an_id);

/// Median-based noise level from a residual: median(|r|^2) / ln 2.
double estimate_noise_variance(const Eigen::VectorXcd& residual);

struct TrackerConfig {
  CwnaParams process{Eigen::Vector3d(5e-9, 0.5, 1.0), 0.1};
  int fft_padding = 4;
  int refine_iterations = 8;
  bool estimate_noise = false;  // use the median fallback instead of the snapshot's sigma^2
};

/// One AN's tracker. The first snapshot is initialized by the beamformer,
/// the second adds finite-difference rates, and every later one runs the EKF.
/// `window_start` is the receiver's FFT window start for that snapshot; the
/// reported ToA is window_start + tau.
class AnTracker {
 public:
  AnTracker(AnId id, std::shared_ptr<const ArrayManifold> manifold, std::shared_ptr<const PilotGrid> grid,
            TrackerConfig config);

  Measurement process(const ChannelSnapshot& snapshot, double window_start);

  AnId id() const { return id_; }
  int snapshots_seen() const { return seen_; }
  const AnTrackState& state() const { return state_; }
  double window_start() const { return window_; }

 private:
  ChannelSnapshot with_noise_level(const ChannelSnapshot& snapshot) const;

  AnId id_;
  std::shared_ptr<const ArrayManifold> manifold_;
  std::shared_ptr<const PilotGrid> grid_;
  TrackerConfig config_;
  AnTrackState state_;
  PathFix first_fix_;
  double first_window_ = 0.0;
  double window_ = 0.0;
  int seen_ = 0;
};

}  // namespace udnloc
