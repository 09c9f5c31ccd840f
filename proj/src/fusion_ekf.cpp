#include "udnloc/fusion_ekf.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace udnloc {

namespace {

struct LinearizedRows {
  Eigen::VectorXd innovation;
  Eigen::MatrixXd h;
  Eigen::MatrixXd r;
};

const AnInfo& lookup(const AnTable& ans, AnId id) {
  auto it = ans.find(id);
  if (it == ans.end()) throw std::out_of_range("unknown AN id " + std::to_string(id));
  return it->second;
}

// Planar geometry of one AN relative to a UN position.
struct Geometry {
  double dx, dy, d;
};

Geometry geometry(double x, double y, const AnInfo& an) {
  Geometry g{x - an.position.x, y - an.position.y, 0.0};
  g.d = std::hypot(g.dx, g.dy);
  if (!(g.d >= kMinRange)) throw std::domain_error("AN-UN distance below 0.1 m");
  return g;
}

// Kalman gain K = P H^T S^-1, with S equilibrated before factorizing. Rows of K
// listed in `frozen` are zeroed so those coordinates stay untouched.
Eigen::MatrixXd kalman_gain(const Eigen::MatrixXd& cov, const LinearizedRows& rows,
                            const std::vector<Eigen::Index>& frozen) {
  const Eigen::MatrixXd pht = cov * rows.h.transpose();
  Eigen::MatrixXd s = rows.h * pht + rows.r;
  s = 0.5 * (s + s.transpose());
  Eigen::VectorXd e(s.rows());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    if (!(s(i, i) > 0.0)) throw std::domain_error("innovation covariance is singular");
    e(i) = 1.0 / std::sqrt(s(i, i));
  }
  const Eigen::MatrixXd se = e.asDiagonal() * s * e.asDiagonal();
  // K = P H^T S^-1 = P H^T E (E S E)^-1 E
  const Eigen::MatrixXd rhs = (pht * e.asDiagonal()).transpose();
  Eigen::LDLT<Eigen::MatrixXd> ldlt(se);
  Eigen::MatrixXd sol;
  if (ldlt.info() == Eigen::Success) {
    sol = ldlt.solve(rhs);
  } else {
    // near-zero measurement noise leaves S at the edge of rank deficiency
    sol = se.completeOrthogonalDecomposition().solve(rhs);
  }
  if (!sol.allFinite()) throw std::domain_error("innovation covariance factorization failed");
  Eigen::MatrixXd k = sol.transpose() * e.asDiagonal();
  for (Eigen::Index i : frozen) k.row(i).setZero();
  return k;
}

// Joseph form stays valid for any gain, including one with frozen rows.
void joseph(Eigen::MatrixXd& cov, const Eigen::MatrixXd& k, const LinearizedRows& rows) {
  const Eigen::MatrixXd a = Eigen::MatrixXd::Identity(cov.rows(), cov.cols()) - k * rows.h;
  cov = condition_covariance(a * cov * a.transpose() + k * rows.r * k.transpose());
}

// Batch update when rows are frozen. Otherwise the rows are whitened with the
// Cholesky factor of R and applied one scalar at a time, all at the same
// linearization point. That is the batch update in exact arithmetic, and it
// stays well conditioned when R is tiny next to H P H^T. The batch S is then
// numerically rank deficient, for example when a 100 us clock prior meets
// sub-picosecond ToA noise.
void gain_update(Eigen::VectorXd& mean, Eigen::MatrixXd& cov, const LinearizedRows& rows,
                 const std::vector<Eigen::Index>& frozen = {}) {
  if (!frozen.empty()) {
    const Eigen::MatrixXd k = kalman_gain(cov, rows, frozen);
    mean += k * rows.innovation;
    joseph(cov, k, rows);
    return;
  }
  const Eigen::LLT<Eigen::MatrixXd> llt(rows.r);
  if (llt.info() != Eigen::Success) throw std::domain_error("measurement covariance is not positive definite");
  const Eigen::MatrixXd h = llt.matrixL().solve(rows.h);
  const Eigen::VectorXd y = llt.matrixL().solve(rows.innovation);
  const Eigen::VectorXd x0 = mean;
  const Eigen::Index n = cov.rows();
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    const Eigen::RowVectorXd hi = h.row(i);
    const Eigen::VectorXd pht = cov * hi.transpose();
    const double s = hi.dot(pht) + 1.0;
    const Eigen::VectorXd k = pht / s;
    mean += k * (y(i) - hi.dot(mean - x0));
    const Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n) - k * hi;
    cov = a * cov * a.transpose() + k * k.transpose();
    cov = 0.5 * (cov + cov.transpose());
  }
  cov = condition_covariance(cov);
}

Eigen::Matrix2d checked_covariance(const Measurement& m) {
  m.validate();
  return m.covariance;
}

// Azimuth-only rows for a state whose first two coordinates are (x, y).
LinearizedRows azimuth_rows(const Eigen::VectorXd& mean, const std::vector<Measurement>& meas, const AnTable& ans) {
  const auto k = static_cast<Eigen::Index>(meas.size());
  LinearizedRows rows{Eigen::VectorXd(k), Eigen::MatrixXd::Zero(k, mean.size()), Eigen::MatrixXd::Zero(k, k)};
  for (Eigen::Index i = 0; i < k; ++i) {
    const Measurement& m = meas[static_cast<std::size_t>(i)];
    const Eigen::Matrix2d r = checked_covariance(m);
    const Geometry g = geometry(mean(0), mean(1), lookup(ans, m.an_id));
    rows.innovation(i) = wrap_angle(m.azimuth - std::atan2(g.dy, g.dx));
    rows.h(i, 0) = -g.dy / (g.d * g.d);
    rows.h(i, 1) = g.dx / (g.d * g.d);
    rows.r(i, i) = r(0, 0);
  }
  return rows;
}

// Iterated update for bearings. A single linearization at a broad prior
// (the centroid fix) overshoots badly once the bearing noise is small, and the
// collapsed covariance then never recovers. Relinearize at the updated mean
// (Gauss-Newton on the MAP cost), halving a step until the cost drops.
void iterated_azimuth_update(Eigen::VectorXd& mean, Eigen::MatrixXd& cov, const std::vector<Measurement>& meas,
                             const AnTable& ans, const std::vector<Eigen::Index>& frozen = {}) {
  // One bearing only constrains the direction; relinearizing then slides the
  // mean toward the AN, where bearings are singular.
  if (meas.size() < 2) {
    gain_update(mean, cov, azimuth_rows(mean, meas, ans), frozen);
    return;
  }
  constexpr int kMaxIterations = 20;
  constexpr int kMaxHalvings = 40;
  const Eigen::VectorXd x0 = mean;
  const Eigen::LDLT<Eigen::MatrixXd> prior(cov);
  auto cost = [&](const Eigen::VectorXd& x, const LinearizedRows& rows) {
    const Eigen::VectorXd dx = x - x0;
    double c = dx.dot(prior.solve(dx));
    for (Eigen::Index i = 0; i < rows.innovation.size(); ++i) {
      c += rows.innovation(i) * rows.innovation(i) / rows.r(i, i);
    }
    return c;
  };

  Eigen::VectorXd x = x0;
  LinearizedRows rows = azimuth_rows(x, meas, ans);
  double best = cost(x, rows);
  for (int it = 0; it < kMaxIterations; ++it) {
    const Eigen::MatrixXd k = kalman_gain(cov, rows, frozen);
    // innovation of the linearization at x, referred back to the prior mean
    const Eigen::VectorXd target = x0 + k * (rows.innovation + rows.h * (x - x0));
    Eigen::VectorXd step = target - x;
    bool improved = false;
    for (int h = 0; h < kMaxHalvings && !improved; ++h, step *= 0.5) {
      const Eigen::VectorXd trial = x + step;
      LinearizedRows trial_rows;
      try {
        trial_rows = azimuth_rows(trial, meas, ans);
      } catch (const std::domain_error&) {
        continue;
      }
      const double c = cost(trial, trial_rows);
      if (c < best) {
        best = c;
        x = trial;
        rows = std::move(trial_rows);
        improved = true;
      }
    }
    if (!improved || step.norm() <= 1e-12 * (1.0 + x.norm())) break;
  }
  // covariance from the gain at the final linearization point
  mean = x;
  joseph(cov, kalman_gain(cov, rows, frozen), rows);
}

Eigen::Matrix2d cwna_block(double q, double dt) {
  Eigen::Matrix2d b;
  b << q * dt * dt * dt / 3.0, q * dt * dt / 2.0, q * dt * dt / 2.0, q * dt;
  return b;
}

// Zero the reference AN's row/column and mean.
void pin_reference(SyncFusionState& s) {
  if (auto idx = s.offset_index(s.reference_an)) {
    s.mean(*idx) = 0.0;
    s.cov.row(*idx).setZero();
    s.cov.col(*idx).setZero();
  }
}

}  // namespace

void FusionParams::validate() const {
  if (!(dt > 0.0)) throw std::invalid_argument("FusionParams: dt must be positive");
  if (!(sigma_v >= 0.0) || !(sigma_eta >= 0.0) || !(sigma_rho >= 0.0)) {
    throw std::invalid_argument("FusionParams: noise STDs must be non-negative");
  }
  if (!(std::abs(beta) <= 1.0)) throw std::invalid_argument("FusionParams: |beta| > 1");
  if (!(c > 0.0)) throw std::invalid_argument("FusionParams: c must be positive");
}

KinematicState UnFusionState::kinematics() const {
  return {mean.head<4>(), cov.topLeftCorner<4, 4>()};
}

SyncFusionState SyncFusionState::from_un(const UnFusionState& un, AnId reference, double time) {
  SyncFusionState s;
  s.mean = Eigen::VectorXd::Zero(7);
  s.mean.head<6>() = un.mean;
  s.cov = Eigen::MatrixXd::Zero(7, 7);
  s.cov.topLeftCorner<6, 6>() = un.cov;
  s.offset_ids = {reference};
  s.reference_an = reference;
  s.time = time;
  return s;
}

UnFusionState SyncFusionState::un() const {
  UnFusionState u;
  u.mean = mean.head<6>();
  u.cov = cov.topLeftCorner<6, 6>();
  return u;
}

std::optional<Eigen::Index> SyncFusionState::offset_index(AnId id) const {
  auto it = std::find(offset_ids.begin(), offset_ids.end(), id);
  if (it == offset_ids.end()) return std::nullopt;
  return 6 + static_cast<Eigen::Index>(it - offset_ids.begin());
}

std::optional<double> SyncFusionState::offset(AnId id) const {
  if (auto idx = offset_index(id)) return mean(*idx);
  return std::nullopt;
}

AnTable make_an_table(const std::vector<AnInfo>& ans) {
  AnTable t;
  for (const auto& a : ans) {
    if (!t.emplace(a.id, a).second) throw std::invalid_argument("duplicate AN id " + std::to_string(a.id));
  }
  return t;
}

Matrix6d un_transition(const FusionParams& p) {
  Matrix6d f = Matrix6d::Identity();
  f(0, 2) = p.dt;
  f(1, 3) = p.dt;
  f(4, 5) = p.dt;
  f(5, 5) = p.beta;
  return f;
}

Matrix6d un_process_noise(const FusionParams& p) {
  Matrix6d q = Matrix6d::Zero();
  q.topLeftCorner<4, 4>() = kinematic_process_noise(p);
  q.bottomRightCorner<2, 2>() = cwna_block(p.sigma_eta * p.sigma_eta, p.dt);
  return q;
}

Eigen::Matrix4d kinematic_transition(const FusionParams& p) {
  Eigen::Matrix4d f = Eigen::Matrix4d::Identity();
  f(0, 2) = p.dt;
  f(1, 3) = p.dt;
  return f;
}

Eigen::Matrix4d kinematic_process_noise(const FusionParams& p) {
  const Eigen::Matrix2d b = cwna_block(p.sigma_v * p.sigma_v, p.dt);
  Eigen::Matrix4d q = Eigen::Matrix4d::Zero();
  for (int axis = 0; axis < 2; ++axis) {
    q(axis, axis) = b(0, 0);
    q(axis, axis + 2) = b(0, 1);
    q(axis + 2, axis) = b(1, 0);
    q(axis + 2, axis + 2) = b(1, 1);
  }
  return q;
}

UnFusionState predict_pos_clock(const UnFusionState& state, const FusionParams& p) {
  p.validate();
  const Matrix6d f = un_transition(p);
  UnFusionState out;
  out.mean = f * state.mean;
  out.cov = condition_covariance(f * state.cov * f.transpose() + un_process_noise(p));
  return out;
}

KinematicState predict_kinematic(const KinematicState& state, const FusionParams& p) {
  p.validate();
  const Eigen::Matrix4d f = kinematic_transition(p);
  KinematicState out;
  out.mean = f * state.mean;
  out.cov = condition_covariance(f * state.cov * f.transpose() + kinematic_process_noise(p));
  return out;
}

Eigen::Vector2d measurement_model_pos_clock(const Vector6d& mean, const AnInfo& an, double c) {
  const Geometry g = geometry(mean(0), mean(1), an);
  return {wrap_to_two_pi(std::atan2(g.dy, g.dx)), g.d / c + mean(4)};
}

Eigen::MatrixXd jacobian_pos_clock(const Vector6d& mean, const std::vector<AnInfo>& ans, double c) {
  const auto k = static_cast<Eigen::Index>(ans.size());
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(2 * k, 6);
  for (Eigen::Index i = 0; i < k; ++i) {
    const Geometry g = geometry(mean(0), mean(1), ans[static_cast<std::size_t>(i)]);
    h(2 * i, 0) = -g.dy / (g.d * g.d);
    h(2 * i, 1) = g.dx / (g.d * g.d);
    h(2 * i + 1, 0) = g.dx / (c * g.d);
    h(2 * i + 1, 1) = g.dy / (c * g.d);
    h(2 * i + 1, 4) = 1.0;
  }
  return h;
}

UnFusionState update_pos_clock(const UnFusionState& state, const std::vector<Measurement>& meas, const AnTable& ans,
                               const FusionParams& p) {
  if (meas.empty()) throw std::invalid_argument("update_pos_clock: no measurements");
  const auto k = static_cast<Eigen::Index>(meas.size());
  std::vector<AnInfo> list;
  LinearizedRows rows{Eigen::VectorXd(2 * k), Eigen::MatrixXd(), Eigen::MatrixXd::Zero(2 * k, 2 * k)};
  for (Eigen::Index i = 0; i < k; ++i) {
    const Measurement& m = meas[static_cast<std::size_t>(i)];
    const AnInfo& an = lookup(ans, m.an_id);
    list.push_back(an);
    const Eigen::Vector2d pred = measurement_model_pos_clock(state.mean, an, p.c);
    rows.innovation(2 * i) = wrap_angle(m.azimuth - pred(0));
    rows.innovation(2 * i + 1) = m.toa - pred(1);
    rows.r.block<2, 2>(2 * i, 2 * i) = checked_covariance(m);
  }
  rows.h = jacobian_pos_clock(state.mean, list, p.c);

  Eigen::VectorXd mean = state.mean;
  Eigen::MatrixXd cov = state.cov;
  gain_update(mean, cov, rows);
  UnFusionState out;
  out.mean = mean;
  out.cov = cov;
  return out;
}

UnFusionState update_doa_only(const UnFusionState& state, const std::vector<Measurement>& meas, const AnTable& ans,
                              const FusionParams&) {
  if (meas.empty()) throw std::invalid_argument("update_doa_only: no measurements");
  Eigen::VectorXd mean = state.mean;
  Eigen::MatrixXd cov = state.cov;
  iterated_azimuth_update(mean, cov, meas, ans, {4, 5});
  UnFusionState out;
  out.mean = mean;
  out.cov = cov;
  return out;
}

KinematicState update_doa_only(const KinematicState& state, const std::vector<Measurement>& meas, const AnTable& ans,
                               const FusionParams&) {
  if (meas.empty()) throw std::invalid_argument("update_doa_only: no measurements");
  Eigen::VectorXd mean = state.mean;
  Eigen::MatrixXd cov = state.cov;
  iterated_azimuth_update(mean, cov, meas, ans);
  KinematicState out;
  out.mean = mean;
  out.cov = cov;
  return out;
}

SyncFusionState predict_pos_sync(const SyncFusionState& state, const FusionParams& p) {
  p.validate();
  const Eigen::Index n = state.mean.size();
  const Matrix6d f = un_transition(p);
  SyncFusionState out = state;
  out.mean.head<6>() = f * state.mean.head<6>();
  Eigen::MatrixXd c = state.cov;
  c.topRows<6>() = f * state.cov.topRows<6>();
  c.leftCols<6>() = c.leftCols<6>() * f.transpose();
  c.topLeftCorner<6, 6>() += un_process_noise(p);
  const double walk = p.sigma_rho * p.sigma_rho * p.dt;
  for (Eigen::Index i = 6; i < n; ++i) {
    if (state.offset_ids[static_cast<std::size_t>(i - 6)] != state.reference_an) c(i, i) += walk;
  }
  out.cov = condition_covariance(c);
  out.time = state.time + p.dt;
  pin_reference(out);
  return out;
}

Eigen::Vector2d measurement_model_pos_sync(const SyncFusionState& state, const AnInfo& an, double c) {
  const auto off = state.offset(an.id);
  if (!off) throw std::out_of_range("AN " + std::to_string(an.id) + " has no offset coordinate");
  Eigen::Vector2d h = measurement_model_pos_clock(state.mean.head<6>(), an, c);
  h(1) += *off;
  return h;
}

Eigen::MatrixXd jacobian_pos_sync(const SyncFusionState& state, const std::vector<AnInfo>& ans, double c) {
  const auto k = static_cast<Eigen::Index>(ans.size());
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(2 * k, state.mean.size());
  h.leftCols<6>() = jacobian_pos_clock(state.mean.head<6>(), ans, c);
  for (Eigen::Index i = 0; i < k; ++i) {
    const auto idx = state.offset_index(ans[static_cast<std::size_t>(i)].id);
    if (!idx) throw std::out_of_range("AN " + std::to_string(ans[static_cast<std::size_t>(i)].id) +
                                      " has no offset coordinate");
    h(2 * i + 1, *idx) = 1.0;
  }
  return h;
}

SyncFusionState update_pos_sync(const SyncFusionState& state, const std::vector<Measurement>& meas, const AnTable& ans,
                                const FusionParams& p) {
  if (meas.empty()) throw std::invalid_argument("update_pos_sync: no measurements");
  const auto k = static_cast<Eigen::Index>(meas.size());
  std::vector<AnInfo> list;
  LinearizedRows rows{Eigen::VectorXd(2 * k), Eigen::MatrixXd(), Eigen::MatrixXd::Zero(2 * k, 2 * k)};
  for (Eigen::Index i = 0; i < k; ++i) {
    const Measurement& m = meas[static_cast<std::size_t>(i)];
    const AnInfo& an = lookup(ans, m.an_id);
    list.push_back(an);
    const Eigen::Vector2d pred = measurement_model_pos_sync(state, an, p.c);
    rows.innovation(2 * i) = wrap_angle(m.azimuth - pred(0));
    rows.innovation(2 * i + 1) = m.toa - pred(1);
    rows.r.block<2, 2>(2 * i, 2 * i) = checked_covariance(m);
  }
  rows.h = jacobian_pos_sync(state, list, p.c);

  SyncFusionState out = state;
  gain_update(out.mean, out.cov, rows);
  pin_reference(out);
  return out;
}

SyncFusionState admit_an(const SyncFusionState& state, AnId id, double prior_offset_var, const FusionParams& p) {
  if (state.offset_index(id)) throw std::invalid_argument("AN " + std::to_string(id) + " already admitted");
  if (!(prior_offset_var >= 0.0)) throw std::invalid_argument("admit_an: negative prior variance");
  const Eigen::Index n = state.mean.size();
  SyncFusionState out = state;
  out.mean.conservativeResize(n + 1);
  out.cov.conservativeResize(n + 1, n + 1);
  out.cov.row(n).setZero();
  out.cov.col(n).setZero();
  out.offset_ids.push_back(id);

  double mean = 0.0, var = prior_offset_var;
  if (auto it = out.retired.find(id); it != out.retired.end()) {
    mean = it->second.mean;
    var = it->second.variance + p.sigma_rho * p.sigma_rho * std::max(0.0, state.time - it->second.time);
    out.retired.erase(it);
  }
  if (id == state.reference_an) mean = var = 0.0;
  out.mean(n) = mean;
  out.cov(n, n) = var;
  return out;
}

SyncFusionState retire_an(const SyncFusionState& state, AnId id) {
  const auto idx = state.offset_index(id);
  if (!idx) throw std::out_of_range("AN " + std::to_string(id) + " has no offset coordinate");
  if (id == state.reference_an) return state;
  const Eigen::Index n = state.mean.size();
  const Eigen::Index i = *idx;

  SyncFusionState out = state;
  out.retired[id] = {state.mean(i), state.cov(i, i), state.time};
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j != i) keep.push_back(j);
  }
  out.mean = state.mean(keep);
  out.cov = state.cov(keep, keep);
  out.offset_ids.erase(out.offset_ids.begin() + (i - 6));
  return out;
}

SyncFusionState sync_offsets(const SyncFusionState& state, const std::vector<AnId>& active, double prior_offset_var,
                             const FusionParams& p) {
  SyncFusionState out = state;
  const std::vector<AnId> current = state.offset_ids;
  for (AnId id : current) {
    if (id != state.reference_an && std::find(active.begin(), active.end(), id) == active.end()) {
      out = retire_an(out, id);
    }
  }
  for (AnId id : active) {
    if (!out.offset_index(id)) out = admit_an(out, id, prior_offset_var, p);
  }
  return out;
}

}  // namespace udnloc
