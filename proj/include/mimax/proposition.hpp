#pragma once

// Alternating block-ascent on L(theta, xi) = J(theta, xi) - M(theta, xi),
// where J is a concave quadratic the updates can see and M is a small
// unseen perturbation with ||grad M|| <= eps.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <vector>

#include "mimax/errors.hpp"
#include "mimax/rng.hpp"

namespace mimax {

enum class BlockUpdate {
  kExact,     // exact maximization of J over the active block
  kGradient,  // one gradient ascent step of size 1 / lambda_max on J
  kJoint,     // both blocks move together (shared-parameter ascent)
};

struct QuadraticSpec {
  std::size_t dim_theta = 2;
  std::size_t dim_xi = 2;
  Eigen::MatrixXd q;  // J(w) = -0.5 w^T q w + b^T w, w = (theta, xi)
  Eigen::VectorXd b;
  Eigen::VectorXd u;  // M(w) = eps * sin(u^T w), ||u|| <= 1
  double epsilon = 0.0;
  Eigen::VectorXd w0;
  std::size_t iterations = 50;

  std::size_t dim() const { return dim_theta + dim_xi; }

  double objective(const Eigen::VectorXd& w) const {
    return -0.5 * w.dot(q * w) + b.dot(w) - epsilon * std::sin(u.dot(w));
  }
};

struct PropositionReport {
  double epsilon = 0.0;
  std::vector<double> values;      // L after every half-step, starting at w0
  double max_violation = 0.0;      // max over half-steps of L_before - L_after
  double measured_c = 0.0;         // max_violation / eps (0 when eps == 0)
  bool monotone = true;            // no half-step lowered L beyond rounding
  bool strictly_increasing = true; // every half-step raised L until converged

  bool within(double c) const {
    return max_violation <= c * epsilon + 1e-12;
  }
};

/// Random spec: q = A A^T + dim * I (well conditioned, positive definite).
inline QuadraticSpec random_quadratic_spec(Rng& rng, double epsilon,
                                           std::size_t dim_theta = 2,
                                           std::size_t dim_xi = 2) {
  QuadraticSpec s;
  s.dim_theta = dim_theta;
  s.dim_xi = dim_xi;
  const auto n = static_cast<Eigen::Index>(s.dim());
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = rng.normal();
  s.q = a * a.transpose() +
        static_cast<double>(n) * Eigen::MatrixXd::Identity(n, n);
  s.b = Eigen::VectorXd(n);
  s.u = Eigen::VectorXd(n);
  s.w0 = Eigen::VectorXd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.b(i) = 3.0 * rng.normal();
    s.u(i) = rng.normal();
    s.w0(i) = 3.0 * rng.normal();
  }
  s.u *= rng.uniform() / s.u.norm();
  s.epsilon = epsilon;
  return s;
}

/// Runs the alternating scheme and measures how far L can fall per half-step.
inline PropositionReport verify_block_coordinate_proposition(
    const QuadraticSpec& s, BlockUpdate mode = BlockUpdate::kExact) {
  const auto n = static_cast<Eigen::Index>(s.dim());
  const auto nt = static_cast<Eigen::Index>(s.dim_theta);
  const auto nx = static_cast<Eigen::Index>(s.dim_xi);
  if (s.dim_theta == 0 || s.dim_xi == 0 || s.q.rows() != n || s.q.cols() != n ||
      s.b.size() != n || s.u.size() != n || s.w0.size() != n) {
    throw DimensionError("quadratic spec dimensions are inconsistent");
  }
  if (!(s.epsilon >= 0.0)) throw ConfigError("epsilon must be >= 0");
  if (s.u.norm() > 1.0 + 1e-12) {
    throw ConfigError("perturbation direction must have norm <= 1");
  }
  if (!s.q.isApprox(s.q.transpose(), 1e-12)) {
    throw ConfigError("quadratic form must be symmetric");
  }
  const Eigen::LLT<Eigen::MatrixXd> llt(s.q);
  if (llt.info() != Eigen::Success) {
    throw ConfigError("J is not strictly concave (q is not positive definite)");
  }

  const Eigen::MatrixXd qtt = s.q.topLeftCorner(nt, nt);
  const Eigen::MatrixXd qxx = s.q.bottomRightCorner(nx, nx);
  const Eigen::LLT<Eigen::MatrixXd> llt_t(qtt), llt_x(qxx);
  const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(
                          s.q, Eigen::EigenvaluesOnly)
                          .eigenvalues()
                          .maxCoeff();
  const double lmax_t =
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(qtt, Eigen::EigenvaluesOnly)
          .eigenvalues()
          .maxCoeff();
  const double lmax_x =
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(qxx, Eigen::EigenvaluesOnly)
          .eigenvalues()
          .maxCoeff();

  PropositionReport r;
  r.epsilon = s.epsilon;
  Eigen::VectorXd w = s.w0;
  r.values.push_back(s.objective(w));

  auto half_step = [&](bool theta_block) {
    const Eigen::VectorXd grad = s.b - s.q * w;  // grad of J only
    double min_gain;
    if (mode == BlockUpdate::kJoint) {
      min_gain = grad.squaredNorm() / (2.0 * lmax);
    } else if (theta_block) {
      min_gain = grad.head(nt).squaredNorm() / (2.0 * lmax_t);
    } else {
      min_gain = grad.tail(nx).squaredNorm() / (2.0 * lmax_x);
    }
    if (mode == BlockUpdate::kJoint) {
      w += grad / lmax;
    } else if (theta_block) {
      if (mode == BlockUpdate::kExact) {
        w.head(nt) = llt_t.solve(s.b.head(nt) -
                                 s.q.topRightCorner(nt, nx) * w.tail(nx));
      } else {
        w.head(nt) += grad.head(nt) / lmax_t;
      }
    } else {
      if (mode == BlockUpdate::kExact) {
        w.tail(nx) = llt_x.solve(s.b.tail(nx) -
                                 s.q.bottomLeftCorner(nx, nt) * w.head(nt));
      } else {
        w.tail(nx) += grad.tail(nx) / lmax_x;
      }
    }
    const double before = r.values.back();
    const double after = s.objective(w);
    r.values.push_back(after);
    const double tol = 1e-12 * std::max(1.0, std::abs(before));
    r.max_violation = std::max(r.max_violation, before - after);
    if (before - after > tol) r.monotone = false;
    // Guaranteed ascent of J on this half-step is at least |g|^2 / (2 L);
    // only a stall where that bound clears rounding counts as non-strict.
    if (after - before <= tol && min_gain > 10.0 * tol) {
      r.strictly_increasing = false;
    }
  };

  for (std::size_t k = 0; k < s.iterations; ++k) {
    half_step(true);
    half_step(false);
  }
  r.measured_c = s.epsilon > 0.0 ? r.max_violation / s.epsilon : 0.0;
  return r;
}

}  // namespace mimax
