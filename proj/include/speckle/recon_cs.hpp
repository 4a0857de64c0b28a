#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "speckle/core.hpp"
#include "speckle/io.hpp"
#include "speckle/metrics.hpp"
#include "speckle/synth.hpp"

namespace speckle {

struct CsOptions {
  std::optional<double> gamma;  // L1 weight; unset selects 0.01 * ||A^T m||_inf
  int max_iters = 5000;
  double rel_tol = 1e-6;
  std::optional<double> lipschitz;  // precomputed largest eigenvalue of A^T A
  bool record_objective = false;
};

inline void validate(const CsOptions& o) {
  require(o.max_iters >= 1, ErrorCode::kInvalidArgument, "max_iters must be >= 1");
  require(o.rel_tol > 0.0, ErrorCode::kInvalidArgument, "rel_tol must be > 0");
  if (o.gamma) require(*o.gamma >= 0.0 && std::isfinite(*o.gamma), ErrorCode::kInvalidArgument, "gamma must be >= 0");
  if (o.lipschitz) require(*o.lipschitz > 0.0, ErrorCode::kInvalidArgument, "lipschitz bound must be > 0");
}

/// Largest eigenvalue of A^T A by power iteration.
inline double lipschitz_bound(const Eigen::MatrixXd& a, double rel_tol = 1e-6) {
  const Eigen::Index n = a.cols();
  require(n > 0 && a.size() > 0, ErrorCode::kInvalidArgument, "empty matrix");
  require(a.cwiseAbs().maxCoeff() > 0.0, ErrorCode::kInvalidArgument, "zero matrix has no step size");
  // Start off-axis so no eigenvector is missed for structured inputs.
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = 1.0 + 0.5 * static_cast<double>(i + 1) / static_cast<double>(n);
  v.normalize();
  double estimate = 0.0;
  // Iterate to a tolerance well below the requested one: the change between
  // successive Rayleigh quotients underestimates the remaining error.
  const double inner_tol = rel_tol * 1e-3;
  for (int it = 0; it < 100000; ++it) {
    Eigen::VectorXd w = a.transpose() * (a * v);
    const double next = v.dot(w);
    const double norm = w.norm();
    if (norm == 0.0) fail(ErrorCode::kInvalidArgument, "start vector is in the null space");
    v = w / norm;
    if (it > 0 && std::abs(next - estimate) <= inner_tol * std::abs(next)) return next;
    estimate = next;
  }
  return estimate;
}

inline double lipschitz_bound(const TransmissionMatrix& a) { return lipschitz_bound(a.columns()); }

inline double default_gamma(const Eigen::MatrixXd& a, const Eigen::VectorXd& m) {
  return 0.01 * (a.transpose() * m).cwiseAbs().maxCoeff();
}

struct CsResult {
  Spectrum spectrum;
  int iterations = 0;
  bool converged = false;  // true: rel_tol reached; false: stopped at max_iters
  double gamma = 0.0;
  double objective = 0.0;
  std::vector<double> objective_history;  // filled when record_objective is set
};

inline double cs_objective(const Eigen::VectorXd& residual, const Eigen::VectorXd& s, double gamma) {
  return 0.5 * residual.squaredNorm() + gamma * s.sum();
}

/// Minimises 0.5 ||A s - m||^2 + gamma ||s||_1 over s >= 0 with FISTA.
///
/// The proximal step is the non-negative soft threshold max(v - gamma / L, 0).
/// Momentum is reset whenever a step would increase the objective, and the
/// step is then redone from the last accepted iterate, so the accepted
/// objective values never increase.
inline CsResult solve_cs(const Eigen::MatrixXd& a, const Eigen::VectorXd& m, const CsOptions& opts,
                         const Eigen::VectorXd* warm_start = nullptr) {
  validate(opts);
  require(m.size() == a.rows(), ErrorCode::kDimensionMismatch,
          "image has " + std::to_string(m.size()) + " pixels, matrix has " + std::to_string(a.rows()) + " rows");
  require(m.allFinite() && a.allFinite(), ErrorCode::kNonFinite, "compressive sensing input");
  const Eigen::Index n = a.cols();
  const double lip = opts.lipschitz ? *opts.lipschitz : lipschitz_bound(a);
  const double gamma = opts.gamma ? *opts.gamma : default_gamma(a, m);
  const double step = 1.0 / lip;
  const double shrink = gamma * step;

  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  if (warm_start) {
    require(warm_start->size() == n, ErrorCode::kDimensionMismatch, "warm start length");
    x = warm_start->cwiseMax(0.0);
  }
  Eigen::VectorXd ax = a * x;
  double fx = cs_objective(ax - m, x, gamma);
  Eigen::VectorXd y = x;
  Eigen::VectorXd ay = ax;
  Eigen::VectorXd z(n), az(a.rows());
  double t = 1.0;

  const auto prox_step = [&](const Eigen::VectorXd& from, const Eigen::VectorXd& a_from) {
    z = (from - step * (a.transpose() * (a_from - m))).array() - shrink;
    z = z.cwiseMax(0.0);
    az.noalias() = a * z;
    return cs_objective(az - m, z, gamma);
  };

  CsResult result;
  result.gamma = gamma;
  if (opts.record_objective) result.objective_history.push_back(fx);
  int it = 0;
  for (; it < opts.max_iters; ++it) {
    double fz = prox_step(y, ay);
    if (fz > fx) {
      t = 1.0;
      fz = prox_step(x, ax);
      if (fz > fx) {
        // Rounding-level increase from the plain gradient step: x is a fixed point.
        result.converged = true;
        break;
      }
    }
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    const double momentum = (t - 1.0) / t_next;
    const double change = (z - x).norm() / std::max(z.norm(), std::numeric_limits<double>::min());
    y = z + momentum * (z - x);
    ay = az + momentum * (az - ax);
    x.swap(z);
    ax.swap(az);
    fx = fz;
    t = t_next;
    if (opts.record_objective) result.objective_history.push_back(fx);
    if (change < opts.rel_tol) {
      result.converged = true;
      ++it;
      break;
    }
  }
  result.iterations = it;
  result.objective = fx;
  result.spectrum = Spectrum::clamped(std::move(x));
  return result;
}

inline CsResult solve_cs(const TransmissionMatrix& a, const SpeckleImage& image, const CsOptions& opts) {
  require(image.size() == a.pixels(), ErrorCode::kDimensionMismatch,
          "image has " + std::to_string(image.size()) + " pixels, matrix has " + std::to_string(a.pixels()));
  return solve_cs(a.columns(), image.pixels(), opts);
}

/// Gamma grid scaled to the data: 0 plus seven decades around the mean
/// default gamma of the validation images.
inline std::vector<double> default_gamma_grid(const TransmissionMatrix& a, std::span<const Sample> validation) {
  require(!validation.empty(), ErrorCode::kInvalidArgument, "validation set is empty");
  double center = 0.0;
  for (const auto& s : validation) center += default_gamma(a.columns(), s.image.pixels());
  center /= static_cast<double>(validation.size());
  std::vector<double> grid{0.0};
  for (int k = -4; k <= 2; ++k) grid.push_back(center * std::pow(10.0, k));
  return grid;
}

/// Grid gamma with the best mean cross-correlation; ties go to the larger gamma.
inline double select_gamma(const TransmissionMatrix& a, std::span<const Sample> validation, std::vector<double> grid,
                           CsOptions base = {}) {
  require(!grid.empty(), ErrorCode::kInvalidArgument, "gamma grid is empty");
  require(!validation.empty(), ErrorCode::kInvalidArgument, "validation set is empty");
  std::sort(grid.begin(), grid.end());
  if (!base.lipschitz) base.lipschitz = lipschitz_bound(a);
  double best_gamma = grid.front();
  double best_score = -std::numeric_limits<double>::infinity();
  for (const double gamma : grid) {
    CsOptions o = base;
    o.gamma = gamma;
    double sum = 0.0;
    for (const auto& s : validation) sum += cross_correlation(solve_cs(a, s.image, o).spectrum, s.label);
    const double score = sum / static_cast<double>(validation.size());
    if (score >= best_score) {
      best_score = score;
      best_gamma = gamma;
    }
  }
  return best_gamma;
}

}  // namespace speckle
