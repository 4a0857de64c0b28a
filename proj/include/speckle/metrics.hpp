#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <string>

#include "speckle/core.hpp"

namespace speckle {

/// Pearson correlation with the conventions used throughout the benchmarks:
/// two constant vectors correlate 1 if equal and 0 otherwise; a constant
/// vector against a varying one correlates 0.
template <typename A, typename B>
double pearson(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  require(a.size() == b.size(), ErrorCode::kDimensionMismatch,
          "lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  require(a.size() >= 2, ErrorCode::kInvalidArgument, "correlation needs at least two entries");
  const double ma = a.mean();
  const double mb = b.mean();
  const auto da = (a.array() - ma).matrix();
  const auto db = (b.array() - mb).matrix();
  const double va = da.squaredNorm();
  const double vb = db.squaredNorm();
  const bool const_a = (a.array() == a(0)).all();
  const bool const_b = (b.array() == b(0)).all();
  if (const_a && const_b) return (a.array() == b.array()).all() ? 1.0 : 0.0;
  if (const_a || const_b) return 0.0;
  const double r = da.dot(db) / std::sqrt(va * vb);
  return std::clamp(r, -1.0, 1.0);
}

inline double cross_correlation(const Spectrum& s, const Spectrum& t) { return pearson(s.values(), t.values()); }

}  // namespace speckle
