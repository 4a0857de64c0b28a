#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <utility>
#include <algorithm>
#include <string>
#include <vector>

#include "speckle/core.hpp"
#include "speckle/metrics.hpp"
#include "speckle/parallel.hpp"
#include "speckle/rng.hpp"

namespace speckle {

/// Random-mode-superposition model of one multimode fiber core.
///
/// Each guided mode k has a real spatial profile (a product of two
/// low-order cosine harmonics inside a circular aperture), a complex
/// Gaussian amplitude and a propagation constant. The propagation constants
/// are Gaussian with standard deviation 1 / decorrelation_length, which
/// makes the expected intensity correlation between channels j and j + d
/// equal to exp(-(d / decorrelation_length)^2).
struct FiberModel {
  int n_modes = 64;
  // Aperture radius in ROI pixels; <= 0 selects a radius that covers the ROI.
  double core_radius_px = 0.0;
  double decorrelation_length = 1.0;
  std::uint64_t seed = 0;
};

inline void validate(const FiberModel& m) {
  require(m.n_modes >= 1, ErrorCode::kInvalidArgument, "n_modes must be >= 1, got " + std::to_string(m.n_modes));
  require(m.decorrelation_length > 0.0 && std::isfinite(m.decorrelation_length), ErrorCode::kInvalidArgument,
          "decorrelation_length must be positive");
  require(std::isfinite(m.core_radius_px), ErrorCode::kInvalidArgument, "core_radius_px must be finite");
}

inline double effective_core_radius(const FiberModel& m, RoiShape roi) {
  if (m.core_radius_px > 0.0) return m.core_radius_px;
  return 0.5 * std::hypot(roi.height, roi.width) + 0.5;
}

/// The n lowest-order harmonic index pairs (order_y, order_x), sorted by
/// order_y^2 + order_x^2 like the cutoff ordering of guided modes.
inline std::vector<std::pair<int, int>> lowest_order_modes(int n) {
  int reach = 1;
  while ((reach + 1) * (reach + 1) < 2 * n) ++reach;
  std::vector<std::pair<int, int>> all;
  for (int my = 0; my <= reach; ++my)
    for (int mx = 0; mx <= reach; ++mx) all.emplace_back(my, mx);
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.first * a.first + a.second * a.second < b.first * b.first + b.second * b.second;
  });
  all.resize(static_cast<std::size_t>(n));
  return all;
}

inline TransmissionMatrix generate_fiber(const FiberModel& model, RoiShape roi, int n_channels) {
  validate(model);
  require(roi.height > 0 && roi.width > 0, ErrorCode::kInvalidArgument, "roi shape " + to_string(roi));
  require(n_channels >= 2, ErrorCode::kInvalidArgument, "n_channels must be >= 2");
  const int x = roi.pixels();
  require(model.n_modes <= x, ErrorCode::kInvalidArgument,
          "n_modes " + std::to_string(model.n_modes) + " exceeds ROI pixel count " + std::to_string(x) +
              " (underdetermined mode basis)");

  Rng rng(model.seed);
  const double radius = effective_core_radius(model, roi);
  const auto orders = lowest_order_modes(model.n_modes);
  const double cy = 0.5 * (roi.height - 1);
  const double cx = 0.5 * (roi.width - 1);
  // Order m has m half-periods across the core radius.
  const double k_unit = std::numbers::pi / (2.0 * radius);

  Eigen::MatrixXd profiles(x, model.n_modes);
  Eigen::VectorXcd amplitudes(model.n_modes);
  Eigen::VectorXd beta(model.n_modes);
  for (int k = 0; k < model.n_modes; ++k) {
    const double phase_y = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double phase_x = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double ky = orders[k].first * k_unit;
    const double kx = orders[k].second * k_unit;
    for (int r = 0; r < roi.height; ++r) {
      for (int c = 0; c < roi.width; ++c) {
        const double dy = r - cy;
        const double dx = c - cx;
        const bool inside = dy * dy + dx * dx <= radius * radius;
        profiles(r * roi.width + c, k) = inside ? std::cos(ky * dy + phase_y) * std::cos(kx * dx + phase_x) : 0.0;
      }
    }
    const double re = rng.normal();
    const double im = rng.normal();
    amplitudes[k] = std::complex<double>(re, im) * (1.0 / std::numbers::sqrt2);
    beta[k] = rng.normal() / model.decorrelation_length;
  }

  Eigen::MatrixXd columns(x, n_channels);
  Eigen::VectorXcd weights(model.n_modes);
  for (int j = 0; j < n_channels; ++j) {
    for (int k = 0; k < model.n_modes; ++k) weights[k] = amplitudes[k] * std::polar(1.0, beta[k] * j);
    const Eigen::VectorXcd field = profiles.cast<std::complex<double>>() * weights;
    columns.col(j) = field.cwiseAbs2();
    const double mean = columns.col(j).mean();
    require(mean > 0.0, ErrorCode::kSingularSystem, "channel " + std::to_string(j) + " has no transmitted light");
    columns.col(j) /= mean;
  }
  return TransmissionMatrix(std::move(columns), roi);
}

struct GridLayout {
  int rows = 1;
  int cols = 1;
};

/// Array of fiber cores tiled on a grid; fiber p sits at row p / cols, column p % cols.
struct FiberArrayModel {
  std::vector<TransmissionMatrix> fibers;
  GridLayout grid;

  int size() const { return static_cast<int>(fibers.size()); }
  int channels() const { return fibers.empty() ? 0 : fibers.front().channels(); }
  RoiShape roi_shape() const { return fibers.empty() ? RoiShape{} : fibers.front().roi_shape(); }
  RoiShape frame_shape() const {
    const auto roi = roi_shape();
    return {grid.rows * roi.height, grid.cols * roi.width};
  }
  PixelOffset fiber_origin(int p) const {
    const auto roi = roi_shape();
    return {(p / grid.cols) * roi.height, (p % grid.cols) * roi.width};
  }
};

inline GridLayout square_grid(int n) {
  const int rows = std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(n)))));
  return {rows, (n + rows - 1) / rows};
}

inline void validate(const FiberArrayModel& array) {
  require(!array.fibers.empty(), ErrorCode::kInvalidArgument, "fiber array is empty");
  require(array.grid.rows * array.grid.cols >= array.size(), ErrorCode::kDimensionMismatch,
          "grid too small for the fibers");
  for (const auto& f : array.fibers) {
    require(f.channels() == array.channels() && f.roi_shape() == array.roi_shape(), ErrorCode::kDimensionMismatch,
            "all fibers must share channel count and ROI shape");
  }
}

inline FiberArrayModel generate_array(Rng& rng, int n_fibers, const FiberModel& model_template, RoiShape roi,
                                      int n_channels, int threads = 1) {
  require(n_fibers >= 1, ErrorCode::kInvalidArgument, "n_fibers must be >= 1");
  validate(model_template);
  std::vector<FiberModel> models(n_fibers, model_template);
  for (auto& m : models) m.seed = rng.split().next_u64();
  FiberArrayModel array;
  array.fibers.resize(n_fibers);
  array.grid = square_grid(n_fibers);
  parallel_for(static_cast<std::size_t>(n_fibers), threads,
               [&](std::size_t i) { array.fibers[i] = generate_fiber(models[i], roi, n_channels); });
  return array;
}

/// Entry d: mean over j of corr(column j, column j + d), for d = 0 .. Y-1.
inline std::vector<double> spectral_correlation(const TransmissionMatrix& a) {
  const int y = a.channels();
  std::vector<double> curve(y, 0.0);
  for (int d = 0; d < y; ++d) {
    double sum = 0.0;
    for (int j = 0; j + d < y; ++j) sum += pearson(a.columns().col(j), a.columns().col(j + d));
    curve[d] = sum / (y - d);
  }
  return curve;
}

}  // namespace speckle
