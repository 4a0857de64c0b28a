#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "speckle/error.hpp"

namespace speckle {

inline constexpr int kDefaultChannels = 43;

struct RoiShape {
  int height = 0;
  int width = 0;

  int pixels() const { return height * width; }
  friend bool operator==(const RoiShape&, const RoiShape&) = default;
};

struct PixelOffset {
  int row = 0;
  int col = 0;

  friend bool operator==(const PixelOffset&, const PixelOffset&) = default;
  friend PixelOffset operator+(PixelOffset a, PixelOffset b) { return {a.row + b.row, a.col + b.col}; }
};

inline std::string to_string(RoiShape s) { return std::to_string(s.height) + "x" + std::to_string(s.width); }

/// Non-negative intensity per wavelength channel.
class Spectrum {
 public:
  Spectrum() = default;
  explicit Spectrum(Eigen::VectorXd values) : values_(std::move(values)) {
    for (Eigen::Index i = 0; i < values_.size(); ++i) {
      require(std::isfinite(values_[i]), ErrorCode::kNonFinite, "spectrum channel " + std::to_string(i));
      require(values_[i] >= 0.0, ErrorCode::kInvalidArgument,
              "spectrum channel " + std::to_string(i) + " is negative");
    }
  }

  // Clamps negatives to zero instead of rejecting them; used for reconstructions.
  static Spectrum clamped(Eigen::VectorXd values) {
    values = values.cwiseMax(0.0);
    return Spectrum(std::move(values));
  }

  static Spectrum zeros(int n) { return Spectrum(Eigen::VectorXd::Zero(n)); }

  int size() const { return static_cast<int>(values_.size()); }
  double operator[](int i) const { return values_[i]; }
  const Eigen::VectorXd& values() const { return values_; }

  // Count of non-zero channels (N_lambda).
  int support_size() const { return static_cast<int>((values_.array() != 0.0).count()); }

  friend bool operator==(const Spectrum& a, const Spectrum& b) {
    return a.values_.size() == b.values_.size() && (a.values_.array() == b.values_.array()).all();
  }

 private:
  Eigen::VectorXd values_;
};

/// Monochrome ROI intensities, stored row-major (pixel index = row * width + col).
class SpeckleImage {
 public:
  SpeckleImage() = default;
  SpeckleImage(RoiShape shape, Eigen::VectorXd pixels, PixelOffset origin = {})
      : shape_(shape), origin_(origin), pixels_(std::move(pixels)) {
    require(shape.height > 0 && shape.width > 0, ErrorCode::kInvalidArgument,
            "image shape must be positive, got " + to_string(shape));
    require(pixels_.size() == shape.pixels(), ErrorCode::kDimensionMismatch,
            "image has " + std::to_string(pixels_.size()) + " pixels, shape " + to_string(shape) +
                " needs " + std::to_string(shape.pixels()));
    require(pixels_.allFinite(), ErrorCode::kNonFinite, "image pixels");
    require((pixels_.array() >= 0.0).all(), ErrorCode::kInvalidArgument, "image pixels must be non-negative");
  }

  RoiShape shape() const { return shape_; }
  PixelOffset origin() const { return origin_; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  int size() const { return shape_.pixels(); }
  double at(int row, int col) const { return pixels_[row * shape_.width + col]; }
  const Eigen::VectorXd& pixels() const { return pixels_; }
  double mean() const { return pixels_.size() ? pixels_.mean() : 0.0; }

  friend bool operator==(const SpeckleImage& a, const SpeckleImage& b) {
    return a.shape_ == b.shape_ && a.origin_ == b.origin_ && (a.pixels_.array() == b.pixels_.array()).all();
  }

 private:
  RoiShape shape_{};
  PixelOffset origin_{};
  Eigen::VectorXd pixels_;
};

inline std::vector<std::string> default_wavelength_labels(int n_channels) {
  std::vector<std::string> labels;
  labels.reserve(n_channels);
  for (int j = 0; j < n_channels; ++j) labels.push_back("ch" + std::to_string(j));
  return labels;
}

/// X x Y map from wavelength channels to ROI pixels; column j is the
/// vectorized speckle pattern of channel j.
class TransmissionMatrix {
 public:
  TransmissionMatrix() = default;
  TransmissionMatrix(Eigen::MatrixXd columns, RoiShape roi, std::vector<std::string> labels = {})
      : columns_(std::move(columns)), roi_(roi), labels_(std::move(labels)) {
    require(roi.height > 0 && roi.width > 0, ErrorCode::kInvalidArgument, "roi shape " + to_string(roi));
    require(columns_.rows() == roi.pixels(), ErrorCode::kDimensionMismatch,
            "matrix has " + std::to_string(columns_.rows()) + " rows, roi " + to_string(roi) + " has " +
                std::to_string(roi.pixels()) + " pixels");
    require(columns_.cols() >= 1, ErrorCode::kInvalidArgument, "matrix needs at least one channel");
    require(columns_.allFinite(), ErrorCode::kNonFinite, "transmission matrix");
    require((columns_.array() >= 0.0).all(), ErrorCode::kInvalidArgument,
            "transmission matrix entries must be non-negative");
    if (labels_.empty()) labels_ = default_wavelength_labels(channels());
    require(static_cast<int>(labels_.size()) == channels(), ErrorCode::kDimensionMismatch,
            std::to_string(labels_.size()) + " labels for " + std::to_string(channels()) + " channels");
  }

  int pixels() const { return static_cast<int>(columns_.rows()); }
  int channels() const { return static_cast<int>(columns_.cols()); }
  RoiShape roi_shape() const { return roi_; }
  const Eigen::MatrixXd& columns() const { return columns_; }
  const std::vector<std::string>& wavelength_labels() const { return labels_; }

  SpeckleImage column_image(int channel) const { return SpeckleImage(roi_, columns_.col(channel)); }

  friend bool operator==(const TransmissionMatrix& a, const TransmissionMatrix& b) {
    return a.roi_ == b.roi_ && a.labels_ == b.labels_ && a.columns_.rows() == b.columns_.rows() &&
           a.columns_.cols() == b.columns_.cols() && (a.columns_.array() == b.columns_.array()).all();
  }

 private:
  Eigen::MatrixXd columns_;
  RoiShape roi_{};
  std::vector<std::string> labels_;
};

/// Pixels per wavelength channel, X / Y. Values above 1 are oversampled.
class SamplingRatio {
 public:
  SamplingRatio(int pixels, int channels) : value_(static_cast<double>(pixels) / channels) {
    require(pixels > 0 && channels > 0, ErrorCode::kInvalidArgument, "sampling ratio needs positive counts");
  }
  explicit SamplingRatio(const TransmissionMatrix& a) : SamplingRatio(a.pixels(), a.channels()) {}

  double value() const { return value_; }
  bool oversampled() const { return value_ > 1.0; }

 private:
  double value_;
};

/// Forward model: image = reshape(A * s).
inline SpeckleImage render_speckle(const TransmissionMatrix& a, const Spectrum& s) {
  require(s.size() == a.channels(), ErrorCode::kDimensionMismatch,
          "spectrum length " + std::to_string(s.size()) + " != matrix channels " + std::to_string(a.channels()));
  Eigen::VectorXd pixels = a.columns() * s.values();
  // Products of non-negative values can only produce -0.0; normalize it away.
  pixels = pixels.cwiseMax(0.0);
  return SpeckleImage(a.roi_shape(), std::move(pixels));
}

inline void check_window(RoiShape frame, PixelOffset origin, RoiShape shape) {
  const bool inside = origin.row >= 0 && origin.col >= 0 && shape.height > 0 && shape.width > 0 &&
                      origin.row + shape.height <= frame.height && origin.col + shape.width <= frame.width;
  require(inside, ErrorCode::kOutOfBounds,
          "window " + to_string(shape) + " at (" + std::to_string(origin.row) + "," + std::to_string(origin.col) +
              ") exceeds frame " + to_string(frame));
}

/// Row indices (into a row-major frame vector) of the pixels covered by a window.
inline std::vector<int> window_indices(RoiShape frame, PixelOffset origin, RoiShape shape) {
  check_window(frame, origin, shape);
  std::vector<int> idx;
  idx.reserve(shape.pixels());
  for (int r = 0; r < shape.height; ++r)
    for (int c = 0; c < shape.width; ++c) idx.push_back((origin.row + r) * frame.width + origin.col + c);
  return idx;
}

inline SpeckleImage crop_roi(const SpeckleImage& frame, PixelOffset origin, RoiShape shape) {
  const auto idx = window_indices(frame.shape(), origin, shape);
  Eigen::VectorXd pixels(shape.pixels());
  for (int i = 0; i < shape.pixels(); ++i) pixels[i] = frame.pixels()[idx[i]];
  return SpeckleImage(shape, std::move(pixels), origin);
}

/// Transmission matrix of a sub-window: the rows of A covered by the window.
inline TransmissionMatrix crop_matrix(const TransmissionMatrix& a, PixelOffset origin, RoiShape shape) {
  const auto idx = window_indices(a.roi_shape(), origin, shape);
  Eigen::MatrixXd cols(shape.pixels(), a.channels());
  for (int i = 0; i < shape.pixels(); ++i) cols.row(i) = a.columns().row(idx[i]);
  return TransmissionMatrix(std::move(cols), shape, a.wavelength_labels());
}

/// Window of the given shape centred in a frame (rounding toward the top-left).
inline PixelOffset centered_origin(RoiShape frame, RoiShape shape) {
  return {(frame.height - shape.height) / 2, (frame.width - shape.width) / 2};
}

}  // namespace speckle
