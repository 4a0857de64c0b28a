#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <vector>

#include "speckle/error.hpp"

namespace speckle::nn {

/// Per-sample activation shape (channels, height, width).
struct Shape3 {
  int c = 1;
  int h = 1;
  int w = 1;

  int size() const { return c * h * w; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// Numeric buffer with a fixed base alignment. Vectorised reductions peel a
/// scalar head up to the first aligned element, so a base address that varied
/// between allocations would change the summation order from run to run.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::string to_string(Shape3 s) {
  return std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

/// Batch of activations in NCHW order. resize() keeps capacity, so buffers
/// reused across calls stop allocating once they have seen the largest batch.
template <typename T>
struct Tensor {
  int n = 0;
  Shape3 shape{};
  Buffer<T> data;

  void resize(int batch, Shape3 s) {
    n = batch;
    shape = s;
    data.resize(static_cast<std::size_t>(batch) * s.size());
  }

  int sample_size() const { return shape.size(); }
  T* sample(int i) { return data.data() + static_cast<std::size_t>(i) * shape.size(); }
  const T* sample(int i) const { return data.data() + static_cast<std::size_t>(i) * shape.size(); }
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using VectorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

}  // namespace speckle::nn
