#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "speckle/core.hpp"
#include "speckle/io.hpp"
#include "speckle/metrics.hpp"
#include "speckle/synth.hpp"

namespace speckle {

/// Precomputed Tikhonov inverse (A^T A + lambda I)^-1 A^T for one fiber.
struct LinearReconstructor {
  Eigen::MatrixXd pinv;  // Y x X
  double lambda = 0.0;
  std::uint64_t source_matrix_id = 0;

  int channels() const { return static_cast<int>(pinv.rows()); }
  int pixels() const { return static_cast<int>(pinv.cols()); }
};

inline double default_lambda(const TransmissionMatrix& a) {
  return 1e-3 * a.columns().squaredNorm() / a.channels();  // trace(A^T A) = ||A||_F^2
}

/// Nine decades of lambda centred on the default.
inline std::vector<double> default_lambda_grid(const TransmissionMatrix& a) {
  const double center = default_lambda(a);
  std::vector<double> grid;
  for (int k = -4; k <= 4; ++k) grid.push_back(center * std::pow(10.0, k));
  return grid;
}

inline LinearReconstructor fit_tikhonov(const TransmissionMatrix& a, double lambda) {
  require(lambda >= 0.0 && std::isfinite(lambda), ErrorCode::kInvalidArgument,
          "lambda must be finite and >= 0, got " + io::format_double(lambda));
  const Eigen::MatrixXd& cols = a.columns();
  Eigen::MatrixXd gram = cols.transpose() * cols;
  gram.diagonal().array() += lambda;
  const Eigen::LLT<Eigen::MatrixXd> llt(gram);
  const Eigen::MatrixXd at = cols.transpose();
  const auto singular = [&] {
    fail(ErrorCode::kSingularSystem,
         "A^T A is singular at lambda = " + io::format_double(lambda) + "; use lambda > 0");
  };
  if (llt.info() != Eigen::Success) singular();
  if (lambda == 0.0 && llt.rcond() < 1e3 * std::numeric_limits<double>::epsilon()) singular();
  LinearReconstructor r;
  r.pinv = llt.solve(at);
  r.lambda = lambda;
  r.source_matrix_id = io::matrix_hash(a);
  const double residual = (gram * r.pinv - at).norm() / std::max(at.norm(), std::numeric_limits<double>::min());
  if (!(residual <= 1e-10)) {
    if (lambda == 0.0) singular();
    fail(ErrorCode::kSingularSystem, "ridge solve residual " + io::format_double(residual) + " exceeds 1e-10");
  }
  return r;
}

inline Eigen::VectorXd reconstruct_unclamped(const LinearReconstructor& r, const Eigen::VectorXd& pixels) {
  require(pixels.size() == r.pixels(), ErrorCode::kDimensionMismatch,
          "image has " + std::to_string(pixels.size()) + " pixels, reconstructor expects " +
              std::to_string(r.pixels()));
  return r.pinv * pixels;
}

inline Spectrum reconstruct(const LinearReconstructor& r, const SpeckleImage& image) {
  return Spectrum::clamped(reconstruct_unclamped(r, image.pixels()));
}

/// Grid value with the best mean cross-correlation on the validation set;
/// ties go to the larger lambda.
inline double select_lambda(const TransmissionMatrix& a, std::span<const Sample> validation,
                            std::vector<double> grid) {
  require(!grid.empty(), ErrorCode::kInvalidArgument, "lambda grid is empty");
  require(!validation.empty(), ErrorCode::kInvalidArgument, "validation set is empty");
  std::sort(grid.begin(), grid.end());
  double best_lambda = grid.front();
  double best_score = -std::numeric_limits<double>::infinity();
  for (const double lambda : grid) {
    const auto r = fit_tikhonov(a, lambda);
    double sum = 0.0;
    for (const auto& s : validation) sum += cross_correlation(reconstruct(r, s.image), s.label);
    const double score = sum / static_cast<double>(validation.size());
    if (score >= best_score) {
      best_score = score;
      best_lambda = lambda;
    }
  }
  return best_lambda;
}

// ---- SPKR reconstructor cache --------------------------------------------
//
//   "SPKR" | u16 version | u32 Y | u32 X | f64 lambda | u64 source id |
//   Y*X f64 values, column-major | u32 CRC32

inline constexpr std::uint16_t kSpkrVersion = 1;

inline std::vector<std::uint8_t> encode_reconstructor(const LinearReconstructor& r) {
  io::ByteWriter w;
  w.put_bytes("SPKR");
  w.put(kSpkrVersion);
  w.put(static_cast<std::uint32_t>(r.channels()));
  w.put(static_cast<std::uint32_t>(r.pixels()));
  w.put(r.lambda);
  w.put(r.source_matrix_id);
  w.put_values(r.pinv.data(), static_cast<std::size_t>(r.pinv.size()), io::Dtype::kF64);
  w.put_crc();
  return std::move(w).take();
}

inline LinearReconstructor decode_reconstructor(const std::vector<std::uint8_t>& buf,
                                                const std::string& what = "SPKR") {
  io::ByteReader rd(buf, what);
  io::check_magic(rd, "SPKR", what);
  const auto version = rd.get<std::uint16_t>();
  require(version == kSpkrVersion, ErrorCode::kUnsupportedVersion, what + ": version " + std::to_string(version));
  const std::uint64_t y = rd.get<std::uint32_t>();
  const std::uint64_t x = rd.get<std::uint32_t>();
  require(x > 0 && y > 0 && x * y * 8 <= io::kMaxPayloadBytes, ErrorCode::kDimensionOverflow,
          what + ": dims " + std::to_string(y) + "x" + std::to_string(x));
  io::verify_crc(buf, what);
  LinearReconstructor r;
  r.lambda = rd.get<double>();
  r.source_matrix_id = rd.get<std::uint64_t>();
  r.pinv.resize(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x));
  rd.get_values(r.pinv.data(), x * y, io::Dtype::kF64);
  return r;
}

inline void save_reconstructor(const LinearReconstructor& r, const std::filesystem::path& path) {
  io::write_file(path, encode_reconstructor(r));
}

inline LinearReconstructor load_reconstructor(const std::filesystem::path& path) {
  return decode_reconstructor(io::read_file(path), path.string());
}

}  // namespace speckle
