#pragma once

#include <Eigen/Dense>

#include <memory>
#include <string>
#include <variant>

#include "speckle/core.hpp"
#include "speckle/nn/network.hpp"
#include "speckle/recon_cs.hpp"
#include "speckle/recon_linear.hpp"

namespace speckle {

// A fitted per-fiber reconstructor behind one interface. All alternatives are
// immutable after construction; per-call buffers live in ReconScratch.

struct TrBackend {
  LinearReconstructor r;
};

struct CsBackend {
  Eigen::MatrixXd a;
  CsOptions opts;  // lipschitz filled in by make_cs
};

template <typename T>
struct DlBackend {
  std::shared_ptr<const nn::Network<T>> net;
};

using Reconstructor = std::variant<TrBackend, CsBackend, DlBackend<float>, DlBackend<double>>;

struct ReconScratch {
  nn::Workspace<float> f32;
  nn::Workspace<double> f64;
};

inline Reconstructor make_tr(const TransmissionMatrix& a, double lambda) { return TrBackend{fit_tikhonov(a, lambda)}; }

inline Reconstructor make_cs(const TransmissionMatrix& a, CsOptions opts = {}) {
  validate(opts);
  if (!opts.lipschitz) opts.lipschitz = lipschitz_bound(a.columns());
  return CsBackend{a.columns(), opts};
}

template <typename T>
inline Reconstructor make_dl(std::shared_ptr<const nn::Network<T>> net) {
  require(net != nullptr, ErrorCode::kInvalidArgument, "null network");
  require(net->spec().input.c == 1, ErrorCode::kInvalidArgument, "per-fiber reconstruction needs a single-fiber network");
  return DlBackend<T>{std::move(net)};
}

inline std::string method_name(const Reconstructor& r) {
  static constexpr const char* names[] = {"tr", "cs", "dl", "dl"};
  return names[r.index()];
}

inline int input_pixels(const Reconstructor& r) {
  return std::visit(
      [](const auto& b) -> int {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, TrBackend>) return b.r.pixels();
        else if constexpr (std::is_same_v<B, CsBackend>) return static_cast<int>(b.a.rows());
        else return b.net->spec().input.size();
      },
      r);
}

inline int output_channels(const Reconstructor& r) {
  return std::visit(
      [](const auto& b) -> int {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, TrBackend>) return b.r.channels();
        else if constexpr (std::is_same_v<B, CsBackend>) return static_cast<int>(b.a.cols());
        else return b.net->output_dim();
      },
      r);
}

/// Reconstructs one ROI image given as `input_pixels(r)` row-major values;
/// writes `output_channels(r)` non-negative values. The TR and DL paths do
/// not allocate once the scratch has been used.
inline void reconstruct_into(const Reconstructor& r, const double* pixels, double* out, ReconScratch& scratch) {
  std::visit(
      [&](const auto& b) {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, TrBackend>) {
          Eigen::Map<Eigen::VectorXd> o(out, b.r.channels());
          o.noalias() = b.r.pinv * Eigen::Map<const Eigen::VectorXd>(pixels, b.r.pixels());
          o = o.cwiseMax(0.0);
        } else if constexpr (std::is_same_v<B, CsBackend>) {
          const auto res = solve_cs(b.a, Eigen::Map<const Eigen::VectorXd>(pixels, b.a.rows()), b.opts);
          Eigen::Map<Eigen::VectorXd>(out, b.a.cols()) = res.spectrum.values();
        } else if constexpr (std::is_same_v<B, DlBackend<float>>) {
          b.net->predict_into(pixels, out, scratch.f32);
        } else {
          b.net->predict_into(pixels, out, scratch.f64);
        }
      },
      r);
}

inline Spectrum reconstruct(const Reconstructor& r, const SpeckleImage& image, ReconScratch& scratch) {
  require(image.size() == input_pixels(r), ErrorCode::kDimensionMismatch,
          "image has " + std::to_string(image.size()) + " pixels, reconstructor expects " +
              std::to_string(input_pixels(r)));
  Eigen::VectorXd out(output_channels(r));
  reconstruct_into(r, image.pixels().data(), out.data(), scratch);
  return Spectrum(std::move(out));
}

inline Spectrum reconstruct(const Reconstructor& r, const SpeckleImage& image) {
  ReconScratch scratch;
  return reconstruct(r, image, scratch);
}

}  // namespace speckle
