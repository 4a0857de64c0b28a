#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "speckle/core.hpp"
#include "speckle/nn/layers.hpp"
#include "speckle/nn/spec.hpp"
#include "speckle/nn/tensor.hpp"
#include "speckle/rng.hpp"

namespace speckle::nn {

/// Caller-owned buffers for inference. After the first call with the largest
/// batch, further calls reuse the same storage.
template <typename T>
struct Workspace {
  Tensor<T> a;
  Tensor<T> b;
  Buffer<T> scratch;
};

struct LayerParams {
  int layer = 0;
  std::string kind;
  std::size_t offset = 0;
  std::size_t count = 0;
};

template <typename T>
class Network {
 public:
  Network() = default;

  /// Builds the layers and draws initial weights from `seed`.
  Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    const auto shapes = layer_input_shapes(spec_);
    std::size_t p = 0, s = 0;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      auto layer = make_layer<T>(spec_.layers[i], shapes[i]);
      std::visit(
          [&](auto& l) {
            l.param_offset = p;
            l.state_offset = s;
            p += l.param_count();
            s += l.state_count();
          },
          layer);
      layers_.push_back(std::move(layer));
    }
    params_.assign(p, T(0));
    grads_.assign(p, T(0));
    state_.assign(s, T(0));
    Rng rng(seed);
    for (auto& layer : layers_)
      std::visit([&](auto& l) { l.init(params_.data() + l.param_offset, state_.data() + l.state_offset, rng); },
                 layer);
    acts_.resize(layers_.size() + 1);
  }

  const NetworkSpec& spec() const { return spec_; }
  Shape3 input_shape() const { return spec_.input; }
  int output_dim() const { return spec_.output_dim; }
  std::size_t layer_count() const { return layers_.size(); }

  std::span<T> parameters() { return params_; }
  std::span<const T> parameters() const { return params_; }
  std::span<T> gradients() { return grads_; }
  std::span<T> state() { return state_; }
  std::span<const T> state() const { return state_; }

  std::vector<LayerParams> layer_params() const {
    std::vector<LayerParams> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      std::visit(
          [&](const auto& l) {
            out.push_back({static_cast<int>(i), layer_name(spec_.layers[i]), l.param_offset, l.param_count()});
          },
          layers_[i]);
    return out;
  }

  std::vector<std::size_t> layer_state_counts() const {
    std::vector<std::size_t> out;
    for (const auto& layer : layers_) std::visit([&](const auto& l) { out.push_back(l.state_count()); }, layer);
    return out;
  }

  void zero_grad() { std::fill(grads_.begin(), grads_.end(), T(0)); }

  /// Training-mode pass: batch statistics, sampled dropout masks, running
  /// statistics updated. Activations are kept for backward().
  const Tensor<T>& forward_train(const Tensor<T>& input, Rng& rng) {
    check_input(input);
    normalize_into(input, acts_[0], &input_mean_);
    for (std::size_t i = 0; i < layers_.size(); ++i)
      std::visit(
          [&](auto& l) {
            l.forward(params_.data() + l.param_offset, state_.data() + l.state_offset, acts_[i], acts_[i + 1], rng);
          },
          layers_[i]);
    return acts_.back();
  }

  /// Accumulates parameter gradients for the last forward_train() call.
  /// When `dinput` is given it receives the gradient with respect to the
  /// raw network input, before the per-sample normalisation.
  void backward(const Tensor<T>& doutput, Tensor<T>* dinput = nullptr) {
    require(doutput.n == acts_.back().n && doutput.data.size() == acts_.back().data.size(),
            ErrorCode::kDimensionMismatch, "output gradient does not match the last forward pass");
    const Tensor<T>* g = &doutput;
    for (std::size_t k = layers_.size(); k-- > 0;) {
      Tensor<T>* dx = k > 0 ? &delta_[k % 2] : dinput;
      std::visit(
          [&](auto& l) { l.backward(params_.data() + l.param_offset, grads_.data() + l.param_offset, acts_[k], *g, dx, scratch_); },
          layers_[k]);
      if (k > 0) g = dx;
    }
    if (dinput && spec_.normalization == InputNormalization::kPerSampleMean) {
      // x_hat = x / mean(x): dL/dx_i = (g_i - sum_k g_k x_hat_k / n) / mean.
      const Tensor<T>& xh = acts_[0];
      const int size = xh.sample_size();
      for (int s = 0; s < xh.n; ++s) {
        const double mean = input_mean_[static_cast<std::size_t>(s)];
        if (!(mean > 0.0)) continue;
        T* gs = dinput->sample(s);
        const T* xs = xh.sample(s);
        double dot = 0.0;
        for (int i = 0; i < size; ++i) dot += static_cast<double>(gs[i]) * xs[i];
        dot /= size;
        for (int i = 0; i < size; ++i) gs[i] = static_cast<T>((gs[i] - dot) / mean);
      }
    }
  }

  /// Hash of the sign pattern at every leaky ReLU input of the last
  /// forward_train() call; finite-difference checks use it to detect steps
  /// that cross a kink.
  std::uint64_t kink_signature() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (!std::holds_alternative<LeakyReluLayer<T>>(layers_[i])) continue;
      for (const T v : acts_[i].data) h = (h ^ static_cast<std::uint64_t>(v > T(0))) * 0x100000001b3ULL;
    }
    return h;
  }

  /// Inference-mode pass: running statistics, no dropout. Thread-safe for
  /// concurrent calls with distinct workspaces.
  void infer(const Tensor<T>& input, Tensor<T>& output, Workspace<T>& ws) const {
    check_input(input);
    normalize_into(input, ws.a);
    run_layers(ws);
    output.resize(ws.a.n, ws.a.shape);
    std::copy(ws.a.data.begin(), ws.a.data.end(), output.data.begin());
  }

  /// Single-sample (or single multi-fiber frame) inference from double
  /// pixels; writes output_dim() values, negatives clamped to zero. Does not
  /// allocate once `ws` has been used for a batch of one.
  void predict_into(const double* pixels, double* out, Workspace<T>& ws) const {
    ws.a.resize(1, spec_.input);
    std::transform(pixels, pixels + spec_.input.size(), ws.a.data.begin(), [](double v) { return static_cast<T>(v); });
    normalize_in_place(ws.a);
    run_layers(ws);
    for (int i = 0; i < spec_.output_dim; ++i) out[i] = std::max(0.0, static_cast<double>(ws.a.data[i]));
  }

  Spectrum predict(const SpeckleImage& image, Workspace<T>& ws) const {
    require(spec_.input.c == 1, ErrorCode::kInvalidArgument, "multi-fiber network needs predict_frame");
    require(image.shape().height == spec_.input.h && image.shape().width == spec_.input.w,
            ErrorCode::kDimensionMismatch,
            "image " + to_string(image.shape()) + " does not match network input " + to_string(spec_.input));
    Eigen::VectorXd out(spec_.output_dim);
    predict_into(image.pixels().data(), out.data(), ws);
    return Spectrum(std::move(out));
  }

  Spectrum predict(const SpeckleImage& image) const {
    Workspace<T> ws;
    return predict(image, ws);
  }

  /// Multi-fiber inference: one image per fiber, one spectrum per fiber.
  std::vector<Spectrum> predict_frame(std::span<const SpeckleImage> images, Workspace<T>& ws) const {
    require(static_cast<int>(images.size()) == spec_.input.c, ErrorCode::kDimensionMismatch,
            "network expects " + std::to_string(spec_.input.c) + " fiber images, got " + std::to_string(images.size()));
    const int hw = spec_.input.h * spec_.input.w;
    std::vector<double> pixels(static_cast<std::size_t>(spec_.input.size()));
    for (std::size_t f = 0; f < images.size(); ++f) {
      require(images[f].size() == hw, ErrorCode::kDimensionMismatch, "fiber image size does not match the network");
      std::copy_n(images[f].pixels().data(), hw, pixels.begin() + static_cast<std::ptrdiff_t>(f) * hw);
    }
    std::vector<double> out(static_cast<std::size_t>(spec_.output_dim));
    predict_into(pixels.data(), out.data(), ws);
    const int per = spec_.output_dim / spec_.input.c;
    std::vector<Spectrum> spectra;
    for (int f = 0; f < spec_.input.c; ++f)
      spectra.emplace_back(Eigen::Map<const Eigen::VectorXd>(out.data() + static_cast<std::ptrdiff_t>(f) * per, per));
    return spectra;
  }

  friend bool operator==(const Network& a, const Network& b) {
    return to_text(a.spec_) == to_text(b.spec_) && a.params_ == b.params_ && a.state_ == b.state_;
  }

 private:
  void check_input(const Tensor<T>& input) const {
    require(input.shape == spec_.input, ErrorCode::kDimensionMismatch,
            "input " + to_string(input.shape) + " does not match network input " + to_string(spec_.input));
    require(input.n >= 1 && input.data.size() == static_cast<std::size_t>(input.n) * input.shape.size(),
            ErrorCode::kDimensionMismatch, "input batch is empty or inconsistent");
  }

  // Each sample is divided by its mean intensity, which removes the overall
  // brightness scale of the speckle image.
  void normalize_in_place(Tensor<T>& x, std::vector<double>* means = nullptr) const {
    if (spec_.normalization != InputNormalization::kPerSampleMean) return;
    const int size = x.sample_size();
    if (means) means->assign(static_cast<std::size_t>(x.n), 0.0);
    for (int s = 0; s < x.n; ++s) {
      T* p = x.sample(s);
      double sum = 0.0;
      for (int i = 0; i < size; ++i) sum += p[i];
      const double mean = sum / size;
      if (means) (*means)[static_cast<std::size_t>(s)] = mean;
      if (!(mean > 0.0)) continue;
      const T inv = static_cast<T>(1.0 / mean);
      for (int i = 0; i < size; ++i) p[i] *= inv;
    }
  }

  void normalize_into(const Tensor<T>& input, Tensor<T>& x, std::vector<double>* means = nullptr) const {
    x.resize(input.n, input.shape);
    std::copy(input.data.begin(), input.data.end(), x.data.begin());
    normalize_in_place(x, means);
  }

  void run_layers(Workspace<T>& ws) const {
    for (const auto& layer : layers_) {
      std::visit(
          [&](const auto& l) {
            l.infer(params_.data() + l.param_offset, state_.data() + l.state_offset, ws.a, ws.b, ws.scratch);
          },
          layer);
      std::swap(ws.a, ws.b);
    }
  }

  NetworkSpec spec_;
  std::vector<AnyLayer<T>> layers_;
  Buffer<T> params_;
  Buffer<T> grads_;
  Buffer<T> state_;
  std::vector<Tensor<T>> acts_;
  Tensor<T> delta_[2];
  std::vector<double> input_mean_;  // per-sample means of the last forward_train() input
  Buffer<T> scratch_;
};

}  // namespace speckle::nn
