#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "speckle/io.hpp"
#include "speckle/nn/network.hpp"
#include "speckle/rng.hpp"
#include "speckle/synth.hpp"

namespace speckle::nn {

/// Inputs and flattened targets (n x dim, sample-major).
template <typename T>
struct TrainingData {
  Tensor<T> inputs;
  Buffer<T> targets;
  int target_dim = 0;

  int size() const { return inputs.n; }
};

/// Single-fiber data: image pixels as a (1, h, w) input, label as target.
template <typename T>
inline TrainingData<T> to_training_data(std::span<const Sample> samples) {
  require(!samples.empty(), ErrorCode::kInvalidArgument, "no samples");
  const RoiShape roi = samples.front().image.shape();
  const int dim = samples.front().label.size();
  TrainingData<T> d;
  d.target_dim = dim;
  d.inputs.resize(static_cast<int>(samples.size()), {1, roi.height, roi.width});
  d.targets.resize(samples.size() * dim);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    require(s.image.shape() == roi && s.label.size() == dim, ErrorCode::kDimensionMismatch,
            "samples have inconsistent shapes");
    std::transform(s.image.pixels().begin(), s.image.pixels().end(), d.inputs.sample(static_cast<int>(i)),
                   [](double v) { return static_cast<T>(v); });
    std::transform(s.label.values().begin(), s.label.values().end(), d.targets.begin() + i * dim,
                   [](double v) { return static_cast<T>(v); });
  }
  return d;
}

/// Multi-fiber data: sample i stacks image i of every fiber as channels and
/// concatenates the fibers' labels.
template <typename T>
inline TrainingData<T> stack_fibers(const std::vector<std::span<const Sample>>& fibers) {
  require(!fibers.empty() && !fibers.front().empty(), ErrorCode::kInvalidArgument, "no fibers");
  const int n_fib = static_cast<int>(fibers.size());
  const std::size_t n = fibers.front().size();
  const RoiShape roi = fibers.front().front().image.shape();
  const int y = fibers.front().front().label.size();
  const int hw = roi.pixels();
  TrainingData<T> d;
  d.target_dim = n_fib * y;
  d.inputs.resize(static_cast<int>(n), {n_fib, roi.height, roi.width});
  d.targets.resize(n * d.target_dim);
  for (int f = 0; f < n_fib; ++f) {
    require(fibers[f].size() == n, ErrorCode::kDimensionMismatch, "fibers have different sample counts");
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = fibers[f][i];
      require(s.image.shape() == roi && s.label.size() == y, ErrorCode::kDimensionMismatch,
              "fibers have inconsistent shapes");
      std::transform(s.image.pixels().begin(), s.image.pixels().end(),
                     d.inputs.sample(static_cast<int>(i)) + static_cast<std::size_t>(f) * hw,
                     [](double v) { return static_cast<T>(v); });
      std::transform(s.label.values().begin(), s.label.values().end(),
                     d.targets.begin() + i * d.target_dim + static_cast<std::size_t>(f) * y,
                     [](double v) { return static_cast<T>(v); });
    }
  }
  return d;
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-7;
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct TrainOptions {
  int epochs = 30;
  int batch_size = 64;
  double learning_rate = 1e-3;
  AdamOptions adam{};
  std::uint64_t seed = 1;
  std::function<void(const EpochStats&)> on_epoch;
};

inline void validate(const TrainOptions& o) {
  require(o.epochs >= 1, ErrorCode::kInvalidArgument, "epochs must be >= 1");
  require(o.batch_size >= 1, ErrorCode::kInvalidArgument, "batch_size must be >= 1");
  require(o.learning_rate >= 0.0 && std::isfinite(o.learning_rate), ErrorCode::kInvalidArgument,
          "learning_rate must be finite and >= 0");
  require(o.adam.beta1 >= 0.0 && o.adam.beta1 < 1.0 && o.adam.beta2 >= 0.0 && o.adam.beta2 < 1.0 &&
              o.adam.epsilon > 0.0,
          ErrorCode::kInvalidArgument, "Adam betas must be in [0,1) and epsilon > 0");
}

/// Per-epoch mean squared error; loss is the per-sample mean over outputs,
/// averaged over samples.
struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> validation_loss;
  int best_epoch = 0;  // 1-based; 0 before training
};

template <typename T>
struct TrainedNetwork {
  Network<T> net;
  TrainHistory history;
  std::string provenance;
};

template <typename T>
class Adam {
 public:
  Adam(std::size_t n, double lr, AdamOptions o)
      : lr_(lr), o_(o), m_(Array::Zero(static_cast<Eigen::Index>(n))), v_(Array::Zero(static_cast<Eigen::Index>(n))) {}

  void step(std::span<T> params, std::span<const T> grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(o_.beta1, t_);
    const double c2 = 1.0 - std::pow(o_.beta2, t_);
    const T a = static_cast<T>(lr_ * std::sqrt(c2) / c1);
    const T eps = static_cast<T>(o_.epsilon * std::sqrt(c2));
    const T b1 = static_cast<T>(o_.beta1), b2 = static_cast<T>(o_.beta2);
    const auto n = static_cast<Eigen::Index>(params.size());
    Eigen::Map<const Array> g(grads.data(), n);
    Eigen::Map<Array> p(params.data(), n);
    m_ = b1 * m_ + (T(1) - b1) * g;
    v_ = b2 * v_ + (T(1) - b2) * g.square();
    p -= a * m_ / (v_.sqrt() + eps);
  }

 private:
  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;
  double lr_;
  AdamOptions o_;
  Array m_, v_;
  int t_ = 0;
};

/// Copies samples `idx[begin, end)` into a batch.
template <typename T>
inline void gather_batch(const TrainingData<T>& data, std::span<const std::size_t> idx, Tensor<T>& x,
                         Buffer<T>& y) {
  const int n = static_cast<int>(idx.size());
  const std::size_t in = data.inputs.sample_size(), dim = data.target_dim;
  x.resize(n, data.inputs.shape);
  y.resize(n * dim);
  for (int i = 0; i < n; ++i) {
    std::copy_n(data.inputs.sample(static_cast<int>(idx[i])), in, x.sample(i));
    std::copy_n(data.targets.begin() + idx[i] * dim, dim, y.begin() + i * dim);
  }
}

template <typename T>
inline double mse(std::span<const T> pred, std::span<const T> target) {
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    sum += d * d;
  }
  return sum / static_cast<double>(pred.size());
}

/// Mean squared error of inference-mode predictions.
template <typename T>
inline double evaluate_loss(const Network<T>& net, const TrainingData<T>& data, int batch_size = 256) {
  require(data.size() > 0, ErrorCode::kInvalidArgument, "empty evaluation set");
  Workspace<T> ws;
  Tensor<T> x, out;
  Buffer<T> y;
  std::vector<std::size_t> idx;
  double sum = 0.0;
  for (int start = 0; start < data.size(); start += batch_size) {
    const int end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), static_cast<std::size_t>(start));
    gather_batch(data, idx, x, y);
    net.infer(x, out, ws);
    sum += mse<T>(out.data, y) * (end - start);
  }
  return sum / data.size();
}

/// Mini-batch Adam on the mean squared error. Each epoch visits the training
/// set once in a freshly shuffled order. Returns the weights of the epoch with
/// the lowest validation loss.
template <typename T>
inline TrainedNetwork<T> train(Network<T> net, const TrainingData<T>& train_set, const TrainingData<T>& validation,
                               const TrainOptions& opts) {
  validate(opts);
  require(train_set.size() > 0, ErrorCode::kInvalidArgument, "training split is empty");
  require(validation.size() > 0, ErrorCode::kInvalidArgument, "validation split is empty");
  require(train_set.inputs.shape == net.input_shape() && validation.inputs.shape == net.input_shape(),
          ErrorCode::kDimensionMismatch, "data shape does not match the network input");
  require(train_set.target_dim == net.output_dim() && validation.target_dim == net.output_dim(),
          ErrorCode::kDimensionMismatch, "target width does not match the network output");

  Rng rng(opts.seed);
  Rng shuffle_rng = rng.split();
  Rng dropout_rng = rng.split();
  Adam<T> adam(net.parameters().size(), opts.learning_rate, opts.adam);

  TrainedNetwork<T> result;
  Buffer<T> best_params(net.parameters().begin(), net.parameters().end());
  Buffer<T> best_state(net.state().begin(), net.state().end());
  double best_loss = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Tensor<T> x, dout;
  Buffer<T> y;
  const int n = train_set.size();
  const int dim = train_set.target_dim;
  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    double loss_sum = 0.0;
    for (int start = 0; start < n; start += opts.batch_size) {
      const int end = std::min(n, start + opts.batch_size);
      const int b = end - start;
      gather_batch(train_set, std::span<const std::size_t>(order).subspan(start, b), x, y);
      const Tensor<T>& out = net.forward_train(x, dropout_rng);
      const double loss = mse<T>(out.data, y);
      if (!std::isfinite(loss))
        fail(ErrorCode::kDivergence, "training diverged in epoch " + std::to_string(epoch) + " (non-finite loss)");
      loss_sum += loss * b;
      dout.resize(out.n, out.shape);
      const T scale = static_cast<T>(2.0 / (static_cast<double>(b) * dim));
      for (std::size_t i = 0; i < out.data.size(); ++i) dout.data[i] = scale * (out.data[i] - y[i]);
      net.zero_grad();
      net.backward(dout);
      adam.step(net.parameters(), net.gradients());
    }
    const double train_loss = loss_sum / n;
    const double val_loss = evaluate_loss(net, validation);
    if (!std::isfinite(val_loss))
      fail(ErrorCode::kDivergence, "validation loss is non-finite in epoch " + std::to_string(epoch));
    result.history.train_loss.push_back(train_loss);
    result.history.validation_loss.push_back(val_loss);
    if (val_loss < best_loss) {
      best_loss = val_loss;
      result.history.best_epoch = epoch;
      std::copy(net.parameters().begin(), net.parameters().end(), best_params.begin());
      std::copy(net.state().begin(), net.state().end(), best_state.begin());
    }
    if (opts.on_epoch) opts.on_epoch({epoch, train_loss, val_loss});
  }
  std::copy(best_params.begin(), best_params.end(), net.parameters().begin());
  std::copy(best_state.begin(), best_state.end(), net.state().begin());
  result.net = std::move(net);
  return result;
}

/// FNV-1a over the inputs and targets, identifying a training set.
template <typename T>
inline std::uint64_t data_hash(const TrainingData<T>& d) {
  std::uint64_t h = io::fnv1a(d.inputs.data.data(), d.inputs.data.size() * sizeof(T));
  return io::fnv1a(d.targets.data(), d.targets.size() * sizeof(T), h);
}

inline std::string describe(const TrainOptions& o) {
  return "epochs=" + std::to_string(o.epochs) + " batch=" + std::to_string(o.batch_size) +
         " lr=" + io::format_double(o.learning_rate) + " beta1=" + io::format_double(o.adam.beta1) +
         " beta2=" + io::format_double(o.adam.beta2) + " eps=" + io::format_double(o.adam.epsilon) +
         " seed=" + std::to_string(o.seed);
}

}  // namespace speckle::nn
