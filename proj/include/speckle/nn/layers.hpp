#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <variant>
#include <vector>

#include "speckle/nn/spec.hpp"
#include "speckle/nn/tensor.hpp"
#include "speckle/rng.hpp"

namespace speckle::nn {

// Layer implementations. Trainable parameters and non-trainable state
// (batch norm running statistics) live in flat arrays owned by the network;
// each layer records its offsets into them. Training-mode forward passes may
// keep caches inside the layer; infer() is const and touches only the
// caller's scratch buffer, so one network can serve many threads.

template <typename T>
struct LayerBase {
  Shape3 in{};
  Shape3 out{};
  std::size_t param_offset = 0;
  std::size_t state_offset = 0;

  std::size_t param_count() const { return 0; }
  std::size_t state_count() const { return 0; }
  void init(T*, T*, Rng&) const {}
};

template <typename T>
inline void glorot_uniform(T* w, std::size_t n, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < n; ++i) w[i] = static_cast<T>(rng.uniform(-limit, limit));
}

template <typename T>
inline void copy_reshaped(const Tensor<T>& x, Tensor<T>& y, int batch, Shape3 shape) {
  y.resize(batch, shape);
  std::copy(x.data.begin(), x.data.end(), y.data.begin());
}

// ---- Conv2d ---------------------------------------------------------------

template <typename T>
struct Conv2dLayer : LayerBase<T> {
  int kh = 1, kw = 1, filters = 1;
  Buffer<T> cols;  // training cache: per-sample (K x P) im2col blocks

  int k() const { return this->in.c * kh * kw; }
  int p() const { return this->out.h * this->out.w; }
  std::size_t param_count() const { return static_cast<std::size_t>(filters) * k() + filters; }

  void init(T* params, T*, Rng& rng) const {
    glorot_uniform(params, static_cast<std::size_t>(filters) * k(), k(), filters * kh * kw, rng);
    std::fill_n(params + static_cast<std::size_t>(filters) * k(), filters, T(0));
  }

  // col(K x P) with K ordered (c, i, j) to match the weight layout (F, C, kh, kw).
  void im2col(const T* x, T* col) const {
    const auto [c_in, h, w] = this->in;
    const int oh = this->out.h, ow = this->out.w;
    for (int c = 0; c < c_in; ++c)
      for (int i = 0; i < kh; ++i)
        for (int j = 0; j < kw; ++j) {
          T* dst = col + static_cast<std::size_t>((c * kh + i) * kw + j) * oh * ow;
          for (int r = 0; r < oh; ++r)
            std::copy_n(x + (static_cast<std::size_t>(c) * h + r + i) * w + j, ow, dst + static_cast<std::size_t>(r) * ow);
        }
  }

  void col2im_add(const T* col, T* dx) const {
    const auto [c_in, h, w] = this->in;
    const int oh = this->out.h, ow = this->out.w;
    for (int c = 0; c < c_in; ++c)
      for (int i = 0; i < kh; ++i)
        for (int j = 0; j < kw; ++j) {
          const T* src = col + static_cast<std::size_t>((c * kh + i) * kw + j) * oh * ow;
          for (int r = 0; r < oh; ++r) {
            T* dst = dx + (static_cast<std::size_t>(c) * h + r + i) * w + j;
            const T* sv = src + static_cast<std::size_t>(r) * ow;
            for (int q = 0; q < ow; ++q) dst[q] += sv[q];
          }
        }
  }

  void apply(const T* params, const T* col, T* y) const {
    const int kk = k(), pp = p();
    ConstMatrixMap<T> wm(params, filters, kk);
    ConstVectorMap<T> b(params + static_cast<std::size_t>(filters) * kk, filters);
    MatrixMap<T> ym(y, filters, pp);
    ym.noalias() = wm * ConstMatrixMap<T>(col, kk, pp);
    ym.colwise() += b;
  }

  void forward(const T* params, T*, const Tensor<T>& x, Tensor<T>& y, Rng&) {
    const std::size_t block = static_cast<std::size_t>(k()) * p();
    y.resize(x.n, this->out);
    cols.resize(block * x.n);
    for (int s = 0; s < x.n; ++s) {
      T* col = cols.data() + block * s;
      im2col(x.sample(s), col);
      apply(params, col, y.sample(s));
    }
  }

  void backward(const T* params, T* grads, const Tensor<T>&, const Tensor<T>& dy, Tensor<T>* dx,
                Buffer<T>& scratch) {
    const int kk = k(), pp = p();
    const std::size_t block = static_cast<std::size_t>(kk) * pp;
    MatrixMap<T> dw(grads, filters, kk);
    VectorMap<T> db(grads + static_cast<std::size_t>(filters) * kk, filters);
    ConstMatrixMap<T> wm(params, filters, kk);
    if (dx) {
      dx->resize(dy.n, this->in);
      std::fill(dx->data.begin(), dx->data.end(), T(0));
      scratch.resize(block);
    }
    for (int s = 0; s < dy.n; ++s) {
      ConstMatrixMap<T> g(dy.sample(s), filters, pp);
      ConstMatrixMap<T> col(cols.data() + block * s, kk, pp);
      dw.noalias() += g * col.transpose();
      db += g.rowwise().sum();
      if (dx) {
        MatrixMap<T>(scratch.data(), kk, pp).noalias() = wm.transpose() * g;
        col2im_add(scratch.data(), dx->sample(s));
      }
    }
  }

  void infer(const T* params, const T*, const Tensor<T>& x, Tensor<T>& y, Buffer<T>& scratch) const {
    scratch.resize(static_cast<std::size_t>(k()) * p());
    y.resize(x.n, this->out);
    for (int s = 0; s < x.n; ++s) {
      im2col(x.sample(s), scratch.data());
      apply(params, scratch.data(), y.sample(s));
    }
  }
};

// ---- BatchNorm --------------------------------------------------------------

// Per-channel normalisation over batch and spatial positions, with a learned
// scale and shift. Parameters: gamma, beta. State: running mean, running var.
template <typename T>
struct BatchNormLayer : LayerBase<T> {
  double momentum = 0.99;
  double eps = 1e-5;
  Buffer<T> xhat;     // training cache
  Buffer<T> inv_std;  // training cache, per channel

  int channels() const { return this->in.c; }
  int spatial() const { return this->in.h * this->in.w; }
  std::size_t param_count() const { return 2 * static_cast<std::size_t>(channels()); }
  std::size_t state_count() const { return 2 * static_cast<std::size_t>(channels()); }

  void init(T* params, T* state, Rng&) const {
    const int c = channels();
    std::fill_n(params, c, T(1));
    std::fill_n(params + c, c, T(0));
    std::fill_n(state, c, T(0));
    std::fill_n(state + c, c, T(1));
  }

  using Slice = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
  using ConstSlice = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

  void forward(const T* params, T* state, const Tensor<T>& x, Tensor<T>& y, Rng&) {
    const int c_n = channels(), hw = spatial(), n = x.n;
    require(n * hw >= 2, ErrorCode::kInvalidArgument, "batch norm needs at least two values per channel in training");
    y.resize(n, this->out);
    xhat.resize(x.data.size());
    inv_std.resize(c_n);
    const double count = static_cast<double>(n) * hw;
    const auto offset = [&](int s, int c) {
      return static_cast<std::size_t>(s) * x.sample_size() + static_cast<std::size_t>(c) * hw;
    };
    for (int c = 0; c < c_n; ++c) {
      double sum = 0.0;
      for (int s = 0; s < n; ++s) sum += ConstSlice(x.data.data() + offset(s, c), hw).sum();
      const double mean = sum / count;
      double sq = 0.0;
      for (int s = 0; s < n; ++s) sq += (ConstSlice(x.data.data() + offset(s, c), hw) - T(mean)).square().sum();
      const double var = sq / count;
      const double istd = 1.0 / std::sqrt(var + eps);
      inv_std[c] = static_cast<T>(istd);
      const T gamma = params[c], beta = params[c_n + c];
      for (int s = 0; s < n; ++s) {
        Slice xh(xhat.data() + offset(s, c), hw);
        xh = (ConstSlice(x.data.data() + offset(s, c), hw) - T(mean)) * T(istd);
        Slice(y.data.data() + offset(s, c), hw) = gamma * xh + beta;
      }
      const double unbiased = count > 1 ? var * count / (count - 1.0) : var;
      state[c] = static_cast<T>(momentum * state[c] + (1.0 - momentum) * mean);
      state[c_n + c] = static_cast<T>(momentum * state[c_n + c] + (1.0 - momentum) * unbiased);
    }
  }

  void backward(const T* params, T* grads, const Tensor<T>&, const Tensor<T>& dy, Tensor<T>* dx, Buffer<T>&) {
    const int c_n = channels(), hw = spatial(), n = dy.n;
    const double count = static_cast<double>(n) * hw;
    const auto offset = [&](int s, int c) {
      return static_cast<std::size_t>(s) * dy.sample_size() + static_cast<std::size_t>(c) * hw;
    };
    if (dx) dx->resize(n, this->in);
    for (int c = 0; c < c_n; ++c) {
      double sum_dy = 0.0, sum_dy_xh = 0.0;
      for (int s = 0; s < n; ++s) {
        ConstSlice g(dy.data.data() + offset(s, c), hw);
        sum_dy += g.sum();
        sum_dy_xh += (g * ConstSlice(xhat.data() + offset(s, c), hw)).sum();
      }
      grads[c] += static_cast<T>(sum_dy_xh);
      grads[c_n + c] += static_cast<T>(sum_dy);
      if (!dx) continue;
      const T scale = static_cast<T>(params[c] * inv_std[c] / count);
      const T a = static_cast<T>(count), b = static_cast<T>(sum_dy), d = static_cast<T>(sum_dy_xh);
      for (int s = 0; s < n; ++s)
        Slice(dx->data.data() + offset(s, c), hw) =
            scale * (a * ConstSlice(dy.data.data() + offset(s, c), hw) - b -
                     ConstSlice(xhat.data() + offset(s, c), hw) * d);
    }
  }

  void infer(const T* params, const T* state, const Tensor<T>& x, Tensor<T>& y, Buffer<T>&) const {
    const int c_n = channels(), hw = spatial();
    y.resize(x.n, this->out);
    for (int c = 0; c < c_n; ++c) {
      const T scale = static_cast<T>(params[c] / std::sqrt(static_cast<double>(state[c_n + c]) + eps));
      const T shift = params[c_n + c] - scale * state[c];
      for (int s = 0; s < x.n; ++s) {
        const std::size_t off = static_cast<std::size_t>(s) * x.sample_size() + static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) y.data[off + i] = scale * x.data[off + i] + shift;
      }
    }
  }
};

// ---- LeakyReLU ------------------------------------------------------------

template <typename T>
struct LeakyReluLayer : LayerBase<T> {
  T slope = T(0.2);

  using Array = Eigen::Array<T, Eigen::Dynamic, 1>;

  void forward(const T* params, T* state, const Tensor<T>& x, Tensor<T>& y, Rng&) {
    Buffer<T> unused;
    infer(params, state, x, y, unused);
  }

  void backward(const T*, T*, const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx, Buffer<T>&) {
    if (!dx) return;
    dx->resize(dy.n, this->in);
    const auto n = static_cast<Eigen::Index>(dy.data.size());
    Eigen::Map<const Array> xv(x.data.data(), n), g(dy.data.data(), n);
    Eigen::Map<Array>(dx->data.data(), n) = (xv > T(0)).select(g, slope * g);
  }

  void infer(const T*, const T*, const Tensor<T>& x, Tensor<T>& y, Buffer<T>&) const {
    y.resize(x.n, this->out);
    const auto n = static_cast<Eigen::Index>(x.data.size());
    Eigen::Map<const Array> xv(x.data.data(), n);
    Eigen::Map<Array>(y.data.data(), n) = xv.max(T(0)) + slope * xv.min(T(0));
  }
};

// ---- Dropout ----------------------------------------------------------------

// Inverted dropout: kept units are scaled by 1/keep during training, so
// inference is the identity.
template <typename T>
struct DropoutLayer : LayerBase<T> {
  double keep_prob = 0.7;
  Buffer<T> mask;  // training cache

  void forward(const T*, T*, const Tensor<T>& x, Tensor<T>& y, Rng& rng) {
    y.resize(x.n, this->out);
    mask.resize(x.data.size());
    if (keep_prob >= 1.0) {
      std::fill(mask.begin(), mask.end(), T(1));
    } else {
      const T scale = static_cast<T>(1.0 / keep_prob);
      for (auto& m : mask) m = rng.uniform() < keep_prob ? scale : T(0);
    }
    for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] * mask[i];
  }

  void backward(const T*, T*, const Tensor<T>&, const Tensor<T>& dy, Tensor<T>* dx, Buffer<T>&) {
    if (!dx) return;
    dx->resize(dy.n, this->in);
    for (std::size_t i = 0; i < dy.data.size(); ++i) dx->data[i] = dy.data[i] * mask[i];
  }

  void infer(const T*, const T*, const Tensor<T>& x, Tensor<T>& y, Buffer<T>&) const {
    copy_reshaped(x, y, x.n, this->out);
  }
};

// ---- Dense ------------------------------------------------------------------

template <typename T>
struct DenseLayer : LayerBase<T> {
  int units = 1;

  int fan_in() const { return this->in.size(); }
  std::size_t param_count() const { return static_cast<std::size_t>(units) * fan_in() + units; }

  void init(T* params, T*, Rng& rng) const {
    glorot_uniform(params, static_cast<std::size_t>(units) * fan_in(), fan_in(), units, rng);
    std::fill_n(params + static_cast<std::size_t>(units) * fan_in(), units, T(0));
  }

  void forward(const T* params, T* state, const Tensor<T>& x, Tensor<T>& y, Rng&) {
    Buffer<T> unused;
    infer(params, state, x, y, unused);
  }

  void backward(const T* params, T* grads, const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx, Buffer<T>&) {
    const int d = fan_in();
    ConstMatrixMap<T> xm(x.data.data(), x.n, d);
    ConstMatrixMap<T> g(dy.data.data(), dy.n, units);
    MatrixMap<T>(grads, units, d).noalias() += g.transpose() * xm;
    VectorMap<T>(grads + static_cast<std::size_t>(units) * d, units) += g.colwise().sum().transpose();
    if (!dx) return;
    dx->resize(dy.n, this->in);
    MatrixMap<T>(dx->data.data(), dy.n, d).noalias() = g * ConstMatrixMap<T>(params, units, d);
  }

  void infer(const T* params, const T*, const Tensor<T>& x, Tensor<T>& y, Buffer<T>&) const {
    const int d = fan_in();
    y.resize(x.n, this->out);
    ConstMatrixMap<T> w(params, units, d);
    ConstVectorMap<T> b(params + static_cast<std::size_t>(units) * d, units);
    if (x.n == 1) {
      VectorMap<T> yv(y.data.data(), units);
      yv.noalias() = w * ConstVectorMap<T>(x.data.data(), d);
      yv += b;
      return;
    }
    MatrixMap<T> ym(y.data.data(), x.n, units);
    ym.noalias() = ConstMatrixMap<T>(x.data.data(), x.n, d) * w.transpose();
    ym.rowwise() += b.transpose();
  }
};

// ---- Reshapes: Flatten, Unfold, Fold ----------------------------------------

// NCHW storage is contiguous per sample, so all three only relabel the batch
// and sample shape.
template <typename T>
struct ReshapeLayer : LayerBase<T> {
  int batch_mul = 1;
  int batch_div = 1;

  int out_batch(int n) const {
    require((n * batch_mul) % batch_div == 0, ErrorCode::kDimensionMismatch,
            "batch of " + std::to_string(n) + " does not fold into groups of " + std::to_string(batch_div));
    return n * batch_mul / batch_div;
  }

  void forward(const T* params, T* state, const Tensor<T>& x, Tensor<T>& y, Rng&) {
    Buffer<T> unused;
    infer(params, state, x, y, unused);
  }

  void backward(const T*, T*, const Tensor<T>&, const Tensor<T>& dy, Tensor<T>* dx, Buffer<T>&) {
    if (dx) copy_reshaped(dy, *dx, dy.n * batch_div / batch_mul, this->in);
  }

  void infer(const T*, const T*, const Tensor<T>& x, Tensor<T>& y, Buffer<T>&) const {
    copy_reshaped(x, y, out_batch(x.n), this->out);
  }
};

// ---- Conv1dUpsample -----------------------------------------------------------

// Transposed 1-D convolution on (C, 1, L) inputs:
//   y[f][i * stride + j] += sum_c W[f][j][c] x[c][i],  j < kernel.
template <typename T>
struct Conv1dUpsampleLayer : LayerBase<T> {
  int kernel = 2, filters = 1, stride = 2;

  int rows() const { return filters * kernel; }
  std::size_t param_count() const { return static_cast<std::size_t>(rows()) * this->in.c + filters; }

  void init(T* params, T*, Rng& rng) const {
    glorot_uniform(params, static_cast<std::size_t>(rows()) * this->in.c, this->in.c * kernel, filters * kernel, rng);
    std::fill_n(params + static_cast<std::size_t>(rows()) * this->in.c, filters, T(0));
  }

  void forward(const T* params, T* state, const Tensor<T>& x, Tensor<T>& y, Rng&) {
    infer(params, state, x, y, tmp);
  }

  void backward(const T* params, T* grads, const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>* dx,
                Buffer<T>& scratch) {
    const int c_in = this->in.c, len = this->in.w, lo = this->out.w;
    const std::size_t wsize = static_cast<std::size_t>(rows()) * c_in;
    scratch.resize(static_cast<std::size_t>(rows()) * len);
    MatrixMap<T> dt(scratch.data(), rows(), len);
    MatrixMap<T> dw(grads, rows(), c_in);
    ConstMatrixMap<T> w(params, rows(), c_in);
    if (dx) dx->resize(dy.n, this->in);
    for (int s = 0; s < dy.n; ++s) {
      const T* g = dy.sample(s);
      for (int f = 0; f < filters; ++f) {
        T gb = 0;
        for (int q = 0; q < lo; ++q) gb += g[static_cast<std::size_t>(f) * lo + q];
        grads[wsize + f] += gb;
        for (int j = 0; j < kernel; ++j)
          for (int i = 0; i < len; ++i) dt(f * kernel + j, i) = g[static_cast<std::size_t>(f) * lo + i * stride + j];
      }
      ConstMatrixMap<T> xm(x.sample(s), c_in, len);
      dw.noalias() += dt * xm.transpose();
      if (dx) MatrixMap<T>(dx->sample(s), c_in, len).noalias() = w.transpose() * dt;
    }
  }

  void infer(const T* params, const T*, const Tensor<T>& x, Tensor<T>& y, Buffer<T>& scratch) const {
    const int c_in = this->in.c, len = this->in.w, lo = this->out.w;
    const std::size_t wsize = static_cast<std::size_t>(rows()) * c_in;
    scratch.resize(static_cast<std::size_t>(rows()) * len);
    y.resize(x.n, this->out);
    ConstMatrixMap<T> w(params, rows(), c_in);
    MatrixMap<T> t(scratch.data(), rows(), len);
    for (int s = 0; s < x.n; ++s) {
      t.noalias() = w * ConstMatrixMap<T>(x.sample(s), c_in, len);
      T* out = y.sample(s);
      for (int f = 0; f < filters; ++f) {
        T* row = out + static_cast<std::size_t>(f) * lo;
        std::fill_n(row, lo, params[wsize + f]);
        for (int i = 0; i < len; ++i)
          for (int j = 0; j < kernel; ++j) row[i * stride + j] += t(f * kernel + j, i);
      }
    }
  }

 private:
  Buffer<T> tmp;
};

template <typename T>
using AnyLayer = std::variant<Conv2dLayer<T>, BatchNormLayer<T>, LeakyReluLayer<T>, DropoutLayer<T>, DenseLayer<T>,
                              ReshapeLayer<T>, Conv1dUpsampleLayer<T>>;

/// Builds the layer for one spec entry; offsets are assigned by the caller.
template <typename T>
inline AnyLayer<T> make_layer(const LayerSpec& spec, Shape3 in) {
  const Propagation prop = propagate(in, spec);
  auto shaped = [&](auto layer) {
    layer.in = in;
    layer.out = prop.out;
    return AnyLayer<T>(std::move(layer));
  };
  return std::visit(
      [&](const auto& l) -> AnyLayer<T> {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Conv2d>) {
          Conv2dLayer<T> c;
          c.kh = l.kh;
          c.kw = l.kw;
          c.filters = l.filters;
          return shaped(std::move(c));
        } else if constexpr (std::is_same_v<L, BatchNorm>) {
          BatchNormLayer<T> b;
          b.momentum = l.momentum;
          b.eps = l.eps;
          return shaped(std::move(b));
        } else if constexpr (std::is_same_v<L, LeakyRelu>) {
          LeakyReluLayer<T> r;
          r.slope = static_cast<T>(l.slope);
          return shaped(r);
        } else if constexpr (std::is_same_v<L, Dropout>) {
          DropoutLayer<T> d;
          d.keep_prob = l.keep_prob;
          return shaped(std::move(d));
        } else if constexpr (std::is_same_v<L, Dense>) {
          DenseLayer<T> d;
          d.units = l.units;
          return shaped(d);
        } else if constexpr (std::is_same_v<L, Conv1dUpsample>) {
          Conv1dUpsampleLayer<T> u;
          u.kernel = l.kernel;
          u.filters = l.filters;
          u.stride = l.stride;
          return shaped(std::move(u));
        } else {
          ReshapeLayer<T> r;
          r.batch_mul = prop.batch_mul;
          r.batch_div = prop.batch_div;
          return shaped(r);
        }
      },
      spec);
}

}  // namespace speckle::nn
