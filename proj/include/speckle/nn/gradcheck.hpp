#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "speckle/nn/network.hpp"
#include "speckle/nn/train.hpp"

namespace speckle::nn {

struct LayerCheck {
  int layer = 0;
  std::string kind;
  int checked = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<LayerCheck> layers;  // layers with parameters
  int input_checked = 0;
  double input_max_rel_error = 0.0;
  double max_rel_error = 0.0;  // over all layers and the input
};

/// |a - n| / max(|a|, |n|, floor). Gradients that vanish analytically (a conv
/// bias followed by batch norm, for instance) leave only rounding noise in
/// the difference quotient; the floor compares those absolutely.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backpropagated gradients of the mean squared error against
/// central differences. Every forward pass reseeds the dropout generator, so
/// masks are identical across evaluations and dropout layers can stay
/// active. Checks up to `per_layer` randomly chosen parameters of each
/// parameterised layer and as many input entries. Parameters and batch norm
/// running statistics are restored afterwards.
inline GradCheckReport gradient_check(Network<double>& net, const Tensor<double>& input,
                                      const std::vector<double>& target, double epsilon = 1e-5, int per_layer = 200,
                                      std::uint64_t seed = 1) {
  require(epsilon > 0.0, ErrorCode::kInvalidArgument, "epsilon must be > 0");
  require(target.size() == static_cast<std::size_t>(input.n) * net.output_dim(), ErrorCode::kDimensionMismatch,
          "target size does not match the batch");
  const std::vector<double> saved_state(net.state().begin(), net.state().end());

  const auto loss = [&](const Tensor<double>& x) {
    Rng rng(seed);
    const auto& out = net.forward_train(x, rng);
    return mse<double>(out.data, target);
  };

  // Analytic gradients.
  Tensor<double> dout, dinput;
  {
    Rng rng(seed);
    const auto& out = net.forward_train(input, rng);
    dout.resize(out.n, out.shape);
    const double scale = 2.0 / static_cast<double>(out.data.size());
    for (std::size_t i = 0; i < out.data.size(); ++i) dout.data[i] = scale * (out.data[i] - target[i]);
  }
  net.zero_grad();
  net.backward(dout, &dinput);
  const std::vector<double> grads(net.gradients().begin(), net.gradients().end());
  for (const double g : grads)
    require(std::isfinite(g), ErrorCode::kNonFinite, "non-finite analytic parameter gradient");
  for (const double g : dinput.data) require(std::isfinite(g), ErrorCode::kNonFinite, "non-finite input gradient");

  Rng pick(seed ^ 0x9e3779b97f4a7c15ULL);
  const auto choose = [&](std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t m = std::min<std::size_t>(n, static_cast<std::size_t>(per_layer));
    for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + pick.below(n - i)]);
    idx.resize(m);
    return idx;
  };
  // Central difference; the step shrinks while it crosses a leaky ReLU kink,
  // where the one-sided slopes differ and the difference quotient is not the
  // gradient at the evaluation point.
  const auto numeric = [&](double& slot, const Tensor<double>& x) {
    const double orig = slot;
    double h = epsilon;
    double g = 0.0;
    for (int attempt = 0; attempt < 8; ++attempt, h *= 0.25) {
      slot = orig + h;
      const double up = loss(x);
      const auto sig_up = net.kink_signature();
      slot = orig - h;
      const double down = loss(x);
      const auto sig_down = net.kink_signature();
      g = (up - down) / (2.0 * h);
      if (sig_up == sig_down) break;
    }
    slot = orig;
    require(std::isfinite(g), ErrorCode::kNonFinite, "non-finite numerical gradient");
    return g;
  };

  GradCheckReport report;
  auto params = net.parameters();
  for (const auto& lp : net.layer_params()) {
    if (lp.count == 0) continue;
    LayerCheck check{lp.layer, lp.kind, 0, 0.0};
    for (const std::size_t i : choose(lp.count)) {
      const std::size_t at = lp.offset + i;
      const double n = numeric(params[at], input);
      check.max_rel_error = std::max(check.max_rel_error, relative_error(grads[at], n));
      ++check.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.layers.push_back(check);
  }

  Tensor<double> x = input;
  for (const std::size_t i : choose(x.data.size())) {
    const double n = numeric(x.data[i], x);
    report.input_max_rel_error = std::max(report.input_max_rel_error, relative_error(dinput.data[i], n));
    ++report.input_checked;
  }
  report.max_rel_error = std::max(report.max_rel_error, report.input_max_rel_error);
  std::copy(saved_state.begin(), saved_state.end(), net.state().begin());
  return report;
}

}  // namespace speckle::nn
