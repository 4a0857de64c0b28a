#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "speckle/error.hpp"
#include "speckle/io.hpp"
#include "speckle/nn/tensor.hpp"

namespace speckle::nn {

// Layer descriptions. Convolutions use valid padding only.
struct Conv2d {
  int kh = 3;
  int kw = 3;
  int filters = 16;
};
struct BatchNorm {
  double momentum = 0.99;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-5;
};
struct LeakyRelu {
  double slope = 0.2;
};
struct Dropout {
  double keep_prob = 0.7;
};
struct Dense {
  int units = 1;
};
struct Flatten {};
/// Transposed 1-D convolution along the width axis of (C, 1, L) inputs;
/// output length (L - 1) * stride + kernel.
struct Conv1dUpsample {
  int kernel = 2;
  int filters = 16;
  int stride = 2;
};
/// Splits every sample into `groups` samples of shape (c, h, w); the batch grows by `groups`.
struct Unfold {
  int groups = 1;
  Shape3 shape{};
};
/// Inverse of Unfold: concatenates `groups` consecutive samples into one flat sample.
struct Fold {
  int groups = 1;
};

using LayerSpec = std::variant<Conv2d, BatchNorm, LeakyRelu, Dropout, Dense, Flatten, Conv1dUpsample, Unfold, Fold>;

enum class InputNormalization { kNone, kPerSampleMean };

struct NetworkSpec {
  Shape3 input{};
  std::vector<LayerSpec> layers;
  int output_dim = 0;
  InputNormalization normalization = InputNormalization::kPerSampleMean;
};

inline std::string layer_name(const LayerSpec& l) {
  static constexpr const char* names[] = {"conv2d",  "batchnorm",       "leakyrelu", "dropout", "dense",
                                          "flatten", "conv1d_upsample", "unfold",    "fold"};
  return names[l.index()];
}

/// Output shape of one layer and its effect on the batch size, as a
/// multiplier (Unfold) or divisor (Fold).
struct Propagation {
  Shape3 out;
  int batch_mul = 1;
  int batch_div = 1;
};

inline Propagation propagate(Shape3 in, const LayerSpec& layer) {
  auto bad = [&](const std::string& why) {
    fail(ErrorCode::kInvalidArgument, layer_name(layer) + " on input " + to_string(in) + ": " + why);
  };
  return std::visit(
      [&](const auto& l) -> Propagation {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Conv2d>) {
          if (l.kh < 1 || l.kw < 1 || l.filters < 1) bad("kernel and filters must be positive");
          const int oh = in.h - (l.kh - 1);
          const int ow = in.w - (l.kw - 1);
          if (oh < 1 || ow < 1) bad("valid convolution leaves no output");
          return {{l.filters, oh, ow}};
        } else if constexpr (std::is_same_v<L, BatchNorm>) {
          if (!(l.momentum >= 0.0 && l.momentum < 1.0) || !(l.eps > 0.0)) bad("momentum in [0,1) and eps > 0");
          return {in};
        } else if constexpr (std::is_same_v<L, LeakyRelu>) {
          if (!(l.slope >= 0.0 && l.slope < 1.0)) bad("slope must be in [0, 1)");
          return {in};
        } else if constexpr (std::is_same_v<L, Dropout>) {
          if (!(l.keep_prob > 0.0 && l.keep_prob <= 1.0)) bad("keep probability must be in (0, 1]");
          return {in};
        } else if constexpr (std::is_same_v<L, Dense>) {
          if (l.units < 1) bad("units must be positive");
          return {{l.units, 1, 1}};
        } else if constexpr (std::is_same_v<L, Flatten>) {
          return {{in.size(), 1, 1}};
        } else if constexpr (std::is_same_v<L, Conv1dUpsample>) {
          if (in.h != 1) bad("expects height 1");
          if (l.kernel < 1 || l.filters < 1 || l.stride < 1) bad("kernel, filters and stride must be positive");
          return {{l.filters, 1, (in.w - 1) * l.stride + l.kernel}};
        } else if constexpr (std::is_same_v<L, Unfold>) {
          if (l.groups < 1 || l.shape.size() < 1 || l.groups * l.shape.size() != in.size())
            bad("groups x shape must equal the input size");
          return {l.shape, l.groups, 1};
        } else {
          if (l.groups < 1) bad("groups must be positive");
          return {{in.size() * l.groups, 1, 1}, 1, l.groups};
        }
      },
      layer);
}

/// Checks the shape algebra end to end and returns the per-layer input shapes.
inline std::vector<Shape3> layer_input_shapes(const NetworkSpec& spec) {
  require(spec.input.size() >= 1, ErrorCode::kInvalidArgument, "network input shape is empty");
  require(spec.output_dim >= 1, ErrorCode::kInvalidArgument, "network output_dim must be positive");
  std::vector<Shape3> shapes;
  Shape3 s = spec.input;
  long mul = 1, div = 1;
  for (const auto& layer : spec.layers) {
    shapes.push_back(s);
    const auto p = propagate(s, layer);
    s = p.out;
    mul *= p.batch_mul;
    div *= p.batch_div;
  }
  require(mul == div, ErrorCode::kInvalidArgument, "unfold/fold groups do not balance");
  require(s.size() == spec.output_dim, ErrorCode::kInvalidArgument,
          "network produces " + std::to_string(s.size()) + " outputs, output_dim is " +
              std::to_string(spec.output_dim));
  shapes.push_back(s);
  return shapes;
}

// ---- canonical text form ---------------------------------------------------

inline std::string to_text(const NetworkSpec& spec) {
  std::ostringstream os;
  os << "speckle-net 1\n";
  os << "input " << spec.input.c << " " << spec.input.h << " " << spec.input.w << "\n";
  os << "output " << spec.output_dim << "\n";
  os << "normalize " << (spec.normalization == InputNormalization::kPerSampleMean ? "mean" : "none") << "\n";
  const auto d = [](double v) { return io::format_double(v); };
  for (const auto& layer : spec.layers) {
    os << "layer " << layer_name(layer);
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d>) os << " " << l.kh << " " << l.kw << " " << l.filters;
          if constexpr (std::is_same_v<L, BatchNorm>) os << " " << d(l.momentum) << " " << d(l.eps);
          if constexpr (std::is_same_v<L, LeakyRelu>) os << " " << d(l.slope);
          if constexpr (std::is_same_v<L, Dropout>) os << " " << d(l.keep_prob);
          if constexpr (std::is_same_v<L, Dense>) os << " " << l.units;
          if constexpr (std::is_same_v<L, Conv1dUpsample>) os << " " << l.kernel << " " << l.filters << " " << l.stride;
          if constexpr (std::is_same_v<L, Unfold>)
            os << " " << l.groups << " " << l.shape.c << " " << l.shape.h << " " << l.shape.w;
          if constexpr (std::is_same_v<L, Fold>) os << " " << l.groups;
        },
        layer);
    os << "\n";
  }
  return os.str();
}

inline NetworkSpec spec_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  NetworkSpec spec;
  int lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    const auto bad = [&] { fail(ErrorCode::kParse, "network spec line " + std::to_string(lineno) + ": '" + line + "'"); };
    if (key == "speckle-net") {
      int version = 0;
      ls >> version;
      if (version != 1) fail(ErrorCode::kUnsupportedVersion, "network spec version " + std::to_string(version));
      header = true;
    } else if (key == "input") {
      ls >> spec.input.c >> spec.input.h >> spec.input.w;
    } else if (key == "output") {
      ls >> spec.output_dim;
    } else if (key == "normalize") {
      std::string v;
      ls >> v;
      if (v == "mean")
        spec.normalization = InputNormalization::kPerSampleMean;
      else if (v == "none")
        spec.normalization = InputNormalization::kNone;
      else
        bad();
    } else if (key == "layer") {
      std::string kind;
      ls >> kind;
      if (kind == "conv2d") {
        Conv2d l;
        ls >> l.kh >> l.kw >> l.filters;
        spec.layers.push_back(l);
      } else if (kind == "batchnorm") {
        BatchNorm l;
        ls >> l.momentum >> l.eps;
        spec.layers.push_back(l);
      } else if (kind == "leakyrelu") {
        LeakyRelu l;
        ls >> l.slope;
        spec.layers.push_back(l);
      } else if (kind == "dropout") {
        Dropout l;
        ls >> l.keep_prob;
        spec.layers.push_back(l);
      } else if (kind == "dense") {
        Dense l;
        ls >> l.units;
        spec.layers.push_back(l);
      } else if (kind == "flatten") {
        spec.layers.push_back(Flatten{});
      } else if (kind == "conv1d_upsample") {
        Conv1dUpsample l;
        ls >> l.kernel >> l.filters >> l.stride;
        spec.layers.push_back(l);
      } else if (kind == "unfold") {
        Unfold l;
        ls >> l.groups >> l.shape.c >> l.shape.h >> l.shape.w;
        spec.layers.push_back(l);
      } else if (kind == "fold") {
        Fold l;
        ls >> l.groups;
        spec.layers.push_back(l);
      } else {
        bad();
      }
    } else {
      bad();
    }
    if (ls.fail()) bad();
  }
  require(header, ErrorCode::kParse, "network spec is missing its 'speckle-net' header");
  layer_input_shapes(spec);
  return spec;
}

// ---- architectures -------------------------------------------------------

struct CnnOptions {
  Shape3 input{1, 5, 5};
  std::vector<int> conv_kernels{2, 2};
  std::vector<int> conv_filters{16, 16};
  std::vector<int> dense_units{512, 256};
  int outputs = 43;
  double leaky_slope = 0.2;
  double keep_prob = 0.7;
  // Leaky ReLU after each hidden dense layer.
  bool dense_activation = true;
};

/// Conv stack (each conv followed by batch norm and leaky ReLU), flatten,
/// hidden dense layers with dropout, linear output. No pooling.
inline NetworkSpec build_cnn(const CnnOptions& o) {
  require(o.conv_kernels.size() == o.conv_filters.size(), ErrorCode::kInvalidArgument,
          "conv kernel and filter lists differ in length");
  NetworkSpec spec;
  spec.input = o.input;
  spec.output_dim = o.outputs;
  for (std::size_t i = 0; i < o.conv_kernels.size(); ++i) {
    spec.layers.push_back(Conv2d{o.conv_kernels[i], o.conv_kernels[i], o.conv_filters[i]});
    spec.layers.push_back(BatchNorm{});
    spec.layers.push_back(LeakyRelu{o.leaky_slope});
  }
  spec.layers.push_back(Flatten{});
  for (const int units : o.dense_units) {
    spec.layers.push_back(Dense{units});
    if (o.dense_activation) spec.layers.push_back(LeakyRelu{o.leaky_slope});
    spec.layers.push_back(Dropout{o.keep_prob});
  }
  spec.layers.push_back(Dense{o.outputs});
  layer_input_shapes(spec);
  return spec;
}

/// CNN (i): two 2x2 convolutions on a 5x5 ROI.
inline CnnOptions cnn_small_options(int outputs = 43) {
  CnnOptions o;
  o.input = {1, 5, 5};
  o.conv_kernels = {2, 2};
  o.conv_filters = {16, 16};
  o.outputs = outputs;
  return o;
}

/// CNN (ii): three 3x3 convolutions on a 20x20 ROI.
inline CnnOptions cnn_large_options(int outputs = 43) {
  CnnOptions o;
  o.input = {1, 20, 20};
  o.conv_kernels = {3, 3, 3};
  o.conv_filters = {16, 32, 32};
  o.outputs = outputs;
  return o;
}

inline NetworkSpec build_cnn_small(int outputs = 43) { return build_cnn(cnn_small_options(outputs)); }
inline NetworkSpec build_cnn_large(int outputs = 43) { return build_cnn(cnn_large_options(outputs)); }

/// Single-fiber CNN sized for an ROI: CNN (ii) layout from 12x12 upwards,
/// otherwise 2x2 convolutions as in CNN (i), one fewer on ROIs below 4x4.
inline NetworkSpec architecture_for_roi(int height, int width, int outputs = 43) {
  require(height >= 2 && width >= 2, ErrorCode::kInvalidArgument, "ROI must be at least 2x2 for a CNN");
  CnnOptions o = std::min(height, width) >= 12 ? cnn_large_options(outputs) : cnn_small_options(outputs);
  o.input = {1, height, width};
  if (std::min(height, width) < 4) {
    o.conv_kernels = {2};
    o.conv_filters = {16};
  }
  return build_cnn(o);
}

struct MultiFiberOptions {
  int fibers = 1;
  int height = 20;
  int width = 20;
  int outputs = 43;
  std::vector<int> conv_kernels{3, 3};
  std::vector<int> conv_filters{32, 32};
  int hidden_units = 512;
  int sequence_channels = 16;  // feature channels of each fiber's spectral sequence
  int upsample_filters = 16;
  int upsample_layers = 2;     // each doubles the sequence length
  double leaky_slope = 0.2;
  double keep_prob = 0.7;
};

/// N fibers enter as N input channels; a shared 2-D conv stack and dense
/// bottleneck produce N short spectral sequences, which transposed 1-D
/// convolutions upsample along the wavelength axis before a per-fiber linear
/// projection to the output channels.
inline NetworkSpec build_multifiber(const MultiFiberOptions& o) {
  require(o.fibers >= 1, ErrorCode::kInvalidArgument, "multi-fiber network needs N >= 1");
  require(o.upsample_layers >= 1, ErrorCode::kInvalidArgument, "need at least one upsampling layer");
  NetworkSpec spec;
  spec.input = {o.fibers, o.height, o.width};
  spec.output_dim = o.fibers * o.outputs;
  for (std::size_t i = 0; i < o.conv_kernels.size(); ++i) {
    spec.layers.push_back(Conv2d{o.conv_kernels[i], o.conv_kernels[i], o.conv_filters[i]});
    spec.layers.push_back(BatchNorm{});
    spec.layers.push_back(LeakyRelu{o.leaky_slope});
  }
  spec.layers.push_back(Flatten{});
  spec.layers.push_back(Dense{o.hidden_units});
  spec.layers.push_back(LeakyRelu{o.leaky_slope});
  spec.layers.push_back(Dropout{o.keep_prob});
  const int factor = 1 << o.upsample_layers;
  const int seq_len = (o.outputs + factor - 1) / factor;
  spec.layers.push_back(Dense{o.fibers * o.sequence_channels * seq_len});
  spec.layers.push_back(LeakyRelu{o.leaky_slope});
  spec.layers.push_back(Unfold{o.fibers, {o.sequence_channels, 1, seq_len}});
  for (int i = 0; i < o.upsample_layers; ++i) {
    spec.layers.push_back(Conv1dUpsample{2, o.upsample_filters, 2});
    spec.layers.push_back(LeakyRelu{o.leaky_slope});
  }
  spec.layers.push_back(Flatten{});
  spec.layers.push_back(Dense{o.outputs});
  spec.layers.push_back(Fold{o.fibers});
  layer_input_shapes(spec);
  return spec;
}

inline NetworkSpec build_multifiber(int fibers) {
  MultiFiberOptions o;
  o.fibers = fibers;
  return build_multifiber(o);
}

}  // namespace speckle::nn
