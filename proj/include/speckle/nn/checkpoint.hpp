#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <type_traits>
#include <vector>

#include "speckle/io.hpp"
#include "speckle/nn/network.hpp"
#include "speckle/nn/spec.hpp"
#include "speckle/nn/train.hpp"

namespace speckle::nn {

// ---- SPKN network checkpoint ------------------------------------------------
//
//   "SPKN" | u16 version | u8 dtype | u32 len + spec text | u32 len + provenance |
//   u32 layer count | per layer: u32 kind length + kind, u32 P, u32 S,
//     P parameter values, S state values (in dtype) |
//   u32 epochs | epochs x f64 train loss | epochs x f64 validation loss |
//   i32 best epoch | u32 CRC32
//
// Values are stored in the network's own precision so a round trip is exact.

inline constexpr std::uint16_t kSpknVersion = 1;

template <typename T>
constexpr io::Dtype dtype_of() {
  return std::is_same_v<T, float> ? io::Dtype::kF32 : io::Dtype::kF64;
}

template <typename T>
inline std::vector<std::uint8_t> encode_checkpoint(const TrainedNetwork<T>& tn) {
  const Network<T>& net = tn.net;
  io::ByteWriter w;
  w.put_bytes("SPKN");
  w.put(kSpknVersion);
  w.put(static_cast<std::uint8_t>(dtype_of<T>()));
  w.put_string(to_text(net.spec()));
  w.put_string(tn.provenance);
  const auto layers = net.layer_params();
  const auto states = net.layer_state_counts();
  w.put(static_cast<std::uint32_t>(layers.size()));
  std::size_t state_offset = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    w.put_string(layers[i].kind);
    w.put(static_cast<std::uint32_t>(layers[i].count));
    w.put(static_cast<std::uint32_t>(states[i]));
    for (std::size_t k = 0; k < layers[i].count; ++k) w.put(net.parameters()[layers[i].offset + k]);
    for (std::size_t k = 0; k < states[i]; ++k) w.put(net.state()[state_offset + k]);
    state_offset += states[i];
  }
  const auto& h = tn.history;
  w.put(static_cast<std::uint32_t>(h.train_loss.size()));
  for (const double v : h.train_loss) w.put(v);
  for (const double v : h.validation_loss) w.put(v);
  w.put(static_cast<std::int32_t>(h.best_epoch));
  w.put_crc();
  return std::move(w).take();
}

template <typename T>
inline TrainedNetwork<T> decode_checkpoint(const std::vector<std::uint8_t>& buf, const std::string& what = "SPKN") {
  io::ByteReader rd(buf, what);
  io::check_magic(rd, "SPKN", what);
  const auto version = rd.get<std::uint16_t>();
  require(version == kSpknVersion, ErrorCode::kUnsupportedVersion, what + ": version " + std::to_string(version));
  const io::Dtype dtype = io::read_dtype(rd, what);
  io::verify_crc(buf, what);

  TrainedNetwork<T> tn;
  const NetworkSpec spec = spec_from_text(rd.get_string());
  tn.provenance = rd.get_string();
  tn.net = Network<T>(spec, 0);
  const auto layers = tn.net.layer_params();
  const auto states = tn.net.layer_state_counts();
  const auto n_layers = rd.get<std::uint32_t>();
  require(n_layers == layers.size(), ErrorCode::kDimensionMismatch,
          what + ": " + std::to_string(n_layers) + " layers stored, spec has " + std::to_string(layers.size()));
  const auto get_value = [&]() -> T {
    return dtype == io::Dtype::kF32 ? static_cast<T>(rd.get<float>()) : static_cast<T>(rd.get<double>());
  };
  std::size_t state_offset = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string kind = rd.get_string();
    const auto p = rd.get<std::uint32_t>();
    const auto s = rd.get<std::uint32_t>();
    require(kind == layers[i].kind && p == layers[i].count && s == states[i], ErrorCode::kDimensionMismatch,
            what + ": layer " + std::to_string(i) + " (" + kind + ") does not match the stored spec");
    for (std::size_t k = 0; k < p; ++k) tn.net.parameters()[layers[i].offset + k] = get_value();
    for (std::size_t k = 0; k < s; ++k) tn.net.state()[state_offset + k] = get_value();
    state_offset += s;
  }
  const auto epochs = rd.get<std::uint32_t>();
  require(static_cast<std::uint64_t>(epochs) * 16 <= rd.remaining(), ErrorCode::kDimensionOverflow,
          what + ": history length " + std::to_string(epochs));
  tn.history.train_loss.resize(epochs);
  tn.history.validation_loss.resize(epochs);
  for (auto& v : tn.history.train_loss) v = rd.get<double>();
  for (auto& v : tn.history.validation_loss) v = rd.get<double>();
  tn.history.best_epoch = rd.get<std::int32_t>();
  require(rd.remaining() == 4, ErrorCode::kParse, what + ": trailing bytes before the CRC");
  return tn;
}

template <typename T>
inline void save_checkpoint(const TrainedNetwork<T>& tn, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(tn));
}

template <typename T>
inline TrainedNetwork<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(io::read_file(path), path.string());
}

}  // namespace speckle::nn
