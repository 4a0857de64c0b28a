#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "speckle/core.hpp"
#include "speckle/io.hpp"
#include "speckle/parallel.hpp"
#include "speckle/rng.hpp"
#include "speckle/specklegen.hpp"

namespace speckle {

// ---- spectrum samplers ----------------------------------------------------

struct SparseSpectra {
  int n_min = 1;  // inclusive range of non-zero channel counts
  int n_max = 1;
};

struct DenseSpectra {
  double walk_step = 0.2;
};

struct SpectrumSampler {
  std::variant<SparseSpectra, DenseSpectra> kind = DenseSpectra{};
  bool normalize_peak = true;

  static SpectrumSampler sparse(int n_lambda) { return {SparseSpectra{n_lambda, n_lambda}}; }
  static SpectrumSampler sparse(int n_min, int n_max) { return {SparseSpectra{n_min, n_max}}; }
  static SpectrumSampler dense(double walk_step = 0.2) { return {DenseSpectra{walk_step}}; }
};

inline std::string describe(const SpectrumSampler& s) {
  std::ostringstream os;
  if (const auto* sp = std::get_if<SparseSpectra>(&s.kind)) {
    os << "sparse:" << sp->n_min;
    if (sp->n_max != sp->n_min) os << ".." << sp->n_max;
  } else {
    os << "dense:" << io::format_double(std::get<DenseSpectra>(s.kind).walk_step);
  }
  return os.str();
}

inline void validate(const SpectrumSampler& s, int n_channels) {
  if (const auto* sp = std::get_if<SparseSpectra>(&s.kind)) {
    require(1 <= sp->n_min && sp->n_min <= sp->n_max && sp->n_max <= n_channels, ErrorCode::kInvalidArgument,
            "sparse n_lambda range " + std::to_string(sp->n_min) + ".." + std::to_string(sp->n_max) +
                " outside 1.." + std::to_string(n_channels));
  } else {
    const double step = std::get<DenseSpectra>(s.kind).walk_step;
    require(step > 0.0 && step <= 1.0, ErrorCode::kInvalidArgument,
            "dense walk_step must be in (0, 1], got " + io::format_double(step));
  }
}

inline Eigen::VectorXd peak_normalized(Eigen::VectorXd v) {
  const double peak = v.size() ? v.maxCoeff() : 0.0;
  if (peak > 0.0) v /= peak;
  return v;
}

/// Exactly n_lambda non-zero channels at uniformly chosen positions, with
/// amplitudes uniform on (0, 1].
inline Spectrum sample_sparse_spectrum(Rng& rng, int n_channels, int n_lambda, bool normalize_peak = true) {
  require(n_channels >= 1 && 1 <= n_lambda && n_lambda <= n_channels, ErrorCode::kInvalidArgument,
          "n_lambda " + std::to_string(n_lambda) + " outside 1.." + std::to_string(n_channels));
  std::vector<int> order(n_channels);
  std::iota(order.begin(), order.end(), 0);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(n_channels);
  for (int i = 0; i < n_lambda; ++i) {
    const auto pick = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_channels - i)));
    std::swap(order[i], order[pick]);
    v[order[i]] = rng.uniform_open_zero();
  }
  return Spectrum(normalize_peak ? peak_normalized(std::move(v)) : std::move(v));
}

/// Smooth spectrum from a clamped random walk.
inline Spectrum sample_dense_spectrum(Rng& rng, int n_channels, double walk_step, bool normalize_peak = true) {
  require(walk_step > 0.0 && walk_step <= 1.0, ErrorCode::kInvalidArgument, "walk_step must be in (0, 1]");
  Eigen::VectorXd v(n_channels);
  v[0] = rng.uniform();
  for (int j = 1; j < n_channels; ++j) v[j] = std::clamp(v[j - 1] + walk_step * rng.uniform(-1.0, 1.0), 0.0, 1.0);
  return Spectrum(normalize_peak ? peak_normalized(std::move(v)) : std::move(v));
}

inline Spectrum sample_spectrum(const SpectrumSampler& s, Rng& rng, int n_channels) {
  if (const auto* sp = std::get_if<SparseSpectra>(&s.kind)) {
    const int n = sp->n_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(sp->n_max - sp->n_min + 1)));
    return sample_sparse_spectrum(rng, n_channels, n, s.normalize_peak);
  }
  return sample_dense_spectrum(rng, n_channels, std::get<DenseSpectra>(s.kind).walk_step, s.normalize_peak);
}

// ---- perturbations --------------------------------------------------------

struct Perturbation {
  double noise_level = 0.0;  // Gaussian sigma as a fraction of the clean image mean
  bool shift_one_pixel = false;
};

inline void validate(const Perturbation& p) {
  require(p.noise_level >= 0.0 && p.noise_level <= 1.0, ErrorCode::kInvalidArgument,
          "noise level must be in [0, 1], got " + io::format_double(p.noise_level));
}

/// Adds N(0, (p * mean)^2) to every pixel and clamps at zero.
inline SpeckleImage add_noise(const SpeckleImage& image, double p, Rng& rng) {
  require(p >= 0.0, ErrorCode::kInvalidArgument, "noise level must be >= 0");
  if (p == 0.0) return image;
  const double sigma = p * image.mean();
  Eigen::VectorXd px = image.pixels();
  for (Eigen::Index i = 0; i < px.size(); ++i) px[i] = std::max(0.0, px[i] + sigma * rng.normal());
  return SpeckleImage(image.shape(), std::move(px), image.origin());
}

// The 8-neighbourhood, clockwise from north.
inline constexpr std::array<PixelOffset, 8> kShiftDirections{{
    {-1, 0}, {-1, 1}, {0, 1}, {1, 1}, {1, 0}, {1, -1}, {0, -1}, {-1, -1}}};

struct ShiftedCrop {
  SpeckleImage image;
  int direction = 0;  // index into kShiftDirections
};

/// Crops the ROI displaced by one pixel in a uniformly drawn direction.
inline ShiftedCrop shift_roi(const SpeckleImage& parent, PixelOffset roi_origin, RoiShape roi_shape, Rng& rng) {
  const auto frame = parent.shape();
  const bool margin = roi_origin.row >= 1 && roi_origin.col >= 1 &&
                      roi_origin.row + roi_shape.height + 1 <= frame.height &&
                      roi_origin.col + roi_shape.width + 1 <= frame.width;
  require(margin, ErrorCode::kOutOfBounds,
          "one-pixel shift needs a 1-pixel margin around ROI " + to_string(roi_shape) + " at (" +
              std::to_string(roi_origin.row) + "," + std::to_string(roi_origin.col) + ") in frame " +
              to_string(frame));
  const int dir = static_cast<int>(rng.below(kShiftDirections.size()));
  return {crop_roi(parent, roi_origin + kShiftDirections[dir], roi_shape), dir};
}

// ---- datasets -------------------------------------------------------------

struct Split {
  int n_train = 0;
  int n_val = 0;
  int n_test = 0;

  int total() const { return n_train + n_val + n_test; }
  friend bool operator==(const Split&, const Split&) = default;

  // 29:1:1 proportions of the 31000-sample protocol, scaled to n.
  static Split proportional(int n) {
    const int held_out = static_cast<int>(std::lround(n / 31.0));
    return {n - 2 * held_out, held_out, held_out};
  }
};

struct Sample {
  SpeckleImage image;
  Spectrum label;
  int shift_direction = -1;  // -1 when unshifted
};

struct DatasetProvenance {
  std::uint64_t seed = 0;
  std::string sampler;
  Perturbation perturbation;
  std::uint64_t matrix_hash = 0;
  PixelOffset roi_origin{};
};

struct Dataset {
  std::vector<Sample> samples;
  Split split;
  DatasetProvenance provenance;

  std::span<const Sample> train() const { return {samples.data(), static_cast<std::size_t>(split.n_train)}; }
  std::span<const Sample> validation() const {
    return {samples.data() + split.n_train, static_cast<std::size_t>(split.n_val)};
  }
  std::span<const Sample> test() const {
    return {samples.data() + split.n_train + split.n_val, static_cast<std::size_t>(split.n_test)};
  }
  RoiShape roi_shape() const { return samples.empty() ? RoiShape{} : samples.front().image.shape(); }
  int channels() const { return samples.empty() ? 0 : samples.front().label.size(); }
};

struct DatasetOptions {
  // ROI window inside the matrix frame; defaults to the whole frame.
  std::optional<PixelOffset> roi_origin;
  std::optional<RoiShape> roi_shape;
  int threads = 1;
};

/// Draws spectra, renders them through A and applies the perturbations.
/// Each sample uses its own generator split from rng in sample order, so the
/// result does not depend on the thread count.
inline Dataset build_dataset(const TransmissionMatrix& a, const SpectrumSampler& sampler, int n_samples, Split split,
                             const Perturbation& perturbation, Rng& rng, const DatasetOptions& opts = {}) {
  require(n_samples >= 1, ErrorCode::kInvalidArgument, "n_samples must be >= 1");
  require(split.n_train >= 0 && split.n_val >= 0 && split.n_test >= 0 && split.total() == n_samples,
          ErrorCode::kInvalidArgument,
          "split " + std::to_string(split.n_train) + "/" + std::to_string(split.n_val) + "/" +
              std::to_string(split.n_test) + " does not sum to " + std::to_string(n_samples));
  validate(sampler, a.channels());
  validate(perturbation);

  const RoiShape roi = opts.roi_shape.value_or(a.roi_shape());
  const PixelOffset origin = opts.roi_origin.value_or(
      opts.roi_shape ? centered_origin(a.roi_shape(), roi) : PixelOffset{0, 0});
  check_window(a.roi_shape(), origin, roi);

  // Render only the part of the frame that can reach the ROI.
  const int margin = perturbation.shift_one_pixel ? 1 : 0;
  const PixelOffset parent_origin{origin.row - margin, origin.col - margin};
  const RoiShape parent_shape{roi.height + 2 * margin, roi.width + 2 * margin};
  if (perturbation.shift_one_pixel) {
    const auto frame = a.roi_shape();
    const bool ok = parent_origin.row >= 0 && parent_origin.col >= 0 &&
                    parent_origin.row + parent_shape.height <= frame.height &&
                    parent_origin.col + parent_shape.width <= frame.width;
    require(ok, ErrorCode::kOutOfBounds, "one-pixel shift needs a 1-pixel margin around the ROI");
  }
  const TransmissionMatrix parent = crop_matrix(a, parent_origin, parent_shape);
  const PixelOffset roi_in_parent{margin, margin};

  std::vector<Rng> rngs;
  rngs.reserve(n_samples);
  for (int i = 0; i < n_samples; ++i) rngs.push_back(rng.split());

  Dataset ds;
  ds.split = split;
  ds.samples.resize(n_samples);
  ds.provenance = {rng.seed(), describe(sampler), perturbation, io::matrix_hash(a), origin};
  parallel_for(static_cast<std::size_t>(n_samples), opts.threads, [&](std::size_t i) {
    Rng& r = rngs[i];
    Sample s;
    s.label = sample_spectrum(sampler, r, a.channels());
    const SpeckleImage frame = render_speckle(parent, s.label);
    if (perturbation.shift_one_pixel) {
      auto shifted = shift_roi(frame, roi_in_parent, roi, r);
      s.image = std::move(shifted.image);
      s.shift_direction = shifted.direction;
    } else {
      s.image = margin == 0 ? frame : crop_roi(frame, roi_in_parent, roi);
    }
    s.image = SpeckleImage(roi, add_noise(s.image, perturbation.noise_level, r).pixels(), origin);
    ds.samples[i] = std::move(s);
  });
  return ds;
}

/// Joins datasets split by split: all training parts, then all validation
/// parts, then all test parts. Provenance is taken from the first part.
inline Dataset concat_datasets(const std::vector<const Dataset*>& parts) {
  require(!parts.empty(), ErrorCode::kInvalidArgument, "nothing to concatenate");
  Dataset out;
  for (const auto* d : parts) out.samples.insert(out.samples.end(), d->train().begin(), d->train().end());
  for (const auto* d : parts) out.samples.insert(out.samples.end(), d->validation().begin(), d->validation().end());
  for (const auto* d : parts) out.samples.insert(out.samples.end(), d->test().begin(), d->test().end());
  for (const auto* d : parts) {
    out.split.n_train += d->split.n_train;
    out.split.n_val += d->split.n_val;
    out.split.n_test += d->split.n_test;
  }
  out.provenance = parts.front()->provenance;
  return out;
}

// ---- dataset files --------------------------------------------------------
//
// A dataset directory holds:
//   manifest.txt  key=value provenance and sizes
//   labels.csv    one spectrum per row
//   images.spkd   "SPKD" | u16 version | u32 n | u32 h | u32 w | u8 dtype |
//                 n*h*w values, sample-major, row-major pixels | u32 CRC32
//   shifts.csv    per-sample shift direction (only when shifting)

inline constexpr std::uint16_t kSpkdVersion = 1;

inline std::vector<std::uint8_t> encode_images(const Dataset& ds, io::Dtype dtype) {
  const auto roi = ds.roi_shape();
  io::ByteWriter w;
  w.put_bytes("SPKD");
  w.put(kSpkdVersion);
  w.put(static_cast<std::uint32_t>(ds.samples.size()));
  w.put(static_cast<std::uint32_t>(roi.height));
  w.put(static_cast<std::uint32_t>(roi.width));
  w.put(static_cast<std::uint8_t>(dtype));
  for (const auto& s : ds.samples) w.put_values(s.image.pixels().data(), static_cast<std::size_t>(s.image.size()), dtype);
  w.put_crc();
  return std::move(w).take();
}

inline std::vector<Eigen::VectorXd> decode_images(const std::vector<std::uint8_t>& buf, RoiShape& roi,
                                                  const std::string& what) {
  io::ByteReader r(buf, what);
  io::check_magic(r, "SPKD", what);
  const auto version = r.get<std::uint16_t>();
  require(version == kSpkdVersion, ErrorCode::kUnsupportedVersion, what + ": version " + std::to_string(version));
  const std::uint64_t n = r.get<std::uint32_t>();
  const std::uint64_t h = r.get<std::uint32_t>();
  const std::uint64_t w = r.get<std::uint32_t>();
  const io::Dtype dtype = io::read_dtype(r, what);
  require(h > 0 && w > 0 && h * w <= std::numeric_limits<int>::max() &&
              n * h * w * static_cast<std::uint8_t>(dtype) <= io::kMaxPayloadBytes,
          ErrorCode::kDimensionOverflow, what + ": dims " + std::to_string(n) + "x" + std::to_string(h) + "x" +
                                             std::to_string(w));
  io::verify_crc(buf, what);
  roi = {static_cast<int>(h), static_cast<int>(w)};
  std::vector<Eigen::VectorXd> images(n, Eigen::VectorXd(roi.pixels()));
  for (auto& img : images) r.get_values(img.data(), static_cast<std::size_t>(img.size()), dtype);
  return images;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir, io::Dtype dtype = io::Dtype::kF64) {
  require(!ds.samples.empty(), ErrorCode::kInvalidArgument, "cannot save an empty dataset");
  std::filesystem::create_directories(dir);
  io::write_file(dir / "images.spkd", encode_images(ds, dtype));
  {
    std::ofstream out(dir / "labels.csv", std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::kIo, "cannot write labels.csv in " + dir.string());
    for (const auto& s : ds.samples) {
      for (int j = 0; j < s.label.size(); ++j) out << (j ? "," : "") << io::format_double(s.label[j]);
      out << "\n";
    }
  }
  if (ds.provenance.perturbation.shift_one_pixel) {
    std::ofstream out(dir / "shifts.csv", std::ios::trunc);
    for (const auto& s : ds.samples) out << s.shift_direction << "\n";
  }
  io::Manifest m;
  m.set("kind", "dataset");
  m.set("n_samples", ds.samples.size());
  m.set("n_train", ds.split.n_train);
  m.set("n_val", ds.split.n_val);
  m.set("n_test", ds.split.n_test);
  m.set("channels", ds.channels());
  m.set("roi", to_string(ds.roi_shape()));
  m.set("roi_origin", std::to_string(ds.provenance.roi_origin.row) + "," + std::to_string(ds.provenance.roi_origin.col));
  m.set("seed", ds.provenance.seed);
  m.set("sampler", ds.provenance.sampler);
  m.set("noise", ds.provenance.perturbation.noise_level);
  m.set("shift", ds.provenance.perturbation.shift_one_pixel ? 1 : 0);
  m.set("matrix_hash", ds.provenance.matrix_hash);
  m.set("dtype", io::to_string(dtype));
  m.write(dir / "manifest.txt");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto m = io::Manifest::read(dir / "manifest.txt");
  RoiShape roi;
  const auto images = decode_images(io::read_file(dir / "images.spkd"), roi, (dir / "images.spkd").string());
  Dataset ds;
  ds.split = {static_cast<int>(m.get_int("n_train")), static_cast<int>(m.get_int("n_val")),
              static_cast<int>(m.get_int("n_test"))};
  require(ds.split.total() == static_cast<int>(images.size()), ErrorCode::kParse,
          dir.string() + ": split does not match image count");
  ds.provenance.seed = std::stoull(m.get("seed"));
  ds.provenance.sampler = m.get("sampler");
  ds.provenance.perturbation = {m.get_double("noise"), m.get_int("shift") != 0};
  ds.provenance.matrix_hash = std::stoull(m.get("matrix_hash"));
  {
    const auto o = m.get_or("roi_origin", "0,0");
    const auto comma = o.find(',');
    ds.provenance.roi_origin = {std::stoi(o.substr(0, comma)), std::stoi(o.substr(comma + 1))};
  }
  const int channels = static_cast<int>(m.get_int("channels"));

  std::ifstream labels(dir / "labels.csv");
  require(static_cast<bool>(labels), ErrorCode::kIo, "cannot open labels.csv in " + dir.string());
  std::vector<int> shifts;
  if (ds.provenance.perturbation.shift_one_pixel) {
    std::ifstream in(dir / "shifts.csv");
    int d;
    while (in >> d) shifts.push_back(d);
  }
  ds.samples.reserve(images.size());
  std::string line;
  for (std::size_t i = 0; i < images.size(); ++i) {
    require(static_cast<bool>(std::getline(labels, line)), ErrorCode::kParse,
            "labels.csv has fewer rows than images");
    Eigen::VectorXd v(channels);
    std::istringstream row(line);
    std::string cell;
    int j = 0;
    while (std::getline(row, cell, ',')) {
      require(j < channels, ErrorCode::kParse, "labels.csv row " + std::to_string(i) + " is too long");
      v[j++] = std::stod(cell);
    }
    require(j == channels, ErrorCode::kParse, "labels.csv row " + std::to_string(i) + " is too short");
    Sample s{SpeckleImage(roi, images[i], ds.provenance.roi_origin), Spectrum(std::move(v)),
             i < shifts.size() ? shifts[i] : -1};
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---- RGB encoding scenario -----------------------------------------------

/// RGB raster with channel values in [0, 1], stored row-major as (r, g, b) triples.
struct RgbImage {
  int rows = 0;
  int cols = 0;
  std::vector<std::array<double, 3>> pixels;

  const std::array<double, 3>& at(int r, int c) const { return pixels[r * cols + c]; }
};

inline constexpr int kRgbImages = 14;
inline constexpr int kRgbEncodedChannels = 3 * kRgbImages;  // channel 42 stays blank

struct RgbEncoding {
  GridLayout raster;
  std::vector<SpeckleImage> images;  // one per raster position (= fiber)
  std::vector<Spectrum> truth;
};

/// Image k's red, green and blue planes go into channels 3k, 3k+1, 3k+2; the
/// remaining channels are zero at every position.
inline RgbEncoding encode_rgb_images(const std::vector<RgbImage>& rasters, const FiberArrayModel& array) {
  require(static_cast<int>(rasters.size()) == kRgbImages, ErrorCode::kInvalidArgument,
          "expected 14 RGB images, got " + std::to_string(rasters.size()));
  validate(array);
  const int y = array.channels();
  require(y >= kRgbEncodedChannels + 1, ErrorCode::kInvalidArgument,
          "RGB encoding needs >= 43 channels, matrix has " + std::to_string(y));
  const GridLayout grid = array.grid;
  require(array.size() == grid.rows * grid.cols, ErrorCode::kDimensionMismatch, "fiber array grid is not full");
  for (const auto& img : rasters) {
    require(img.rows == grid.rows && img.cols == grid.cols &&
                static_cast<int>(img.pixels.size()) == grid.rows * grid.cols,
            ErrorCode::kDimensionMismatch,
            "raster " + std::to_string(img.rows) + "x" + std::to_string(img.cols) + " does not match fiber grid " +
                std::to_string(grid.rows) + "x" + std::to_string(grid.cols));
  }
  RgbEncoding enc;
  enc.raster = grid;
  for (int p = 0; p < array.size(); ++p) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(y);
    for (int k = 0; k < kRgbImages; ++k)
      for (int c = 0; c < 3; ++c) v[3 * k + c] = rasters[k].pixels[p][c];
    Spectrum s(std::move(v));
    enc.images.push_back(render_speckle(array.fibers[p], s));
    enc.truth.push_back(std::move(s));
  }
  return enc;
}

/// Deterministic test pictures: soft discs and gradients in varied colours.
inline std::vector<RgbImage> synthetic_rgb_images(Rng& rng, GridLayout grid) {
  std::vector<RgbImage> out;
  for (int k = 0; k < kRgbImages; ++k) {
    RgbImage img{grid.rows, grid.cols, {}};
    const double cy = rng.uniform(0.0, grid.rows);
    const double cx = rng.uniform(0.0, grid.cols);
    const double radius = rng.uniform(0.3, 0.7) * std::max(grid.rows, grid.cols);
    std::array<double, 3> fg{rng.uniform(), rng.uniform(), rng.uniform()};
    std::array<double, 3> bg{rng.uniform(0.0, 0.4), rng.uniform(0.0, 0.4), rng.uniform(0.0, 0.4)};
    for (int r = 0; r < grid.rows; ++r) {
      for (int c = 0; c < grid.cols; ++c) {
        const double d = std::hypot(r + 0.5 - cy, c + 0.5 - cx) / radius;
        const double t = std::clamp(1.5 - d, 0.0, 1.0);
        const double ramp = grid.cols > 1 ? static_cast<double>(c) / (grid.cols - 1) : 0.5;
        std::array<double, 3> px{};
        for (int ch = 0; ch < 3; ++ch) px[ch] = std::clamp(t * fg[ch] + (1 - t) * bg[ch] * (0.5 + ramp), 0.0, 1.0);
        img.pixels.push_back(px);
      }
    }
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace speckle
