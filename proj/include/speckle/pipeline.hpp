#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <barrier>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

#include "speckle/core.hpp"
#include "speckle/io.hpp"
#include "speckle/nn/network.hpp"
#include "speckle/recon.hpp"
#include "speckle/specklegen.hpp"

namespace speckle::pipeline {

// ---- frames ---------------------------------------------------------------

struct FramePacket {
  SpeckleImage frame;  // all fiber cores tiled on the array grid
  double timestamp = 0.0;
  std::uint64_t sequence = 0;
};

/// Renders every fiber with its own spectrum into the array frame; grid
/// cells without a fiber stay dark.
inline SpeckleImage render_frame(const FiberArrayModel& array, std::span<const Spectrum> per_fiber) {
  validate(array);
  require(static_cast<int>(per_fiber.size()) == array.size(), ErrorCode::kDimensionMismatch,
          std::to_string(per_fiber.size()) + " spectra for " + std::to_string(array.size()) + " fibers");
  const RoiShape frame = array.frame_shape();
  const RoiShape roi = array.roi_shape();
  Eigen::VectorXd px = Eigen::VectorXd::Zero(frame.pixels());
  for (int p = 0; p < array.size(); ++p) {
    const Eigen::VectorXd img = (array.fibers[p].columns() * per_fiber[p].values()).cwiseMax(0.0);
    const PixelOffset o = array.fiber_origin(p);
    for (int r = 0; r < roi.height; ++r)
      px.segment((o.row + r) * frame.width + o.col, roi.width) = img.segment(r * roi.width, roi.width);
  }
  return SpeckleImage(frame, std::move(px));
}

inline SpeckleImage render_frame(const FiberArrayModel& array, const Spectrum& illumination) {
  const std::vector<Spectrum> all(array.size(), illumination);
  return render_frame(array, all);
}

/// Reconstructed spectra reassembled on the fiber grid, channel-major:
/// cube[(j * rows + r) * cols + c].
struct HyperspectralFrame {
  std::uint64_t sequence = 0;
  GridLayout grid;
  int channels = 0;
  std::vector<double> cube;

  double at(int fiber, int channel) const {
    return cube[(static_cast<std::size_t>(channel) * grid.rows + fiber / grid.cols) * grid.cols + fiber % grid.cols];
  }

  SpeckleImage channel_image(int channel) const {
    const std::size_t n = static_cast<std::size_t>(grid.rows) * grid.cols;
    Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(cube.data() + channel * n, static_cast<Eigen::Index>(n));
    return SpeckleImage({grid.rows, grid.cols}, std::move(v));
  }

  friend bool operator==(const HyperspectralFrame& a, const HyperspectralFrame& b) {
    return a.sequence == b.sequence && a.grid.rows == b.grid.rows && a.grid.cols == b.grid.cols &&
           a.channels == b.channels && a.cube == b.cube;
  }
};

// ---- timing ---------------------------------------------------------------

/// Seconds per stage for one frame. preprocess and inference are the slowest
/// worker's totals (the critical path); the *_cpu fields sum all workers.
struct StageTimes {
  double synthesize = 0.0;
  double preprocess = 0.0;
  double inference = 0.0;
  double assemble = 0.0;
  double total = 0.0;
  double preprocess_cpu = 0.0;
  double inference_cpu = 0.0;
};

struct TimingProfile {
  std::vector<StageTimes> frames;
  int fibers = 0;
  int workers = 1;

  StageTimes mean() const {
    StageTimes m;
    if (frames.empty()) return m;
    for (const auto& f : frames) {
      m.synthesize += f.synthesize;
      m.preprocess += f.preprocess;
      m.inference += f.inference;
      m.assemble += f.assemble;
      m.total += f.total;
      m.preprocess_cpu += f.preprocess_cpu;
      m.inference_cpu += f.inference_cpu;
    }
    const double n = static_cast<double>(frames.size());
    for (double* v : {&m.synthesize, &m.preprocess, &m.inference, &m.assemble, &m.total, &m.preprocess_cpu,
                      &m.inference_cpu})
      *v /= n;
    return m;
  }

  /// Reconstructed fibers per second of reconstruction wall time (frame
  /// synthesis excluded).
  double fibers_per_second() const {
    double t = 0.0;
    for (const auto& f : frames) t += f.total - f.synthesize;
    return t > 0.0 ? static_cast<double>(fibers) * frames.size() / t : 0.0;
  }

  /// Mean inference time per fiber, summed over workers.
  double inference_per_fiber() const {
    double t = 0.0;
    for (const auto& f : frames) t += f.inference_cpu;
    return frames.empty() || fibers == 0 ? 0.0 : t / (static_cast<double>(fibers) * frames.size());
  }
};

inline void write_timing_csv(const TimingProfile& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot open " + path.string());
  out << "frame,synthesize_s,preprocess_s,inference_s,assemble_s,total_s,preprocess_cpu_s,inference_cpu_s\n";
  for (std::size_t i = 0; i < t.frames.size(); ++i) {
    const auto& f = t.frames[i];
    out << i << "," << io::format_double(f.synthesize) << "," << io::format_double(f.preprocess) << ","
        << io::format_double(f.inference) << "," << io::format_double(f.assemble) << "," << io::format_double(f.total)
        << "," << io::format_double(f.preprocess_cpu) << "," << io::format_double(f.inference_cpu) << "\n";
  }
  require(static_cast<bool>(out), ErrorCode::kIo, "write failed for " + path.string());
}

struct StreamResult {
  std::vector<HyperspectralFrame> frames;
  TimingProfile timing;
};

using FrameSource = std::function<FramePacket(std::uint64_t sequence)>;

struct StreamOptions {
  int workers = 1;
  // Window cropped from the centre of each fiber's area; unset uses the
  // whole area.
  std::optional<RoiShape> roi;
  bool keep_frames = true;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double>(b - a).count();
}

struct WorkerState {
  std::vector<double> pixels;
  std::vector<double> out;
  ReconScratch scratch;
  double preprocess = 0.0;
  double inference = 0.0;
  std::exception_ptr error;
};

/// Copies a window of a row-major frame into dst.
inline void copy_window(const SpeckleImage& frame, PixelOffset origin, RoiShape shape, double* dst) {
  const double* src = frame.pixels().data();
  const int fw = frame.width();
  for (int r = 0; r < shape.height; ++r)
    std::copy_n(src + (origin.row + r) * fw + origin.col, shape.width, dst + r * shape.width);
}

/// Processes units of fibers with a fixed partition: worker w owns a
/// contiguous range of units for the whole stream. The calling thread is
/// worker 0, produces frames and assembles results. `process(u, frame,
/// spectra, state)` writes the spectra of unit u's fibers into the
/// fiber-major buffer.
template <typename Process>
StreamResult run_units(const FiberArrayModel& array, int channels, std::size_t n_units, const FrameSource& source,
                       int n_frames, const StreamOptions& opts, Process&& process) {
  require(n_frames >= 0, ErrorCode::kInvalidArgument, "frame count must be >= 0");
  require(opts.workers >= 1, ErrorCode::kInvalidArgument, "workers must be >= 1");
  const int workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(opts.workers), std::max<std::size_t>(n_units, 1)));
  const int n_fib = array.size();
  const GridLayout grid = array.grid;
  const std::size_t cells = static_cast<std::size_t>(grid.rows) * grid.cols;

  std::vector<WorkerState> state(workers);
  std::vector<double> spectra(static_cast<std::size_t>(n_fib) * channels);
  const FramePacket* current = nullptr;
  bool stop = false;

  const auto range = [&](int w) {
    return std::pair{n_units * w / workers, n_units * (w + 1) / workers};
  };
  const auto work = [&](int w) {
    auto& st = state[w];
    st.preprocess = st.inference = 0.0;
    try {
      const auto [lo, hi] = range(w);
      for (std::size_t u = lo; u < hi; ++u) process(u, current->frame, spectra.data(), st);
    } catch (...) {
      st.error = std::current_exception();
    }
  };

  std::barrier start(workers), done(workers);
  std::vector<std::jthread> pool;
  for (int w = 1; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (;;) {
        start.arrive_and_wait();
        if (stop) return;
        work(w);
        done.arrive_and_wait();
      }
    });
  }
  const auto shutdown = [&] {
    stop = true;
    if (workers > 1) start.arrive_and_wait();
    pool.clear();
  };

  StreamResult result;
  result.timing.fibers = n_fib;
  result.timing.workers = workers;
  try {
    for (int f = 0; f < n_frames; ++f) {
      StageTimes t;
      const auto t0 = Clock::now();
      const FramePacket packet = source(static_cast<std::uint64_t>(f));
      require(packet.frame.shape() == array.frame_shape(), ErrorCode::kDimensionMismatch,
              "frame " + to_string(packet.frame.shape()) + " does not match the array layout " +
                  to_string(array.frame_shape()));
      const auto t1 = Clock::now();
      current = &packet;
      if (workers > 1) start.arrive_and_wait();
      work(0);
      if (workers > 1) done.arrive_and_wait();
      for (auto& st : state) {
        if (st.error) std::rethrow_exception(std::exchange(st.error, nullptr));
        t.preprocess = std::max(t.preprocess, st.preprocess);
        t.inference = std::max(t.inference, st.inference);
        t.preprocess_cpu += st.preprocess;
        t.inference_cpu += st.inference;
      }
      const auto t2 = Clock::now();
      HyperspectralFrame hf{packet.sequence, grid, channels, std::vector<double>(cells * channels, 0.0)};
      for (int j = 0; j < channels; ++j) {
        double* plane = hf.cube.data() + static_cast<std::size_t>(j) * cells;
        for (int p = 0; p < n_fib; ++p) plane[p] = spectra[static_cast<std::size_t>(p) * channels + j];
      }
      if (opts.keep_frames) result.frames.push_back(std::move(hf));
      const auto t3 = Clock::now();
      t.synthesize = seconds(t0, t1);
      t.assemble = seconds(t2, t3);
      t.total = seconds(t0, t3);
      result.timing.frames.push_back(t);
    }
  } catch (...) {
    shutdown();
    throw;
  }
  shutdown();
  return result;
}

}  // namespace detail

/// One reconstructor per fiber. Each frame is cropped per fiber and
/// reconstructed; fibers are split into contiguous ranges, one per worker.
/// Output does not depend on the worker count.
inline StreamResult run_stream(const FiberArrayModel& array, std::span<const Reconstructor> reconstructors,
                               const FrameSource& source, int n_frames, const StreamOptions& opts = {}) {
  validate(array);
  require(static_cast<int>(reconstructors.size()) == array.size(), ErrorCode::kDimensionMismatch,
          std::to_string(reconstructors.size()) + " reconstructors for " + std::to_string(array.size()) + " fibers");
  const RoiShape area = array.roi_shape();
  const RoiShape roi = opts.roi.value_or(area);
  check_window(area, centered_origin(area, roi), roi);
  const PixelOffset inner = centered_origin(area, roi);
  const int channels = output_channels(reconstructors.front());
  for (const auto& r : reconstructors) {
    require(input_pixels(r) == roi.pixels(), ErrorCode::kDimensionMismatch,
            "reconstructor expects " + std::to_string(input_pixels(r)) + " pixels, ROI " + to_string(roi) + " has " +
                std::to_string(roi.pixels()));
    require(output_channels(r) == channels, ErrorCode::kDimensionMismatch, "reconstructors differ in channel count");
  }
  return detail::run_units(array, channels, reconstructors.size(), source, n_frames, opts,
                           [&](std::size_t p, const SpeckleImage& frame, double* spectra, detail::WorkerState& st) {
                             st.pixels.resize(static_cast<std::size_t>(roi.pixels()));
                             const auto a = detail::Clock::now();
                             detail::copy_window(frame, array.fiber_origin(static_cast<int>(p)) + inner, roi,
                                                 st.pixels.data());
                             const auto b = detail::Clock::now();
                             reconstruct_into(reconstructors[p], st.pixels.data(), spectra + p * channels, st.scratch);
                             const auto c = detail::Clock::now();
                             st.preprocess += detail::seconds(a, b);
                             st.inference += detail::seconds(b, c);
                           });
}

/// Groups of N consecutive fibers share one network with N input channels.
template <typename T>
inline StreamResult run_multifiber_stream(const FiberArrayModel& array,
                                          std::span<const std::shared_ptr<const nn::Network<T>>> nets, int group,
                                          const FrameSource& source, int n_frames, const StreamOptions& opts = {}) {
  validate(array);
  require(group >= 1 && array.size() % group == 0, ErrorCode::kDimensionMismatch,
          std::to_string(array.size()) + " fibers cannot be partitioned into groups of " + std::to_string(group));
  const std::size_t n_groups = static_cast<std::size_t>(array.size() / group);
  require(nets.size() == n_groups, ErrorCode::kDimensionMismatch,
          std::to_string(nets.size()) + " networks for " + std::to_string(n_groups) + " groups");
  const RoiShape area = array.roi_shape();
  const RoiShape roi = opts.roi.value_or(area);
  check_window(area, centered_origin(area, roi), roi);
  const PixelOffset inner = centered_origin(area, roi);
  require(nets.front() != nullptr, ErrorCode::kInvalidArgument, "null network");
  const int channels = nets.front()->output_dim() / group;
  for (const auto& n : nets) {
    require(n != nullptr, ErrorCode::kInvalidArgument, "null network");
    const nn::Shape3 in = n->input_shape();
    require(in.c == group && in.h == roi.height && in.w == roi.width && n->output_dim() == group * channels,
            ErrorCode::kDimensionMismatch,
            "network input " + to_string(in) + " does not match groups of " + std::to_string(group) + " " +
                to_string(roi) + " fibers");
  }
  const int hw = roi.pixels();
  return detail::run_units(
      array, channels, n_groups, source, n_frames, opts,
      [&](std::size_t g, const SpeckleImage& frame, double* spectra, detail::WorkerState& st) {
        st.pixels.resize(static_cast<std::size_t>(group) * hw);
        const auto a = detail::Clock::now();
        for (int k = 0; k < group; ++k) {
          const int p = static_cast<int>(g) * group + k;
          detail::copy_window(frame, array.fiber_origin(p) + inner, roi, st.pixels.data() + k * hw);
        }
        const auto b = detail::Clock::now();
        if constexpr (std::is_same_v<T, float>)
          nets[g]->predict_into(st.pixels.data(), spectra + g * group * channels, st.scratch.f32);
        else
          nets[g]->predict_into(st.pixels.data(), spectra + g * group * channels, st.scratch.f64);
        const auto c = detail::Clock::now();
        st.preprocess += detail::seconds(a, b);
        st.inference += detail::seconds(b, c);
      });
}

// ---- wavelength switching -------------------------------------------------

/// Frames start..end (inclusive) use the weighted channels. When an entry
/// starts on the last frame of the previous one, that frame blends the two
/// spectra 50/50, as for a switch during exposure.
struct ScriptEntry {
  int start = 0;
  int end = 0;
  std::vector<std::pair<int, double>> channels;  // (channel, weight)
};

/// Lines "start end ch[:w],ch[:w],..."; blank lines and '#' comments are
/// skipped; weights default to 1.
inline std::vector<ScriptEntry> parse_script(std::istream& in, const std::string& what = "script") {
  std::vector<ScriptEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    ScriptEntry e;
    std::string list, extra;
    if (!(ls >> e.start)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      fail(ErrorCode::kParse, what + ":" + std::to_string(lineno) + ": expected 'start end channels'");
    }
    const std::string where = what + ":" + std::to_string(lineno);
    require(static_cast<bool>(ls >> e.end >> list) && !(ls >> extra), ErrorCode::kParse,
            where + ": expected 'start end channels'");
    std::istringstream items(list);
    std::string item;
    while (std::getline(items, item, ',')) {
      const auto colon = item.find(':');
      try {
        std::size_t used = 0;
        const int ch = std::stoi(item.substr(0, colon), &used);
        require(used == (colon == std::string::npos ? item.size() : colon), ErrorCode::kParse, where + ": bad channel '" + item + "'");
        double w = 1.0;
        if (colon != std::string::npos) {
          const std::string ws = item.substr(colon + 1);
          w = std::stod(ws, &used);
          require(used == ws.size(), ErrorCode::kParse, where + ": bad weight '" + item + "'");
        }
        e.channels.emplace_back(ch, w);
      } catch (const std::logic_error&) {
        fail(ErrorCode::kParse, where + ": bad channel entry '" + item + "'");
      }
    }
    require(!e.channels.empty(), ErrorCode::kParse, where + ": no channels");
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<ScriptEntry> load_script(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open " + path.string());
  return parse_script(in, path.string());
}

/// One illumination spectrum per frame, frames 0 .. last end.
inline std::vector<Spectrum> script_spectra(const std::vector<ScriptEntry>& script, int n_channels) {
  require(!script.empty(), ErrorCode::kInvalidArgument, "script is empty");
  std::vector<Spectrum> frames;
  int next = 0;
  for (std::size_t i = 0; i < script.size(); ++i) {
    const auto& e = script[i];
    require(e.start <= e.end, ErrorCode::kInvalidArgument,
            "script entry " + std::to_string(i) + " ends before it starts");
    Eigen::VectorXd v = Eigen::VectorXd::Zero(n_channels);
    for (const auto& [ch, w] : e.channels) {
      require(ch >= 0 && ch < n_channels, ErrorCode::kInvalidArgument,
              "script channel " + std::to_string(ch) + " outside 0.." + std::to_string(n_channels - 1));
      require(w >= 0.0 && std::isfinite(w), ErrorCode::kInvalidArgument, "script weights must be >= 0");
      v[ch] += w;
    }
    if (i == 0) {
      require(e.start == 0, ErrorCode::kInvalidArgument, "script must start at frame 0");
    } else {
      require(e.start == next || e.start == next - 1, ErrorCode::kInvalidArgument,
              "gap or overlap in script before frame " + std::to_string(e.start) + " (expected " +
                  std::to_string(next) + ")");
    }
    int f = e.start;
    if (i > 0 && e.start == next - 1) {
      frames.back() = Spectrum(0.5 * (frames.back().values() + v));
      ++f;
    }
    for (; f <= e.end; ++f) frames.emplace_back(v);
    next = e.end + 1;
  }
  return frames;
}

/// Frames rendered from a script with the same illumination on every fiber.
inline std::vector<FramePacket> simulate_wavelength_switch(const FiberArrayModel& array,
                                                           const std::vector<ScriptEntry>& script,
                                                           double frame_interval = 1.0) {
  const auto spectra = script_spectra(script, array.channels());
  std::vector<FramePacket> out;
  for (std::size_t i = 0; i < spectra.size(); ++i)
    out.push_back({render_frame(array, spectra[i]), frame_interval * static_cast<double>(i), i});
  return out;
}

/// Source that renders frame i from spectra[i % size] on demand.
inline FrameSource spectra_source(const FiberArrayModel& array, std::vector<Spectrum> spectra,
                                  double frame_interval = 1.0) {
  require(!spectra.empty(), ErrorCode::kInvalidArgument, "no spectra for the frame source");
  return [&array, spectra = std::move(spectra), frame_interval](std::uint64_t seq) {
    return FramePacket{render_frame(array, spectra[seq % spectra.size()]), frame_interval * static_cast<double>(seq),
                       seq};
  };
}

/// Source replaying pre-rendered packets.
inline FrameSource packet_source(std::span<const FramePacket> packets) {
  require(!packets.empty(), ErrorCode::kInvalidArgument, "no packets for the frame source");
  return [packets](std::uint64_t seq) { return packets[seq % packets.size()]; };
}

}  // namespace speckle::pipeline
