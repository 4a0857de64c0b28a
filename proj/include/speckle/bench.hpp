#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iterator>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "speckle/core.hpp"
#include "speckle/io.hpp"
#include "speckle/metrics.hpp"
#include "speckle/nn/network.hpp"
#include "speckle/nn/spec.hpp"
#include "speckle/nn/train.hpp"
#include "speckle/parallel.hpp"
#include "speckle/recon.hpp"
#include "speckle/recon_cs.hpp"
#include "speckle/recon_linear.hpp"
#include "speckle/rng.hpp"
#include "speckle/specklegen.hpp"
#include "speckle/synth.hpp"

namespace speckle::bench {

inline constexpr double kFailureThreshold = 0.5;

// ---- evaluation -----------------------------------------------------------

struct EvalReport {
  std::vector<double> correlations;
  double mean = 0.0;
  double stddev = 0.0;
  double failure_fraction = 0.0;  // share of correlations below 0.5
  int count = 0;
  std::string settings;
};

inline EvalReport summarize(std::vector<double> correlations, std::string settings = {}) {
  EvalReport r;
  r.correlations = std::move(correlations);
  r.settings = std::move(settings);
  r.count = static_cast<int>(r.correlations.size());
  if (r.count == 0) return r;
  double sum = 0.0;
  int failed = 0;
  for (const double c : r.correlations) {
    sum += c;
    failed += c < kFailureThreshold;
  }
  r.mean = sum / r.count;
  double ss = 0.0;
  for (const double c : r.correlations) ss += (c - r.mean) * (c - r.mean);
  r.stddev = r.count > 1 ? std::sqrt(ss / (r.count - 1)) : 0.0;
  r.failure_fraction = static_cast<double>(failed) / r.count;
  return r;
}

/// Cross-correlation of every reconstruction with its label.
inline EvalReport evaluate(const Reconstructor& r, std::span<const Sample> samples, int threads = 1,
                           std::string settings = {}) {
  std::vector<double> corr(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    thread_local ReconScratch scratch;
    corr[i] = cross_correlation(reconstruct(r, samples[i].image, scratch), samples[i].label);
  });
  return summarize(std::move(corr), std::move(settings));
}

/// Counts per bin of width 2 / bins over [-1, 1]; 1.0 falls in the last bin.
inline std::vector<int> histogram(std::span<const double> values, int bins = 20) {
  require(bins >= 1, ErrorCode::kInvalidArgument, "histogram needs >= 1 bin");
  std::vector<int> h(bins, 0);
  for (const double v : values) {
    const int b = static_cast<int>(std::floor((std::clamp(v, -1.0, 1.0) + 1.0) / 2.0 * bins));
    ++h[std::min(b, bins - 1)];
  }
  return h;
}

// ---- sampling ratios ------------------------------------------------------

/// Square ROI whose pixel count per channel matches `ratio` to within 0.01.
inline RoiShape roi_for_ratio(double ratio, int channels, RoiShape frame) {
  require(ratio > 0.0 && channels >= 1, ErrorCode::kInvalidArgument, "ratio and channel count must be positive");
  const int side = static_cast<int>(std::lround(std::sqrt(ratio * channels)));
  const bool ok = side >= 1 && std::abs(static_cast<double>(side * side) / channels - ratio) <= 0.01 &&
                  side <= frame.height && side <= frame.width;
  require(ok, ErrorCode::kInvalidArgument,
          "unrealizable ratio " + io::format_double(ratio) + " for " + std::to_string(channels) +
              " channels in a " + to_string(frame) + " frame");
  return {side, side};
}

// ---- methods --------------------------------------------------------------

struct FitContext {
  const TransmissionMatrix& a;  // already cropped to the ROI
  const Dataset& data;          // train and validation splits on that ROI
  std::uint64_t seed = 1;
};

using MethodFactory = std::function<Reconstructor(const FitContext&)>;

struct NamedMethod {
  std::string name;
  MethodFactory fit;
};

struct NamedReconstructor {
  std::string name;
  Reconstructor r;
};

/// Tikhonov with lambda chosen on the validation split.
inline NamedMethod tr_method(std::string name = "tr") {
  return {std::move(name), [](const FitContext& c) {
            const double lambda = c.data.split.n_val > 0
                                      ? select_lambda(c.a, c.data.validation(), default_lambda_grid(c.a))
                                      : default_lambda(c.a);
            return make_tr(c.a, lambda);
          }};
}

/// FISTA with fixed options (the default gamma unless set).
inline NamedMethod cs_method(CsOptions opts = {}, std::string name = "cs") {
  return {std::move(name), [opts](const FitContext& c) { return make_cs(c.a, opts); }};
}

struct DlFitOptions {
  nn::TrainOptions train;
  bool f64 = false;
  std::function<nn::NetworkSpec(RoiShape, int)> architecture = [](RoiShape roi, int y) {
    return nn::architecture_for_roi(roi.height, roi.width, y);
  };
};

template <typename T>
inline Reconstructor fit_dl(const FitContext& c, const DlFitOptions& o) {
  Rng rng(c.seed);
  const std::uint64_t init_seed = rng.split().next_u64();
  nn::TrainOptions t = o.train;
  t.seed = rng.split().next_u64();
  nn::Network<T> net(o.architecture(c.a.roi_shape(), c.a.channels()), init_seed);
  auto trained = nn::train(std::move(net), nn::to_training_data<T>(c.data.train()),
                           nn::to_training_data<T>(c.data.validation()), t);
  return make_dl<T>(std::make_shared<const nn::Network<T>>(std::move(trained.net)));
}

/// CNN trained on the training split with early selection on validation.
inline NamedMethod dl_method(DlFitOptions opts = {}, std::string name = "dl") {
  return {std::move(name), [opts](const FitContext& c) {
            return opts.f64 ? fit_dl<double>(c, opts) : fit_dl<float>(c, opts);
          }};
}

// ---- sampling sweep -------------------------------------------------------

struct SweepOptions {
  int n_train = 9000;
  int n_val = 1000;
  int n_test = 100;  // per fiber and N_lambda
  std::optional<SpectrumSampler> training_sampler;  // unset: N_lambda uniform in 1..Y
  std::uint64_t seed = 1;
  int threads = 1;
};

struct SweepRow {
  std::string method;
  double ratio = 0.0;
  RoiShape roi;
  int n_lambda = 0;
  EvalReport report;
};

/// For every ratio and fiber, crops the matrix to the matching centred
/// square ROI, fits each method on fresh data and scores it on N_lambda-sparse
/// test spectra. Correlations are pooled over fibers.
inline std::vector<SweepRow> sweep_sampling(std::span<const TransmissionMatrix> fibers,
                                            const std::vector<NamedMethod>& methods,
                                            const std::vector<double>& ratios, const std::vector<int>& n_lambda_list,
                                            const SweepOptions& o) {
  require(!fibers.empty() && !methods.empty() && !ratios.empty() && !n_lambda_list.empty(),
          ErrorCode::kInvalidArgument, "sweep needs fibers, methods, ratios and N_lambda values");
  const int y = fibers.front().channels();
  std::vector<RoiShape> rois;
  for (const double ratio : ratios) rois.push_back(roi_for_ratio(ratio, y, fibers.front().roi_shape()));
  for (const int n : n_lambda_list)
    require(n >= 1 && n <= y, ErrorCode::kInvalidArgument, "N_lambda " + std::to_string(n) + " outside 1..Y");

  // One job per (ratio, fiber); each owns its generator.
  const std::size_t n_fib = fibers.size();
  const std::size_t jobs = ratios.size() * n_fib;
  std::vector<Rng> rngs;
  Rng root(o.seed);
  for (std::size_t j = 0; j < jobs; ++j) rngs.push_back(root.split());
  // corr[job][method][n_lambda index]
  std::vector<std::vector<std::vector<std::vector<double>>>> corr(jobs);
  parallel_for(jobs, o.threads, [&](std::size_t job) {
    const std::size_t ri = job / n_fib;
    const TransmissionMatrix& full = fibers[job % n_fib];
    const TransmissionMatrix a = crop_matrix(full, centered_origin(full.roi_shape(), rois[ri]), rois[ri]);
    Rng& rng = rngs[job];
    const int n_fit = o.n_train + o.n_val;
    const Dataset fit_data = build_dataset(a, o.training_sampler.value_or(SpectrumSampler::sparse(1, y)), n_fit, {o.n_train, o.n_val, 0}, {}, rng);
    std::vector<Dataset> tests;
    for (const int n : n_lambda_list)
      tests.push_back(build_dataset(a, SpectrumSampler::sparse(n), o.n_test, {0, 0, o.n_test}, {}, rng));
    corr[job].resize(methods.size());
    for (std::size_t m = 0; m < methods.size(); ++m) {
      const Reconstructor r = methods[m].fit({a, fit_data, rng.split().next_u64()});
      for (const auto& t : tests) corr[job][m].push_back(evaluate(r, t.test()).correlations);
    }
  });

  std::vector<SweepRow> rows;
  for (std::size_t ri = 0; ri < ratios.size(); ++ri) {
    for (std::size_t m = 0; m < methods.size(); ++m) {
      for (std::size_t k = 0; k < n_lambda_list.size(); ++k) {
        std::vector<double> pooled;
        for (std::size_t f = 0; f < n_fib; ++f) {
          const auto& c = corr[ri * n_fib + f][m][k];
          pooled.insert(pooled.end(), c.begin(), c.end());
        }
        rows.push_back({methods[m].name, ratios[ri], rois[ri], n_lambda_list[k],
                        summarize(std::move(pooled), "roi=" + to_string(rois[ri]) + " fibers=" + std::to_string(n_fib))});
      }
    }
  }
  return rows;
}

/// True when the mean never rises by more than one standard deviation from
/// one N_lambda to the next larger one.
inline bool non_increasing_within_std(std::span<const SweepRow> rows, const std::string& method, double ratio) {
  std::vector<const SweepRow*> sel;
  for (const auto& r : rows)
    if (r.method == method && r.ratio == ratio) sel.push_back(&r);
  std::sort(sel.begin(), sel.end(), [](const auto* a, const auto* b) { return a->n_lambda < b->n_lambda; });
  for (std::size_t i = 1; i < sel.size(); ++i)
    if (sel[i]->report.mean > sel[i - 1]->report.mean + sel[i - 1]->report.stddev) return false;
  return true;
}

// ---- method comparison ----------------------------------------------------

struct TestSet {
  std::string regime;         // e.g. "oversampled"
  std::string spectra_class;  // "sparse" or "dense"
  std::vector<Sample> samples;
};

/// Sparse spectra with N_lambda uniform in 1..floor(Y/2) and dense random-walk
/// spectra, rendered on the ROI of `a`.
inline std::vector<TestSet> comparison_sets(const TransmissionMatrix& a, const std::string& regime, int n_per_class,
                                            Rng& rng, double walk_step = 0.2) {
  const int half = std::max(1, a.channels() / 2);
  std::vector<TestSet> sets;
  for (const auto& [name, sampler] :
       {std::pair{std::string("sparse"), SpectrumSampler::sparse(1, half)},
        std::pair{std::string("dense"), SpectrumSampler::dense(walk_step)}}) {
    auto ds = build_dataset(a, sampler, n_per_class, {0, 0, n_per_class}, {}, rng);
    sets.push_back({regime, name, std::move(ds.samples)});
  }
  return sets;
}

struct CompareRow {
  std::string method;
  std::string regime;
  std::string spectra_class;
  EvalReport report;
  std::vector<int> histogram;
};

inline std::vector<CompareRow> compare_methods(const std::vector<NamedReconstructor>& methods,
                                               const std::vector<TestSet>& sets, int threads = 1, int bins = 20) {
  std::vector<CompareRow> rows;
  for (const auto& set : sets) {
    for (const auto& m : methods) {
      auto report = evaluate(m.r, set.samples, threads, set.regime + "/" + set.spectra_class);
      auto h = histogram(report.correlations, bins);
      rows.push_back({m.name, set.regime, set.spectra_class, std::move(report), std::move(h)});
    }
  }
  return rows;
}

// ---- robustness -----------------------------------------------------------

struct RatioMethods {
  double ratio = 0.0;
  RoiShape roi;
  std::vector<NamedReconstructor> methods;  // fitted on this ROI
};

struct RobustnessOptions {
  std::vector<double> noise_levels{0.0, 0.05, 0.1, 0.15, 0.2, 0.25};
  std::vector<int> n_lambda_grid{1, 5, 10, 15, 20, 30, 43};
  int n_test = 100;
  std::uint64_t seed = 1;
  int threads = 1;
  std::vector<std::string> required{"dl", "dl+n", "cs"};
};

struct RobustnessCell {
  std::string method;
  double ratio = 0.0;
  int n_lambda = 0;
  double noise = 0.0;
  EvalReport report;
};

/// Scores every method on a shared noisy test set per (ratio, N_lambda,
/// noise) cell.
inline std::vector<RobustnessCell> robustness_map(const TransmissionMatrix& a, const std::vector<RatioMethods>& per_ratio,
                                                  const RobustnessOptions& o) {
  require(!per_ratio.empty(), ErrorCode::kInvalidArgument, "robustness map needs at least one ratio");
  for (const auto& rm : per_ratio) {
    for (const auto& name : o.required) {
      const bool found = std::any_of(rm.methods.begin(), rm.methods.end(), [&](const auto& m) { return m.name == name; });
      require(found, ErrorCode::kInvalidArgument,
              "missing trained variant '" + name + "' for ratio " + io::format_double(rm.ratio));
    }
  }
  struct Job {
    std::size_t ratio;
    int n_lambda;
    double noise;
  };
  std::vector<Job> jobs;
  for (std::size_t r = 0; r < per_ratio.size(); ++r)
    for (const int n : o.n_lambda_grid)
      for (const double p : o.noise_levels) jobs.push_back({r, n, p});
  Rng root(o.seed);
  std::vector<Rng> rngs;
  for (std::size_t j = 0; j < jobs.size(); ++j) rngs.push_back(root.split());

  std::vector<std::vector<RobustnessCell>> cells(jobs.size());
  parallel_for(jobs.size(), o.threads, [&](std::size_t j) {
    const auto& job = jobs[j];
    const auto& rm = per_ratio[job.ratio];
    DatasetOptions dopt;
    dopt.roi_shape = rm.roi;
    const Dataset ds = build_dataset(a, SpectrumSampler::sparse(job.n_lambda), o.n_test, {0, 0, o.n_test},
                                     {job.noise, false}, rngs[j], dopt);
    for (const auto& m : rm.methods)
      cells[j].push_back({m.name, rm.ratio, job.n_lambda, job.noise, evaluate(m.r, ds.test())});
  });
  std::vector<RobustnessCell> out;
  for (auto& c : cells) std::move(c.begin(), c.end(), std::back_inserter(out));
  return out;
}

struct RatioCell {
  double ratio = 0.0;
  int n_lambda = 0;
  double noise = 0.0;
  double value = 0.0;  // numerator mean / denominator mean
};

inline std::vector<RatioCell> ratio_map(std::span<const RobustnessCell> cells, const std::string& numerator,
                                        const std::string& denominator) {
  std::vector<RatioCell> out;
  for (const auto& num : cells) {
    if (num.method != numerator) continue;
    for (const auto& den : cells) {
      if (den.method == denominator && den.ratio == num.ratio && den.n_lambda == num.n_lambda &&
          den.noise == num.noise) {
        out.push_back({num.ratio, num.n_lambda, num.noise, num.report.mean / den.report.mean});
        break;
      }
    }
  }
  return out;
}

struct ShiftRow {
  std::string method;
  bool shifted = false;
  EvalReport report;
};

/// Scores each method on unshifted test data and on the same kind of data
/// cropped one pixel off in a random direction.
inline std::vector<ShiftRow> shift_experiment(const TransmissionMatrix& a, RoiShape roi,
                                              const std::vector<NamedReconstructor>& methods,
                                              const SpectrumSampler& sampler, int n_test, std::uint64_t seed,
                                              int threads = 1) {
  DatasetOptions dopt;
  dopt.roi_shape = roi;
  Rng rng(seed);
  std::vector<ShiftRow> rows;
  for (const bool shifted : {false, true}) {
    const Dataset ds = build_dataset(a, sampler, n_test, {0, 0, n_test}, {0.0, shifted}, rng, dopt);
    for (const auto& m : methods)
      rows.push_back({m.name, shifted, evaluate(m.r, ds.test(), threads, shifted ? "shifted" : "unshifted")});
  }
  return rows;
}

// ---- RGB scenario ---------------------------------------------------------

struct RgbResult {
  std::vector<RgbImage> rasters;           // reconstructed, one per source image
  std::vector<double> image_correlation;   // raster vs source, over all pixels and colours
  double mean_correlation = 0.0;
  double blank_energy_ratio = 0.0;  // mean blank-channel intensity / mean signal-channel intensity
  std::vector<Spectrum> spectra;    // per raster position
};

/// Reconstructs every raster position with its own reconstructor; with
/// `roi` set, each fiber image is first cropped to the centred window.
inline RgbResult rgb_scenario(const RgbEncoding& enc, const std::vector<RgbImage>& sources,
                              std::span<const Reconstructor> per_position, std::optional<RoiShape> roi = {},
                              int threads = 1) {
  const std::size_t n_pos = enc.images.size();
  require(per_position.size() == n_pos, ErrorCode::kDimensionMismatch,
          std::to_string(per_position.size()) + " reconstructors for " + std::to_string(n_pos) + " positions");
  require(static_cast<int>(sources.size()) == kRgbImages, ErrorCode::kInvalidArgument, "expected 14 source images");
  RgbResult res;
  res.spectra.resize(n_pos);
  parallel_for(n_pos, threads, [&](std::size_t p) {
    thread_local ReconScratch scratch;
    const SpeckleImage& full = enc.images[p];
    const SpeckleImage img = roi ? crop_roi(full, centered_origin(full.shape(), *roi), *roi) : full;
    res.spectra[p] = reconstruct(per_position[p], img, scratch);
  });

  const int y = res.spectra.front().size();
  require(y > kRgbEncodedChannels, ErrorCode::kDimensionMismatch, "RGB scenario needs > 42 channels");
  double blank = 0.0, signal = 0.0;
  for (const auto& s : res.spectra) {
    for (int j = 0; j < kRgbEncodedChannels; ++j) signal += s[j];
    for (int j = kRgbEncodedChannels; j < y; ++j) blank += s[j];
  }
  signal /= static_cast<double>(n_pos) * kRgbEncodedChannels;
  blank /= static_cast<double>(n_pos) * (y - kRgbEncodedChannels);
  res.blank_energy_ratio = signal > 0.0 ? blank / signal : 0.0;

  for (int k = 0; k < kRgbImages; ++k) {
    RgbImage img{enc.raster.rows, enc.raster.cols, {}};
    Eigen::VectorXd got(3 * n_pos), want(3 * n_pos);
    for (std::size_t p = 0; p < n_pos; ++p) {
      std::array<double, 3> px{};
      for (int c = 0; c < 3; ++c) {
        px[c] = res.spectra[p][3 * k + c];
        got[3 * p + c] = px[c];
        want[3 * p + c] = sources[k].pixels[p][c];
      }
      img.pixels.push_back(px);
    }
    res.image_correlation.push_back(pearson(got, want));
    res.rasters.push_back(std::move(img));
  }
  double sum = 0.0;
  for (const double c : res.image_correlation) sum += c;
  res.mean_correlation = sum / kRgbImages;
  return res;
}

// ---- output ---------------------------------------------------------------

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline void write_csv(const Table& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot open " + path.string());
  const auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << "\n";
  };
  line(t.header);
  for (const auto& r : t.rows) line(r);
  require(static_cast<bool>(out), ErrorCode::kIo, "write failed for " + path.string());
}

inline std::vector<std::string> report_cells(const EvalReport& r) {
  return {io::format_double(r.mean), io::format_double(r.stddev), std::to_string(r.count),
          io::format_double(r.failure_fraction)};
}

inline Table sweep_table(std::span<const SweepRow> rows) {
  Table t{{"method", "ratio", "roi", "n_lambda", "mean", "std", "count", "failure_fraction"}, {}};
  for (const auto& r : rows) {
    std::vector<std::string> cells{r.method, io::format_double(r.ratio), to_string(r.roi), std::to_string(r.n_lambda)};
    for (auto& c : report_cells(r.report)) cells.push_back(std::move(c));
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline Table compare_table(std::span<const CompareRow> rows) {
  Table t{{"method", "regime", "class", "mean", "std", "count", "failure_fraction"}, {}};
  for (const auto& r : rows) {
    std::vector<std::string> cells{r.method, r.regime, r.spectra_class};
    for (auto& c : report_cells(r.report)) cells.push_back(std::move(c));
    t.rows.push_back(std::move(cells));
  }
  return t;
}

/// One row per (method, regime, class, bin).
inline Table histogram_table(std::span<const CompareRow> rows) {
  Table t{{"method", "regime", "class", "bin_low", "bin_high", "count"}, {}};
  for (const auto& r : rows) {
    const int bins = static_cast<int>(r.histogram.size());
    for (int b = 0; b < bins; ++b) {
      t.rows.push_back({r.method, r.regime, r.spectra_class, io::format_double(-1.0 + 2.0 * b / bins),
                        io::format_double(-1.0 + 2.0 * (b + 1) / bins), std::to_string(r.histogram[b])});
    }
  }
  return t;
}

inline Table robustness_table(std::span<const RobustnessCell> cells) {
  Table t{{"method", "ratio", "n_lambda", "noise", "mean", "std", "count", "failure_fraction"}, {}};
  for (const auto& c : cells) {
    std::vector<std::string> cells_out{c.method, io::format_double(c.ratio), std::to_string(c.n_lambda),
                                       io::format_double(c.noise)};
    for (auto& v : report_cells(c.report)) cells_out.push_back(std::move(v));
    t.rows.push_back(std::move(cells_out));
  }
  return t;
}

inline Table ratio_table(std::span<const RatioCell> cells) {
  Table t{{"ratio", "n_lambda", "noise", "value"}, {}};
  for (const auto& c : cells)
    t.rows.push_back({io::format_double(c.ratio), std::to_string(c.n_lambda), io::format_double(c.noise),
                      io::format_double(c.value)});
  return t;
}

inline Table shift_table(std::span<const ShiftRow> rows) {
  Table t{{"method", "shifted", "mean", "std", "count", "failure_fraction"}, {}};
  for (const auto& r : rows) {
    std::vector<std::string> cells{r.method, r.shifted ? "1" : "0"};
    for (auto& c : report_cells(r.report)) cells.push_back(std::move(c));
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline std::string summary_line(const std::string& label, const EvalReport& r) {
  std::ostringstream os;
  os << label << ": mean " << std::fixed << std::setprecision(4) << r.mean << " std " << r.stddev << " n " << r.count
     << " failed " << r.failure_fraction;
  return os.str();
}

/// One 16-bit PGM per image and colour: img<k>_<r|g|b>.pgm.
inline void write_rgb_pgms(const RgbResult& res, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  static constexpr const char* colours[] = {"r", "g", "b"};
  for (std::size_t k = 0; k < res.rasters.size(); ++k) {
    const auto& img = res.rasters[k];
    for (int c = 0; c < 3; ++c) {
      Eigen::VectorXd v(static_cast<Eigen::Index>(img.pixels.size()));
      for (std::size_t p = 0; p < img.pixels.size(); ++p) v[static_cast<Eigen::Index>(p)] = std::max(0.0, img.pixels[p][c]);
      io::export_pgm(SpeckleImage({img.rows, img.cols}, std::move(v)),
                     dir / ("img" + std::to_string(k) + "_" + colours[c] + ".pgm"));
    }
  }
}

}  // namespace speckle::bench
