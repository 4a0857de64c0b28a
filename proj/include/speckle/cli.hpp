#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "speckle/bench.hpp"
#include "speckle/core.hpp"
#include "speckle/error.hpp"
#include "speckle/io.hpp"
#include "speckle/nn/checkpoint.hpp"
#include "speckle/nn/network.hpp"
#include "speckle/nn/spec.hpp"
#include "speckle/nn/train.hpp"
#include "speckle/pipeline.hpp"
#include "speckle/recon.hpp"
#include "speckle/recon_cs.hpp"
#include "speckle/recon_linear.hpp"
#include "speckle/rng.hpp"
#include "speckle/specklegen.hpp"
#include "speckle/synth.hpp"

namespace speckle::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 2, kConfig = 3, kData = 4, kRuntime = 5 };

inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kOutOfBounds:
      return kConfig;
    case ErrorCode::kDimensionMismatch:
    case ErrorCode::kBadMagic:
    case ErrorCode::kUnsupportedVersion:
    case ErrorCode::kCrcMismatch:
    case ErrorCode::kDimensionOverflow:
    case ErrorCode::kIo:
    case ErrorCode::kParse:
      return kData;
    case ErrorCode::kSingularSystem:
    case ErrorCode::kNonFinite:
    case ErrorCode::kDivergence:
      return kRuntime;
  }
  return kRuntime;
}

// ---- flag parsing ---------------------------------------------------------

inline RoiShape parse_roi(const std::string& s) {
  const auto x = s.find('x');
  try {
    require(x != std::string::npos, ErrorCode::kInvalidArgument, "");
    std::size_t a = 0, b = 0;
    const int h = std::stoi(s.substr(0, x), &a);
    const int w = std::stoi(s.substr(x + 1), &b);
    require(a == x && b == s.size() - x - 1 && h > 0 && w > 0, ErrorCode::kInvalidArgument, "");
    return {h, w};
  } catch (const std::exception&) {
    fail(ErrorCode::kInvalidArgument, "ROI must look like HxW, got '" + s + "'");
  }
}

inline Split parse_split(const std::string& s) {
  int a = 0, b = 0, c = 0;
  char s1 = 0, s2 = 0;
  std::istringstream in(s);
  std::string rest;
  require(static_cast<bool>(in >> a >> s1 >> b >> s2 >> c) && s1 == '/' && s2 == '/' && !(in >> rest) && a >= 0 &&
              b >= 0 && c >= 0,
          ErrorCode::kInvalidArgument, "split must look like TRAIN/VAL/TEST, got '" + s + "'");
  return {a, b, c};
}

/// "N" or "A..B".
inline SpectrumSampler parse_sparse(const std::string& s) {
  try {
    const auto dots = s.find("..");
    std::size_t used = 0;
    if (dots == std::string::npos) {
      const int n = std::stoi(s, &used);
      require(used == s.size(), ErrorCode::kInvalidArgument, "");
      return SpectrumSampler::sparse(n);
    }
    const int lo = std::stoi(s.substr(0, dots), &used);
    require(used == dots, ErrorCode::kInvalidArgument, "");
    const std::string hi_s = s.substr(dots + 2);
    const int hi = std::stoi(hi_s, &used);
    require(used == hi_s.size(), ErrorCode::kInvalidArgument, "");
    return SpectrumSampler::sparse(lo, hi);
  } catch (const std::exception&) {
    fail(ErrorCode::kInvalidArgument, "--sparse takes N or A..B, got '" + s + "'");
  }
}

template <typename T>
inline std::vector<T> parse_list(const std::string& s, const std::string& flag) {
  std::vector<T> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::istringstream is(item);
    T v{};
    std::string rest;
    require(static_cast<bool>(is >> v) && !(is >> rest), ErrorCode::kInvalidArgument,
            flag + ": bad list entry '" + item + "'");
    out.push_back(v);
  }
  require(!out.empty(), ErrorCode::kInvalidArgument, flag + " is empty");
  return out;
}

inline std::vector<std::string> split_names(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline std::string fiber_file(int p, const std::string& ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "fiber_%04d.%s", p, ext.c_str());
  return buf;
}

inline std::string group_file(int g) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "group_%04d.spkn", g);
  return buf;
}

// ---- artifact directories -------------------------------------------------

/// A matrix directory: manifest.txt plus fiber_NNNN.spkt per fiber.
inline void save_array(const FiberArrayModel& array, const fs::path& dir, io::Manifest m) {
  fs::create_directories(dir);
  for (int p = 0; p < array.size(); ++p) io::export_matrix(array.fibers[p], dir / fiber_file(p, "spkt"));
  m.set("kind", "matrices");
  m.set("n_fibers", array.size());
  m.set("grid_rows", array.grid.rows);
  m.set("grid_cols", array.grid.cols);
  m.set("roi", to_string(array.roi_shape()));
  m.set("channels", array.channels());
  m.write(dir / "manifest.txt");
}

inline FiberArrayModel load_array(const fs::path& dir, int max_fibers = 0) {
  const auto m = io::Manifest::read(dir / "manifest.txt");
  int n = static_cast<int>(m.get_int("n_fibers"));
  require(n >= 1, ErrorCode::kParse, dir.string() + ": manifest has no fibers");
  FiberArrayModel array;
  array.grid = {static_cast<int>(m.get_int("grid_rows")), static_cast<int>(m.get_int("grid_cols"))};
  if (max_fibers > 0 && max_fibers < n) {
    n = max_fibers;
    array.grid = square_grid(n);
  }
  for (int p = 0; p < n; ++p) array.fibers.push_back(io::import_matrix(dir / fiber_file(p, "spkt")));
  validate(array);
  return array;
}

struct Globals {
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::string precision = "f32";
  std::string out = "out";
};

/// Records every option of a subcommand with its effective value.
inline io::Manifest run_manifest(const CLI::App& sub, const Globals& g, std::uint64_t seed) {
  io::Manifest m;
  m.set("command", sub.get_name());
  m.set("seed", seed);
  m.set("threads", g.threads);
  m.set("precision", g.precision);
  m.set("out", g.out);
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_name() == "--help" || opt->get_lnames().empty()) continue;
    const auto& res = opt->results();
    std::string v;
    for (std::size_t i = 0; i < res.size(); ++i) v += (i ? "," : "") + res[i];
    if (res.empty()) v = opt->get_default_str();
    m.set("opt." + opt->get_lnames().front(), v);
  }
  return m;
}

class Runner {
 public:
  Runner(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(int argc, const char* const* argv) {
    CLI::App app{"Speckle spectrometer simulation and reconstruction"};
    app.require_subcommand(1);
    app.fallthrough();
    app.failure_message(CLI::FailureMessage::help);
    app.add_option("--seed", g_.seed, "Random seed; one is generated and printed when omitted");
    app.add_option("--threads", g_.threads, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    app.add_option("--precision", g_.precision, "Network precision")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    app.add_option("--out", g_.out, "Output root directory")->capture_default_str();

    add_gen_fiber(app, false);
    add_gen_fiber(app, true);
    add_gen_dataset(app);
    add_train(app);
    add_recon(app);
    add_bench(app);
    add_stream(app);
    add_import(app);

    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out_, err_);
      return code == 0 ? kOk : kUsage;
    }
    try {
      action_();
      return kOk;
    } catch (const Error& e) {
      err_ << "error: " << e.what() << "\n";
      return exit_code_for(e.code());
    } catch (const std::exception& e) {
      err_ << "error: " << e.what() << "\n";
      return kRuntime;
    }
  }

 private:
  std::uint64_t seed() {
    if (!seed_) {
      if (g_.seed) {
        seed_ = *g_.seed;
      } else {
        std::random_device rd;
        seed_ = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
        out_ << "seed=" << *seed_ << "\n";
      }
    }
    return *seed_;
  }

  io::Dtype precision_dtype() const { return io::parse_dtype(g_.precision); }
  fs::path root(const std::string& kind) const { return fs::path(g_.out) / kind; }

  // ---- gen-fiber / gen-array ----

  struct GenOpts {
    int fibers = 16;
    int channels = kDefaultChannels;
    std::string roi = "20x20";
    int modes = 64;
    double decorr = 1.0;
    double radius = 0.0;
    std::string name;
  };

  void add_gen_fiber(CLI::App& app, bool array) {
    auto o = std::make_shared<GenOpts>();
    o->name = array ? "array" : "fiber";
    auto* sub = app.add_subcommand(array ? "gen-array" : "gen-fiber",
                                   array ? "Generate a multi-core fiber array of transmission matrices"
                                         : "Generate one fiber's transmission matrix");
    if (array) sub->add_option("--fibers", o->fibers, "Number of fiber cores")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--channels", o->channels, "Wavelength channels Y")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--roi", o->roi, "ROI HxW in pixels")->capture_default_str();
    sub->add_option("--modes", o->modes, "Guided modes per fiber")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--decorr", o->decorr, "Spectral decorrelation length in channels")->capture_default_str();
    sub->add_option("--core-radius", o->radius, "Aperture radius in pixels (0: cover the ROI)")->capture_default_str();
    sub->add_option("--name", o->name, "Directory name under OUT/matrices")->capture_default_str();
    sub->callback([this, sub, o, array] {
      action_ = [this, sub, o, array] {
        const std::uint64_t s = seed();
        FiberModel model{o->modes, o->radius, o->decorr, 0};
        Rng rng(s);
        const auto arr = generate_array(rng, array ? o->fibers : 1, model, parse_roi(o->roi), o->channels, g_.threads);
        const fs::path dir = root("matrices") / o->name;
        auto m = run_manifest(*sub, g_, s);
        m.set("modes", o->modes);
        m.set("decorr", o->decorr);
        save_array(arr, dir, m);
        out_ << "wrote " << arr.size() << " matrices to " << dir.string() << "\n";
      };
    });
  }

  // ---- gen-dataset ----

  struct DatasetOpts {
    std::string matrix;
    int n = 11000;
    std::string split;
    std::string sparse;
    std::optional<double> dense;
    double noise = 0.0;
    bool shift = false;
    std::string roi;
    std::string name = "dataset";
  };

  void add_gen_dataset(CLI::App& app) {
    auto o = std::make_shared<DatasetOpts>();
    auto* sub = app.add_subcommand("gen-dataset", "Render a labelled speckle dataset from one matrix");
    sub->add_option("--matrix", o->matrix, "SPKT matrix file")->required();
    sub->add_option("--n", o->n, "Number of samples")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--split", o->split, "TRAIN/VAL/TEST (default 9000/1000/1000 for n=11000, else 29:1:1)");
    auto* sp = sub->add_option("--sparse", o->sparse, "Sparse spectra with N or A..B non-zero channels");
    sub->add_option("--dense", o->dense, "Dense random-walk spectra with this step (default 0.2)")->excludes(sp);
    sub->add_option("--noise", o->noise, "Gaussian noise sigma as a fraction of the image mean")->capture_default_str();
    sub->add_flag("--shift", o->shift, "Crop the ROI one pixel off in a random direction");
    sub->add_option("--roi", o->roi, "Centred ROI HxW cropped from the matrix frame");
    sub->add_option("--name", o->name, "Directory name under OUT/datasets")->capture_default_str();
    sub->callback([this, sub, o] {
      action_ = [this, sub, o] {
        const std::uint64_t s = seed();
        const auto a = io::import_matrix(o->matrix);
        const Split split = !o->split.empty() ? parse_split(o->split)
                            : o->n == 11000   ? Split{9000, 1000, 1000}
                                              : Split::proportional(o->n);
        const SpectrumSampler sampler =
            !o->sparse.empty() ? parse_sparse(o->sparse) : SpectrumSampler::dense(o->dense.value_or(0.2));
        DatasetOptions dopt;
        dopt.threads = g_.threads;
        if (!o->roi.empty()) dopt.roi_shape = parse_roi(o->roi);
        Rng rng(s);
        const auto ds = build_dataset(a, sampler, o->n, split, {o->noise, o->shift}, rng, dopt);
        const fs::path dir = root("datasets") / o->name;
        save_dataset(ds, dir);
        run_manifest(*sub, g_, s).write(dir / "run.manifest.txt");
        out_ << "wrote " << ds.samples.size() << " samples (" << to_string(ds.roi_shape()) << ") to " << dir.string()
             << "\n";
      };
    });
  }

  // ---- train ----

  struct TrainCliOpts {
    std::vector<std::string> datasets;
    std::string arch = "auto";
    int epochs = 30;
    int batch = 64;
    double lr = 1e-3;
    std::string name = "model";
  };

  template <typename T>
  void train_and_save(const TrainCliOpts& o, const CLI::App& sub, std::uint64_t s) {
    std::vector<Dataset> sets;
    for (const auto& d : o.datasets) sets.push_back(load_dataset(d));
    const RoiShape roi = sets.front().roi_shape();
    const int y = sets.front().channels();
    nn::NetworkSpec spec;
    int group = 1;
    if (o.arch.rfind("multi:", 0) == 0) {
      try {
        group = std::stoi(o.arch.substr(6));
      } catch (const std::exception&) {
        fail(ErrorCode::kInvalidArgument, "--arch multi:N needs an integer N");
      }
      nn::MultiFiberOptions mo;
      mo.fibers = group;
      mo.height = roi.height;
      mo.width = roi.width;
      mo.outputs = y;
      if (std::min(roi.height, roi.width) < 12) mo.conv_kernels = {2, 2};
      spec = nn::build_multifiber(mo);
    } else if (o.arch == "small" || o.arch == "large") {
      auto co = o.arch == "small" ? nn::cnn_small_options(y) : nn::cnn_large_options(y);
      co.input = {1, roi.height, roi.width};
      spec = nn::build_cnn(co);
    } else {
      require(o.arch == "auto", ErrorCode::kInvalidArgument, "--arch must be auto, small, large or multi:N");
      spec = nn::architecture_for_roi(roi.height, roi.width, y);
    }
    require(static_cast<int>(sets.size()) == group, ErrorCode::kInvalidArgument,
            "--arch " + o.arch + " needs " + std::to_string(group) + " --dataset directories, got " +
                std::to_string(sets.size()));

    nn::TrainingData<T> train_set, val_set;
    if (group == 1) {
      train_set = nn::to_training_data<T>(sets[0].train());
      val_set = nn::to_training_data<T>(sets[0].validation());
    } else {
      std::vector<std::span<const Sample>> tr, va;
      for (const auto& d : sets) {
        require(d.split == sets[0].split, ErrorCode::kDimensionMismatch, "multi-fiber datasets differ in split");
        tr.push_back(d.train());
        va.push_back(d.validation());
      }
      train_set = nn::stack_fibers<T>(tr);
      val_set = nn::stack_fibers<T>(va);
    }
    Rng rng(s);
    const std::uint64_t init_seed = rng.split().next_u64();
    nn::TrainOptions t;
    t.epochs = o.epochs;
    t.batch_size = o.batch;
    t.learning_rate = o.lr;
    t.seed = rng.split().next_u64();
    t.on_epoch = [this](const nn::EpochStats& e) {
      out_ << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.validation_loss << "\n" << std::flush;
    };
    const auto start = std::chrono::steady_clock::now();
    auto tn = nn::train(nn::Network<T>(spec, init_seed), train_set, val_set, t);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    tn.provenance = nn::describe(t) + " data=" + std::to_string(nn::data_hash(train_set));

    const fs::path path = root("models") / (o.name + ".spkn");
    fs::create_directories(path.parent_path());
    nn::save_checkpoint(tn, path);
    auto m = run_manifest(sub, g_, s);
    m.set("best_epoch", tn.history.best_epoch);
    m.set("train_seconds", secs);
    m.set("spec", "see checkpoint");
    m.write(fs::path(path).replace_extension(".manifest.txt"));
    std::ofstream hist(fs::path(path).replace_extension(".history.csv"));
    hist << "epoch,train_loss,validation_loss\n";
    for (std::size_t e = 0; e < tn.history.train_loss.size(); ++e)
      hist << e + 1 << "," << io::format_double(tn.history.train_loss[e]) << ","
           << io::format_double(tn.history.validation_loss[e]) << "\n";

    if (group == 1 && sets[0].split.n_test > 0) {
      const auto r = make_dl<T>(std::make_shared<const nn::Network<T>>(tn.net));
      const auto rep = bench::evaluate(r, sets[0].test(), g_.threads);
      out_ << bench::summary_line("test", rep) << "\n";
    }
    out_ << "best epoch " << tn.history.best_epoch << ", wrote " << path.string() << "\n";
  }

  void add_train(CLI::App& app) {
    auto o = std::make_shared<TrainCliOpts>();
    auto* sub = app.add_subcommand("train", "Train a CNN on a dataset directory");
    sub->add_option("--dataset", o->datasets, "Dataset directory (one per fiber for multi:N)")->required();
    sub->add_option("--arch", o->arch, "auto, small, large or multi:N")->capture_default_str();
    sub->add_option("--epochs", o->epochs, "Training epochs")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--batch", o->batch, "Mini-batch size")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--lr", o->lr, "Adam learning rate")->capture_default_str();
    sub->add_option("--name", o->name, "Model path under OUT/models, without extension")->capture_default_str();
    sub->callback([this, sub, o] {
      action_ = [this, sub, o] {
        const std::uint64_t s = seed();
        if (g_.precision == "f64")
          train_and_save<double>(*o, *sub, s);
        else
          train_and_save<float>(*o, *sub, s);
      };
    });
  }

  // ---- recon ----

  struct ReconOpts {
    std::string matrix;
    std::string dataset;
    std::string method = "tr";
    std::string lambda = "auto";
    std::string gamma = "default";
    int max_iters = 5000;
    double tol = 1e-6;
    std::string model;
    std::string name = "recon";
  };

  void add_recon(CLI::App& app) {
    auto o = std::make_shared<ReconOpts>();
    auto* sub = app.add_subcommand("recon", "Reconstruct a dataset's test split and score it");
    sub->add_option("--matrix", o->matrix, "SPKT matrix file (tr, cs)");
    sub->add_option("--dataset", o->dataset, "Dataset directory")->required();
    sub->add_option("--method", o->method, "tr, cs or dl")
        ->check(CLI::IsMember({"tr", "cs", "dl"}))
        ->capture_default_str();
    sub->add_option("--lambda", o->lambda, "Tikhonov weight or 'auto' (validation split)")->capture_default_str();
    sub->add_option("--gamma", o->gamma, "L1 weight, 'default' (0.01 max|A^T m|) or 'auto' (validation split)")
        ->capture_default_str();
    sub->add_option("--max-iters", o->max_iters, "FISTA iteration cap")->capture_default_str();
    sub->add_option("--tol", o->tol, "FISTA relative tolerance")->capture_default_str();
    sub->add_option("--model", o->model, "SPKN checkpoint (dl)");
    sub->add_option("--name", o->name, "Report directory under OUT/reports")->capture_default_str();
    sub->callback([this, sub, o] { action_ = [this, sub, o] { recon(*o, *sub); }; });
  }

  void recon(const ReconOpts& o, const CLI::App& sub) {
    const Dataset ds = load_dataset(o.dataset);
    require(ds.split.n_test > 0, ErrorCode::kInvalidArgument, "dataset has no test split");
    const fs::path dir = root("reports") / o.name;
    fs::create_directories(dir);
    std::optional<TransmissionMatrix> a;
    if (o.method != "dl") {
      require(!o.matrix.empty(), ErrorCode::kInvalidArgument, "--matrix is required for --method " + o.method);
      a = io::import_matrix(o.matrix);
      if (a->roi_shape() != ds.roi_shape())
        a = crop_matrix(*a, ds.provenance.roi_origin, ds.roi_shape());
    }
    std::vector<double> corr;
    std::vector<int> iters;
    std::vector<double> micros;
    std::vector<Spectrum> outputs;
    const auto timed = [&](auto&& fn) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      micros.push_back(std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count());
    };
    if (o.method == "tr") {
      double lambda = 0.0;
      if (o.lambda == "auto")
        lambda = ds.split.n_val > 0 ? select_lambda(*a, ds.validation(), default_lambda_grid(*a)) : default_lambda(*a);
      else
        lambda = parse_list<double>(o.lambda, "--lambda").front();
      const auto r = fit_tikhonov(*a, lambda);
      save_reconstructor(r, dir / "tr.spkr");
      out_ << "lambda=" << lambda << "\n";
      for (const auto& s : ds.test()) timed([&] { outputs.push_back(reconstruct(r, s.image)); });
    } else if (o.method == "cs") {
      CsOptions opts;
      opts.max_iters = o.max_iters;
      opts.rel_tol = o.tol;
      opts.lipschitz = lipschitz_bound(*a);
      if (o.gamma == "auto") {
        require(ds.split.n_val > 0, ErrorCode::kInvalidArgument, "--gamma auto needs a validation split");
        opts.gamma = select_gamma(*a, ds.validation(), default_gamma_grid(*a, ds.validation()), opts);
        out_ << "gamma=" << *opts.gamma << "\n";
      } else if (o.gamma != "default") {
        opts.gamma = parse_list<double>(o.gamma, "--gamma").front();
      }
      for (const auto& s : ds.test()) {
        CsResult res;
        timed([&] { res = solve_cs(*a, s.image, opts); });
        iters.push_back(res.iterations);
        outputs.push_back(res.spectrum);
      }
    } else {
      require(!o.model.empty(), ErrorCode::kInvalidArgument, "--model is required for --method dl");
      const auto run = [&](auto tag) {
        using T = decltype(tag);
        const auto tn = nn::load_checkpoint<T>(o.model);
        nn::Workspace<T> ws;
        for (const auto& s : ds.test()) timed([&] { outputs.push_back(tn.net.predict(s.image, ws)); });
      };
      if (g_.precision == "f64")
        run(double{});
      else
        run(float{});
    }
    const auto test = ds.test();
    std::ofstream csv(dir / "recon.csv");
    csv << "sample,correlation,micros" << (iters.empty() ? "" : ",iterations") << "\n";
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      corr.push_back(cross_correlation(outputs[i], test[i].label));
      csv << i << "," << io::format_double(corr.back()) << "," << io::format_double(micros[i]);
      if (!iters.empty()) csv << "," << iters[i];
      csv << "\n";
    }
    io::export_spectrum_csv(outputs.front(), default_wavelength_labels(outputs.front().size()), dir / "spectrum_0.csv");
    const auto rep = bench::summarize(corr, o.method);
    double mean_us = 0.0;
    for (const double m : micros) mean_us += m / micros.size();
    std::ofstream summary(dir / "summary.txt");
    summary << bench::summary_line(o.method, rep) << "\nmean_micros_per_solve " << mean_us << "\n";
    if (!iters.empty()) {
      double mean_it = 0.0;
      for (const int k : iters) mean_it += static_cast<double>(k) / iters.size();
      summary << "mean_iterations " << mean_it << "\n";
    }
    run_manifest(sub, g_, 0).write(dir / "run.manifest.txt");
    out_ << bench::summary_line(o.method, rep) << ", " << mean_us << " us/solve\n";
  }

  // ---- bench ----

  struct BenchOpts {
    std::string experiment;
    std::string matrix_dir;
    std::string methods;
    int fibers = 16;
    int fiber = 0;
    int n_train = 9000;
    int n_val = 1000;
    int n_test = 100;
    int n_compare = 1000;
    int epochs = 30;
    std::string ratios;
    std::string n_lambda = "1,2,5,10,20,43";
    std::string noise = "0,0.05,0.1,0.15,0.2,0.25";
    std::string name;
  };

  void add_bench(CLI::App& app) {
    auto o = std::make_shared<BenchOpts>();
    auto* sub = app.add_subcommand("bench", "Run a benchmark experiment: sampling, compare, robustness or rgb");
    sub->add_option("experiment", o->experiment, "sampling | compare | robustness | rgb")
        ->required()
        ->check(CLI::IsMember({"sampling", "compare", "robustness", "rgb"}));
    sub->add_option("--matrix-dir", o->matrix_dir, "Matrix directory from gen-array")->required();
    sub->add_option("--methods", o->methods, "Comma-separated methods: tr, cs, dl (robustness adds dl+n, dl+s)");
    sub->add_option("--fibers", o->fibers, "Fibers used from the array (sampling, rgb)")->capture_default_str();
    sub->add_option("--fiber", o->fiber, "Fiber index (compare, robustness)")->capture_default_str();
    sub->add_option("--n-train", o->n_train, "Training samples per fit")->capture_default_str();
    sub->add_option("--n-val", o->n_val, "Validation samples per fit")->capture_default_str();
    sub->add_option("--n-test", o->n_test, "Test spectra per fiber and cell")->capture_default_str();
    sub->add_option("--n-compare", o->n_compare, "Spectra per class (compare)")->capture_default_str();
    sub->add_option("--epochs", o->epochs, "Training epochs for DL methods")->capture_default_str();
    sub->add_option("--ratios", o->ratios, "Comma-separated sampling ratios X/Y");
    sub->add_option("--n-lambda", o->n_lambda, "Comma-separated N_lambda values")->capture_default_str();
    sub->add_option("--noise", o->noise, "Comma-separated noise levels (robustness)")->capture_default_str();
    sub->add_option("--name", o->name, "Report directory under OUT/reports (default bench-EXPERIMENT)");
    sub->callback([this, sub, o] { action_ = [this, sub, o] { bench(*o, *sub); }; });
  }

  bench::DlFitOptions dl_options(const BenchOpts& o) const {
    bench::DlFitOptions d;
    d.train.epochs = o.epochs;
    d.f64 = g_.precision == "f64";
    return d;
  }

  std::vector<bench::NamedMethod> named_methods(const std::vector<std::string>& names, const BenchOpts& o) const {
    std::vector<bench::NamedMethod> out;
    for (const auto& n : names) {
      if (n == "tr")
        out.push_back(bench::tr_method());
      else if (n == "cs")
        out.push_back(bench::cs_method());
      else if (n == "dl")
        out.push_back(bench::dl_method(dl_options(o)));
      else
        fail(ErrorCode::kInvalidArgument, "unknown method '" + n + "' (expected tr, cs or dl)");
    }
    return out;
  }

  void bench(const BenchOpts& o, const CLI::App& sub) {
    const std::uint64_t s = seed();
    const fs::path dir = root("reports") / (o.name.empty() ? "bench-" + o.experiment : o.name);
    fs::create_directories(dir);
    std::ofstream summary(dir / "summary.txt");
    const auto say = [&](const std::string& line) {
      summary << line << "\n";
      out_ << line << "\n";
    };
    const auto noise = parse_list<double>(o.noise, "--noise");
    const auto n_lambda = parse_list<int>(o.n_lambda, "--n-lambda");

    if (o.experiment == "sampling") {
      const auto array = load_array(o.matrix_dir, o.fibers);
      const auto ratios = o.ratios.empty() ? std::vector<double>{0.21, 0.58, 1.14, 9.30} : parse_list<double>(o.ratios, "--ratios");
      const auto methods = named_methods(split_names(o.methods.empty() ? "tr,cs,dl" : o.methods), o);
      bench::SweepOptions so;
      so.n_train = o.n_train;
      so.n_val = o.n_val;
      so.n_test = o.n_test;
      so.seed = s;
      so.threads = g_.threads;
      const auto rows = bench::sweep_sampling(array.fibers, methods, ratios, n_lambda, so);
      bench::write_csv(bench::sweep_table(rows), dir / "sampling.csv");
      for (const auto& r : rows)
        say(bench::summary_line(r.method + " ratio " + io::format_double(r.ratio) + " N_lambda " +
                                    std::to_string(r.n_lambda), r.report));
    } else if (o.experiment == "compare") {
      const auto array = load_array(o.matrix_dir);
      require(o.fiber >= 0 && o.fiber < array.size(), ErrorCode::kInvalidArgument, "--fiber out of range");
      const auto& full = array.fibers[o.fiber];
      const auto ratios = o.ratios.empty() ? std::vector<double>{9.30, 0.58} : parse_list<double>(o.ratios, "--ratios");
      const auto methods = named_methods(split_names(o.methods.empty() ? "tr,cs,dl" : o.methods), o);
      Rng rng(s);
      std::vector<bench::CompareRow> rows;
      for (const double ratio : ratios) {
        const RoiShape roi = bench::roi_for_ratio(ratio, full.channels(), full.roi_shape());
        const auto a = crop_matrix(full, centered_origin(full.roi_shape(), roi), roi);
        const std::string regime = ratio >= 1.0 ? "oversampled" : "undersampled";
        const Dataset fit = mixed_fit_data(a, o.n_train, o.n_val, rng);
        std::vector<bench::NamedReconstructor> fitted;
        for (const auto& m : methods) fitted.push_back({m.name, m.fit({a, fit, rng.split().next_u64()})});
        const auto sets = bench::comparison_sets(a, regime + "@" + io::format_double(ratio), o.n_compare, rng);
        auto part = bench::compare_methods(fitted, sets, g_.threads);
        std::move(part.begin(), part.end(), std::back_inserter(rows));
      }
      bench::write_csv(bench::compare_table(rows), dir / "compare.csv");
      bench::write_csv(bench::histogram_table(rows), dir / "histogram.csv");
      for (const auto& r : rows) say(bench::summary_line(r.method + " " + r.regime + " " + r.spectra_class, r.report));
    } else if (o.experiment == "robustness") {
      robustness(o, noise, n_lambda, s, dir, say);
    } else {
      rgb(o, s, dir, say);
    }
    run_manifest(sub, g_, s).write(dir / "run.manifest.txt");
  }

  /// Half sparse (N_lambda in 1..Y/2), half dense training spectra.
  static Dataset mixed_fit_data(const TransmissionMatrix& a, int n_train, int n_val, Rng& rng,
                                Perturbation p = {}, const DatasetOptions& dopt = {}) {
    const int half_y = std::max(1, a.channels() / 2);
    const int t1 = n_train / 2, v1 = n_val / 2;
    const Dataset sparse =
        build_dataset(a, SpectrumSampler::sparse(1, half_y), t1 + v1, {t1, v1, 0}, p, rng, dopt);
    const Dataset dense =
        build_dataset(a, SpectrumSampler::dense(), n_train - t1 + n_val - v1, {n_train - t1, n_val - v1, 0}, p, rng, dopt);
    return concat_datasets({&sparse, &dense});
  }

  template <typename Say>
  void robustness(const BenchOpts& o, const std::vector<double>& noise, const std::vector<int>& n_lambda,
                  std::uint64_t s, const fs::path& dir, Say&& say) {
    const auto array = load_array(o.matrix_dir);
    require(o.fiber >= 0 && o.fiber < array.size(), ErrorCode::kInvalidArgument, "--fiber out of range");
    const auto& full = array.fibers[o.fiber];
    const auto ratios = o.ratios.empty() ? std::vector<double>{0.58} : parse_list<double>(o.ratios, "--ratios");
    auto names = split_names(o.methods.empty() ? "dl,dl+n,dl+s,tr,cs" : o.methods);
    const auto dl = bench::dl_method(dl_options(o));
    Rng rng(s);
    std::vector<bench::RatioMethods> per_ratio;
    std::vector<bench::NamedReconstructor> shift_methods;
    RoiShape shift_roi;
    for (const double ratio : ratios) {
      const RoiShape roi = bench::roi_for_ratio(ratio, full.channels(), full.roi_shape());
      const auto a = crop_matrix(full, centered_origin(full.roi_shape(), roi), roi);
      DatasetOptions dopt;
      dopt.roi_shape = roi;
      const Dataset clean = mixed_fit_data(full, o.n_train, o.n_val, rng, {}, dopt);
      bench::RatioMethods rm{ratio, roi, {}};
      for (const auto& n : names) {
        const std::uint64_t fs_seed = rng.split().next_u64();
        if (n == "tr") {
          rm.methods.push_back({n, bench::tr_method().fit({a, clean, fs_seed})});
        } else if (n == "cs") {
          rm.methods.push_back({n, bench::cs_method().fit({a, clean, fs_seed})});
        } else if (n == "dl") {
          rm.methods.push_back({n, dl.fit({a, clean, fs_seed})});
        } else if (n == "dl+n") {
          std::vector<Dataset> parts;
          const int k = static_cast<int>(noise.size());
          for (int i = 0; i < k; ++i)
            parts.push_back(mixed_fit_data(full, o.n_train / k, o.n_val / k, rng, {noise[i], false}, dopt));
          std::vector<const Dataset*> ptrs;
          for (const auto& d : parts) ptrs.push_back(&d);
          rm.methods.push_back({n, dl.fit({a, concat_datasets(ptrs), fs_seed})});
        } else if (n == "dl+s") {
          const Dataset shifted = mixed_fit_data(full, o.n_train, o.n_val, rng, {0.0, true}, dopt);
          rm.methods.push_back({n, dl.fit({a, shifted, fs_seed})});
        } else {
          fail(ErrorCode::kInvalidArgument, "unknown method '" + n + "' (expected tr, cs, dl, dl+n or dl+s)");
        }
      }
      if (shift_methods.empty()) {
        shift_methods = rm.methods;
        shift_roi = roi;
      }
      per_ratio.push_back(std::move(rm));
    }
    bench::RobustnessOptions ro;
    ro.noise_levels = noise;
    ro.n_lambda_grid = n_lambda;
    ro.n_test = o.n_test;
    ro.seed = rng.split().next_u64();
    ro.threads = g_.threads;
    ro.required.clear();
    for (const auto& n : {"dl", "dl+n", "cs"})
      if (std::find(names.begin(), names.end(), n) != names.end()) ro.required.push_back(n);
    const auto cells = bench::robustness_map(full, per_ratio, ro);
    bench::write_csv(bench::robustness_table(cells), dir / "robustness.csv");
    if (ro.required.size() == 3) bench::write_csv(bench::ratio_table(bench::ratio_map(cells, "dl+n", "cs")), dir / "ratio_dln_cs.csv");
    const auto shift = bench::shift_experiment(full, shift_roi, shift_methods,
                                               SpectrumSampler::sparse(1, full.channels()), o.n_test * 10,
                                               rng.split().next_u64(), g_.threads);
    bench::write_csv(bench::shift_table(shift), dir / "shift.csv");
    for (const auto& c : cells)
      say(bench::summary_line(c.method + " ratio " + io::format_double(c.ratio) + " N_lambda " +
                                  std::to_string(c.n_lambda) + " noise " + io::format_double(c.noise),
                              c.report));
    for (const auto& r : shift) say(bench::summary_line(r.method + (r.shifted ? " shifted" : " unshifted"), r.report));
  }

  template <typename Say>
  void rgb(const BenchOpts& o, std::uint64_t s, const fs::path& dir, Say&& say) {
    const auto array = load_array(o.matrix_dir, o.fibers);
    require(array.size() == array.grid.rows * array.grid.cols, ErrorCode::kInvalidArgument,
            "rgb scenario needs a full fiber grid; use a square --fibers count");
    const auto ratios = o.ratios.empty() ? std::vector<double>{0.84, 9.30} : parse_list<double>(o.ratios, "--ratios");
    const auto methods = named_methods(split_names(o.methods.empty() ? "tr,cs,dl" : o.methods), o);
    Rng rng(s);
    const auto sources = synthetic_rgb_images(rng, array.grid);
    const auto enc = encode_rgb_images(sources, array);
    const int y = array.channels();
    for (const double ratio : ratios) {
      const RoiShape roi = bench::roi_for_ratio(ratio, y, array.roi_shape());
      for (const auto& m : methods) {
        std::vector<Reconstructor> per;
        for (const auto& full : array.fibers) {
          const auto a = crop_matrix(full, centered_origin(full.roi_shape(), roi), roi);
          const Dataset fit = build_dataset(a, SpectrumSampler::sparse(1, y), o.n_train + o.n_val,
                                            {o.n_train, o.n_val, 0}, {}, rng);
          per.push_back(m.fit({a, fit, rng.split().next_u64()}));
        }
        const auto res = bench::rgb_scenario(enc, sources, per, roi, g_.threads);
        const std::string tag = m.name + "_" + to_string(roi);
        bench::write_rgb_pgms(res, dir / tag);
        bench::Table t{{"image", "correlation"}, {}};
        for (std::size_t k = 0; k < res.image_correlation.size(); ++k)
          t.rows.push_back({std::to_string(k), io::format_double(res.image_correlation[k])});
        bench::write_csv(t, dir / (tag + ".csv"));
        std::ostringstream line;
        line << m.name << " ratio " << io::format_double(ratio) << ": mean image correlation "
             << res.mean_correlation << ", blank/signal energy " << res.blank_energy_ratio;
        say(line.str());
      }
    }
  }

  // ---- stream ----

  struct StreamCliOpts {
    std::string matrix_dir;
    std::string models_dir;
    std::string method;
    int frames = 10;
    int workers = 1;
    int group = 1;
    std::string script;
    std::string timing_out;
    std::string roi;
    std::string name = "stream";
  };

  void add_stream(CLI::App& app) {
    auto o = std::make_shared<StreamCliOpts>();
    auto* sub = app.add_subcommand("stream", "Reconstruct a stream of synthetic array frames");
    sub->add_option("--matrix-dir", o->matrix_dir, "Matrix directory from gen-array")->required();
    sub->add_option("--models-dir", o->models_dir,
                    "Directory with fiber_NNNN.spkn or .spkr per fiber (group_NNNN.spkn with --group)");
    sub->add_option("--method", o->method, "Build tr or cs reconstructors from the matrices instead")
        ->check(CLI::IsMember({"tr", "cs"}));
    sub->add_option("--frames", o->frames, "Frames to process")->check(CLI::NonNegativeNumber)->capture_default_str();
    sub->add_option("--workers", o->workers, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--group", o->group, "Fibers per multi-fiber network")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--script", o->script, "Wavelength script: lines 'start end ch[:w],...'");
    sub->add_option("--timing-out", o->timing_out, "Per-frame timing CSV");
    sub->add_option("--roi", o->roi, "Centred ROI HxW inside each fiber area");
    sub->add_option("--name", o->name, "Report directory under OUT/reports")->capture_default_str();
    sub->callback([this, sub, o] { action_ = [this, sub, o] { stream(*o, *sub); }; });
  }

  void stream(const StreamCliOpts& o, const CLI::App& sub) {
    const std::uint64_t s = seed();
    const auto array = load_array(o.matrix_dir);
    const int y = array.channels();
    std::vector<Spectrum> spectra;
    if (!o.script.empty()) {
      spectra = pipeline::script_spectra(pipeline::load_script(o.script), y);
    } else {
      Rng rng(s);
      for (int f = 0; f < std::max(1, o.frames); ++f) spectra.push_back(sample_sparse_spectrum(rng, y, 1));
    }
    const int n_frames = o.frames;
    const auto source = pipeline::spectra_source(array, spectra);
    pipeline::StreamOptions so;
    so.workers = o.workers;
    if (!o.roi.empty()) so.roi = parse_roi(o.roi);
    const RoiShape roi = so.roi.value_or(array.roi_shape());

    pipeline::StreamResult res;
    if (o.group > 1) {
      require(!o.models_dir.empty(), ErrorCode::kInvalidArgument, "--group needs --models-dir");
      const auto run = [&](auto tag) {
        using T = decltype(tag);
        std::vector<std::shared_ptr<const nn::Network<T>>> nets;
        for (int g = 0; g < array.size() / o.group; ++g)
          nets.push_back(std::make_shared<const nn::Network<T>>(
              nn::load_checkpoint<T>(fs::path(o.models_dir) / group_file(g)).net));
        res = pipeline::run_multifiber_stream<T>(array, nets, o.group, source, n_frames, so);
      };
      if (g_.precision == "f64")
        run(double{});
      else
        run(float{});
    } else {
      std::vector<Reconstructor> recs;
      for (int p = 0; p < array.size(); ++p) {
        const auto& full = array.fibers[p];
        const auto a = crop_matrix(full, centered_origin(full.roi_shape(), roi), roi);
        if (!o.method.empty()) {
          recs.push_back(o.method == "tr" ? make_tr(a, default_lambda(a)) : make_cs(a));
          continue;
        }
        require(!o.models_dir.empty(), ErrorCode::kInvalidArgument, "stream needs --models-dir or --method");
        const fs::path spkn = fs::path(o.models_dir) / fiber_file(p, "spkn");
        const fs::path spkr = fs::path(o.models_dir) / fiber_file(p, "spkr");
        if (fs::exists(spkn)) {
          if (g_.precision == "f64")
            recs.push_back(make_dl<double>(std::make_shared<const nn::Network<double>>(nn::load_checkpoint<double>(spkn).net)));
          else
            recs.push_back(make_dl<float>(std::make_shared<const nn::Network<float>>(nn::load_checkpoint<float>(spkn).net)));
        } else {
          require(fs::exists(spkr), ErrorCode::kIo, "no model for fiber " + std::to_string(p) + " in " + o.models_dir);
          recs.push_back(TrBackend{load_reconstructor(spkr)});
        }
      }
      res = pipeline::run_stream(array, recs, source, n_frames, so);
    }

    const fs::path dir = root("reports") / o.name;
    fs::create_directories(dir);
    pipeline::write_timing_csv(res.timing, o.timing_out.empty() ? dir / "timing.csv" : fs::path(o.timing_out));
    std::ofstream dom(dir / "dominant.csv");
    dom << "frame,script_channel,reconstructed_channel\n";
    for (std::size_t f = 0; f < res.frames.size(); ++f) {
      const auto& hf = res.frames[f];
      Eigen::VectorXd mean = Eigen::VectorXd::Zero(y);
      for (int p = 0; p < array.size(); ++p)
        for (int j = 0; j < y; ++j) mean[j] += hf.at(p, j);
      Eigen::Index got = 0, want = 0;
      mean.maxCoeff(&got);
      spectra[f % spectra.size()].values().maxCoeff(&want);
      dom << f << "," << want << "," << got << "\n";
    }
    const auto m = res.timing.mean();
    std::ostringstream line;
    line << std::setprecision(4) << "frames " << res.timing.frames.size() << " fibers " << res.timing.fibers
         << " workers " << res.timing.workers << ": synthesize " << m.synthesize * 1e3 << " ms, preprocess "
         << m.preprocess * 1e3 << " ms, inference " << m.inference * 1e3 << " ms, assemble " << m.assemble * 1e3
         << " ms, total " << m.total * 1e3 << " ms per frame; " << res.timing.inference_per_fiber() * 1e6
         << " us inference per fiber; " << res.timing.fibers_per_second() << " fibers/s";
    std::ofstream(dir / "summary.txt") << line.str() << "\n";
    run_manifest(sub, g_, s).write(dir / "run.manifest.txt");
    out_ << line.str() << "\n";
  }

  // ---- import-matrix ----

  struct ImportOpts {
    std::string input;
    std::string roi;
    std::string name = "imported";
  };

  void add_import(CLI::App& app) {
    auto o = std::make_shared<ImportOpts>();
    auto* sub = app.add_subcommand("import-matrix", "Import a measured matrix (SPKT, or CSV with X rows and Y columns)");
    sub->add_option("--input", o->input, "SPKT file or CSV file")->required();
    sub->add_option("--roi", o->roi, "ROI HxW of the CSV rows (required for CSV)");
    sub->add_option("--name", o->name, "Directory name under OUT/matrices")->capture_default_str();
    sub->callback([this, sub, o] {
      action_ = [this, sub, o] {
        TransmissionMatrix a;
        if (fs::path(o->input).extension() == ".csv") {
          require(!o->roi.empty(), ErrorCode::kInvalidArgument, "--roi is required for CSV input");
          a = read_matrix_csv(o->input, parse_roi(o->roi));
        } else {
          a = io::import_matrix(o->input);
        }
        FiberArrayModel arr{{a}, {1, 1}};
        const fs::path dir = root("matrices") / o->name;
        auto m = run_manifest(*sub, g_, 0);
        m.set("source_hash", io::matrix_hash(a));
        save_array(arr, dir, m);
        out_ << "imported " << to_string(a.roi_shape()) << " x " << a.channels() << " matrix to " << dir.string() << "\n";
      };
    });
  }

  static TransmissionMatrix read_matrix_csv(const fs::path& path, RoiShape roi) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCode::kIo, "cannot open " + path.string());
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<double> row;
      std::istringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) {
        try {
          row.push_back(std::stod(cell));
        } catch (const std::exception&) {
          fail(ErrorCode::kParse, path.string() + ": bad value '" + cell + "' in row " + std::to_string(rows.size()));
        }
      }
      require(rows.empty() || row.size() == rows.front().size(), ErrorCode::kParse,
              path.string() + ": ragged row " + std::to_string(rows.size()));
      rows.push_back(std::move(row));
    }
    require(!rows.empty(), ErrorCode::kParse, path.string() + ": empty");
    Eigen::MatrixXd cols(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < rows[i].size(); ++j) cols(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    return TransmissionMatrix(std::move(cols), roi);
  }

  std::ostream& out_;
  std::ostream& err_;
  Globals g_;
  std::optional<std::uint64_t> seed_;
  std::function<void()> action_;
};

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return Runner(out, err).run(argc, argv);
}

}  // namespace speckle::cli
