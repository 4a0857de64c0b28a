#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>
#include <vector>

#include "speckle/bench.hpp"
#include "speckle/pipeline.hpp"
#include "speckle/recon.hpp"
#include "speckle/specklegen.hpp"
#include "speckle/synth.hpp"
#include "support/expect.hpp"

using namespace speckle;
using namespace speckle::bench;
using namespace speckle::pipeline;

namespace {

TransmissionMatrix matrix(std::uint64_t seed, RoiShape roi, int y, int modes) {
  FiberModel m;
  m.seed = seed;
  m.n_modes = modes;
  return generate_fiber(m, roi, y);
}

FiberArrayModel array(int n, RoiShape roi, int y, std::uint64_t seed) {
  FiberModel m;
  m.n_modes = roi.pixels() >= 64 ? 64 : roi.pixels();
  Rng rng(seed);
  return generate_array(rng, n, m, roi, y);
}

std::vector<Reconstructor> tr_per_fiber(const FiberArrayModel& arr, double lambda) {
  std::vector<Reconstructor> out;
  for (const auto& f : arr.fibers) out.push_back(make_tr(f, lambda));
  return out;
}

std::vector<Spectrum> random_spectra(int n, int y, std::uint64_t seed) {
  Rng r(seed);
  std::vector<Spectrum> out;
  for (int i = 0; i < n; ++i) out.push_back(sample_dense_spectrum(r, y, 0.2));
  return out;
}

}  // namespace

// ---- evaluation helpers --------------------------------------------------------

TEST(Bench, SummarizeMatchesHandComputation) {
  const auto r = summarize({1.0, 0.2, 0.6});
  EXPECT_NEAR(r.mean, 0.6, 1e-15);
  EXPECT_NEAR(r.stddev, 0.4, 1e-15);
  EXPECT_NEAR(r.failure_fraction, 1.0 / 3.0, 1e-15);
  EXPECT_EQ(r.count, 3);
  const auto empty = summarize({});
  EXPECT_EQ(empty.count, 0);
  EXPECT_EQ(empty.mean, 0.0);
}

TEST(Bench, HistogramBinsOverUnitInterval) {
  const std::vector<double> v{-1.0, 0.0, 0.999, 1.0, 2.0};
  EXPECT_EQ(histogram(v, 4), (std::vector<int>{1, 0, 1, 3}));
  EXPECT_CODE(histogram(v, 0), ErrorCode::kInvalidArgument);
}

TEST(Bench, RoiForRatio) {
  EXPECT_EQ(roi_for_ratio(9.30, 43, {20, 20}), (RoiShape{20, 20}));
  EXPECT_EQ(roi_for_ratio(0.58, 43, {20, 20}), (RoiShape{5, 5}));
  EXPECT_EQ(roi_for_ratio(0.21, 43, {20, 20}), (RoiShape{3, 3}));
  EXPECT_CODE(roi_for_ratio(0.30, 43, {20, 20}), ErrorCode::kInvalidArgument);
  EXPECT_CODE(roi_for_ratio(20.0, 43, {20, 20}), ErrorCode::kInvalidArgument);
  EXPECT_CODE(roi_for_ratio(-1.0, 43, {20, 20}), ErrorCode::kInvalidArgument);
}

TEST(Bench, SweepProducesOneRowPerCell) {
  const std::vector<TransmissionMatrix> fibers{matrix(1, {8, 8}, 12, 40), matrix(2, {8, 8}, 12, 40)};
  SweepOptions o;
  o.n_train = 40;
  o.n_val = 10;
  o.n_test = 12;
  const auto rows = sweep_sampling(fibers, {tr_method(), cs_method()}, {3.0, 0.75}, {1, 3}, o);
  ASSERT_EQ(rows.size(), 8u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.report.count, 24);
    EXPECT_EQ(r.roi.height, r.ratio == 3.0 ? 6 : 3);
  }
  EXPECT_GT(rows.front().report.mean, 0.99);  // tr, ratio 3, N_lambda 1
  EXPECT_TRUE(non_increasing_within_std(rows, "tr", 3.0));
  const auto again = sweep_sampling(fibers, {tr_method(), cs_method()}, {3.0, 0.75}, {1, 3}, o);
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i].report.correlations, again[i].report.correlations);
  EXPECT_CODE(sweep_sampling(fibers, {tr_method()}, {3.0}, {13}, o), ErrorCode::kInvalidArgument);
}

TEST(Bench, CompareMethodsOnBothClasses) {
  const auto a = matrix(3, {10, 10}, 12, 60);
  Rng rng(4);
  const auto sets = comparison_sets(a, "oversampled", 20, rng);
  ASSERT_EQ(sets.size(), 2u);
  const auto rows = compare_methods({{"tr", make_tr(a, 1e-8)}, {"cs", make_cs(a)}}, sets, 1, 10);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.report.count, 20);
    EXPECT_EQ(std::accumulate(r.histogram.begin(), r.histogram.end(), 0), 20);
  }
  EXPECT_GT(rows[0].report.mean, 0.99);
}

TEST(Bench, RobustnessMapRequiresVariants) {
  const auto a = matrix(5, {5, 5}, 12, 25);
  RatioMethods rm{25.0 / 12, {5, 5}, {{"tr", make_tr(a, 1e-6)}, {"cs", make_cs(a)}}};
  RobustnessOptions o;
  EXPECT_CODE(robustness_map(a, {rm}, o), ErrorCode::kInvalidArgument);
  o.required = {"tr", "cs"};
  o.n_lambda_grid = {1, 3};
  o.noise_levels = {0.0, 0.2};
  o.n_test = 10;
  const auto cells = robustness_map(a, {rm}, o);
  ASSERT_EQ(cells.size(), 8u);
  const auto ratios = ratio_map(cells, "cs", "tr");
  ASSERT_EQ(ratios.size(), 4u);
  for (const auto& c : ratios) {
    double num = 0, den = 0;
    for (const auto& cell : cells) {
      if (cell.n_lambda != c.n_lambda || cell.noise != c.noise) continue;
      (cell.method == "cs" ? num : den) = cell.report.mean;
    }
    EXPECT_NEAR(c.value, num / den, 1e-15);
  }
}

TEST(Bench, ShiftExperimentScoresBothConditions) {
  const auto a = matrix(6, {9, 9}, 12, 50);
  const auto inner = crop_matrix(a, centered_origin(a.roi_shape(), {7, 7}), {7, 7});
  const auto rows = shift_experiment(a, {7, 7}, {{"tr", make_tr(inner, 1e-8)}}, SpectrumSampler::sparse(2), 15, 1);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_FALSE(rows[0].shifted);
  EXPECT_TRUE(rows[1].shifted);
  EXPECT_GT(rows[0].report.mean, 0.99);
  EXPECT_LT(rows[1].report.mean, rows[0].report.mean);
}

TEST(Bench, RgbScenarioOversampledTikhonov) {
  const auto arr = array(4, {20, 20}, 43, 7);
  Rng rng(8);
  const auto sources = synthetic_rgb_images(rng, arr.grid);
  const auto enc = encode_rgb_images(sources, arr);
  const auto recon = tr_per_fiber(arr, 1e-10);
  const auto res = rgb_scenario(enc, sources, recon);
  ASSERT_EQ(res.rasters.size(), static_cast<std::size_t>(kRgbImages));
  EXPECT_GT(res.mean_correlation, 0.999);
  EXPECT_LT(res.blank_energy_ratio, 0.01);
  EXPECT_CODE(rgb_scenario(enc, sources, std::span(recon).first(3)), ErrorCode::kDimensionMismatch);
}

// ---- streaming -----------------------------------------------------------------

TEST(Pipeline, RenderFrameTilesFibers) {
  const auto arr = array(3, {4, 4}, 6, 9);
  const auto spectra = random_spectra(3, 6, 10);
  const auto frame = render_frame(arr, spectra);
  EXPECT_EQ(frame.shape(), (RoiShape{4, 12}));  // one row of three
  for (int p = 0; p < 3; ++p) {
    const auto want = render_speckle(arr.fibers[p], spectra[p]);
    const auto got = crop_roi(frame, arr.fiber_origin(p), {4, 4});
    EXPECT_LT((got.pixels() - want.pixels()).norm(), 1e-12);
  }
}

TEST(Pipeline, StreamMatchesDirectReconstruction) {
  const auto arr = array(6, {6, 6}, 10, 11);
  const auto recon = tr_per_fiber(arr, 1e-6);
  const auto spectra = random_spectra(3, 10, 12);
  const auto res = run_stream(arr, recon, spectra_source(arr, spectra), 3);
  ASSERT_EQ(res.frames.size(), 3u);
  EXPECT_EQ(res.timing.frames.size(), 3u);
  for (int f = 0; f < 3; ++f) {
    const auto frame = render_frame(arr, spectra[f]);
    for (int p = 0; p < arr.size(); ++p) {
      const auto want = reconstruct(recon[p], crop_roi(frame, arr.fiber_origin(p), {6, 6}));
      for (int j = 0; j < 10; ++j) EXPECT_NEAR(res.frames[f].at(p, j), want[j], 1e-12);
    }
  }
  StreamOptions three;
  three.workers = 3;
  const auto res3 = run_stream(arr, recon, spectra_source(arr, spectra), 3, three);
  for (int f = 0; f < 3; ++f) EXPECT_TRUE(res.frames[f] == res3.frames[f]);
}

TEST(Pipeline, StreamCropsCentredWindow) {
  const auto arr = array(2, {8, 8}, 10, 13);
  std::vector<Reconstructor> recon;
  for (const auto& f : arr.fibers) recon.push_back(make_tr(crop_matrix(f, {2, 2}, {4, 4}), 1e-6));
  const auto spectra = random_spectra(1, 10, 14);
  StreamOptions o;
  o.roi = RoiShape{4, 4};
  const auto res = run_stream(arr, recon, spectra_source(arr, spectra), 1, o);
  const auto frame = render_frame(arr, spectra[0]);
  for (int p = 0; p < 2; ++p) {
    const auto want = reconstruct(recon[p], crop_roi(frame, arr.fiber_origin(p) + PixelOffset{2, 2}, {4, 4}));
    for (int j = 0; j < 10; ++j) EXPECT_NEAR(res.frames[0].at(p, j), want[j], 1e-12);
  }
  EXPECT_CODE(run_stream(arr, recon, spectra_source(arr, spectra), 1), ErrorCode::kDimensionMismatch);
}

TEST(Pipeline, MultiFiberStreamMatchesNetworks) {
  const auto arr = array(4, {5, 5}, 8, 15);
  nn::MultiFiberOptions mo;
  mo.fibers = 2;
  mo.height = mo.width = 5;
  mo.outputs = 8;
  mo.conv_kernels = {2};
  mo.conv_filters = {4};
  mo.hidden_units = 16;
  std::vector<std::shared_ptr<const nn::Network<double>>> nets;
  for (int g = 0; g < 2; ++g) nets.push_back(std::make_shared<const nn::Network<double>>(nn::build_multifiber(mo), g + 1));
  const auto spectra = random_spectra(1, 8, 16);
  const auto source = spectra_source(arr, spectra);
  const auto res = run_multifiber_stream<double>(arr, nets, 2, source, 1);
  const auto frame = render_frame(arr, spectra[0]);
  nn::Workspace<double> ws;
  for (int g = 0; g < 2; ++g) {
    std::vector<double> px, out(16);
    for (int k = 0; k < 2; ++k) {
      const auto img = crop_roi(frame, arr.fiber_origin(2 * g + k), {5, 5});
      px.insert(px.end(), img.pixels().begin(), img.pixels().end());
    }
    nets[g]->predict_into(px.data(), out.data(), ws);
    for (int k = 0; k < 2; ++k)
      for (int j = 0; j < 8; ++j) EXPECT_NEAR(res.frames[0].at(2 * g + k, j), out[k * 8 + j], 1e-12);
  }
  EXPECT_CODE(run_multifiber_stream<double>(arr, std::span(nets).first(1), 3, source, 1),
              ErrorCode::kDimensionMismatch);
  EXPECT_CODE(run_multifiber_stream<double>(arr, std::span(nets).first(1), 2, source, 1),
              ErrorCode::kDimensionMismatch);
}

TEST(Pipeline, ScriptBlendsSwitchFrames) {
  std::istringstream in("# two entries\n0 2 1\n\n2 4 3:0.5,1:0.25\n");
  const auto script = parse_script(in);
  ASSERT_EQ(script.size(), 2u);
  const auto frames = script_spectra(script, 5);
  ASSERT_EQ(frames.size(), 5u);
  EXPECT_EQ(frames[0][1], 1.0);
  EXPECT_EQ(frames[1][1], 1.0);
  EXPECT_NEAR(frames[2][1], 0.625, 1e-15);
  EXPECT_NEAR(frames[2][3], 0.25, 1e-15);
  EXPECT_EQ(frames[3][3], 0.5);
  EXPECT_EQ(frames[4][1], 0.25);
}

TEST(Pipeline, ScriptErrors) {
  const auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return parse_script(in);
  };
  EXPECT_CODE(parse("0 x 1\n"), ErrorCode::kParse);
  EXPECT_CODE(parse("0 1 1:w\n"), ErrorCode::kParse);
  EXPECT_CODE(parse("0 1 1 extra\n"), ErrorCode::kParse);
  EXPECT_CODE(script_spectra(parse("0 1 1\n3 4 2\n"), 5), ErrorCode::kInvalidArgument);
  EXPECT_CODE(script_spectra(parse("1 1 1\n"), 5), ErrorCode::kInvalidArgument);
  EXPECT_CODE(script_spectra(parse("0 1 7\n"), 5), ErrorCode::kInvalidArgument);
  EXPECT_CODE(script_spectra({}, 5), ErrorCode::kInvalidArgument);
}

TEST(Pipeline, SimulatedSwitchRendersEveryFrame) {
  const auto arr = array(2, {4, 4}, 6, 17);
  std::istringstream in("0 1 0\n1 2 5\n");
  const auto packets = simulate_wavelength_switch(arr, parse_script(in), 0.5);
  ASSERT_EQ(packets.size(), 3u);
  EXPECT_EQ(packets[2].sequence, 2u);
  EXPECT_EQ(packets[2].timestamp, 1.0);
  const auto want = render_frame(arr, Spectrum(Eigen::VectorXd::Unit(6, 5)));
  EXPECT_LT((packets[2].frame.pixels() - want.pixels()).norm(), 1e-12);
}
