#include <gtest/gtest.h>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "speckle/cli.hpp"
#include "speckle/io.hpp"
#include "support/expect.hpp"

using namespace speckle;
using testing_support::TempDir;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "speckle");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Cli, HelpExitsZero) {
  const auto r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("gen-dataset"), std::string::npos);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, cli::kUsage);
  EXPECT_EQ(run({"gen-dataset", "--n", "10"}).code, cli::kUsage);  // --matrix missing
  EXPECT_EQ(run({"train", "--dataset", "x", "--epochs", "0"}).code, cli::kUsage);
  EXPECT_EQ(run({"frobnicate"}).code, cli::kUsage);
}

TEST(Cli, MissingOrCorruptInputIsDataError) {
  TempDir dir("cli_bad");
  const auto out = dir.path().string();
  const auto missing = run({"--out", out, "gen-dataset", "--matrix", (dir.path() / "none.spkt").string(), "--n", "5"});
  EXPECT_EQ(missing.code, cli::kData);
  EXPECT_NE(missing.err.find("error:"), std::string::npos);
  std::ofstream(dir.path() / "junk.spkt") << "not a matrix";
  EXPECT_EQ(run({"--out", out, "gen-dataset", "--matrix", (dir.path() / "junk.spkt").string(), "--n", "5"}).code,
            cli::kData);
}

TEST(Cli, EndToEndChain) {
  TempDir dir("cli_chain");
  const auto out = dir.path().string();
  ASSERT_EQ(run({"--out", out, "--seed", "3", "gen-fiber", "--channels", "12", "--roi", "5x5", "--modes", "25"}).code, 0);
  const auto matrix = (dir.path() / "matrices" / "fiber" / "fiber_0000.spkt").string();
  ASSERT_TRUE(fs::exists(matrix));

  ASSERT_EQ(run({"--out", out, "--seed", "4", "gen-dataset", "--matrix", matrix, "--n", "310", "--sparse", "1..3"}).code,
            0);
  const auto dataset = (dir.path() / "datasets" / "dataset").string();

  const auto tr = run({"--out", out, "recon", "--matrix", matrix, "--dataset", dataset, "--method", "tr", "--name", "tr"});
  ASSERT_EQ(tr.code, 0) << tr.err;
  EXPECT_TRUE(fs::exists(dir.path() / "reports" / "tr" / "summary.txt"));
  EXPECT_TRUE(fs::exists(dir.path() / "reports" / "tr" / "tr.spkr"));

  const auto cs = run({"--out", out, "recon", "--matrix", matrix, "--dataset", dataset, "--method", "cs", "--name", "cs"});
  ASSERT_EQ(cs.code, 0) << cs.err;

  const auto train = run({"--out", out, "--seed", "5", "train", "--dataset", dataset, "--epochs", "2", "--name", "net"});
  ASSERT_EQ(train.code, 0) << train.err;
  const fs::path model = dir.path() / "models" / "net.spkn";
  ASSERT_TRUE(fs::exists(model));
  EXPECT_NE(train.out.find("epoch 2"), std::string::npos);

  const auto dl = run({"--out", out, "recon", "--dataset", dataset, "--method", "dl", "--model", model.string(), "--name", "dl"});
  ASSERT_EQ(dl.code, 0) << dl.err;

  EXPECT_EQ(run({"--out", out, "recon", "--dataset", dataset, "--method", "cs"}).code, cli::kConfig);
}

TEST(Cli, SameSeedSameBytes) {
  TempDir dir("cli_seed");
  const auto out = dir.path().string();
  for (const auto& name : {"a", "b"})
    ASSERT_EQ(run({"--out", out, "--seed", "9", "gen-fiber", "--channels", "8", "--roi", "4x4", "--modes", "16", "--name",
                   name})
                  .code,
              0);
  EXPECT_EQ(slurp(dir.path() / "matrices" / "a" / "fiber_0000.spkt"),
            slurp(dir.path() / "matrices" / "b" / "fiber_0000.spkt"));
  const auto unseeded = run({"--out", out, "gen-fiber", "--channels", "8", "--roi", "4x4", "--modes", "16", "--name", "c"});
  EXPECT_NE(unseeded.out.find("seed="), std::string::npos);
}

TEST(Cli, StreamOverArray) {
  TempDir dir("cli_stream");
  const auto out = dir.path().string();
  ASSERT_EQ(run({"--out", out, "--seed", "2", "gen-array", "--fibers", "4", "--channels", "10", "--roi", "5x5", "--modes",
                 "25"})
                .code,
            0);
  const auto arr = (dir.path() / "matrices" / "array").string();
  std::ofstream(dir.path() / "script.txt") << "0 1 2\n1 3 7\n";
  const auto r = run({"--out", out, "stream", "--matrix-dir", arr, "--method", "tr", "--frames", "4", "--script",
                      (dir.path() / "script.txt").string(), "--name", "s"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir.path() / "reports" / "s" / "timing.csv"));
  EXPECT_TRUE(fs::exists(dir.path() / "reports" / "s" / "dominant.csv"));
}

TEST(Cli, ImportCsvMatrix) {
  TempDir dir("cli_csv");
  {
    std::ofstream csv(dir.path() / "a.csv");
    for (int i = 0; i < 6; ++i) csv << 0.1 * i << "," << 1.0 << "," << 0.5 + 0.01 * i << "\n";
  }
  const auto out = dir.path().string();
  ASSERT_EQ(run({"--out", out, "import-matrix", "--input", (dir.path() / "a.csv").string(), "--roi", "2x3"}).code, 0);
  const auto a = io::import_matrix(dir.path() / "matrices" / "imported" / "fiber_0000.spkt");
  EXPECT_EQ(a.roi_shape(), (RoiShape{2, 3}));
  EXPECT_EQ(a.channels(), 3);
  EXPECT_DOUBLE_EQ(a.columns()(4, 2), 0.54);
  EXPECT_EQ(run({"--out", out, "import-matrix", "--input", (dir.path() / "a.csv").string()}).code, cli::kConfig);
  std::ofstream(dir.path() / "bad.csv") << "1,2\n3\n";
  EXPECT_EQ(run({"--out", out, "import-matrix", "--input", (dir.path() / "bad.csv").string(), "--roi", "1x2"}).code,
            cli::kData);
}
