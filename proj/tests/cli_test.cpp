#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "fact/checkpoint.hpp"
#include "fact/training.hpp"
#include "fact/vit.hpp"

namespace fs = std::filesystem;
using namespace fact;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("fact_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

RunResult run(const std::string& args) {
  const auto out = scratch() / "stdout.txt", err = scratch() / "stderr.txt";
  const std::string cmd = std::string("'") + FACT_CLI_PATH + "' " + args + " >'" + out.string() + "' 2>'" +
                          err.string() + "'";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string last_line(const std::string& s) {
  auto t = s;
  while (!t.empty() && t.back() == '\n') t.pop_back();
  const auto nl = t.rfind('\n');
  return nl == std::string::npos ? t : t.substr(nl + 1);
}

// key=value tokens from a one-line report.
std::map<std::string, std::string> fields(const std::string& line) {
  std::map<std::string, std::string> out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq != std::string::npos) out[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return out;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) row.push_back(cell);
    if (!line.empty() && line.back() == ',') row.emplace_back();
    rows.push_back(row);
  }
  return rows;
}

const std::string kData = "synthetic:seed=1,task=1,size=8,train=64,val=32,test=32";
constexpr std::size_t kLayers = 1, kDim = 16, kClasses = 10;

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto r = run("pretrain --stages 1x16x2 --data " + kData + " --epochs 2 --warmup 1 --out " +
                       (scratch() / "bb").string());
    ASSERT_EQ(r.code, 0) << r.err;
  }

  static std::string backbone() { return (scratch() / "bb" / "model.bin").string(); }

  static RunResult train(const std::string& name, const std::string& extra) {
    return run("train --backbone " + backbone() + " --data " + kData + " --epochs 2 --warmup 1 --out " +
               (scratch() / name).string() + " " + extra);
  }
};

void expect_single_error_line(const RunResult& r, const std::string& kind) {
  EXPECT_EQ(last_line(r.err).rfind("error: " + kind + ": ", 0), 0u) << r.err;
  std::size_t n = 0;
  for (std::size_t p = r.err.find("error: "); p != std::string::npos; p = r.err.find("error: ", p + 1)) ++n;
  EXPECT_EQ(n, 1u) << r.err;
}

}  // namespace

TEST(CliCountParams, ReferenceCounts) {
  const auto tt = run("count-params --format tt --rank 4 -L 12 -d 768 --csv");
  ASSERT_EQ(tt.code, 0) << tt.err;
  auto rows = csv_rows(tt.out);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"format", "strategy", "stage", "shape", "rank", "params", "params_m"}));
  EXPECT_EQ(rows[1][5], "8448");
  EXPECT_EQ(rows[1][6], "0.008");

  const auto tk = run("count-params --format tk --rank 8 --csv");
  rows = csv_rows(tk.out);
  EXPECT_EQ(rows.at(1)[5], "13952");
  EXPECT_EQ(rows.at(1)[6], "0.014");

  const auto mb = run("count-params --format mb --rank 8 --strategy qv --csv");
  rows = csv_rows(mb.out);
  EXPECT_EQ(rows.at(1)[3], "24x768x768");
  EXPECT_EQ(rows.at(1)[5], "294912");
  EXPECT_EQ(rows.at(1)[6], "0.295");
}

TEST(CliCountParams, RankListMatchesFormula) {
  const auto r = run("count-params --format tt,tk,mb --ranks 1,2,4,8,16 -L 3 -d 40 --strategy ffn --csv");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_EQ(rows.size(), 16u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = parse_format(rows[i][0]);
    const auto rank = std::stoul(rows[i][4]);
    EXPECT_EQ(std::stoul(rows[i][5]), param_count(f, Strategy::FfnOnly, 3, 40, rank)) << rows[i][0] << rank;
  }
}

TEST(CliCountParams, StageShapes) {
  const auto r = run("count-params --format tt --rank 4 --stages 2x128x4,2x256x8,18x512x16,2x1024x32 --csv");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[1][3], "24x128x128");
  EXPECT_EQ(rows[2][3], "24x256x256");
  EXPECT_EQ(rows[3][3], "216x512x512");
  EXPECT_EQ(rows[4][3], "24x1024x1024");
  EXPECT_EQ(rows[5][2], "total");
}

TEST(CliCountParams, RankAboveWidthIsConfigError) {
  const auto r = run("count-params --format tt --rank 9 -L 1 -d 8");
  EXPECT_EQ(r.code, 2);
  expect_single_error_line(r, "config");
}

TEST(CliArgs, UnknownFlagRejected) {
  const auto r = run("count-params --bogus 1");
  EXPECT_EQ(r.code, 2);
  expect_single_error_line(r, "config");
}

TEST(CliArgs, MissingCommandRejected) {
  EXPECT_EQ(run("").code, 2);
}

TEST(CliArgs, ConfigFileAppliesAndFlagsOverride) {
  const auto cfg = scratch() / "count.cfg";
  std::ofstream(cfg) << "# counts\nformat = tk\nrank = 8\nlayers = 12\ndim = 768\ncsv = true\n[train]\nepochs = 3\n";
  auto r = run("count-params --config " + cfg.string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(csv_rows(r.out).at(1)[5], "13952");
  EXPECT_NE(r.err.find("rank=8"), std::string::npos);

  r = run("count-params --config " + cfg.string() + " --format tt --rank 4");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(csv_rows(r.out).at(1)[5], "8448");
  EXPECT_NE(r.err.find("rank=4"), std::string::npos);
  EXPECT_NE(r.err.find("format=tt"), std::string::npos);
}

TEST(CliArgs, UnknownConfigKeyRejected) {
  const auto cfg = scratch() / "bad.cfg";
  std::ofstream(cfg) << "ranx = 3\n";
  const auto r = run("count-params --config " + cfg.string());
  EXPECT_EQ(r.code, 2);
  expect_single_error_line(r, "config");
}

TEST(CliArgs, MissingConfigFileIsConfigError) {
  const auto r = run("count-params --config /nonexistent/fact.cfg");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/nonexistent/fact.cfg"), std::string::npos);
}

TEST(CliArgs, EchoesResolvedConfig) {
  const auto r = run("count-params --format tt --rank 2 -L 2 -d 16");
  ASSERT_EQ(r.code, 0);
  for (const char* key : {"format=tt", "rank=2", "strategy=all", "layers=2", "dim=16", "csv=false"})
    EXPECT_NE(r.err.find(key), std::string::npos) << key;
}

TEST_F(Cli, MissingBackboneIsDataErrorWithPath) {
  const auto r = run("train --backbone /missing/backbone.bin --data " + kData + " --out " +
                     (scratch() / "never").string());
  EXPECT_EQ(r.code, 3);
  expect_single_error_line(r, "data");
  EXPECT_NE(r.err.find("/missing/backbone.bin"), std::string::npos);
}

TEST_F(Cli, BadDataSpecIsConfigError) {
  const auto r = run("train --backbone " + backbone() + " --data synthetic:colour=3 --out " +
                     (scratch() / "never").string());
  EXPECT_EQ(r.code, 2);
  expect_single_error_line(r, "config");
}

TEST_F(Cli, GeometryMismatchIsDataError) {
  const auto r = run("train --backbone " + backbone() + " --data synthetic:size=12,train=8,val=4 --epochs 1 --warmup 0 --out " +
                     (scratch() / "never").string());
  EXPECT_EQ(r.code, 3);
  expect_single_error_line(r, "data");
}

TEST_F(Cli, DivergenceExits4) {
  const auto r = train("diverge", "--warmup 0 --lr 1e30 --scale 100");
  EXPECT_EQ(r.code, 4);
  expect_single_error_line(r, "divergence");
}

TEST_F(Cli, TrainReportsFormulaPlusHead) {
  for (const char* fmt : {"tt", "tk", "mb"}) {
    const auto r = train(std::string("count_") + fmt, std::string("--format ") + fmt + " --rank 4");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto f = fields(last_line(r.out));
    const auto expected = param_count(parse_format(fmt), Strategy::All, kLayers, kDim, 4);
    EXPECT_EQ(std::stoul(f.at("factor_params")), expected) << fmt;
    EXPECT_EQ(std::stoul(f.at("trainable_params")), expected + kDim * kClasses + kClasses) << fmt;
  }
}

TEST_F(Cli, SameInvocationSameMetrics) {
  ASSERT_EQ(train("det_a", "--rank 2 --seed 9").code, 0);
  ASSERT_EQ(train("det_b", "--rank 2 --seed 9").code, 0);
  const auto a = slurp(scratch() / "det_a" / "metrics.csv");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(scratch() / "det_b" / "metrics.csv"));
  EXPECT_EQ(slurp(scratch() / "det_a" / "factors.bin"), slurp(scratch() / "det_b" / "factors.bin"));
}

TEST_F(Cli, ZeroFactorMergeKeepsBackboneBytes) {
  auto model = load_backbone<float>(backbone());
  FactorCheckpoint<float> ckpt;
  ckpt.format = Format::TensorTrain;
  ckpt.stages = init_adaptation<float>(model.config, Strategy::All, Format::TensorTrain, 2, 1.0f, 3);
  ckpt.head_w = model.head_w;
  ckpt.head_b = model.head_b;
  const auto path = scratch() / "zero.bin";
  save_checkpoint(ckpt, path);
  const auto out = scratch() / "zero_merged.bin";
  const auto r = run("merge --backbone " + backbone() + " --factors " + path.string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(out), slurp(backbone()));
}

TEST_F(Cli, MergedEvalMatchesFactoredEval) {
  for (const char* fmt : {"tt", "tk", "mb"}) {
    const std::string dir = std::string("merge_") + fmt;
    ASSERT_EQ(train(dir, std::string("--format ") + fmt + " --rank 2 --lr 0.01").code, 0);
    const auto factors = (scratch() / dir / "factors.bin").string();
    const auto merged = (scratch() / dir / "merged.bin").string();
    ASSERT_EQ(run("merge --backbone " + backbone() + " --factors " + factors + " --out " + merged).code, 0);
    const auto a = run("eval --backbone " + backbone() + " --factors " + factors + " --data " + kData);
    const auto b = run("eval --backbone " + merged + " --data " + kData);
    ASSERT_EQ(a.code, 0) << a.err;
    ASSERT_EQ(b.code, 0) << b.err;
    const auto fa = fields(last_line(a.out)), fb = fields(last_line(b.out));
    EXPECT_EQ(fa.at("acc"), fb.at("acc")) << fmt;
    EXPECT_NEAR(std::stod(fa.at("loss")), std::stod(fb.at("loss")), 1e-4) << fmt;
  }
}

TEST_F(Cli, MergeIncompatibleWidthIsConfigError) {
  ViTConfig other;
  other.image_size = 8;
  other.stages = {{1, 8, 2}};
  auto model = init_backbone<float>(other, 1);
  const auto path = scratch() / "narrow.bin";
  save_backbone(model, path);
  ASSERT_EQ(train("wide", "--rank 2").code, 0);
  const auto r = run("merge --backbone " + path.string() + " --factors " +
                     (scratch() / "wide" / "factors.bin").string() + " --out " + (scratch() / "never.bin").string());
  EXPECT_EQ(r.code, 2);
  expect_single_error_line(r, "config");
}

TEST_F(Cli, CorruptCheckpointIsDataError) {
  ASSERT_EQ(train("corrupt", "--rank 1").code, 0);
  const auto path = scratch() / "corrupt" / "factors.bin";
  auto bytes = slurp(path);
  bytes[bytes.size() / 2] ^= 0x40;
  std::ofstream(path, std::ios::binary) << bytes;
  const auto r = run("eval --backbone " + backbone() + " --factors " + path.string() + " --data " + kData);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("bad-crc"), std::string::npos) << r.err;
}

TEST_F(Cli, ExportPlotsCurves) {
  std::string metrics;
  for (const char* fmt : {"tt", "tk"})
    for (int rank : {1, 2, 4, 8}) {
      const std::string dir = std::string("plot_") + fmt + std::to_string(rank);
      ASSERT_EQ(run("train --backbone " + backbone() + " --data " + kData + " --epochs 1 --warmup 0 --format " + fmt +
                    " --rank " + std::to_string(rank) + " --out " + (scratch() / dir).string())
                    .code,
                0);
      metrics += (metrics.empty() ? "" : ",") + (scratch() / dir / "metrics.csv").string();
    }
  const auto out = scratch() / "plots";
  const auto r = run("export-plots --metrics " + metrics + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"acc_vs_rank.csv", "params_vs_rank.csv", "acc_vs_rank.svg", "params_vs_rank.svg"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_NE(slurp(out / "params_vs_rank.svg").find("<polyline"), std::string::npos);

  std::map<std::pair<std::string, std::size_t>, std::size_t> params;
  const auto rows = csv_rows(slurp(out / "params_vs_rank.csv"));
  ASSERT_EQ(rows.size(), 9u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"format", "rank", "params"}));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const std::size_t rank = std::stoul(rows[i][1]), n = std::stoul(rows[i][2]);
    params[{rows[i][0], rank}] = n;
    EXPECT_EQ(n, param_count(parse_format(rows[i][0]), Strategy::All, kLayers, kDim, rank));
  }
  const std::size_t m = slices_per_layer(Strategy::All) * kLayers;
  for (std::size_t rank : {1, 2, 4, 8}) {
    const auto tt = params.at({"tt", rank}), tk = params.at({"tk", rank});
    if (m * rank * rank > m * rank + rank * rank * rank) {
      EXPECT_LT(tk, tt) << rank;
    }
  }
  EXPECT_EQ(csv_rows(slurp(out / "acc_vs_rank.csv")).size(), 9u);
}

TEST(CliExport, EmptyMetricsIsDataError) {
  const auto empty = scratch() / "empty.csv";
  std::ofstream{empty};
  auto r = run("export-plots --metrics " + empty.string() + " --out " + (scratch() / "p_empty").string());
  EXPECT_EQ(r.code, 3);
  expect_single_error_line(r, "data");

  const auto header_only = scratch() / "header.csv";
  std::ofstream(header_only) << kMetricsHeader << "\n";
  EXPECT_EQ(run("export-plots --metrics " + header_only.string() + " --out " + (scratch() / "p_hdr").string()).code, 3);
}

TEST(CliExport, MalformedMetricsIsDataError) {
  const auto bad = scratch() / "bad.csv";
  std::ofstream(bad) << kMetricsHeader << "\ntt,four,1,0,val,1,0.5,10,5\n";
  const auto r = run("export-plots --metrics " + bad.string() + " --out " + (scratch() / "p_bad").string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("bad.csv:2"), std::string::npos) << r.err;
}

TEST(CliExport, MissingMetricsFileIsDataError) {
  EXPECT_EQ(run("export-plots --metrics /nonexistent.csv --out " + (scratch() / "p_none").string()).code, 3);
}
