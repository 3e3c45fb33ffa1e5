// End-to-end coverage of the command-line driver. Every test shells out to
// the installed binary, then inspects exit codes, captured streams, and the
// files a run leaves behind.

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gtest/gtest.h"
#include "helix/data.hpp"

namespace helix {
namespace {

struct CmdResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  ASSERT_TRUE(f.is_open()) << path;
  f << text;
}

CmdResult run_cli(const std::string& args) {
  static int counter = 0;
  const std::string base = ::testing::TempDir() + "cli_io_" + std::to_string(counter++);
  const std::string cmd =
      std::string(HELIX_CLI_PATH) + " " + args + " >" + base + ".out 2>" + base + ".err";
  const int status = std::system(cmd.c_str());
  CmdResult r;
  if (status != -1 && WIFEXITED(status)) r.code = WEXITSTATUS(status);
  r.out = slurp(base + ".out");
  r.err = slurp(base + ".err");
  return r;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

std::int64_t count_lines(const std::string& text) {
  return static_cast<std::int64_t>(std::count(text.begin(), text.end(), '\n'));
}

// Grabs the number after "name = " in free-form command output.
std::string field_after(const std::string& text, const std::string& name) {
  const auto pos = text.find(name + " = ");
  if (pos == std::string::npos) return "";
  const auto start = pos + name.size() + 3;
  const auto end = text.find('\n', start);
  return text.substr(start, end - start);
}

TEST(ParamReport, TextCarriesTheLayerBudgetAndTotals) {
  auto r = run_cli("param-report");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* needle : {"1056256", "263168", "1024", "1543", "1056007", "249", "6392626",
                             "6392377", "6391132", "spread"}) {
    EXPECT_NE(r.out.find(needle), std::string::npos) << "missing " << needle;
  }
}

TEST(ParamReport, CsvDeficitAndSpreadStayInsideTheMatchingBounds) {
  auto r = run_cli("param-report --csv");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = split(r.out, '\n');
  ASSERT_EQ(lines.size(), 7u);
  EXPECT_EQ(lines[0],
            "variant,frontend,n_layers,d_model,d_ffn,per_layer_bimamba,per_layer_attention,"
            "deficit,total");

  std::vector<std::int64_t> totals;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split(lines[i], ',');
    ASSERT_EQ(f.size(), 9u) << lines[i];
    const std::int64_t bimamba = std::stoll(f[5]);
    const std::int64_t attention = std::stoll(f[6]);
    const std::int64_t deficit = std::stoll(f[7]);
    EXPECT_EQ(deficit, bimamba - attention);
    EXPECT_LT(std::abs(deficit), 769);
    totals.push_back(std::stoll(f[8]));
  }
  const auto [lo, hi] = std::minmax_element(totals.begin(), totals.end());
  EXPECT_LT(static_cast<double>(*hi - *lo) / static_cast<double>(*lo), 0.02);
  EXPECT_EQ(totals[0], 6392626);  // pure_mamba raw
  EXPECT_EQ(totals[2], 6391132);  // pure_attention raw
}

TEST(CliErrors, MissingConfigFileExitsTwoAndNamesThePath) {
  const std::string path = ::testing::TempDir() + "absent_run.conf";
  std::filesystem::remove(path);
  auto r = run_cli("--config " + path + " train");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find(path), std::string::npos) << r.err;
}

TEST(CliErrors, UnknownConfigKeyAndBadBlockExitOne) {
  const std::string path = ::testing::TempDir() + "bad_key.conf";
  write_file(path, "bogus = 1\n");
  auto r = run_cli("--config " + path + " train");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("unknown key 'bogus'"), std::string::npos) << r.err;

  auto r2 = run_cli("grad-check --block quux");
  EXPECT_EQ(r2.code, 1);
  EXPECT_NE(r2.err.find("unknown block 'quux'"), std::string::npos) << r2.err;
}

TEST(SynthData, WritesPlayableClipsAndAManifestThatResolves) {
  const std::string dir = ::testing::TempDir() + "synth_out";
  std::filesystem::remove_all(dir);
  auto r = run_cli("--seed 3 --out " + dir + " synth-data --classes 4 --seconds 0.5 --n 20");
  ASSERT_EQ(r.code, 0) << r.err;

  const auto rows = load_manifest(dir + "/manifest.csv");
  ASSERT_EQ(rows.size(), 20u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_GE(rows[i].label, 0);
    EXPECT_LT(rows[i].label, 4);
    EXPECT_EQ(rows[i].fold, static_cast<std::int64_t>(i) % 5);
    const auto clip = load_wav(dir + "/" + rows[i].path);
    EXPECT_EQ(clip.waveform.samples.size(), 8000u);
    EXPECT_EQ(clip.label, -1);  // labels live in the manifest, not the wav
  }
}

TEST(SynthData, ConfigKeysFillFlagsTheUserDidNotGive) {
  const std::string dir = ::testing::TempDir() + "synth_conf";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const std::string conf = dir + "/gen.conf";
  write_file(conf,
             "synth_classes = 2\n"
             "synth_n = 6\n"
             "synth_seconds = 0.5\n");

  auto r = run_cli("--seed 3 --out " + dir + "/a --config " + conf + " synth-data");
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = load_manifest(dir + "/a/manifest.csv");
  ASSERT_EQ(rows.size(), 6u);
  for (const auto& row : rows) EXPECT_LT(row.label, 2);

  // an explicit flag still beats the file key
  auto r2 = run_cli("--seed 3 --out " + dir + "/b --config " + conf + " synth-data --classes 3");
  ASSERT_EQ(r2.code, 0) << r2.err;
  rows = load_manifest(dir + "/b/manifest.csv");
  ASSERT_EQ(rows.size(), 6u);
  std::int64_t top = 0;
  for (const auto& row : rows) top = std::max(top, row.label);
  EXPECT_EQ(top, 2);
}

TEST(TrainEval, ChainRunsAndEvalReproducesTheBestAccuracy) {
  const std::string dir = ::testing::TempDir() + "chain";
  std::filesystem::remove_all(dir);
  auto gen = run_cli("--seed 5 --out " + dir + "/data synth-data --classes 4 --seconds 0.5 --n 40");
  ASSERT_EQ(gen.code, 0) << gen.err;

  const std::string conf = dir + "/run.conf";
  write_file(conf,
             "variant = pure_mamba\n"
             "frontend = raw\n"
             "n_layers = 1\n"
             "d_model = 16\n"
             "d_state = 8\n"
             "heads = 4\n"
             "n_classes = 4\n"
             "manifest = " + dir + "/data/manifest.csv\n"
             "epochs = 2\n"
             "batch_size = 8\n"
             "lr0 = 1e-3\n"
             "mixup_alpha = 0\n");

  // --epochs must win over the file's epochs = 2
  auto tr = run_cli("--config " + conf + " --seed 5 --out " + dir + "/run train --epochs 3");
  ASSERT_EQ(tr.code, 0) << tr.err;
  EXPECT_EQ(count_lines(slurp(dir + "/run/metrics.jsonl")), 6);
  ASSERT_TRUE(std::filesystem::exists(dir + "/run/best.ckpt"));

  const std::string best = field_after(slurp(dir + "/run/summary.txt"), "best_accuracy");
  ASSERT_FALSE(best.empty());

  auto ev = run_cli("--config " + conf + " --seed 5 --out " + dir + "/eval eval --ckpt " + dir +
                    "/run/best.ckpt");
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(field_after(ev.out, "accuracy"), best);
  EXPECT_EQ(field_after(slurp(dir + "/eval/eval.txt"), "accuracy"), best);
}

TEST(Determinism, SameSeedGivesBitIdenticalCheckpoints) {
  const std::string dir = ::testing::TempDir() + "det";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const std::string conf = dir + "/synth.conf";
  write_file(conf,
             "variant = helix\n"
             "frontend = raw\n"
             "n_layers = 1\n"
             "d_model = 16\n"
             "d_state = 8\n"
             "heads = 4\n"
             "attention_index = 0\n"
             "synth_classes = 4\n"
             "synth_seconds = 0.5\n"
             "synth_n = 24\n"
             "epochs = 2\n"
             "batch_size = 8\n"
             "lr0 = 1e-3\n");

  ASSERT_EQ(run_cli("--config " + conf + " --seed 7 --out " + dir + "/a train").code, 0);
  ASSERT_EQ(run_cli("--config " + conf + " --seed 7 --out " + dir + "/b train").code, 0);
  ASSERT_EQ(run_cli("--config " + conf + " --seed 8 --out " + dir + "/c train").code, 0);

  const std::string a = slurp(dir + "/a/best.ckpt");
  EXPECT_EQ(a, slurp(dir + "/b/best.ckpt"));
  EXPECT_NE(a, slurp(dir + "/c/best.ckpt"));
}

TEST(BenchCmd, TinyLengthsProduceTheFullVariantGrid) {
  const std::string dir = ::testing::TempDir() + "bench_cmd";
  std::filesystem::remove_all(dir);
  auto r = run_cli("--out " + dir + " bench-scaling --lengths 64,128 --repeats 1");
  ASSERT_EQ(r.code, 0) << r.err;

  const auto lines = split(slurp(dir + "/scaling.csv"), '\n');
  ASSERT_EQ(lines.size(), 7u);
  for (const char* variant : {"pure_mamba", "helix", "pure_attention"}) {
    std::int64_t seen = 0;
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (lines[i].rfind(std::string(variant) + ",", 0) == 0) ++seen;
    }
    EXPECT_EQ(seen, 2) << variant;
  }
  EXPECT_NE(r.out.find("pure_attention"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir + "/scaling.csv.txt"));
}

TEST(GradCheckCmd, BimambaBlockPassesAtTheDefaultSize) {
  auto r = run_cli("grad-check --block bimamba --L 8 --d 16");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("[ok]"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

}  // namespace
}  // namespace helix
