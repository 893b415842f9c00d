#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "cflsim/cli.hpp"

namespace cflsim {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cflsim");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("cflsim_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const std::string& body) {
  const auto path = dir / "config.toml";
  write_atomic(path, body);
  return path;
}

constexpr const char* kSmall = R"([dataset]
name = "tiny"
rows = 60
cols = 8
latent_rank = 3
[federation]
clients = 4
epochs = 2
batch_size = 16
)";

TEST(Cli, RunRejectsMoreClientsThanColumns) {
  const auto dir = fresh_dir("k_gt_d");
  const auto cfg = write_config(dir, "[dataset]\ncols = 4\nlatent_rank = 2\n[federation]\nclients = 5\n");
  const auto r = cli({"run", "--config", cfg.string(), "--out", (dir / "out").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("d >= K"), std::string::npos) << r.err;
}

TEST(Cli, UnknownFlagIsUsageError) {
  const auto r = cli({"run", "--bogus"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"grid", "--config", "x.toml", "--format", "xml"}).code, 2);
}

TEST(Cli, MissingFilesAreIoErrors) {
  const auto dir = fresh_dir("io");
  EXPECT_EQ(cli({"run", "--config", (dir / "absent.toml").string(), "--out", dir.string()}).code, 3);
  EXPECT_EQ(cli({"report", "--out", (dir / "nothing").string()}).code, 3);
}

TEST(Cli, RunWritesCell) {
  const auto dir = fresh_dir("run");
  const auto cfg = write_config(dir, kSmall);
  const auto r = cli({"run", "--config", cfg.string(), "--out", (dir / "out").string(), "--seed", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "out" / "pc0_pl1_rl1_s4" / "report.json"));
}

TEST(Cli, GridThenReportGivesCleanZeroColumn) {
  const auto dir = fresh_dir("grid");
  const auto cfg = write_config(dir, std::string(kSmall) + "[grid]\np_c = [0, 0.5]\np_l = [0.5]\nseeds = [1, 2]\n");
  const auto out = (dir / "out").string();
  const auto g = cli({"grid", "--config", cfg.string(), "--out", out, "--workers", "2"});
  ASSERT_EQ(g.code, 0) << g.err;
  EXPECT_NE(g.out.find("4/4 cells"), std::string::npos) << g.out;
  const auto r = cli({"report", "--out", out});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto table = read_file(dir / "out" / "failure_table_pc.csv");
  std::istringstream lines(table);
  std::string header, row;
  std::getline(lines, header);
  std::getline(lines, row);
  EXPECT_EQ(header, "dataset,0,0.5");
  EXPECT_EQ(row.substr(0, row.find(',', 5)), "tiny,0.00");
  EXPECT_TRUE(fs::exists(dir / "out" / "stability.csv"));
  EXPECT_EQ(cli({"report", "--out", out, "--format", "json", "--pooling", "experiment"}).code, 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "failure_table_rl.json"));
}

TEST(Cli, RerunFromManifest) {
  const auto dir = fresh_dir("rerun");
  const auto cfg = write_config(dir, std::string(kSmall) + "[grid]\np_c = [0.5]\np_l = [2]\n");
  ASSERT_EQ(cli({"grid", "--config", cfg.string(), "--out", (dir / "a").string()}).code, 0);
  const auto id = "pc0.5_pl2_rl1_s1";
  const auto r = cli({"run", "--manifest", (dir / "a" / "manifest.json").string(), "--cell", id, "--out", (dir / "b").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(dir / "a" / id / "trace.csv"), read_file(dir / "b" / id / "trace.csv"));
  EXPECT_EQ(read_file(dir / "a" / id / "report.json"), read_file(dir / "b" / id / "report.json"));
}

TEST(Cli, BoundsAllSatisfied) {
  const auto dir = fresh_dir("bounds");
  const auto r = cli({"bounds", "--out", dir.string(), "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("all satisfied"), std::string::npos);
  EXPECT_TRUE(read_json(dir / "bounds.json").at("all_satisfied").get<bool>());
}

TEST(Cli, SynthWritesLoadableCsv) {
  const auto dir = fresh_dir("synth");
  const auto cfg = write_config(dir, kSmall);
  const auto r = cli({"synth", "--config", cfg.string(), "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ds = load_csv(dir / "tiny.csv");
  EXPECT_EQ(ds.rows(), 60u);
  EXPECT_EQ(ds.cols(), 8u);
}

TEST(Cli, OutIsRequired) { EXPECT_EQ(cli({"bounds"}).code, 2); }

}  // namespace
}  // namespace cflsim
