#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "z2/experiment.hpp"

using namespace z2;

namespace {

std::filesystem::path scratch_dir() {
  auto dir = std::filesystem::temp_directory_path() / ("z2_tests_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path write_config(const std::string& name, const json& body) {
  const auto path = scratch_dir() / name;
  std::ofstream(path) << body.dump(2);
  return path;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(Z2_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json small_config() {
  return json::parse(R"({
    "schedule": {"kind": "vp", "T": 12, "params": {"alpha_start": 0.999, "alpha_end": 0.02}},
    "fields": {"components": [{"mean": [1.5, 0.0], "var": 0.1, "weight": 0.3},
                              {"mean": [-1.5, 0.0], "var": 0.1, "weight": 0.7}],
               "conditional_index": 0},
    "sampler": {"variant": "z_squared", "gamma1": 0.6, "warmup": 2, "zigzag_steps": 6},
    "seed": 4,
    "checks": {"runs": 3, "random_schedules": 5, "collapse_cases": 200, "collapse_dim": 8}
  })");
}

}  // namespace

TEST(Config, DefaultsParse) {
  const auto cfg = default_config();
  EXPECT_EQ(cfg.schedule.kind(), ScheduleKind::VP);
  EXPECT_EQ(cfg.schedule.steps(), 50);
  EXPECT_EQ(cfg.sampler.variant, Variant::ZSquared);
  EXPECT_EQ(cfg.field().dim(), 2);
}

TEST(Config, RejectsUnknownKeys) {
  auto cfg = small_config();
  cfg["sampler"]["gamma_one"] = 2.0;
  EXPECT_THROW(parse_config(cfg), ConfigError);
  cfg = small_config();
  cfg["extra"] = 1;
  EXPECT_THROW(parse_config(cfg), ConfigError);
  cfg = small_config();
  cfg["fields"]["components"][0]["std"] = 1.0;
  EXPECT_THROW(parse_config(cfg), ConfigError);
}

TEST(Config, RejectsInvalidValues) {
  auto cfg = small_config();
  cfg["schedule"]["T"] = 0;
  EXPECT_THROW(parse_config(cfg), ConfigError);
  cfg = small_config();
  cfg["schedule"]["kind"] = "cosine";
  EXPECT_THROW(parse_config(cfg), ConfigError);
  cfg = small_config();
  cfg["sampler"]["gamma2"] = 1.0;
  EXPECT_THROW(parse_config(cfg), ConfigError);
  cfg = small_config();
  cfg["sampler"]["zigzag_steps"] = 20;
  EXPECT_THROW(parse_config(cfg), ConfigError);
  cfg = small_config();
  cfg["fields"]["components"][0]["weight"] = 0.5;
  EXPECT_THROW(parse_config(cfg), ConfigError);
  cfg = small_config();
  cfg["sweep"] = {{"parameter", "eta"}, {"values", {1}}};
  EXPECT_THROW(parse_config(cfg), ConfigError);
  cfg = small_config();
  cfg["sampler"]["gamma1"] = "big";
  EXPECT_THROW(parse_config(cfg), ConfigError);
}

TEST(Config, OrderSweepNeedsFourStepSizes) {
  auto raw = small_config();
  raw["sweep"] = {{"parameter", "h"}, {"values", {0.04, 0.02, 0.01}}};
  EXPECT_THROW(cmd_order_sweep(parse_config(raw)), ConfigError);
  EXPECT_THROW(cmd_bea_check(parse_config(raw)), ConfigError);
}

TEST(Commands, VerifyDualityPassesAndReportsPerKind) {
  const auto res = cmd_verify_duality(parse_config(small_config()));
  EXPECT_EQ(res.exit_code, kExitOk);
  for (const char* kind : {"vp", "flow", "spherical"}) {
    ASSERT_TRUE(res.summary["kinds"].contains(kind));
    EXPECT_TRUE(res.summary["kinds"][kind]["offending_steps"].empty());
  }
}

TEST(Commands, FaultInjectionIsCaughtAtTheRightStep) {
  auto raw = small_config();
  raw["checks"]["coefficient_overrides"] = json::array({{{"kind", "vp"}, {"step", 7}, {"C", 0.5}}});
  const auto res = cmd_verify_duality(parse_config(raw));
  EXPECT_EQ(res.exit_code, kExitAssertion);
  const auto& bad = res.summary["kinds"]["vp"]["offending_steps"];
  ASSERT_EQ(bad.size(), 1u);
  EXPECT_EQ(bad[0]["step"], 7);
  EXPECT_NE(res.report.find("step 7"), std::string::npos);
  EXPECT_TRUE(res.summary["kinds"]["flow"]["offending_steps"].empty());
}

TEST(Commands, CollapseCheckPasses) {
  const auto res = cmd_collapse_check(parse_config(small_config()));
  EXPECT_EQ(res.exit_code, kExitOk);
  EXPECT_EQ(res.summary["unguided_forward_deviation"].get<double>(), 0.0);
  EXPECT_LT(res.summary["max_collapse_deviation"].get<double>(), 1e-10);
}

TEST(Commands, SampleCsvSchemaAndNfe) {
  auto raw = small_config();
  raw["sweep"] = {{"parameter", "lambda"}, {"values", {0, 3, 6}}};
  const auto res = cmd_sample(parse_config(raw));
  EXPECT_EQ(res.exit_code, kExitOk);
  ASSERT_TRUE(res.steps_csv);
  std::istringstream lines(*res.steps_csv);
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, kCsvHeader);
  EXPECT_EQ(header.rfind("step,t,tau_norm,e_tss,cos_sim,h,error,slope,r_squared", 0), 0u);
  int rows = 0;
  for (std::string line; std::getline(lines, line);) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), std::count(header.begin(), header.end(), ','));
  }
  EXPECT_EQ(rows, 3 * 12);
  for (const auto& s : res.summary["settings"]) EXPECT_EQ(s["nfe"], 24);
  EXPECT_NE(res.summary["quality_proxy"].get<std::string>().find("proxy"), std::string::npos);
}

TEST(Commands, CompareVariantsReportsExpectedNfe) {
  auto raw = small_config();
  raw["checks"]["variants"] = {"standard", "explicit_z", "implicit_z", "z_squared"};
  const auto res = cmd_sample(parse_config(raw));
  EXPECT_EQ(res.exit_code, kExitOk);
  std::vector<int> nfe;
  for (const auto& s : res.summary["settings"]) nfe.push_back(s["nfe"]);
  EXPECT_EQ(nfe, (std::vector<int>{24, 48, 36, 24}));
}

TEST(Commands, OrderSweepWithExactSurrogateIsDegenerate) {
  auto raw = small_config();
  raw["checks"]["exact_surrogate"] = true;
  const auto res = cmd_order_sweep(parse_config(raw));
  EXPECT_EQ(res.exit_code, kExitOk);
  EXPECT_TRUE(res.summary["e_tss"]["degenerate"].get<bool>());
  EXPECT_TRUE(res.summary["e_tss"]["slope"].is_null());
}

TEST(Output, RealFormatting) {
  EXPECT_EQ(format_real(0.1), "0.10000000000000001");
  EXPECT_EQ(format_real(std::nan("")), "NA");
  EXPECT_EQ(format_opt(std::nullopt), "NA");
  CsvRow r;
  r.step = 0;
  r.cos_sim = "undefined";
  EXPECT_EQ(to_csv_line(r), "0,NA,NA,NA,undefined,NA,NA,NA,NA,NA,NA,NA,NA,NA,NA\n");
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch_dir();
  const auto good = write_config("good.json", small_config());
  EXPECT_EQ(run_cli("verify-duality --config " + good.string() + " --out " + (dir / "vd").string()), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "vd.summary.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "vd.steps.csv"));

  auto raw = small_config();
  raw["checks"]["coefficient_overrides"] = json::array({{{"kind", "spherical"}, {"step", 2}, {"A", 2.0}}});
  EXPECT_EQ(run_cli("verify-duality --config " + write_config("fault.json", raw).string() + " --out " +
                    (dir / "fault").string()),
            1);

  raw = small_config();
  raw["bogus"] = true;
  EXPECT_EQ(run_cli("sample --config " + write_config("bad.json", raw).string()), 2);
  raw = small_config();
  raw["sweep"] = {{"parameter", "h"}, {"values", {0.1, 0.05}}};
  EXPECT_EQ(run_cli("order-sweep --config " + write_config("short.json", raw).string()), 2);
  EXPECT_EQ(run_cli("no-such-command"), 2);
  {
    std::ofstream(dir / "broken.json") << "{ not json";
  }
  EXPECT_EQ(run_cli("sample --config " + (dir / "broken.json").string()), 2);
}

TEST(Cli, CsvIsByteIdenticalAcrossRuns) {
  const auto dir = scratch_dir();
  auto raw = small_config();
  raw["sweep"] = {{"parameter", "gamma1"}, {"values", {0.5, 2.0}}};
  const auto cfg = write_config("repeat.json", raw).string();
  ASSERT_EQ(run_cli("sample --config " + cfg + " --out " + (dir / "a").string()), 0);
  ASSERT_EQ(run_cli("sample --config " + cfg + " --out " + (dir / "b").string()), 0);
  EXPECT_EQ(slurp(dir / "a.steps.csv"), slurp(dir / "b.steps.csv"));
  EXPECT_FALSE(slurp(dir / "a.steps.csv").empty());
}

TEST(Cli, SeedFlagOverridesConfig) {
  const auto dir = scratch_dir();
  const auto cfg = write_config("seeded.json", small_config()).string();
  ASSERT_EQ(run_cli("sample --config " + cfg + " --seed 11 --out " + (dir / "s11").string()), 0);
  ASSERT_EQ(run_cli("sample --config " + cfg + " --seed 12 --out " + (dir / "s12").string()), 0);
  EXPECT_NE(slurp(dir / "s11.steps.csv"), slurp(dir / "s12.steps.csv"));
  const auto summary = json::parse(slurp(dir / "s11.summary.json"));
  EXPECT_EQ(summary["seed"], 11);
}
