#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "esi/cli_io.hpp"

using namespace esi;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = ESI_SOURCE_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("esi_cli_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

struct Run {
  int code;
  std::string err;
};

Run lab(const std::string& args, const std::string& env = "") {
  const fs::path err = fs::temp_directory_path() / "esi_cli_test_stderr.txt";
  const std::string cmd = env + (env.empty() ? "" : " ") + std::string(ESI_LAB_BINARY) + " " + args + " > /dev/null 2> " +
                          err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

std::string scenario_arg(const std::string& file) { return "--scenario " + (kSource / "scenarios" / file).string(); }

// The verb matching the file's task, so the binary reaches the field checks.
std::string verb_for(const fs::path& p) {
  const auto doc = io::json::parse(slurp(p), nullptr, false);
  if (!doc.is_object() || !doc.contains("task") || !doc["task"].is_string()) return "verify";
  std::string t = doc["task"].get<std::string>();
  if (std::find(io::task_names().begin(), io::task_names().end(), t) == io::task_names().end()) return "verify";
  std::replace(t.begin(), t.end(), '_', '-');
  return t;
}

io::Report run_text(const std::string& text) { return io::run_scenario(io::parse_scenario(text)); }

}  // namespace

TEST(CliIo, RademacherCoshScenarioExitsZero) {
  const auto out = scratch("rademacher");
  const auto r = lab("verify " + scenario_arg("verify_rademacher.json") + " --out " + out.string());
  EXPECT_EQ(r.code, 0) << r.err;
  for (const char* f : {"report.json", "summary.txt", "margin_vs_eps.csv", "tail_quantiles.csv", "timing.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto doc = io::json::parse(slurp(out / "report.json"));
  EXPECT_EQ(doc["schema_version"], 1);
  EXPECT_EQ(doc["exit_code"], 0);
  EXPECT_EQ(doc["results"]["certificate"]["evidence"]["verdict"], "holds");
  EXPECT_EQ(doc["results"]["certificate"]["evidence"]["worst_margin"]["method"], "closed_form");
}

TEST(CliIo, FailingAndInputErrorExitCodes) {
  const auto base = io::parse_scenario(slurp(kSource / "scenarios" / "verify_rademacher.json"));
  auto s = base;
  s.payload = {{"lhs", {{"family", "gaussian"}, {"mean", 0.1}, {"variance", 1}}},
               {"scale", {{"kind", "constant"}, {"eta", 0.5}}}};
  EXPECT_EQ(io::run_scenario(s).exit_code(), io::exit_fails);

  const auto out = scratch("mismatch");
  const auto r = lab("bounds " + scenario_arg("verify_rademacher.json") + " --out " + out.string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("task:"), std::string::npos) << r.err;
  EXPECT_EQ(lab("verify --scenario /nonexistent.json --out " + out.string()).code, 3);
  EXPECT_EQ(lab("verify --out " + out.string()).code, 3);
}

TEST(CliIo, ExitCodeAggregation) {
  io::Report r;
  EXPECT_EQ(r.exit_code(), 0);
  r.verdicts = {Verdict::holds, Verdict::inconclusive};
  EXPECT_EQ(r.exit_code(), 2);
  r.verdicts.push_back(Verdict::fails);
  EXPECT_EQ(r.exit_code(), 1);
}

TEST(CliIo, EmptyFamilyDiagnostic) {
  const auto out = scratch("empty");
  const auto r = lab("conditions --scenario " + (kSource / "tests/data/malformed/empty_members.json").string() +
                     " --out " + out.string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("members: empty"), std::string::npos) << r.err;
}

TEST(CliIo, MalformedCorpusIsRejectedWithFieldDiagnostics) {
  const fs::path dir = kSource / "tests/data/malformed";
  std::ifstream manifest(dir / "expected.tsv");
  std::string line;
  std::size_t n = 0;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string file, code, diag;
    std::getline(ls, file, '\t');
    std::getline(ls, code, '\t');
    std::getline(ls, diag);
    ++n;
    try {
      io::run_scenario(io::load_scenario((dir / file).string()));
      ADD_FAILURE() << file << " was accepted";
    } catch (const Error& e) {
      EXPECT_EQ(errc_name(e.code()), code) << file << ": " << e.what();
      EXPECT_NE(std::string(e.what()).find(diag), std::string::npos) << file << ": " << e.what();
    }
    const auto r = lab(verb_for(dir / file) + " --scenario " + (dir / file).string() + " --out " + scratch("malformed").string());
    EXPECT_EQ(r.code, 3) << file;
    EXPECT_NE(r.err.find(diag), std::string::npos) << file << ": " << r.err;
  }
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir)) files += e.path().extension() == ".json";
  EXPECT_EQ(n, files);
  EXPECT_GE(n, 15u);
}

TEST(CliIo, IdenticalRunsAreByteIdentical) {
  const auto a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
  const std::string args = "pacbayes " + scenario_arg("pacbayes_part3.json") + " --samples 20000 --out ";
  ASSERT_EQ(lab(args + a.string(), "ESI_LAB_THREADS=1").code, 0);
  ASSERT_EQ(lab(args + b.string(), "ESI_LAB_THREADS=1").code, 0);
  ASSERT_EQ(lab(args + c.string(), "ESI_LAB_THREADS=4").code, 0);
  for (const auto& e : fs::directory_iterator(a)) {
    const auto name = e.path().filename();
    if (name == "timing.json") continue;
    EXPECT_EQ(slurp(a / name), slurp(b / name)) << name;
    EXPECT_EQ(slurp(a / name), slurp(c / name)) << name;
  }
}

TEST(CliIo, SequentialDeterministicAcrossThreads) {
  const auto a = scratch("seq_a"), c = scratch("seq_c");
  const std::string args = "sequential " + scenario_arg("sequential_wald.json") + " --samples 5000 --out ";
  const auto ra = lab(args + a.string(), "ESI_LAB_THREADS=1");
  const auto rc = lab(args + c.string(), "ESI_LAB_THREADS=3");
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(rc.code, 0) << rc.err;
  for (const char* f : {"report.json", "summary.txt", "crossing_frequency.csv", "tail_quantiles.csv"})
    EXPECT_EQ(slurp(a / f), slurp(c / f)) << f;
}

TEST(CliIo, SeedAndSampleOverrides) {
  const auto a = scratch("ovr");
  ASSERT_EQ(lab("pacbayes " + scenario_arg("pacbayes_part3.json") + " --seed 99 --samples 1000 --out " + a.string()).code,
            0);
  const auto doc = io::json::parse(slurp(a / "report.json"));
  EXPECT_EQ(doc["seed"], 99u);
  EXPECT_EQ(doc["budget"]["samples"], 1000u);
  EXPECT_EQ(doc["results"]["simulation"]["samples"], 1000u);
  EXPECT_EQ(doc["results"]["simulation"]["seed"], 99u);
}

TEST(CliIo, BoundVsNTableMatchesRateStudy) {
  const auto rep = io::run_scenario(io::load_scenario((kSource / "scenarios" / "bounds_rate.json").string()));
  const auto csv = io::emit_plot_data(rep, "bound_vs_n");
  std::istringstream in(csv);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "n,bound,eps_star");
  const auto direct = optimize_rate(ScaleFunction::power_capped(1, 0.5, 1), {1e2, 1e3, 1e4, 1e5, 1e6}, 0.05);
  std::string row;
  for (const auto& p : direct.points) {
    ASSERT_TRUE(std::getline(in, row));
    EXPECT_EQ(row, format_double(p.n) + "," + format_double(p.bound) + "," + format_double(p.eps_star));
  }
  EXPECT_FALSE(std::getline(in, row));
  EXPECT_EQ(csv.back(), '\n');
  EXPECT_NEAR(rep.doc["results"]["rate"]["fitted_slope"]["value"].get<double>(), -2.0 / 3, 0.05);
}

TEST(CliIo, MarginVsEpsIsPassThrough) {
  const auto s = io::load_scenario((kSource / "scenarios" / "verify_rademacher.json").string());
  const auto rep = io::run_scenario(s);
  const auto cert = verify_esi(Model::rademacher(), std::nullopt, ScaleFunction::linear_capped(0.5), {},
                               s.verify_config(), s.eval_budget());
  std::string expected = "eps,margin,se\n";
  for (const auto& p : cert.evidence->points)
    expected += format_double(p.eps) + "," + format_double(p.margin) + "," + format_double(p.se) + "\n";
  EXPECT_EQ(io::emit_plot_data(rep, "margin_vs_eps"), expected);
}

TEST(CliIo, MissingTable) {
  io::Report empty;
  try {
    io::emit_plot_data(empty, "bound_vs_n");
    FAIL() << "no error thrown";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::MissingTable);
  }
  const auto rep = io::run_scenario(io::load_scenario((kSource / "scenarios" / "verify_rademacher.json").string()));
  EXPECT_THROW(io::emit_plot_data(rep, "bound_vs_n"), Error);
}

TEST(CliIo, EveryExampleScenarioRuns) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(kSource / "scenarios")) {
    if (e.path().extension() != ".json") continue;
    auto s = io::load_scenario(e.path().string());
    s = io::apply(s, {std::nullopt, std::size_t{4000}});
    const auto rep = io::run_scenario(s);
    EXPECT_EQ(rep.exit_code(), 0) << e.path().filename() << "\n" << rep.summary;
    ++n;
  }
  EXPECT_EQ(n, io::task_names().size());
}

TEST(CliIo, NumericEntriesCarryMethodTags) {
  const auto rep = run_text(slurp(kSource / "scenarios" / "random_eta_counterexample.json"));
  const auto& b = rep.doc["results"]["bounds"];
  EXPECT_EQ(b["hp_frequency"]["method"], "closed_form");
  EXPECT_NEAR(rep.doc["results"]["expectation"]["value"].get<double>(), 0.9555, 5e-5);
  EXPECT_FALSE(b["holds_without_correction"].get<bool>());
  const auto seq = run_text(R"({"schema_version": 1, "seed": 3, "task": "sequential", "budget": {"samples": 2000},
    "payload": {"increment": {"family": "gaussian", "mean": -0.25, "variance": 1}, "eta": 0.5, "horizon": 5,
                "stop": {"rule": "fixed", "t": 5}}})");
  const auto& est = seq.doc["results"]["stopped_sum"]["estimate"];
  EXPECT_EQ(est["method"], "monte_carlo");
  EXPECT_TRUE(est.contains("se"));
}
