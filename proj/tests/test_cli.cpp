#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"

namespace {

using kom::cli::json;
namespace fs = std::filesystem;

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "kom");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = kom::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string tmp_path(const std::string& name) {
  const fs::path dir = fs::path(KOM_TEST_TMP) / "cli";
  fs::create_directories(dir);
  return (dir / name).string();
}

std::string write_file(const std::string& name, const std::string& text) {
  const auto path = tmp_path(name);
  std::ofstream f(path);
  f << text;
  return path;
}

std::string write_simulated(const std::string& name, Eigen::Index n, std::uint64_t rep) {
  kom::sim::Scenario s;
  s.n = n;
  s.alpha = 0.3;
  const auto sim = kom::sim::generate(s, rep);
  const auto& d = sim.data;
  std::ostringstream csv;
  csv << "id,t,s,y,x1,x2\n";
  for (Eigen::Index i = 0; i < d.n(); ++i)
    csv << d.ids[static_cast<std::size_t>(i)] << ',' << d.T(i) << ",1," << kom::format_number(d.Y(i)) << ','
        << kom::format_number(d.X(i, 0)) << ',' << kom::format_number(d.X(i, 1)) << '\n';
  return write_file(name, csv.str());
}

// Four units, two per arm; uniform weights give (1/4)(2*5 + 2*7 - 2*3 - 2*3) = 3.
const std::string hand_csv = "id,t,s,y,x1\na,1,1,5,0.1\nb,1,1,7,0.4\nc,0,1,3,0.2\nd,0,1,3,0.9\n";

// Summary CSV with the wall-clock column blanked.
std::string without_runtime(const std::string& csv) {
  std::istringstream in(csv);
  std::ostringstream out;
  std::size_t col = 0;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (header) {
      col = static_cast<std::size_t>(std::find(cells.begin(), cells.end(), "mean_runtime") - cells.begin());
      header = false;
    } else if (col < cells.size()) {
      cells[col].clear();
    }
    for (const auto& c : cells) out << c << ',';
    out << '\n';
  }
  return out.str();
}

std::vector<std::pair<std::string, std::vector<double>>> parse_weights(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "id,w,v");
  std::vector<std::pair<std::string, std::vector<double>>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, w, v;
    std::getline(ss, id, ',');
    std::getline(ss, w, ',');
    std::getline(ss, v, ',');
    rows.push_back({id, {std::stod(w), std::stod(v)}});
  }
  return rows;
}

TEST(Cli, MissingOutcomeColumnIsDataError) {
  const auto path = write_file("no_y.csv", "id,t,s,x1\n1,1,1,0.5\n2,0,1,0.1\n");
  const auto r = run({"weights", "-i", path});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("'y'"), std::string::npos) << r.err;
}

TEST(Cli, NoSubcommandIsUsageError) {
  const auto r = run({});
  EXPECT_NE(r.code, 0);
}

TEST(Cli, TuneReportsPositiveHyperparametersPerArm) {
  const auto path = write_simulated("tune.csv", 60, 1);
  const auto r = run({"tune", "-i", path, "--kernel", "poly_mahalanobis", "--degree", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  ASSERT_EQ(j["arms"].size(), 2u);
  for (const auto& a : j["arms"]) {
    for (const char* key : {"gamma", "theta", "sigma2", "lambda"}) {
      ASSERT_TRUE(a[key].is_number()) << key;
      EXPECT_GT(a[key].get<double>(), 0.0) << key;
    }
  }
  EXPECT_EQ(j["kernel"], "poly_mahalanobis");
  EXPECT_EQ(j["degree"], 1);
}

TEST(Cli, TuneOutputFeedsHyperOption) {
  const auto path = write_simulated("tune_feed.csv", 60, 2);
  const auto hyper = tmp_path("tune_feed.json");
  ASSERT_EQ(run({"tune", "-i", path, "--kernel", "poly_mahalanobis", "--degree", "1", "-o", hyper}).code, 0);
  const auto r = run({"weights", "-i", path, "--hyper", hyper});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = json::parse(r.err);
  EXPECT_EQ(report["diagnostics"]["degree_used"], 1);
  EXPECT_EQ(report["diagnostics"]["kernel_used"], "poly_mahalanobis");
}

TEST(Cli, ZeroLambdaHasNoVariancePenalty) {
  const auto path = write_simulated("zero.csv", 60, 3);
  const auto report = tmp_path("zero.json");
  const auto r = run({"weights", "-i", path, "--kernel", "poly_mahalanobis", "--degree", "1", "--lambda", "zero",
                      "--report", report});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream f(report);
  const auto j = json::parse(f);
  EXPECT_EQ(j["diagnostics"]["variance_penalty"].get<double>(), 0.0);
  EXPECT_EQ(j["diagnostics"]["lambda0"].get<double>(), 0.0);
}

TEST(Cli, SateWeightsSumToNPerArm) {
  const auto path = write_simulated("sate.csv", 60, 4);
  const auto r = run({"weights", "-i", path, "--kernel", "poly_mahalanobis", "--degree", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = parse_weights(r.out);
  ASSERT_EQ(rows.size(), 60u);
  const auto d = kom::cli::load(path);
  double w1 = 0.0, w0 = 0.0, v = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].first, d.ids[i]);
    (d.T(static_cast<Eigen::Index>(i)) == 1.0 ? w1 : w0) += rows[i].second[0];
    v += rows[i].second[1];
  }
  EXPECT_NEAR(w1, 60.0, 1e-3);
  EXPECT_NEAR(w0, 60.0, 1e-3);
  EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(Cli, KowateTargetIsOnSimplex) {
  const auto path = write_simulated("kowate.csv", 40, 5);
  const auto r = run({"weights", "-i", path, "-e", "kowate", "--kernel", "poly_mahalanobis", "--degree", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  double v = 0.0;
  for (const auto& row : parse_weights(r.out)) {
    EXPECT_GE(row.second[1], -1e-6);
    v += row.second[1];
  }
  EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(Cli, KosateSelectsRequestedSubsetSize) {
  const auto path = write_file("kosate.csv",
                               "id,t,s,y,x1\nu1,1,1,1,-1.0\nu2,1,1,2,0.0\nu3,1,1,3,1.0\n"
                               "u4,0,1,1,-0.9\nu5,0,1,2,0.1\nu6,0,1,3,1.2\n");
  const auto hyper = write_file("kosate_hyper.json", R"({"kernel": "poly_mahalanobis", "degree": 1, "arms": [
      {"arm": 0, "gamma": 1.0, "theta": 1.0, "sigma2": 0.1},
      {"arm": 1, "gamma": 1.0, "theta": 1.0, "sigma2": 0.1}]})");
  const auto r = run({"weights", "-i", path, "-e", "kosate", "--subset-size", "3", "--hyper", hyper});
  ASSERT_EQ(r.code, 0) << r.err;
  int selected = 0;
  for (const auto& row : parse_weights(r.out)) {
    const double v = row.second[1];
    if (v > 0.0) {
      EXPECT_NEAR(v, 1.0 / 3.0, 1e-9);
      ++selected;
    } else {
      EXPECT_EQ(v, 0.0);
    }
  }
  EXPECT_EQ(selected, 3);
}

TEST(Cli, EstimateFromWeightsFile) {
  const auto data = write_file("hand.csv", hand_csv);
  const auto weights = write_file("hand_w.csv", "id,w\nd,2\nc,2\nb,2\na,2\n");
  const auto r = run({"estimate", "-i", data, "--weights", weights});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_NEAR(j["report"]["tau_hat"].get<double>(), 3.0, 1e-12);
  EXPECT_EQ(j["report"]["method"], "weights-file");
}

TEST(Cli, ZeroResidualsGiveZeroStandardErrors) {
  const auto data = write_file("flat.csv", "id,t,s,y,x1\na,1,1,5,0.1\nb,1,1,5,0.4\nc,0,1,2,0.2\nd,0,1,2,0.9\n");
  const auto weights = write_file("flat_w.csv", "id,w\na,2\nb,2\nc,2\nd,2\n");
  const auto r = run({"estimate", "-i", data, "--weights", weights, "--se", "naive"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = json::parse(r.out)["report"];
  EXPECT_NEAR(rep["tau_hat"].get<double>(), 3.0, 1e-12);
  EXPECT_NEAR(rep["se_sandwich"].get<double>(), 0.0, 1e-12);
  EXPECT_NEAR(rep["se_naive"].get<double>(), 0.0, 1e-12);
  EXPECT_NEAR(rep["se_conditional"].get<double>(), 0.0, 1e-12);
  EXPECT_NEAR(rep["ci_lower"].get<double>(), 3.0, 1e-12);
}

TEST(Cli, WeightsFileMissingIdIsDataError) {
  const auto data = write_file("hand2.csv", hand_csv);
  const auto weights = write_file("short_w.csv", "id,w\na,2\nb,2\nc,2\n");
  const auto r = run({"estimate", "-i", data, "--weights", weights});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("'d'"), std::string::npos) << r.err;
}

TEST(Cli, CompareAllReportsEveryMethodForOneEstimand) {
  const auto path = write_simulated("compare.csv", 80, 6);
  const auto r = run({"estimate", "-i", path, "--compare", "all", "--kernel", "poly_mahalanobis", "--degree", "1",
                      "--propensity-degree", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  ASSERT_EQ(j["reports"].size(), 3u);
  std::vector<std::string> methods;
  for (const auto& rep : j["reports"]) {
    EXPECT_EQ(rep["estimand"], "sate");
    EXPECT_TRUE(rep["tau_hat"].is_number());
    methods.push_back(rep["method"]);
  }
  EXPECT_EQ(methods, (std::vector<std::string>{"kom", "ipw", "outcome-regression"}));
  EXPECT_TRUE(j["reports"][2]["se_sandwich"].is_null());
  EXPECT_FALSE(j.contains("report"));
}

TEST(Cli, LadderFailureExitsWithSolverCode) {
  const auto path = write_simulated("ladder.csv", 40, 7);
  const auto r = run({"weights", "-i", path, "--kernel", "poly_mahalanobis", "--degree", "1", "--max-iter", "1",
                      "--eps", "1e-14"});
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("ladder"), std::string::npos) << r.err;
}

TEST(Cli, SimulateIsDeterministic) {
  const std::vector<std::string> args{"simulate", "--reps", "2",    "--alpha-grid", "0.1", "--gamma-levels",
                                      "1",        "--n",    "60",   "--methods",    "ipw", "--jobs", "2"};
  const auto a = run(args);
  const auto b = run(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(without_runtime(a.out), without_runtime(b.out));
  std::istringstream in(a.out);
  std::string line;
  int lines = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++lines;
  EXPECT_EQ(lines, 2);  // header plus one cell
  EXPECT_NE(a.out.find("IPW-SATE"), std::string::npos);
}

TEST(Cli, SimulateWritesPrefixedFiles) {
  const auto prefix = tmp_path("sim");
  const auto r = run({"simulate", "--reps", "2", "--alpha-grid", "0.1,0.5", "--gamma-levels", "1", "--n", "40",
                      "--methods", "dim", "-o", prefix});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(prefix + "_summary.csv"));
  EXPECT_TRUE(fs::exists(prefix + "_long.csv"));
  std::ifstream f(prefix + ".json");
  const auto j = json::parse(f);
  EXPECT_EQ(j["cells"].size(), 2u);
  EXPECT_EQ(j["replicates"].size(), 4u);
}

TEST(Cli, ConsistencyCheckPrintsVerdict) {
  const auto r = run({"simulate", "--check", "consistency", "--n-grid", "100,200,400,800", "--reps", "10",
                      "--methods", "ipw"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("consistency slope ", 0), 0u) << r.out;
  EXPECT_NE(r.out.find("band [-0.65, -0.35]"), std::string::npos) << r.out;
}

TEST(Cli, BadAlphaIsDataError) {
  const auto path = write_file("hand3.csv", hand_csv);
  const auto r = run({"weights", "-i", path, "--alpha", "0.7"});
  EXPECT_EQ(r.code, 2);
}

}  // namespace
