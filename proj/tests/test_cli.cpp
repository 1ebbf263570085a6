#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("riim_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  int run(const std::string& args) const {
    const std::string cmd = std::string(RIIM_CLI_PATH) + " " + args + " >" + (dir / "stdout.txt").string() + " 2>" +
                            (dir / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir / name) << text; }

  static std::string read(const std::string& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  json read_json(const std::string& name) const { return json::parse(read(path(name))); }

  // Unmatched sample with a mild covariate imbalance.
  void write_unmatched(const std::string& name, int n, bool with_dose) const {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> u(0, 1);
    std::ostringstream os;
    os << "z,y," << (with_dose ? "d," : "") << "x1,x2\n";
    for (int i = 0; i < n; ++i) {
      const double x1 = nd(rng), x2 = nd(rng);
      const int z = u(rng) < 1.0 / (1.0 + std::exp(-0.5 * x1)) ? 1 : 0;
      const int d = u(rng) < 0.2 + 0.6 * z ? 1 : 0;
      os << z << ',' << x1 + 2.0 * (with_dose ? d : z) + nd(rng) << ',';
      if (with_dose) os << d << ',';
      os << x1 << ',' << x2 << '\n';
    }
    write(name, os.str());
  }

  fs::path dir;
};

}  // namespace

TEST_F(Cli, PairsWithUniformProbabilitiesMatchDiffInMeans) {
  write("pairs.csv", "set_id,z,y\na,1,3\na,0,1\nb,0,2\nb,1,5\nc,1,1\nc,0,1.5\n");
  ASSERT_EQ(run("analyze-ate --input " + path("pairs.csv") + " --out " + path("r.json") +
                " --estimator dim,ippw --prob-source uniform"),
            0)
      << read(path("stderr.txt"));
  const auto r = read_json("r.json");
  EXPECT_EQ(r["schema"], "riim-report/v1");
  ASSERT_EQ(r["results"].size(), 2u);
  const auto& dim = r["results"][0];
  const auto& ippw = r["results"][1];
  EXPECT_NEAR(dim["estimate"].get<double>(), (2.0 + 3.0 - 0.5) / 3.0, 1e-12);
  EXPECT_NEAR(ippw["estimate"].get<double>(), dim["estimate"].get<double>(), 1e-14);
  EXPECT_NEAR(ippw["variance"].get<double>(), dim["variance"].get<double>(), 1e-14);
  EXPECT_EQ(r["I"], 3);
  EXPECT_EQ(r["N"], 6);
  EXPECT_TRUE(fs::exists(path("r.json.manifest.json")));
  const auto m = read_json("r.json.manifest.json");
  EXPECT_EQ(m["schema"], "riim-manifest/v1");
  EXPECT_EQ(m["inputs"][0]["digest"].get<std::string>().rfind("fnv1a64:", 0), 0u);
}

TEST_F(Cli, ExitCodes) {
  write("noy.csv", "set_id,z\na,1\na,0\n");
  EXPECT_EQ(run("analyze-ate --input " + path("noy.csv") + " --out " + path("r.json")), 2);
  EXPECT_EQ(run("analyze-ate --input " + path("missing.csv") + " --out " + path("r.json")), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("analyze-ate --out " + path("r.json")), 2);
  write("treated.csv", "z,y,x1\n1,1,0.1\n1,2,0.2\n1,3,0.3\n");
  EXPECT_EQ(run("match --input " + path("treated.csv") + " --out " + path("m.csv")), 3);
  // Two sets cannot support intercept plus two covariate means.
  write("small.csv", "set_id,z,y,x1,x2\na,1,1,0,1\na,0,0,1,0\nb,1,2,2,2\nb,0,1,0,1\n");
  EXPECT_EQ(run("analyze-ate --input " + path("small.csv") + " --out " + path("r.json") + " --q covmeans"), 3);
  EXPECT_EQ(run("analyze-iv --input " + path("small.csv") + " --out " + path("r.json")), 2);
}

TEST_F(Cli, MatchWritesDatasetAndDroppedUnits) {
  write_unmatched("raw.csv", 120, false);
  ASSERT_EQ(run("match --input " + path("raw.csv") + " --out " + path("m.csv") + " --learner logistic --caliper 0.01"),
            0)
      << read(path("stderr.txt"));
  EXPECT_TRUE(fs::exists(path("dropped.csv")));
  EXPECT_EQ(read(path("dropped.csv")).rfind("row,", 0), 0u);
  const auto matched = read(path("m.csv"));
  EXPECT_NE(matched.find("set_id"), std::string::npos);
  EXPECT_NE(matched.find("e_hat"), std::string::npos);
  ASSERT_EQ(run("balance --input " + path("m.csv") + " --pre " + path("raw.csv") + " --out " + path("b.csv")), 0)
      << read(path("stderr.txt"));
  EXPECT_EQ(read(path("b.csv")).rfind("covariate,smd_pre,smd_post,degenerate", 0), 0u);
  ASSERT_EQ(run("analyze-ate --input " + path("m.csv") + " --out " + path("r.json") +
                " --estimator dim,ippw --prob-source plugin --q covmeans"),
            0)
      << read(path("stderr.txt"));
  EXPECT_EQ(read_json("r.json")["results"][1]["prob_source"], "regularized");
}

TEST_F(Cli, WeakInstrumentIsFlaggedNotFatal) {
  // d never differs between arms within a set.
  write("weak.csv", "set_id,z,y,d\na,1,1,1\na,0,0,1\nb,1,2,0\nb,0,1,0\nc,1,0,1\nc,0,2,1\n");
  ASSERT_EQ(run("analyze-iv --input " + path("weak.csv") + " --out " + path("iv.json") + " --prob-source uniform"), 0)
      << read(path("stderr.txt"));
  const auto r = read_json("iv.json");
  bool flagged = false;
  for (const auto& res : r["results"]) flagged = flagged || res["weak_iv_flag"].get<bool>();
  EXPECT_TRUE(flagged);
}

TEST_F(Cli, IvGridCheck) {
  write_unmatched("raw.csv", 200, true);
  ASSERT_EQ(run("match --input " + path("raw.csv") + " --out " + path("m.csv") + " --learner logistic"), 0);
  ASSERT_EQ(run("analyze-iv --input " + path("m.csv") + " --out " + path("iv.json") +
                " --prob-source plugin --grid-range=-10,10"),
            0)
      << read(path("stderr.txt"));
  const auto r = read_json("iv.json");
  EXPECT_EQ(r["grid_check"]["points"], 2001);
  EXPECT_EQ(r["grid_check"]["disagreements"], 0);
  EXPECT_EQ(r["results"][0]["estimator"], "classical_wald");
}

TEST_F(Cli, SimulateIsDeterministicAcrossWorkers) {
  const std::string base = "simulate --study ate --model 1 --reps 4 --n 100 --seed 9 --learner logistic";
  ASSERT_EQ(run(base + " --workers 1 --out " + path("a.csv") + " --reps-out " + path("ra.csv")), 0)
      << read(path("stderr.txt"));
  ASSERT_EQ(run(base + " --workers 3 --out " + path("b.csv") + " --reps-out " + path("rb.csv")), 0);
  EXPECT_EQ(read(path("a.csv")), read(path("b.csv")));
  EXPECT_EQ(read(path("ra.csv")), read(path("rb.csv")));
  EXPECT_EQ(read(path("a.csv")).rfind("study,model,caliper,estimator,bias", 0), 0u);
  write("bad.cfg", "study=ate\nshoe-size=9\n");
  EXPECT_EQ(run("simulate --config " + path("bad.cfg") + " --out " + path("c.csv")), 2);
}

TEST_F(Cli, LearnerHyperparameters) {
  write_unmatched("raw.csv", 120, false);
  ASSERT_EQ(run("match --input " + path("raw.csv") + " --out " + path("m.csv") +
                " --gbm-rounds 20 --gbm-depth 2 --gbm-eta 0.3"),
            0)
      << read(path("stderr.txt"));
  const auto m = read_json("m.csv.manifest.json");
  EXPECT_EQ(m["options"]["gbm_rounds"], 20);
  EXPECT_EQ(m["options"]["gbm_depth"], 2);
  EXPECT_TRUE(m["options"]["ridge"].is_null());
  EXPECT_EQ(run("match --input " + path("raw.csv") + " --out " + path("m.csv") + " --gbm-rounds 0"), 2);
  EXPECT_EQ(run("match --input " + path("raw.csv") + " --out " + path("m.csv") + " --learner logistic --ridge -1"), 2);
  // Model 2 draws selection indices far in the tail; the run must still finish.
  ASSERT_EQ(run("simulate --study ate --model 2 --reps 3 --n 150 --gbm-rounds 30 --out " + path("s.csv")), 0)
      << read(path("stderr.txt"));
  EXPECT_EQ(read_json("s.csv.manifest.json")["options"]["gbm_rounds"], 30);
}
