#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct Invocation {
  int code = -1;
  std::string out;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("ffkit_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  Invocation run(const std::string& args) const {
    const fs::path log = dir_ / "stdout.txt";
    const std::string cmd = std::string(FFKIT_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Invocation r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(log);
    return r;
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path write(const std::string& name, const std::string& content) const {
    const fs::path p = dir_ / name;
    std::ofstream(p) << content;
    return p;
  }

  std::string out_flag(const std::string& sub = "out") const { return "--out " + (dir_ / sub).string(); }

  fs::path dir_;
};

// Death data whose counts rise: impossible under the model.
void write_impossible_death(const fs::path& dir) {
  std::ofstream(dir / "rising.csv") << "time,y1\n1,100\n2,101\n3,102\n";
  std::ofstream(dir / "rising.csv.json")
      << R"({"model":"death","theta_true":[0.01],"x0":[100],"F":[[1]],"seed":1,"t0":0})";
}

}  // namespace

TEST_F(CliTest, SimulateIsReproducible) {
  ASSERT_EQ(run("simulate --preset D50 --seed 1 " + out_flag("a")).code, 0);
  ASSERT_EQ(run("simulate --preset D50 --seed 1 " + out_flag("b")).code, 0);
  EXPECT_EQ(slurp(dir_ / "a" / "D50.csv"), slurp(dir_ / "b" / "D50.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "D50.csv.json"), slurp(dir_ / "b" / "D50.csv.json"));
  ASSERT_EQ(run("simulate --preset D50 --seed 2 " + out_flag("c")).code, 0);
  EXPECT_NE(slurp(dir_ / "a" / "D50.csv"), slurp(dir_ / "c" / "D50.csv"));
}

TEST_F(CliTest, SimulateLv20Shape) {
  ASSERT_EQ(run("simulate --preset LV20 " + out_flag()).code, 0);
  std::ifstream in(dir_ / "out" / "LV20.csv");
  std::string header, line;
  std::getline(in, header);
  EXPECT_EQ(header, "time,y1,y2");
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  EXPECT_EQ(rows, 20);
}

TEST_F(CliTest, SimulateEstimatesTransitionProbabilities) {
  const Invocation r = run("simulate --preset P30b --estimate-pt " + out_flag());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto pos = r.out.find("mean_p_hat,");
  ASSERT_NE(pos, std::string::npos) << r.out;
  const double mean = std::stod(r.out.substr(pos + 11));
  EXPECT_GT(mean, 0.04);
  EXPECT_LT(mean, 0.16);
  EXPECT_TRUE(fs::exists(dir_ / "out" / "P30b_pt.csv"));
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
  EXPECT_EQ(run("simulate --preset NoSuchPreset " + out_flag()).code, 2);
  EXPECT_EQ(run("filter --config " + (dir_ / "missing.json").string()).code, 2);
  const auto bad = write("bad.json", "{ not json");
  EXPECT_EQ(run("filter --dataset D50 --config " + bad.string()).code, 2);
  const auto bridge = write("bridge.json", R"({"filter":{"kind":"ff","proposal":"bridge"}})");
  const Invocation r = run("filter --dataset D50 --replicates 2 --config " + bridge.string() + " " + out_flag());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("bridge"), std::string::npos) << r.out;
  const auto theta = write("theta.json", R"({"theta":[0.1,0.2]})");
  EXPECT_EQ(run("filter --dataset D50 --config " + theta.string() + " " + out_flag()).code, 2);
  EXPECT_EQ(run("nonsense").code, 2);
}

TEST_F(CliTest, ImpossibleDataIsEstimatorDead) {
  write_impossible_death(dir_);
  const auto cfg = write("exact.json", R"({"filter":{"kind":"exact"}})");
  const Invocation r = run("pmmh --dataset " + (dir_ / "rising.csv").string() + " --iterations 50 --config " +
                    cfg.string() + " " + out_flag());
  EXPECT_EQ(r.code, 3) << r.out;
}

TEST_F(CliTest, FilterFooterReportsZeros) {
  write_impossible_death(dir_);
  const auto cfg = write("bspf.json", R"({"filter":{"kind":"bspf","n_particles":1}})");
  const Invocation r = run("filter --dataset " + (dir_ / "rising.csv").string() + " --replicates 5 --config " +
                    cfg.string() + " " + out_flag());
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string csv = slurp(dir_ / "out" / "filter.csv");
  EXPECT_NE(csv.find("replicate,log_p_hat,total_simulations,m_1,m_2,m_3,k_1,k_2,k_3"), std::string::npos);
  EXPECT_NE(csv.find("# zero_fraction=1"), std::string::npos) << csv;
  EXPECT_NE(csv.find("# mean_total_simulations="), std::string::npos);
}

TEST_F(CliTest, FilterOnPreset) {
  const auto cfg = write("ff.json", R"({"filter":{"kind":"ff","s":20}})");
  const Invocation r = run("filter --dataset D50 --replicates 20 --seed 4 --config " + cfg.string() + " " + out_flag());
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("zero_fraction 0"), std::string::npos) << r.out;
}

TEST_F(CliTest, TuneExactObservations) {
  const Invocation r = run("tune --dataset D50 --method exact --v-rel 1.718281828459045 --kappa 10 " + out_flag());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(slurp(dir_ / "out" / "tune.json"));
  EXPECT_EQ(j.at("s").get<int>(), 52);
  EXPECT_DOUBLE_EQ(j.at("kappa").get<double>(), 10.0);
  EXPECT_EQ(j.at("T").get<int>(), 50);
}

TEST_F(CliTest, PmmhWritesChainAndSummary) {
  const auto cfg = write("direct.json", R"({"filter":{"kind":"exact"},"pmmh":{"variances":[0.02]}})");
  const Invocation r = run("pmmh --dataset D50 --iterations 500 --seed 3 --config " + cfg.string() + " " + out_flag());
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(slurp(dir_ / "out" / "summary.json"));
  EXPECT_EQ(j.at("iterations").get<int>(), 500);
  const double mean = j.at("posterior_mean").at(0).get<double>();
  EXPECT_GT(mean, 0.005);
  EXPECT_LT(mean, 0.02);
  std::ifstream in(dir_ / "out" / "chain.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header.rfind("iter,theta", 0), 0u) << header;
}

TEST_F(CliTest, VerifySuites) {
  Invocation r = run("verify --grid empty");
  EXPECT_EQ(r.code, 0) << r.out;
  r = run("verify --include alg1 " + out_flag());
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("XFAIL"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find(", 0 failures"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir_ / "out" / "verify.json"));
}

TEST_F(CliTest, ThreadsEnvironmentFallback) {
  const auto cfg = write("ff.json", R"({"filter":{"kind":"ff","s":10}})");
  ASSERT_EQ(setenv("FF_THREADS", "2", 1), 0);
  ASSERT_EQ(run("filter --dataset D50 --replicates 6 --seed 9 --config " + cfg.string() + " " + out_flag("a")).code, 0);
  unsetenv("FF_THREADS");
  ASSERT_EQ(run("filter --dataset D50 --replicates 6 --seed 9 --threads 1 --config " + cfg.string() + " " +
                out_flag("b"))
                .code,
            0);
  EXPECT_EQ(slurp(dir_ / "a" / "filter.csv"), slurp(dir_ / "b" / "filter.csv"));
}
