#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "nco/config_file.hpp"

namespace nco {
namespace {

namespace fs = std::filesystem;

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("nco_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  std::string path(const std::string& rel) const { return (dir_ / rel).string(); }

  // Runs the binary with `args`; stdout and stderr are kept in files.
  int run(const std::string& args) {
    const std::string cmd = std::string(NCO_CLI_PATH) + " " + args + " >" + path("stdout.txt") + " 2>" +
                            path("stderr.txt");
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string slurp(const std::string& rel) const {
    std::ifstream in(path(rel), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  // Tiny RL/SL settings so each run takes well under a second.
  static std::string tiny() {
    return "--set train.epochs=2 --set train.epoch_size=64 --set train.batch_size=16 --set train.val_size=20 "
           "--set model.layers=1 --set model.embed_dim=8 --set model.heads=2 --set model.ff_dim=16";
  }

  fs::path dir_;
};

// Drops the trailing `seconds` column.
std::string without_time(const std::string& csv) {
  std::stringstream in(csv), out;
  for (std::string line; std::getline(in, line);) out << line.substr(0, line.rfind(',')) << '\n';
  return out.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

TEST_F(Cli, GenerateIsDeterministic) {
  ASSERT_EQ(run("generate --size 10 --count 100 --seed 7 --solve heldkarp --out " + path("a.txt")), 0);
  ASSERT_EQ(run("--workers 3 generate --size 10 --count 100 --seed 7 --solve heldkarp --out " + path("b.txt")), 0);
  const std::string a = slurp("a.txt");
  EXPECT_EQ(count_lines(a), 100u);
  EXPECT_EQ(a, slurp("b.txt"));
  const Dataset ds = read_dataset(path("a.txt"));
  ASSERT_TRUE(ds.labelled());
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds.solutions[i].length, held_karp_solve(ds.instances[i]).length);
}

TEST_F(Cli, GenerateGuardsAreUsageErrors) {
  EXPECT_EQ(run("generate --size 30 --count 2 --solve bruteforce --out " + path("x.txt")), 2);
  EXPECT_EQ(run("generate --size 21 --count 2 --solve heldkarp --out " + path("x.txt")), 2);
  EXPECT_EQ(run("generate --size 1 --count 2 --out " + path("x.txt")), 2);
  EXPECT_EQ(run("generate --size 5 --count 2 --solve concorde --out " + path("x.txt")), 2);
  EXPECT_EQ(run("generate --count 2 --out " + path("x.txt")), 2);
  EXPECT_FALSE(fs::exists(path("x.txt")));
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, TrainUsageErrors) {
  EXPECT_EQ(run("train --paradigm sl --out " + path("r")), 2);
  EXPECT_NE(slurp("stderr.txt").find("--data"), std::string::npos);
  std::ofstream(path("bad.ini")) << "[train]\nepochs = 1\nlearnrate = 2\n";
  EXPECT_EQ(run("train --paradigm rl --config " + path("bad.ini") + " --out " + path("r")), 2);
  EXPECT_NE(slurp("stderr.txt").find("train.learnrate"), std::string::npos);
  EXPECT_EQ(run("train --paradigm rl --set train.nope=1 --out " + path("r")), 2);
  ASSERT_EQ(run("generate --size 6 --count 10 --out " + path("unlabelled.txt")), 0);
  EXPECT_EQ(run("train --paradigm sl --data " + path("unlabelled.txt") + " --out " + path("r")), 2);
}

TEST_F(Cli, RlCriticTrainsWithoutData) {
  ASSERT_EQ(run("train --paradigm rl --baseline critic --set train.graph_size=6 " + tiny() + " --out " + path("rl")), 0)
      << slurp("stderr.txt");
  for (const char* f : {"checkpoint.bin", "train_log.csv", "config.ini"}) EXPECT_TRUE(fs::exists(path("rl/") + f)) << f;
  EXPECT_EQ(count_lines(slurp("rl/train_log.csv")), 9u);
  const auto summary = nlohmann::json::parse(slurp("stdout.txt"));
  EXPECT_TRUE(summary.at("final_val_gap_pct").is_number());
  // The echoed config reproduces the run.
  RunConfig echoed;
  apply_ini_file(echoed, path("rl/config.ini"));
  EXPECT_EQ(echoed.train.baseline, BaselineKind::critic);
  EXPECT_EQ(echoed.train.model.encoder.embed_dim, 8u);
  ASSERT_EQ(run("train --config " + path("rl/config.ini") + " --out " + path("rl2")), 0) << slurp("stderr.txt");
  EXPECT_EQ(without_time(slurp("rl/train_log.csv")), without_time(slurp("rl2/train_log.csv")));
  const Container c1 = load_container(path("rl/checkpoint.bin"));
  const Container c2 = load_container(path("rl2/checkpoint.bin"));
  ASSERT_EQ(c1.tensors.size(), c2.tensors.size());
  for (std::size_t i = 0; i < c1.tensors.size(); ++i) {
    EXPECT_EQ(c1.tensors[i].name, c2.tensors[i].name);
    EXPECT_TRUE(std::ranges::equal(c1.tensors[i].value.data(), c2.tensors[i].value.data())) << c1.tensors[i].name;
  }
}

TEST_F(Cli, SlTrainingAndEvalAreReproducible) {
  ASSERT_EQ(run("generate --size 6 --count 64 --seed 3 --solve heldkarp --out " + path("train.txt")), 0);
  for (const char* out : {"sl1", "sl2"}) {
    ASSERT_EQ(run("train --paradigm sl --encoder gcn --data " + path("train.txt") + " " + tiny() + " --out " + path(out)),
              0)
        << slurp("stderr.txt");
  }
  EXPECT_EQ(without_time(slurp("sl1/train_log.csv")), without_time(slurp("sl2/train_log.csv")));
  RunConfig echoed;
  apply_ini_file(echoed, path("sl1/config.ini"));
  EXPECT_EQ(echoed.train.graph_size, 6u);

  const std::string eval = "eval --checkpoint " + path("sl1/checkpoint.bin") +
                           " --size 7 --count 30 --decode greedy,beam:1,sample:8,beam:4 --out ";
  ASSERT_EQ(run(eval + path("e1")), 0) << slurp("stderr.txt");
  ASSERT_EQ(run("--workers 2 " + eval + path("e2")), 0);
  EXPECT_EQ(without_time(slurp("e1/report.csv")), without_time(slurp("e2/report.csv")));
  const EvalReport rep = EvalReport::read_csv(path("e1/report.csv"));
  ASSERT_EQ(rep.rows.size(), 4u);
  EXPECT_EQ(rep.rows[0].model, "sl-gcn-n6");
  EXPECT_EQ(rep.rows[0].train_size, 6u);
  EXPECT_EQ(rep.rows[1].decode, "beam:1");
  EXPECT_EQ(rep.rows[1].mean_len, rep.rows[0].mean_len);
  EXPECT_EQ(rep.rows[1].mean_gap_pct, rep.rows[0].mean_gap_pct);
  EXPECT_TRUE(fs::exists(path("e1/config.ini")));
}

TEST_F(Cli, EvalOnDatasetUsesItsLabels) {
  ASSERT_EQ(run("generate --size 6 --count 20 --seed 4 --solve bruteforce --out " + path("test.txt")), 0);
  ASSERT_EQ(run("train --paradigm rl --set train.graph_size=6 " + tiny() + " --set train.epochs=0 --out " + path("m")), 0)
      << slurp("stderr.txt");
  ASSERT_EQ(run("eval --checkpoint " + path("m/checkpoint.bin") + " --data " + path("test.txt") +
                " --decode greedy --name init --out " + path("e")),
            0)
      << slurp("stderr.txt");
  const EvalReport rep = EvalReport::read_csv(path("e/report.csv"));
  ASSERT_EQ(rep.rows.size(), 1u);
  EXPECT_EQ(rep.rows[0].model, "init");
  EXPECT_EQ(rep.rows[0].count, 20u);
  const PolicyModel model = load_model(path("m/checkpoint.bin"));
  const Dataset ds = read_dataset(path("test.txt"));
  double acc = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    acc += optimality_gap(greedy_decode(model, ds.instances[i]).length, ds.solutions[i].length);
  EXPECT_NEAR(rep.rows[0].mean_gap_pct, acc / 20, 1e-10);
  EXPECT_EQ(run("eval --checkpoint " + path("m/checkpoint.bin") + " --size 6 --decode beam:x --out " + path("e3")), 2);
  EXPECT_EQ(run("eval --checkpoint " + path("m/checkpoint.bin") + " --out " + path("e3")), 2);
  EXPECT_EQ(run("eval --checkpoint " + path("test.txt") + " --size 6 --out " + path("e3")), 1);
}

TEST_F(Cli, SweepAndPlot) {
  ASSERT_EQ(run("train --paradigm rl --set train.graph_size=6 " + tiny() + " --out " + path("rl")), 0);
  ASSERT_EQ(run("train --paradigm rl --encoder gcn --set train.graph_size=6 " + tiny() + " --out " + path("gcn")), 0);
  const std::string sweep = "sweep --checkpoint " + path("rl/checkpoint.bin") + " --sizes 5,10,20 --decode greedy,sample:16 --count 5 --out ";
  ASSERT_EQ(run(sweep + path("s1")), 0) << slurp("stderr.txt");
  ASSERT_EQ(run(sweep + path("s2")), 0);
  EXPECT_EQ(without_time(slurp("s1/report.csv")), without_time(slurp("s2/report.csv")));
  EXPECT_EQ(count_lines(slurp("s1/report.csv")), 7u);
  ASSERT_EQ(run("sweep --checkpoint " + path("gcn/checkpoint.bin") + " --name other --sizes 5,10,20 --decode greedy,sample:16 --count 5 --out " +
                path("s3")),
            0);
  EXPECT_EQ(run("sweep --checkpoint " + path("rl/checkpoint.bin") + " --sizes 5,30 --exact-only --decode greedy --out " +
                path("s4")),
            2);

  ASSERT_EQ(run("plot --report " + path("s1/report.csv") + " --report " + path("s3/report.csv") + " --out " + path("p")), 0)
      << slurp("stderr.txt");
  for (const char* f : {"plot_greedy.csv", "plot_sample_16.csv", "plot.svg", "comparison.csv", "winners.csv"})
    EXPECT_TRUE(fs::exists(path("p/") + f)) << f;
  std::stringstream greedy(slurp("p/plot_greedy.csv"));
  std::set<std::string> curves;
  std::string line;
  std::getline(greedy, line);
  EXPECT_EQ(line, "size,gap,model,paradigm");
  std::size_t rows = 0;
  while (std::getline(greedy, line)) {
    curves.insert(line.substr(line.find(',', line.find(',') + 1) + 1));
    ++rows;
  }
  EXPECT_EQ(rows, 6u);
  EXPECT_EQ(curves, (std::set<std::string>{"rl-rollout-gat-n6,rl", "other,rl"}));
  EXPECT_EQ(count_lines(slurp("p/winners.csv")), 7u);
}

TEST_F(Cli, DivergenceIsRuntimeFailure) {
  std::ofstream(path("huge.txt")) << "1e300 0 -1e300 5e299 3e299 -7e299 output 1 2 3 1\n"
                                      "2e300 1e300 -1e300 0 0 -9e299 output 1 3 2 1\n";
  EXPECT_EQ(run("train --paradigm sl --data " + path("huge.txt") + " --val-data " + path("huge.txt") + " " + tiny() +
                " --set train.batch_size=2 --set train.epoch_size=2 --out " + path("d")),
            1);
  EXPECT_NE(slurp("stderr.txt").find("error"), std::string::npos);
}

}  // namespace
}  // namespace nco
