#include "mucp/checkpoint.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace {

namespace fs = std::filesystem;

const char* kSmallConfig = R"(train.steps = 30
train.warmup_steps = 5
train.batch_size = 16
finetune.steps = 20
finetune.warmup_steps = 5
finetune.batch_size = 16
data.train_size = 128
data.val_size = 32
)";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

class Cli : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    dir = fs::temp_directory_path() / ("mucp_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "small.cfg") << kSmallConfig;
  }
  void TearDown() override { fs::remove_all(dir); }

  int run(const std::string& args) {
    const std::string cmd = std::string(MUCP_CLI) + " " + args + " > " + (dir / "stdout.txt").string() + " 2> " +
                            (dir / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string cfg() const { return "--config " + (dir / "small.cfg").string(); }
  std::string out(const std::string& sub) const { return "--out " + (dir / sub).string(); }
};

TEST_F(Cli, UsageAndConfigErrorsExitTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("train-dense --config " + (dir / "missing.cfg").string()), 2);
  std::ofstream(dir / "bad.cfg") << "train.stepz = 4\n";
  EXPECT_EQ(run("train-dense --config " + (dir / "bad.cfg").string() + " " + out("bad")), 2);
  EXPECT_NE(slurp(dir / "stderr.txt").find("train.stepz"), std::string::npos);
  EXPECT_EQ(run("eval " + cfg() + " --checkpoint " + (dir / "none.ckpt").string() + " " + out("e")), 2);
  EXPECT_EQ(run("upcycle " + cfg()), 2);
}

TEST_F(Cli, NumericFailureExitsThree) {
  std::ofstream(dir / "hot.cfg") << kSmallConfig << "train.peak_lr = 1e30\ntrain.grad_clip = 0\n";
  EXPECT_EQ(run("train-dense --config " + (dir / "hot.cfg").string() + " " + out("hot")), 3);
  EXPECT_NE(slurp(dir / "stderr.txt").find("step "), std::string::npos);
}

TEST_F(Cli, TrainingIsDeterministic) {
  ASSERT_EQ(run("train-dense " + cfg() + " --seed 3 " + out("a")), 0);
  ASSERT_EQ(run("train-dense " + cfg() + " --seed 3 " + out("b")), 0);
  EXPECT_EQ(slurp(dir / "a/metrics_dense.csv"), slurp(dir / "b/metrics_dense.csv"));
  EXPECT_EQ(slurp(dir / "a/dense_final.ckpt"), slurp(dir / "b/dense_final.ckpt"));
  EXPECT_NO_THROW(mucp::load_checkpoint(dir / "a/dense_final.ckpt"));
  const std::string log = slurp(dir / "a/metrics_dense.csv");
  EXPECT_EQ(log.rfind("step,total_loss,contrastive_loss,aux_loss,drop_frac_image,drop_frac_text,lr\n", 0), 0u);
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 31);
}

TEST_F(Cli, UpcyclePipeline) {
  ASSERT_EQ(run("train-dense " + cfg() + " " + out("p")), 0);
  const std::string dense = "--checkpoint " + (dir / "p/dense_final.ckpt").string();
  ASSERT_EQ(run("upcycle " + cfg() + " " + dense + " --verify " + out("p")), 0);
  const std::string report = slurp(dir / "p/surgery_report.txt");
  EXPECT_NE(report.find("identity_holds: true"), std::string::npos) << report;
  EXPECT_NE(report.find("converted_layers: image.1 text.1"), std::string::npos) << report;

  ASSERT_EQ(run("train-sparse " + cfg() + " --checkpoint " + (dir / "p/upcycled.ckpt").string() + " " + out("p")), 0);
  EXPECT_TRUE(fs::exists(dir / "p/metrics_upcycle.csv"));
  const std::string sparse = "--checkpoint " + (dir / "p/upcycled_final.ckpt").string();
  ASSERT_EQ(run("eval " + cfg() + " " + sparse + " " + out("p/eval")), 0);
  EXPECT_NE(slurp(dir / "p/eval/eval.txt").find("t2i_recall@1: "), std::string::npos);
  ASSERT_EQ(run("analyze-router " + cfg() + " " + sparse + " " + out("p/router")), 0);
  EXPECT_TRUE(fs::exists(dir / "p/router/router_trace.csv"));
  EXPECT_TRUE(fs::exists(dir / "p/router/dropmap_layer1_img0.ppm"));
  EXPECT_TRUE(fs::exists(dir / "p/router/dropmap_layer1_img0.txt"));

  // A dense checkpoint cannot enter the upcycle regime.
  EXPECT_EQ(run("train-sparse " + cfg() + " " + dense + " " + out("p2")), 2);
}

TEST_F(Cli, TextOnlyUpcycleKeepsImageTower) {
  ASSERT_EQ(run("train-dense " + cfg() + " " + out("t")), 0);
  ASSERT_EQ(run("upcycle " + cfg() + " --checkpoint " + (dir / "t/dense_final.ckpt").string() +
                " --modality text " + out("t")),
            0);
  auto dense = mucp::load_checkpoint(dir / "t/dense_final.ckpt");
  auto sparse = mucp::load_checkpoint(dir / "t/upcycled.ckpt");
  for (const auto& [name, t] : sparse.params)
    if (name.rfind("image.", 0) == 0) EXPECT_TRUE(t == dense.params.at(name)) << name;
}

TEST_F(Cli, UntrainedEvalIsNearChance) {
  std::ofstream(dir / "zero.cfg") << kSmallConfig << "data.val_size = 256\ntrain.steps = 2\ntrain.warmup_steps = 1\n";
  const std::string c = "--config " + (dir / "zero.cfg").string();
  ASSERT_EQ(run("train-dense " + c + " " + out("z")), 0);
  ASSERT_EQ(run("eval " + c + " --checkpoint " + (dir / "z/dense_final.ckpt").string() + " " + out("z")), 0);
  std::istringstream in(slurp(dir / "z/eval.txt"));
  double r1 = -1;
  for (std::string line; std::getline(in, line);)
    if (line.rfind("t2i_recall@1: ", 0) == 0) r1 = std::stod(line.substr(14));
  ASSERT_GE(r1, 0.0);
  EXPECT_LT(r1, 10.0 / 256);
}

TEST_F(Cli, FlopsNamedConfig) {
  ASSERT_EQ(run("flops --config b16-dense " + out("f")), 0);
  std::istringstream csv(slurp(dir / "f/cost.csv"));
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  EXPECT_EQ(header, "config,params,image_gflops,text_gflops,total_gflops");
  const double total = std::stod(row.substr(row.rfind(',') + 1));
  EXPECT_NEAR(total, 41.2, 4.12);
  EXPECT_EQ(run("flops --config b99-dense " + out("f")), 2);
}

}  // namespace
