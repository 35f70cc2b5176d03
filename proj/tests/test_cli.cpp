#include "support.hpp"

#include <sys/wait.h>

#include <fstream>
#include <sstream>

using namespace semnoma;
using semnoma::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string l;
  while (std::getline(ss, l)) out.push_back(l);
  return out;
}

std::string smoke_config() {
  return "schema_version = 1\n"
         "preset = tiny32\n"
         "out_channels = 16\n"
         "stage_dims = 8,16\n"
         "stage_depths = 1,1\n"
         "num_users = 2\n"
         "dataset = cifar10\n"
         "data_dir = " + semnoma::testing::cifar_dir().string() + "\n"
         "train_images = 200\n"
         "val_images = 64\n"
         "test_images = 64\n"
         "batch_size = 16\n"
         "max_epochs = 2\n"
         "lr = 1e-3\n"
         "eval_batch_size = 16\n"
         "grid_images = 4\n"
         "denoiser_base = 16\n"
         "denoiser_train_steps = 20\n"
         "denoiser_batch_size = 8\n"
         "denoiser_eval_samples = 32\n"
         "refine_t_prime = 20\n"
         "refine_num_steps = 4\n"
         "seed = 11\n";
}

/// Runs the CLI; returns its exit status. Output goes to `log`.
int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(SEMNOMA_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// One teacher checkpoint shared by the CLI tests.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    std::ofstream(*dir_ / "smoke.conf") << smoke_config();
    ASSERT_EQ(run_cli("train-teacher --config " + conf().string() + " --out " + (*dir_ / "teacher").string(),
                      *dir_ / "teacher.log"), 0)
        << read_file(*dir_ / "teacher.log");
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path conf() { return *dir_ / "smoke.conf"; }
  static fs::path teacher() { return *dir_ / "teacher" / "codec.ckpt"; }
  static fs::path path(const std::string& name) { return *dir_ / name; }

  static TempDir* dir_;
};

TempDir* CliTest::dir_ = nullptr;

}  // namespace

TEST(ExperimentConfig, ParsesOverridesAndRoundTrips) {
  auto c = ExperimentConfig::parse(smoke_config(), {{"channel", "rayleigh"}, {"seed", "3"}});
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.train.channel, ChannelKind::rayleigh);
  EXPECT_EQ(c.distill.crosskd_layer, 2);
  EXPECT_EQ(c.codec.stage_dims, (std::vector<std::int64_t>{8, 16}));
  auto again = ExperimentConfig::parse(c.to_text());
  EXPECT_EQ(again.to_text(), c.to_text());
}

TEST(ExperimentConfig, RejectsInvalidDocuments) {
  EXPECT_THROW(ExperimentConfig::parse("preset = tiny32\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse("schema_version = 2\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse(smoke_config() + "colour = blue\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse(smoke_config() + "preset = huge\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse(smoke_config() + "lr = fast\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse(smoke_config() + "crosskd_layer = 99\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse(smoke_config() + "refine_num_steps = 50\n"), ConfigError);
  EXPECT_THROW(ExperimentConfig::parse(smoke_config() + "no equals sign\n"), ConfigError);
}

TEST(ExperimentConfig, ShippedPresetsParse) {
  for (const char* name : {"A32C6", "A32C3", "R32C3", "A256C48", "R256C48", "desk"}) {
    auto c = ExperimentConfig::load(semnoma::testing::source_path(std::string("configs/") + name + ".conf"));
    EXPECT_EQ(ExperimentConfig::parse(c.to_text()).to_text(), c.to_text()) << name;
  }
  auto a = ExperimentConfig::load(semnoma::testing::source_path("configs/A32C6.conf"));
  EXPECT_EQ(a.codec.symbols_per_image(), 512);
  auto f = ExperimentConfig::load(semnoma::testing::source_path("configs/A256C48.conf"));
  EXPECT_EQ(f.codec.symbols_per_image(), 4096);
}

TEST_F(CliTest, TeacherSmokeRunWritesArtifacts) {
  for (const char* f : {"codec.ckpt", "train_log.csv", "config.resolved"}) {
    EXPECT_TRUE(fs::exists(path("teacher") / f)) << f;
  }
  auto log = lines(read_file(path("teacher") / "train_log.csv"));
  ASSERT_EQ(log.size(), 3u);
  EXPECT_EQ(log[0], "epoch,steps,L_MAE,L_FA,L_CrossKD,L_S,val_PSNR,val_SSIM,seed");
  EXPECT_EQ(log[1].substr(log[1].rfind(',') + 1), "11");
  EXPECT_NE(read_file(path("teacher") / "config.resolved").find("seed = 11"), std::string::npos);
  auto ck = load_codec(teacher());
  EXPECT_EQ(ck.metadata.at("seed").get<std::uint64_t>(), 11u);
}

TEST_F(CliTest, SameSeedRerunIsIdentical) {
  ASSERT_EQ(run_cli("train-teacher --config " + conf().string() + " --out " + path("teacher2").string(),
                    path("teacher2.log")), 0);
  EXPECT_EQ(read_file(path("teacher2") / "train_log.csv"), read_file(path("teacher") / "train_log.csv"));
  EXPECT_EQ(read_file(path("teacher2") / "codec.ckpt"), read_file(teacher()));
}

TEST_F(CliTest, FailureContracts) {
  EXPECT_EQ(run_cli("train-teacher --config " + conf().string() + " --set data_dir=" + path("nowhere").string() +
                        " --out " + path("missing").string(),
                    path("missing.log")), 4);
  EXPECT_FALSE(fs::exists(path("missing") / "codec.ckpt"));
  EXPECT_EQ(run_cli("train-teacher --config " + conf().string() + " --set colour=blue --out " + path("bad").string(),
                    path("bad.log")), 2);
  EXPECT_EQ(run_cli("train-teacher --config " + conf().string() + " --out " + path("teacher").string(),
                    path("reuse.log")), 2);
  EXPECT_EQ(run_cli("train-teacher --config " + conf().string() + " --set lr=1e30 --set max_epochs=5 --out " +
                        path("nan").string(),
                    path("nan.log")), 3)
      << read_file(path("nan.log"));
  EXPECT_FALSE(fs::exists(path("nan") / "codec.ckpt"));
}

TEST_F(CliTest, EvaluateSweepIsReproducible) {
  const auto args = "evaluate --config " + conf().string() + " --checkpoint " + teacher().string() +
                    " --snr 0 --snr 10 --snr 20 --out ";
  ASSERT_EQ(run_cli(args + path("eval1").string(), path("eval1.log")), 0) << read_file(path("eval1.log"));
  ASSERT_EQ(run_cli(args + path("eval2").string(), path("eval2.log")), 0);
  const auto csv = read_file(path("eval1") / "metrics.csv");
  EXPECT_EQ(csv, read_file(path("eval2") / "metrics.csv"));
  auto rows = lines(csv);
  ASSERT_EQ(rows.size(), 1u + 3u * 6u);
  EXPECT_EQ(rows[0], "snr_db,metric,user,value,seed");
  std::set<std::string> snrs;
  for (std::size_t i = 1; i < rows.size(); ++i) snrs.insert(rows[i].substr(0, rows[i].find(',')));
  EXPECT_EQ(snrs, (std::set<std::string>{"0", "10", "20"}));
  EXPECT_TRUE(fs::exists(path("eval1") / "grid_snr10_seed11.png"));
  EXPECT_EQ(read_file(path("eval1") / "grid_snr10_seed11.png"), read_file(path("eval2") / "grid_snr10_seed11.png"));
}

TEST_F(CliTest, IncompatibleCheckpointIsRejected) {
  EXPECT_EQ(run_cli("evaluate --config " + conf().string() + " --set out_channels=8 --checkpoint " + teacher().string() +
                        " --snr 10 --out " + path("incompat").string(),
                    path("incompat.log")), 2);
  EXPECT_EQ(run_cli("evaluate --config " + conf().string() + " --checkpoint " + conf().string() +
                        " --snr 10 --out " + path("notckpt").string(),
                    path("notckpt.log")), 2);
}

TEST_F(CliTest, StudentAndRefinePipeline) {
  ASSERT_EQ(run_cli("train-student --config " + conf().string() + " --checkpoint " + teacher().string() + " --out " +
                        path("student").string(),
                    path("student.log")), 0)
      << read_file(path("student.log"));
  EXPECT_TRUE(fs::exists(path("student") / "codec.ckpt"));
  ASSERT_EQ(run_cli("train-denoiser --config " + conf().string() + " --out " + path("den").string(), path("den.log")), 0)
      << read_file(path("den.log"));
  for (const char* f : {"denoiser.ckpt", "train_log.csv", "config.resolved"}) EXPECT_TRUE(fs::exists(path("den") / f));

  EXPECT_EQ(run_cli("refine --config " + conf().string() + " --checkpoint " + teacher().string() + " --denoiser " +
                        path("none.ckpt").string() + " --snr 10 --out " + path("nodenoiser").string(),
                    path("nodenoiser.log")), 2);

  const auto args = "refine --config " + conf().string() + " --set refine_eta=0 --checkpoint " +
                    path("student/codec.ckpt").string() + " --denoiser " + path("den/denoiser.ckpt").string() +
                    " --snr 5 --snr 15 --out ";
  ASSERT_EQ(run_cli(args + path("ref1").string(), path("ref1.log")), 0) << read_file(path("ref1.log"));
  ASSERT_EQ(run_cli(args + path("ref2").string(), path("ref2.log")), 0);
  auto rows = lines(read_file(path("ref1") / "refine.csv"));
  ASSERT_EQ(rows.size(), 1u + 2u * 2u);
  EXPECT_EQ(rows[0], "snr_db,stage,psnr_mean,ssim_mean,psnr_user0,psnr_user1,ssim_user0,ssim_user1,seed");
  EXPECT_EQ(rows[1].substr(0, 6), "5,pre,");
  EXPECT_EQ(rows[2].substr(0, 7), "5,post,");
  EXPECT_EQ(read_file(path("ref1") / "refine_grid_snr5_seed11.png"), read_file(path("ref2") / "refine_grid_snr5_seed11.png"));
  EXPECT_EQ(read_file(path("ref1") / "refine.csv"), read_file(path("ref2") / "refine.csv"));

  auto imgs = path("imgs");
  fs::create_directories(imgs);
  write_png(imgs / "a.png", torch::full({3, 40, 40}, 120, torch::kUInt8));
  ASSERT_EQ(run_cli("refine --config " + conf().string() + " --denoiser " + path("den/denoiser.ckpt").string() +
                        " --input-dir " + imgs.string() + " --out " + path("refdir").string(),
                    path("refdir.log")), 0)
      << read_file(path("refdir.log"));
  EXPECT_TRUE(fs::exists(path("refdir") / "a_refined.png"));
  EXPECT_EQ(lines(read_file(path("refdir") / "manifest.csv")).size(), 2u);
}
