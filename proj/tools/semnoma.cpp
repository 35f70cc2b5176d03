// semnoma: train, evaluate and refine multi-user NOMA image codecs.

#include <semnoma/semnoma.hpp>

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kNonFinite = 3, kData = 4 };

std::map<std::string, std::string> parse_sets(const std::vector<std::string>& sets) {
  std::map<std::string, std::string> out;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw semnoma::ConfigError("--set expects key=value, got '" + s + "'");
    out[s.substr(0, eq)] = s.substr(eq + 1);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"SemNOMA multi-user semantic image transmission"};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::string checkpoint;
  std::string denoiser;
  std::string input_dir;
  std::vector<double> snrs;
  std::vector<std::string> sets;
  std::int64_t seed = -1;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config, "experiment config (key = value)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "output directory (must not exist or be empty)")->required();
    cmd->add_option("--seed", seed, "root seed (overrides the config)");
    cmd->add_option("--set", sets, "override a config key: key=value (repeatable)");
  };

  auto* teacher = app.add_subcommand("train-teacher", "train the orthogonal-transmission teacher");
  common(teacher);
  auto* student = app.add_subcommand("train-student", "distill a NOMA student from a teacher checkpoint");
  common(student);
  student->add_option("--checkpoint", checkpoint, "teacher checkpoint")->required();
  auto* dtrain = app.add_subcommand("train-denoiser", "train the diffusion denoiser");
  common(dtrain);
  auto* evaluate = app.add_subcommand("evaluate", "PSNR/SSIM sweep over SNR");
  common(evaluate);
  evaluate->add_option("--checkpoint", checkpoint, "codec checkpoint")->required();
  evaluate->add_option("--snr", snrs, "evaluation SNR in dB (repeatable)")->required();
  auto* refine = app.add_subcommand("refine", "decode then refine with the diffusion prior");
  common(refine);
  refine->add_option("--checkpoint", checkpoint, "codec checkpoint");
  refine->add_option("--denoiser", denoiser, "denoiser checkpoint")->required();
  refine->add_option("--snr", snrs, "evaluation SNR in dB (repeatable)");
  refine->add_option("--input-dir", input_dir, "refine the images in this directory instead of a codec sweep");

  std::string photos;
  std::int64_t fixture_train = 2500;
  std::int64_t fixture_test = 1000;
  auto* fixture = app.add_subcommand("make-fixture", "build a CIFAR-10-layout archive from photo patches");
  fixture->add_option("--input-dir", photos, "directory of source photos")->required();
  fixture->add_option("--out", out, "output directory")->required();
  fixture->add_option("--seed", seed, "seed");
  fixture->add_option("--train", fixture_train, "training images");
  fixture->add_option("--test", fixture_test, "test images");

  CLI11_PARSE(app, argc, argv);

  try {
    if (fixture->parsed()) {
      semnoma::cmd_make_fixture(photos, out, fixture_train, fixture_test, seed < 0 ? 0 : static_cast<std::uint64_t>(seed));
      return kOk;
    }
    auto overrides = parse_sets(sets);
    if (seed >= 0) overrides["seed"] = std::to_string(seed);
    const auto cfg = semnoma::ExperimentConfig::load(config, overrides);
    if (teacher->parsed()) {
      auto r = semnoma::cmd_train_teacher(cfg, out);
      std::cout << "teacher: " << r.steps << " steps, best val PSNR " << r.best_val_psnr << " dB -> " << r.checkpoint.string() << "\n";
    } else if (student->parsed()) {
      auto r = semnoma::cmd_train_student(cfg, checkpoint, out);
      std::cout << "student: " << r.steps << " steps, best val PSNR " << r.best_val_psnr << " dB -> " << r.checkpoint.string() << "\n";
    } else if (dtrain->parsed()) {
      auto r = semnoma::cmd_train_denoiser(cfg, out);
      std::cout << "denoiser: " << r.steps << " steps, eval loss " << r.final_loss << " -> " << r.checkpoint.string() << "\n";
    } else if (evaluate->parsed()) {
      semnoma::cmd_evaluate(cfg, checkpoint, snrs, out);
    } else if (refine->parsed()) {
      if (!input_dir.empty()) {
        auto n = semnoma::cmd_refine_dir(cfg, denoiser, input_dir, out);
        std::cout << "refined " << n << " images\n";
      } else {
        if (checkpoint.empty()) throw semnoma::ConfigError("refine: --checkpoint is required without --input-dir");
        semnoma::cmd_refine(cfg, checkpoint, denoiser, snrs, out);
      }
    }
  } catch (const semnoma::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const semnoma::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kConfig;
  } catch (const semnoma::NonFiniteLossError& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kNonFinite;
  } catch (const semnoma::IngestionError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
