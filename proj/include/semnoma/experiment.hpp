#pragma once

// Experiment configuration (flat key = value files) and the command
// implementations behind the semnoma CLI.

#include <semnoma/channel.hpp>
#include <semnoma/checkpoint.hpp>
#include <semnoma/data.hpp>
#include <semnoma/diffusion.hpp>
#include <semnoma/distill.hpp>
#include <semnoma/error.hpp>
#include <semnoma/metrics.hpp>
#include <semnoma/model.hpp>
#include <semnoma/rng.hpp>

#include <json.hpp>
#include <torch/torch.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace semnoma {

inline constexpr int kConfigSchema = 1;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Parsed key/value pairs; every key must be consumed exactly once.
class KeyValues {
 public:
  explicit KeyValues(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

  bool has(const std::string& k) const { return kv_.count(k) != 0; }

  std::string str(const std::string& k, const std::string& def) {
    used_.insert(k);
    auto it = kv_.find(k);
    return it == kv_.end() ? def : it->second;
  }

  double real(const std::string& k, double def) {
    auto v = str(k, "");
    if (v.empty()) return def;
    try {
      std::size_t pos = 0;
      double d = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("config: '" + k + "' expects a number, got '" + v + "'");
    }
  }

  std::int64_t integer(const std::string& k, std::int64_t def) {
    auto v = str(k, "");
    if (v.empty()) return def;
    try {
      std::size_t pos = 0;
      auto d = std::stoll(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("config: '" + k + "' expects an integer, got '" + v + "'");
    }
  }

  std::vector<std::int64_t> integers(const std::string& k, const std::vector<std::int64_t>& def) {
    auto v = str(k, "");
    if (v.empty()) return def;
    std::vector<std::int64_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      try {
        out.push_back(std::stoll(item));
      } catch (const std::exception&) {
        throw ConfigError("config: '" + k + "' expects a comma-separated integer list, got '" + v + "'");
      }
    }
    return out;
  }

  void reject_unknown() const {
    for (const auto& [k, v] : kv_) {
      if (used_.count(k) == 0) throw ConfigError("config: unknown key '" + k + "'");
    }
  }

 private:
  std::map<std::string, std::string> kv_;
  std::set<std::string> used_;
};

inline std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string short_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace detail

/// Parses "key = value" lines; '#' starts a comment. Later keys override earlier ones.
inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    auto key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = detail::trim(line.substr(eq + 1));
  }
  return kv;
}

struct ExperimentConfig {
  std::string preset = "tiny32";
  CodecConfig codec = CodecConfig::tiny32();
  std::uint64_t seed = 0;

  std::string dataset = "cifar10";  // cifar10 | image_dir
  std::string data_dir;
  std::int64_t train_images = 2000;
  std::int64_t val_images = 500;
  std::int64_t test_images = 1000;  // 0 = all

  TrainConfig train;
  DistillConfig distill;
  std::int64_t eval_batch_size = 64;
  std::int64_t grid_images = 8;

  DiffusionSchedule schedule = DiffusionSchedule::linear();
  DenoiserConfig denoiser;
  DenoiserTrainConfig denoiser_train;
  RefineConfig refine;

  static CodecConfig preset_codec(const std::string& name) {
    if (name == "tiny32") return CodecConfig::tiny32();
    if (name == "cifar32") return CodecConfig::cifar32();
    if (name == "ffhq256") return CodecConfig::ffhq256();
    throw ConfigError("config: unknown preset '" + name + "' (expected tiny32, cifar32 or ffhq256)");
  }

  static ExperimentConfig parse(const std::string& text,
                                const std::map<std::string, std::string>& overrides = {}) {
    auto map = parse_key_values(text);
    for (const auto& [k, v] : overrides) map[k] = v;
    detail::KeyValues kv(map);
    if (!kv.has("schema_version")) throw ConfigError("config: missing schema_version");
    const auto schema = kv.integer("schema_version", 0);
    if (schema != kConfigSchema) {
      throw ConfigError("config: schema_version " + std::to_string(schema) + " is not supported (expected " +
                        std::to_string(kConfigSchema) + ")");
    }
    ExperimentConfig c;
    c.preset = kv.str("preset", "tiny32");
    c.codec = preset_codec(c.preset);
    auto& cc = c.codec;
    cc.out_channels = kv.integer("out_channels", cc.out_channels);
    cc.num_users = kv.integer("num_users", cc.num_users);
    cc.stage_dims = kv.integers("stage_dims", cc.stage_dims);
    cc.stage_depths = kv.integers("stage_depths", cc.stage_depths);
    cc.encoder_af = parse_af_placement(kv.str("encoder_af", to_string(cc.encoder_af)));
    cc.decoder_af = parse_af_placement(kv.str("decoder_af", to_string(cc.decoder_af)));
    cc.drop_path_rate = kv.real("drop_path_rate", cc.drop_path_rate);
    cc.af_dropout = kv.real("af_dropout", cc.af_dropout);
    cc.p_avg = kv.real("p_avg", cc.p_avg);
    cc.gamma_lo = kv.real("gamma_lo", cc.gamma_lo);
    cc.gamma_hi = kv.real("gamma_hi", cc.gamma_hi);
    cc.validate();
    if (cc.gamma_lo > cc.gamma_hi) throw ConfigError("config: gamma_lo > gamma_hi");

    const auto seed = kv.integer("seed", 0);
    if (seed < 0) throw ConfigError("config: seed must be non-negative");
    c.seed = static_cast<std::uint64_t>(seed);

    c.dataset = kv.str("dataset", c.dataset);
    if (c.dataset != "cifar10" && c.dataset != "image_dir") {
      throw ConfigError("config: dataset must be cifar10 or image_dir");
    }
    c.data_dir = kv.str("data_dir", "");
    c.train_images = kv.integer("train_images", c.train_images);
    c.val_images = kv.integer("val_images", c.val_images);
    c.test_images = kv.integer("test_images", c.test_images);
    if (c.train_images < 0 || c.val_images < 0 || c.test_images < 0) {
      throw ConfigError("config: image counts must be non-negative");
    }

    auto& t = c.train;
    t.channel = parse_channel_kind(kv.str("channel", "awgn"));
    t.gamma_lo = cc.gamma_lo;
    t.gamma_hi = cc.gamma_hi;
    t.batch_size = kv.integer("batch_size", t.batch_size);
    t.max_epochs = kv.integer("max_epochs", t.max_epochs);
    t.patience = kv.integer("patience", t.patience);
    t.lr = kv.real("lr", t.lr);
    t.weight_decay = kv.real("weight_decay", t.weight_decay);
    t.samples_per_epoch = kv.integer("samples_per_epoch", t.samples_per_epoch);
    t.max_steps = kv.integer("max_steps", t.max_steps);
    t.val_batch_size = kv.integer("val_batch_size", t.val_batch_size);
    t.seed = c.seed;
    if (t.batch_size < 1 || t.max_epochs < 1 || t.patience < 1 || !(t.lr > 0.0)) {
      throw ConfigError("config: batch_size, max_epochs, patience and lr must be positive");
    }

    auto& d = c.distill;
    d = DistillConfig::for_channel(t.channel);
    d.lambda_mae = kv.real("lambda_mae", d.lambda_mae);
    d.lambda_fa = kv.real("lambda_fa", d.lambda_fa);
    d.lambda_crosskd = kv.real("lambda_crosskd", d.lambda_crosskd);
    if (auto j = kv.str("crosskd_layer", "auto"); j != "auto") {
      try {
        d.crosskd_layer = std::stoll(j);
      } catch (const std::exception&) {
        throw ConfigError("config: crosskd_layer expects an integer or 'auto'");
      }
    }
    d.fa_layers = kv.integers("fa_layers", d.fa_layers);
    d.affinity_norm = parse_affinity_norm(kv.str("affinity_norm", to_string(d.affinity_norm)));
    d.validate(SemNoma(cc, 0)->decoder(0)->size());

    c.eval_batch_size = kv.integer("eval_batch_size", c.eval_batch_size);
    c.grid_images = kv.integer("grid_images", c.grid_images);
    if (c.eval_batch_size < 1 || c.grid_images < 0) throw ConfigError("config: eval_batch_size must be positive");

    c.schedule = DiffusionSchedule::linear(kv.integer("diffusion_steps", 1000), kv.real("beta_start", 1e-4),
                                           kv.real("beta_end", 0.02));
    c.denoiser.height = cc.height;
    c.denoiser.width = cc.width;
    c.denoiser.base = kv.integer("denoiser_base", c.denoiser.base);
    c.denoiser.groups = kv.integer("denoiser_groups", c.denoiser.groups);
    c.denoiser.validate();
    auto& dt = c.denoiser_train;
    dt.steps = kv.integer("denoiser_train_steps", dt.steps);
    dt.batch_size = kv.integer("denoiser_batch_size", dt.batch_size);
    dt.lr = kv.real("denoiser_lr", dt.lr);
    dt.eval_every = kv.integer("denoiser_eval_every", dt.eval_every);
    dt.eval_samples = kv.integer("denoiser_eval_samples", dt.eval_samples);
    dt.seed = c.seed;
    if (dt.steps < 0 || dt.batch_size < 1 || !(dt.lr > 0.0)) throw ConfigError("config: bad denoiser training settings");
    c.refine.T_prime = kv.integer("refine_t_prime", c.refine.T_prime);
    c.refine.eta = kv.real("refine_eta", c.refine.eta);
    c.refine.num_steps = kv.integer("refine_num_steps", c.refine.num_steps);
    c.refine.validate(c.schedule);

    kv.reject_unknown();
    return c;
  }

  static ExperimentConfig load(const std::filesystem::path& file,
                               const std::map<std::string, std::string>& overrides = {}) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), overrides);
  }

  /// Every key with its resolved value; parse(to_text()) reproduces the config.
  std::string to_text() const {
    auto ints = [](const std::vector<std::int64_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    auto r = [](double v) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    std::ostringstream o;
    o << "schema_version = " << kConfigSchema << "\n"
      << "preset = " << preset << "\n"
      << "seed = " << seed << "\n"
      << "out_channels = " << codec.out_channels << "\n"
      << "num_users = " << codec.num_users << "\n"
      << "stage_dims = " << ints(codec.stage_dims) << "\n"
      << "stage_depths = " << ints(codec.stage_depths) << "\n"
      << "encoder_af = " << to_string(codec.encoder_af) << "\n"
      << "decoder_af = " << to_string(codec.decoder_af) << "\n"
      << "drop_path_rate = " << r(codec.drop_path_rate) << "\n"
      << "af_dropout = " << r(codec.af_dropout) << "\n"
      << "p_avg = " << r(codec.p_avg) << "\n"
      << "gamma_lo = " << r(codec.gamma_lo) << "\n"
      << "gamma_hi = " << r(codec.gamma_hi) << "\n"
      << "channel = " << to_string(train.channel) << "\n"
      << "dataset = " << dataset << "\n"
      << "data_dir = " << data_dir << "\n"
      << "train_images = " << train_images << "\n"
      << "val_images = " << val_images << "\n"
      << "test_images = " << test_images << "\n"
      << "batch_size = " << train.batch_size << "\n"
      << "max_epochs = " << train.max_epochs << "\n"
      << "patience = " << train.patience << "\n"
      << "lr = " << r(train.lr) << "\n"
      << "weight_decay = " << r(train.weight_decay) << "\n"
      << "samples_per_epoch = " << train.samples_per_epoch << "\n"
      << "max_steps = " << train.max_steps << "\n"
      << "val_batch_size = " << train.val_batch_size << "\n"
      << "lambda_mae = " << r(distill.lambda_mae) << "\n"
      << "lambda_fa = " << r(distill.lambda_fa) << "\n"
      << "lambda_crosskd = " << r(distill.lambda_crosskd) << "\n"
      << "crosskd_layer = " << distill.crosskd_layer << "\n"
      << "fa_layers = " << ints(distill.fa_layers) << "\n"
      << "affinity_norm = " << to_string(distill.affinity_norm) << "\n"
      << "eval_batch_size = " << eval_batch_size << "\n"
      << "grid_images = " << grid_images << "\n"
      << "diffusion_steps = " << schedule.T << "\n"
      << "beta_start = " << r(schedule.beta_start) << "\n"
      << "beta_end = " << r(schedule.beta_end) << "\n"
      << "denoiser_base = " << denoiser.base << "\n"
      << "denoiser_groups = " << denoiser.groups << "\n"
      << "denoiser_train_steps = " << denoiser_train.steps << "\n"
      << "denoiser_batch_size = " << denoiser_train.batch_size << "\n"
      << "denoiser_lr = " << r(denoiser_train.lr) << "\n"
      << "denoiser_eval_every = " << denoiser_train.eval_every << "\n"
      << "denoiser_eval_samples = " << denoiser_train.eval_samples << "\n"
      << "refine_t_prime = " << refine.T_prime << "\n"
      << "refine_eta = " << r(refine.eta) << "\n"
      << "refine_num_steps = " << refine.num_steps << "\n";
    return o.str();
  }
};

struct ExperimentData {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Loads the configured dataset and carves train / validation / test subsets.
/// CIFAR-10: train and validation come from the training batches, test from
/// test_batch. Image directories: sorted files split in that order.
inline ExperimentData load_experiment_data(const ExperimentConfig& c) {
  if (c.data_dir.empty()) throw IngestionError("config: data_dir is not set");
  ExperimentData d;
  auto cap = [](std::int64_t want, std::int64_t avail) { return want == 0 ? avail : std::min(want, avail); };
  if (c.dataset == "cifar10") {
    if (c.codec.height != 32 || c.codec.width != 32) throw ConfigError("config: cifar10 needs a 32x32 preset");
    auto splits = load_cifar10(c.data_dir);
    const auto pool = splits.train.size();
    const auto n_train = c.train_images == 0 ? std::max<std::int64_t>(pool - c.val_images, 0) : std::min(c.train_images, pool);
    d.train = splits.train.slice(0, n_train);
    d.val = splits.train.slice(n_train, cap(c.val_images, pool - n_train));
    d.test = splits.test.slice(0, cap(c.test_images, splits.test.size()));
  } else {
    auto dir = load_image_dir(c.data_dir, c.codec.height, c.codec.width);
    const auto& all = dir.dataset;
    const auto n_train = std::min(c.train_images, all.size());
    const auto n_val = std::min(c.val_images, all.size() - n_train);
    d.train = all.slice(0, n_train);
    d.val = all.slice(n_train, n_val);
    d.test = all.slice(n_train + n_val, cap(c.test_images, all.size() - n_train - n_val));
  }
  return d;
}

/// Creates `out`; refuses to reuse a directory that already has content.
inline void prepare_out_dir(const std::filesystem::path& out) {
  namespace fs = std::filesystem;
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw ConfigError("output path " + out.string() + " exists and is not a directory");
    if (!fs::is_empty(out)) throw ConfigError("output directory " + out.string() + " is not empty; refusing to overwrite");
  }
  fs::create_directories(out);
}

inline void write_text(const std::filesystem::path& file, const std::string& text) {
  auto tmp = file;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write " + file.string());
    out << text;
  }
  std::filesystem::rename(tmp, file);
}

/// Rows of source / reconstruction images: [rows][cols] of [3,H,W] tiles.
inline void write_grid(const std::filesystem::path& file, const std::vector<std::vector<torch::Tensor>>& rows) {
  std::vector<torch::Tensor> lines;
  for (const auto& r : rows) lines.push_back(torch::cat(r, 2));
  write_png(file, torch::cat(lines, 1));
}

inline nlohmann::json run_metadata(const ExperimentConfig& c, const std::string& command) {
  return {{"command", command}, {"seed", c.seed}, {"config_resolved", c.to_text()}};
}

struct RunSummary {
  std::filesystem::path checkpoint;
  double final_loss = 0.0;
  double best_val_psnr = 0.0;
  std::int64_t steps = 0;
};

namespace detail {

inline std::string epoch_header() { return "epoch,steps,L_MAE,L_FA,L_CrossKD,L_S,val_PSNR,val_SSIM,seed\n"; }

inline std::string epoch_row(const EpochRecord& r, std::uint64_t seed) {
  return std::to_string(r.epoch) + "," + std::to_string(r.steps) + "," + num(r.mae) + "," + num(r.fa) + "," +
         num(r.crosskd) + "," + num(r.total) + "," + num(r.val_psnr) + "," + num(r.val_ssim) + "," +
         std::to_string(seed) + "\n";
}

inline EpochCallback epoch_logger(const std::string& name, std::uint64_t seed, std::string& csv) {
  return [&csv, name, seed](const EpochRecord& r) {
    csv += epoch_row(r, seed);
    std::cerr << name << " epoch " << r.epoch << " steps " << r.steps << " L_S " << num(r.total) << " val PSNR "
              << num(r.val_psnr) << " dB SSIM " << num(r.val_ssim) << "\n";
  };
}

inline RunSummary finish_codec_run(const ExperimentConfig& c, const std::filesystem::path& out, const std::string& command,
                                   const TrainResult& r, const std::string& csv) {
  nlohmann::json meta = run_metadata(c, command);
  meta["best_epoch"] = r.best_epoch;
  meta["best_val_psnr"] = r.best_val_psnr;
  meta["steps"] = r.steps;
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : r.history) {
    history.push_back({{"epoch", e.epoch}, {"L_MAE", e.mae}, {"L_FA", e.fa}, {"L_CrossKD", e.crosskd},
                       {"L_S", e.total}, {"val_PSNR", e.val_psnr}, {"val_SSIM", e.val_ssim}});
  }
  meta["history"] = history;
  RunSummary s;
  s.checkpoint = out / "codec.ckpt";
  write_text(out / "train_log.csv", csv);
  write_text(out / "config.resolved", c.to_text());
  save_codec(s.checkpoint, r.model, meta);
  s.final_loss = r.history.empty() ? 0.0 : r.history.back().total;
  s.best_val_psnr = r.best_val_psnr;
  s.steps = r.steps;
  return s;
}

inline SemNoma load_compatible_codec(const ExperimentConfig& c, const std::filesystem::path& ckpt) {
  auto loaded = load_codec(ckpt);
  if (nlohmann::json(loaded.model->config()) != nlohmann::json(c.codec)) {
    throw CheckpointError("checkpoint " + ckpt.string() + " was trained with a different codec configuration");
  }
  return loaded.model;
}

inline std::uint64_t snr_seed(std::uint64_t root, double snr) {
  return derive_seed(derive_seed(root, "channel"), "snr=" + short_num(snr));
}

inline std::string snr_tag(double snr) { return short_num(snr); }

}  // namespace detail

inline RunSummary cmd_train_teacher(const ExperimentConfig& c, const std::filesystem::path& out) {
  auto data = load_experiment_data(c);
  prepare_out_dir(out);
  std::string csv = detail::epoch_header();
  auto r = train_teacher(data.train, data.val, c.codec, c.train, detail::epoch_logger("teacher", c.seed, csv));
  return detail::finish_codec_run(c, out, "train-teacher", r, csv);
}

inline RunSummary cmd_train_student(const ExperimentConfig& c, const std::filesystem::path& teacher_ckpt,
                                    const std::filesystem::path& out) {
  auto teacher = detail::load_compatible_codec(c, teacher_ckpt);
  auto data = load_experiment_data(c);
  prepare_out_dir(out);
  std::string csv = detail::epoch_header();
  auto r = train_student(data.train, data.val, teacher, c.distill, c.train, detail::epoch_logger("student", c.seed, csv));
  return detail::finish_codec_run(c, out, "train-student", r, csv);
}

inline RunSummary cmd_train_denoiser(const ExperimentConfig& c, const std::filesystem::path& out) {
  auto data = load_experiment_data(c);
  prepare_out_dir(out);
  std::string csv = "step,loss,eval_loss,seed\n";
  auto r = train_denoiser(data.train, c.schedule, c.denoiser, c.denoiser_train, [&](const DenoiserStep& s) {
    csv += std::to_string(s.step) + "," + detail::num(s.loss) + "," +
           (std::isnan(s.eval_loss) ? std::string() : detail::num(s.eval_loss)) + "," + std::to_string(c.seed) + "\n";
    if (s.step % 100 == 0) std::cerr << "denoiser step " << s.step << " loss " << detail::num(s.loss) << "\n";
  });
  auto meta = run_metadata(c, "train-denoiser");
  meta["initial_eval_loss"] = r.initial_eval_loss;
  meta["final_eval_loss"] = r.final_eval_loss;
  RunSummary s;
  s.checkpoint = out / "denoiser.ckpt";
  write_text(out / "train_log.csv", csv);
  write_text(out / "config.resolved", c.to_text());
  save_denoiser(s.checkpoint, r.net, c.schedule, meta);
  s.final_loss = r.final_eval_loss;
  s.steps = c.denoiser_train.steps;
  return s;
}

/// Per-SNR metrics on the grouped test stream. CSV (long format):
/// snr_db,metric,user,value,seed with user = 0..N-1 or "mean".
inline std::vector<EvalResult> cmd_evaluate(const ExperimentConfig& c, const std::filesystem::path& ckpt,
                                            const std::vector<double>& snrs, const std::filesystem::path& out) {
  if (snrs.empty()) throw ConfigError("evaluate: at least one --snr is required");
  auto model = detail::load_compatible_codec(c, ckpt);
  auto data = load_experiment_data(c);
  prepare_out_dir(out);
  std::string csv = "snr_db,metric,user,value,seed\n";
  std::vector<EvalResult> results;
  for (double snr : snrs) {
    EvalOptions o;
    o.channel = c.train.channel;
    o.gamma_lo = o.gamma_hi = snr;
    o.batch_size = c.eval_batch_size;
    o.seed = detail::snr_seed(c.seed, snr);
    std::vector<std::vector<torch::Tensor>> grid;
    auto r = evaluate_codec(model, data.test, o, [&](const auto& src, const auto& rec) {
      if (!grid.empty() || c.grid_images == 0) return;
      for (std::size_t u = 0; u < src.size(); ++u) {
        const auto n = std::min<std::int64_t>(c.grid_images, src[u].size(0));
        grid.push_back(torch::unbind(src[u].narrow(0, 0, n), 0));
        grid.push_back(torch::unbind(rec[u].narrow(0, 0, n), 0));
      }
    });
    const auto tag = detail::short_num(snr);
    const auto seed = std::to_string(c.seed);
    for (std::size_t u = 0; u < r.psnr_per_user.size(); ++u) {
      csv += tag + ",psnr," + std::to_string(u) + "," + detail::num(r.psnr_per_user[u]) + "," + seed + "\n";
      csv += tag + ",ssim," + std::to_string(u) + "," + detail::num(r.ssim_per_user[u]) + "," + seed + "\n";
    }
    csv += tag + ",psnr,mean," + detail::num(r.psnr_mean) + "," + seed + "\n";
    csv += tag + ",ssim,mean," + detail::num(r.ssim_mean) + "," + seed + "\n";
    if (!grid.empty()) write_grid(out / ("grid_snr" + tag + "_seed" + seed + ".png"), grid);
    std::cerr << "evaluate snr " << tag << " dB: PSNR " << detail::num(r.psnr_mean) << " SSIM " << detail::num(r.ssim_mean)
              << "\n";
    results.push_back(r);
  }
  write_text(out / "metrics.csv", csv);
  write_text(out / "config.resolved", c.to_text());
  return results;
}

struct RefineRow {
  double snr_db = 0.0;
  std::string stage;
  std::vector<double> psnr_per_user;
  std::vector<double> ssim_per_user;
  double psnr_mean = 0.0;
  double ssim_mean = 0.0;
};

/// Codec decode then diffusion refinement per SNR. CSV (wide format): one row
/// per (snr, stage) with stage in {pre, post}.
inline std::vector<RefineRow> cmd_refine(const ExperimentConfig& c, const std::filesystem::path& codec_ckpt,
                                         const std::filesystem::path& denoiser_ckpt, const std::vector<double>& snrs,
                                         const std::filesystem::path& out) {
  if (snrs.empty()) throw ConfigError("refine: at least one --snr is required");
  if (denoiser_ckpt.empty() || !std::filesystem::exists(denoiser_ckpt)) {
    throw ConfigError("refine: denoiser checkpoint '" + denoiser_ckpt.string() + "' not found");
  }
  auto model = detail::load_compatible_codec(c, codec_ckpt);
  auto den = load_denoiser(denoiser_ckpt);
  if (den.net->config().height != c.codec.height || den.net->config().width != c.codec.width) {
    throw ConfigError("refine: denoiser resolution differs from the codec");
  }
  if (!den.net->trained()) throw ConfigError("refine: denoiser checkpoint is marked untrained");
  c.refine.validate(den.schedule);
  auto data = load_experiment_data(c);
  prepare_out_dir(out);
  const auto n = c.codec.num_users;
  std::string csv = "snr_db,stage,psnr_mean,ssim_mean";
  for (std::int64_t u = 0; u < n; ++u) csv += ",psnr_user" + std::to_string(u);
  for (std::int64_t u = 0; u < n; ++u) csv += ",ssim_user" + std::to_string(u);
  csv += ",seed\n";
  std::vector<RefineRow> rows;
  for (double snr : snrs) {
    EvalOptions o;
    o.channel = c.train.channel;
    o.gamma_lo = o.gamma_hi = snr;
    o.batch_size = c.eval_batch_size;
    o.seed = detail::snr_seed(c.seed, snr);
    RandomStream diffusion(derive_seed(derive_seed(c.seed, "diffusion"), "snr=" + detail::short_num(snr)));
    RefineRow post;
    post.snr_db = snr;
    post.stage = "post";
    post.psnr_per_user.assign(static_cast<std::size_t>(n), 0.0);
    post.ssim_per_user.assign(static_cast<std::size_t>(n), 0.0);
    std::int64_t count = 0;
    std::vector<std::vector<torch::Tensor>> grid;
    auto pre = evaluate_codec(model, data.test, o, [&](const auto& src, const auto& rec) {
      auto refined = refine_users(rec, den.net, c.refine, den.schedule, diffusion);
      for (std::size_t u = 0; u < src.size(); ++u) {
        for (double v : psnr_per_image(refined[u], src[u])) post.psnr_per_user[u] += v;
        for (double v : ssim_per_image(refined[u], src[u])) post.ssim_per_user[u] += v;
      }
      count += src.front().size(0);
      if (grid.empty() && c.grid_images > 0) {
        for (std::size_t u = 0; u < src.size(); ++u) {
          const auto k = std::min<std::int64_t>(c.grid_images, src[u].size(0));
          grid.push_back(torch::unbind(src[u].narrow(0, 0, k), 0));
          grid.push_back(torch::unbind(rec[u].narrow(0, 0, k), 0));
          grid.push_back(torch::unbind(refined[u].narrow(0, 0, k), 0));
        }
      }
    });
    for (std::int64_t u = 0; u < n; ++u) {
      post.psnr_per_user[static_cast<std::size_t>(u)] /= static_cast<double>(count);
      post.ssim_per_user[static_cast<std::size_t>(u)] /= static_cast<double>(count);
      post.psnr_mean += post.psnr_per_user[static_cast<std::size_t>(u)] / static_cast<double>(n);
      post.ssim_mean += post.ssim_per_user[static_cast<std::size_t>(u)] / static_cast<double>(n);
    }
    RefineRow pre_row{snr, "pre", pre.psnr_per_user, pre.ssim_per_user, pre.psnr_mean, pre.ssim_mean};
    const auto tag = detail::short_num(snr);
    for (const auto* row : {&pre_row, &post}) {
      csv += tag + "," + row->stage + "," + detail::num(row->psnr_mean) + "," + detail::num(row->ssim_mean);
      for (double v : row->psnr_per_user) csv += "," + detail::num(v);
      for (double v : row->ssim_per_user) csv += "," + detail::num(v);
      csv += "," + std::to_string(c.seed) + "\n";
    }
    if (!grid.empty()) write_grid(out / ("refine_grid_snr" + tag + "_seed" + std::to_string(c.seed) + ".png"), grid);
    std::cerr << "refine snr " << tag << " dB: PSNR " << detail::num(pre_row.psnr_mean) << " -> "
              << detail::num(post.psnr_mean) << ", SSIM " << detail::num(pre_row.ssim_mean) << " -> "
              << detail::num(post.ssim_mean) << "\n";
    rows.push_back(pre_row);
    rows.push_back(post);
  }
  write_text(out / "refine.csv", csv);
  write_text(out / "config.resolved", c.to_text());
  return rows;
}

/// Stage-2 refinement of every image in a directory (resized to the denoiser
/// resolution). Writes refined PNGs and manifest.csv (input,output,seed).
inline std::int64_t cmd_refine_dir(const ExperimentConfig& c, const std::filesystem::path& denoiser_ckpt,
                                   const std::filesystem::path& input_dir, const std::filesystem::path& out) {
  if (denoiser_ckpt.empty() || !std::filesystem::exists(denoiser_ckpt)) {
    throw ConfigError("refine: denoiser checkpoint '" + denoiser_ckpt.string() + "' not found");
  }
  auto den = load_denoiser(denoiser_ckpt);
  c.refine.validate(den.schedule);
  auto images = load_image_dir(input_dir, den.net->config().height, den.net->config().width);
  if (images.dataset.size() == 0) throw IngestionError("refine: no decodable images in " + input_dir.string());
  prepare_out_dir(out);
  RandomStream diffusion(c.seed, "diffusion");
  std::string csv = "input,output,seed\n";
  for (std::int64_t start = 0; start < images.dataset.size(); start += c.eval_batch_size) {
    const auto len = std::min(c.eval_batch_size, images.dataset.size() - start);
    auto batch = images.dataset.images.narrow(0, start, len).to(torch::kFloat32);
    auto refined = refine(batch, den.net, c.refine, den.schedule, diffusion);
    for (std::int64_t i = 0; i < len; ++i) {
      const auto& name = images.files[static_cast<std::size_t>(start + i)];
      auto stem = std::filesystem::path(name).stem().string();
      const auto file = stem + "_refined.png";
      write_png(out / file, refined[i]);
      csv += name + "," + file + "," + std::to_string(c.seed) + "\n";
    }
  }
  write_text(out / "manifest.csv", csv);
  write_text(out / "config.resolved", c.to_text());
  return images.dataset.size();
}

/// CIFAR-10-layout archive built from random patches of the photos in `photo_dir`.
inline CifarSplits cmd_make_fixture(const std::filesystem::path& photo_dir, const std::filesystem::path& out,
                                    std::int64_t train_count, std::int64_t test_count, std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(photo_dir)) throw IngestionError("photo directory " + photo_dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(photo_dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<cv::Mat> photos;
  for (const auto& f : files) {
    auto m = read_rgb(f);
    if (!m.empty()) photos.push_back(m);
  }
  if (photos.empty()) throw IngestionError("no decodable photos in " + photo_dir.string());
  RandomStream train_rng(seed, "fixture-train");
  RandomStream test_rng(seed, "fixture-test");
  CifarSplits s{make_patch_dataset(photos, train_count, train_rng), make_patch_dataset(photos, test_count, test_rng)};
  prepare_out_dir(out);
  write_cifar10(out, s);
  return s;
}

}  // namespace semnoma
