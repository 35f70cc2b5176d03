#pragma once

// Two-stage knowledge distillation: an orthogonal-transmission teacher, then a
// NOMA student trained with restoration (MAE), feature-affinity (FA) and
// cross-head (CrossKD) losses.

#include <semnoma/channel.hpp>
#include <semnoma/checkpoint.hpp>
#include <semnoma/data.hpp>
#include <semnoma/error.hpp>
#include <semnoma/metrics.hpp>
#include <semnoma/model.hpp>
#include <semnoma/rng.hpp>

#include <torch/torch.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace semnoma {

enum class AffinityNorm { squared, unit };

inline std::string to_string(AffinityNorm n) { return n == AffinityNorm::squared ? "squared" : "unit"; }

inline AffinityNorm parse_affinity_norm(const std::string& s) {
  if (s == "squared") return AffinityNorm::squared;
  if (s == "unit") return AffinityNorm::unit;
  throw ConfigError("unknown affinity_norm '" + s + "' (expected squared or unit)");
}

inline constexpr double kAffinityEps = 1e-8;

/// Spatial affinity A = f~^T f~ over the channel axis, where each spatial column
/// of f is divided by its squared L2 norm (or its L2 norm for `unit`).
/// f: [B, C, H, W] -> [B, HW, HW].
inline torch::Tensor affinity(const torch::Tensor& f, AffinityNorm norm = AffinityNorm::squared) {
  if (f.dim() != 4) throw ShapeError("affinity expects a B x C x H x W feature map");
  auto flat = f.flatten(2);
  auto sq = flat.pow(2).sum(1, true);
  auto denom = (norm == AffinityNorm::squared ? sq : torch::sqrt(sq)) + kAffinityEps;
  auto normalized = flat / denom;
  return torch::bmm(normalized.transpose(1, 2), normalized);
}

/// Sum over users of the mean absolute affinity difference over the selected
/// layers. Teacher features are detached.
inline torch::Tensor fa_loss(const std::vector<std::vector<torch::Tensor>>& student,
                             const std::vector<std::vector<torch::Tensor>>& teacher,
                             AffinityNorm norm = AffinityNorm::squared) {
  if (student.size() != teacher.size() || student.empty()) throw ShapeError("fa_loss: user count mismatch");
  torch::Tensor total;
  for (std::size_t i = 0; i < student.size(); ++i) {
    if (student[i].size() != teacher[i].size()) throw ShapeError("fa_loss: layer count mismatch");
    for (std::size_t l = 0; l < student[i].size(); ++l) {
      if (student[i][l].sizes() != teacher[i][l].sizes()) throw ShapeError("fa_loss: feature shape mismatch");
      auto term = (affinity(student[i][l], norm) - affinity(teacher[i][l].detach(), norm)).abs().mean();
      total = total.defined() ? total + term : term;
    }
  }
  return total;
}

/// Per-user mean absolute error, summed over users.
inline torch::Tensor mae_loss(const std::vector<torch::Tensor>& pred, const std::vector<torch::Tensor>& target) {
  if (pred.size() != target.size() || pred.empty()) throw ShapeError("mae_loss: user count mismatch");
  torch::Tensor total;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].sizes() != target[i].sizes()) throw ShapeError("mae_loss: image shape mismatch");
    auto term = (pred[i] - target[i]).abs().mean();
    total = total.defined() ? total + term : term;
  }
  return total;
}

/// Cross-head restorations against the teacher's own restorations (detached).
inline torch::Tensor crosskd_loss(const std::vector<torch::Tensor>& cross, const std::vector<torch::Tensor>& teacher) {
  std::vector<torch::Tensor> detached;
  for (const auto& t : teacher) detached.push_back(t.detach());
  return mae_loss(cross, detached);
}

/// Routes the student's layer-j decoder feature through layers j+1.. of a
/// (frozen) teacher decoder.
inline torch::Tensor crosskd_restore(const torch::Tensor& student_feature_j, LayerStack& teacher_decoder,
                                     std::int64_t j, const torch::Tensor& side) {
  if (j < 0 || j >= teacher_decoder->size()) {
    throw ConfigError("CrossKD layer " + std::to_string(j) + " outside decoder depth [0, " +
                      std::to_string(teacher_decoder->size() - 1) + "]");
  }
  return teacher_decoder->run_from(j, student_feature_j, side);
}

struct DistillConfig {
  double lambda_mae = 10.0;
  double lambda_fa = 100.0;
  double lambda_crosskd = 1.0;
  std::int64_t crosskd_layer = 4;
  std::vector<std::int64_t> fa_layers{0};  // 0 = decoder input
  AffinityNorm affinity_norm = AffinityNorm::squared;

  /// CrossKD layer 4 (after the first upsampler) for AWGN, 2 (first AF-Module) for Rayleigh.
  static DistillConfig for_channel(ChannelKind kind) {
    DistillConfig d;
    d.crosskd_layer = kind == ChannelKind::awgn ? 4 : 2;
    return d;
  }

  void validate(std::int64_t decoder_layers) const {
    if (lambda_mae < 0 || lambda_fa < 0 || lambda_crosskd < 0) throw ConfigError("distill: lambdas must be >= 0");
    if (crosskd_layer < 0 || crosskd_layer >= decoder_layers) {
      throw ConfigError("distill: crosskd_layer " + std::to_string(crosskd_layer) + " outside [0, " +
                        std::to_string(decoder_layers - 1) + "]");
    }
    for (auto l : fa_layers) {
      if (l < 0 || l > decoder_layers) throw ConfigError("distill: fa layer " + std::to_string(l) + " out of range");
    }
  }
};

struct TrainConfig {
  ChannelKind channel = ChannelKind::awgn;
  double gamma_lo = 0.0;
  double gamma_hi = 20.0;
  std::int64_t batch_size = 32;
  std::int64_t max_epochs = 100;
  std::int64_t patience = 10;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::int64_t samples_per_epoch = 0;  // 0 = dataset size
  std::int64_t max_steps = 0;          // 0 = no cap
  std::int64_t val_batch_size = 64;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  std::int64_t epoch = 0;
  std::int64_t steps = 0;
  double mae = 0.0;
  double fa = 0.0;
  double crosskd = 0.0;
  double total = 0.0;
  double val_psnr = 0.0;
  double val_ssim = 0.0;
};

struct TrainResult {
  SemNoma model{nullptr};
  std::vector<EpochRecord> history;
  std::int64_t best_epoch = 0;
  double best_val_psnr = -std::numeric_limits<double>::infinity();
  std::int64_t steps = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

struct EvalResult {
  std::vector<double> psnr_per_user;
  std::vector<double> ssim_per_user;
  double psnr_mean = 0.0;
  double ssim_mean = 0.0;
  std::int64_t images_per_user = 0;
};

struct EvalOptions {
  ChannelKind channel = ChannelKind::awgn;
  double gamma_lo = 10.0;
  double gamma_hi = 10.0;
  Transmission mode = Transmission::noma;
  std::int64_t batch_size = 64;
  std::uint64_t seed = 0;
  std::int64_t max_batches = 0;  // 0 = whole test stream
};

/// Receives (source images, reconstructions) per user for every evaluated batch.
using EvalSink = std::function<void(const std::vector<torch::Tensor>&, const std::vector<torch::Tensor>&)>;

/// Runs the grouped test stream through the codec in evaluation mode and
/// averages per-image PSNR/SSIM for each user.
inline EvalResult evaluate_codec(SemNoma& model, const Dataset& test, const EvalOptions& o, const EvalSink& sink = {}) {
  torch::NoGradGuard guard;
  const bool was_training = model->is_training();
  model->eval();
  const auto n = model->config().num_users;
  auto grouping = group_test(test, n, o.batch_size);
  RandomStream chan(o.seed, "eval-channel");
  EvalResult r;
  r.psnr_per_user.assign(static_cast<std::size_t>(n), 0.0);
  r.ssim_per_user.assign(static_cast<std::size_t>(n), 0.0);
  std::int64_t count = 0;
  std::int64_t used = 0;
  for (const auto& idx : grouping.batches) {
    if (o.max_batches > 0 && used++ >= o.max_batches) break;
    auto batch = materialize(test, idx);
    auto states = sample_channel_batch(o.channel, n, batch.batch(), o.gamma_lo, o.gamma_hi, chan, model->config().p_avg);
    auto images = batch.per_user();
    auto out = model->forward(images, states, o.mode, chan);
    for (std::int64_t i = 0; i < n; ++i) {
      auto p = psnr_per_image(out.images[static_cast<std::size_t>(i)], images[static_cast<std::size_t>(i)]);
      auto s = ssim_per_image(out.images[static_cast<std::size_t>(i)], images[static_cast<std::size_t>(i)]);
      for (double v : p) r.psnr_per_user[static_cast<std::size_t>(i)] += v;
      for (double v : s) r.ssim_per_user[static_cast<std::size_t>(i)] += v;
    }
    count += batch.batch();
    if (sink) sink(images, out.images);
  }
  if (count == 0) throw ConfigError("evaluate: empty test stream");
  for (std::int64_t i = 0; i < n; ++i) {
    r.psnr_per_user[static_cast<std::size_t>(i)] /= static_cast<double>(count);
    r.ssim_per_user[static_cast<std::size_t>(i)] /= static_cast<double>(count);
    r.psnr_mean += r.psnr_per_user[static_cast<std::size_t>(i)] / static_cast<double>(n);
    r.ssim_mean += r.ssim_per_user[static_cast<std::size_t>(i)] / static_cast<double>(n);
  }
  r.images_per_user = count;
  if (was_training) model->train();
  return r;
}

namespace detail {

inline std::vector<torch::Tensor> snapshot(const torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
  return out;
}

inline void restore(torch::nn::Module& m, const std::vector<torch::Tensor>& saved) {
  torch::NoGradGuard guard;
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(saved[i]);
}

inline std::vector<torch::Tensor> scaled(const std::vector<torch::Tensor>& images) {
  std::vector<torch::Tensor> out;
  for (const auto& x : images) out.push_back(x / 255.0);
  return out;
}

inline std::vector<std::vector<torch::Tensor>> pick_layers(const std::vector<std::vector<torch::Tensor>>& feats,
                                                           const std::vector<std::int64_t>& layers) {
  std::vector<std::vector<torch::Tensor>> out;
  for (const auto& per_user : feats) {
    std::vector<torch::Tensor> sel;
    for (auto l : layers) sel.push_back(per_user.at(static_cast<std::size_t>(l)));
    out.push_back(std::move(sel));
  }
  return out;
}

/// Loss weights plus the optional frozen teacher of one training run.
struct Objective {
  Transmission mode = Transmission::noma;
  double mae_weight = 1.0;
  SemNoma* teacher = nullptr;
  const DistillConfig* distill = nullptr;
};

struct BatchLosses {
  torch::Tensor total;
  double mae = 0.0;
  double fa = 0.0;
  double crosskd = 0.0;
};

inline BatchLosses batch_losses(SemNoma& model, const Objective& obj, const std::vector<torch::Tensor>& images,
                                const ChannelBatch& states, std::uint64_t noise_seed) {
  BatchLosses r;
  RandomStream noise(noise_seed);
  const bool distill = obj.teacher != nullptr;
  auto out = model->forward(images, states, obj.mode, noise, distill);
  auto targets = scaled(images);
  auto mae = mae_loss(scaled(out.images), targets);
  r.mae = mae.item<double>();
  r.total = obj.mae_weight * mae;
  if (!distill) return r;

  const auto& cfg = *obj.distill;
  SemNoma& teacher = *obj.teacher;
  CodecOutput tout;
  {
    torch::NoGradGuard guard;
    RandomStream teacher_noise(noise_seed);
    tout = teacher->forward(images, states, Transmission::orthogonal, teacher_noise, true);
  }
  auto fa_term = [&] {
    return fa_loss(pick_layers(out.features, cfg.fa_layers), pick_layers(tout.features, cfg.fa_layers),
                   cfg.affinity_norm);
  };
  auto crosskd_term = [&] {
    std::vector<torch::Tensor> cross;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(images.size()); ++i) {
      const auto u = static_cast<std::size_t>(i);
      cross.push_back(crosskd_restore(out.features[u].at(static_cast<std::size_t>(cfg.crosskd_layer)),
                                      teacher->decoder(i), cfg.crosskd_layer, out.side[u]) /
                      255.0);
    }
    return crosskd_loss(cross, scaled(tout.images));
  };
  // Zero-weighted terms stay out of the graph so the update equals plain training.
  if (cfg.lambda_fa > 0.0) {
    auto fa = fa_term();
    r.fa = fa.item<double>();
    r.total = r.total + cfg.lambda_fa * fa;
  } else {
    torch::NoGradGuard guard;
    r.fa = fa_term().item<double>();
  }
  if (cfg.lambda_crosskd > 0.0) {
    auto ckd = crosskd_term();
    r.crosskd = ckd.item<double>();
    r.total = r.total + cfg.lambda_crosskd * ckd;
  } else {
    torch::NoGradGuard guard;
    r.crosskd = crosskd_term().item<double>();
  }
  return r;
}

inline TrainResult fit(SemNoma model, const Objective& obj, const Dataset& train, const Dataset& val,
                       const TrainConfig& tc, const EpochCallback& on_epoch) {
  const auto& cc = model->config();
  if (tc.batch_size < 1 || tc.max_epochs < 1) throw ConfigError("train: batch_size and max_epochs must be positive");
  model->train();
  model->seed_dropout(derive_seed(tc.seed, "dropout"));
  RandomStream data_rng(tc.seed, "data");
  RandomStream chan_rng(tc.seed, "channel");
  std::vector<torch::Tensor> trainable;
  for (auto& p : model->parameters()) {
    if (p.requires_grad()) trainable.push_back(p);
  }
  torch::optim::AdamW opt(trainable, torch::optim::AdamWOptions(tc.lr).weight_decay(tc.weight_decay));

  EvalOptions eo;
  eo.channel = tc.channel;
  eo.gamma_lo = tc.gamma_lo;
  eo.gamma_hi = tc.gamma_hi;
  eo.mode = obj.mode;
  eo.batch_size = tc.val_batch_size;
  eo.seed = derive_seed(tc.seed, "validation");

  TrainResult result;
  std::vector<torch::Tensor> best = snapshot(*model);
  std::int64_t stale = 0;
  bool budget_spent = false;
  for (std::int64_t epoch = 1; epoch <= tc.max_epochs && !budget_spent; ++epoch) {
    auto plan = group_train(train, cc.num_users, tc.batch_size, data_rng, tc.samples_per_epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    double total = 0.0;
    std::int64_t batches = 0;
    for (const auto& idx : plan) {
      auto batch = materialize(train, idx);
      auto states = sample_channel_batch(tc.channel, cc.num_users, batch.batch(), tc.gamma_lo, tc.gamma_hi, chan_rng, cc.p_avg);
      const auto noise_seed = chan_rng.next_seed();
      auto losses = batch_losses(model, obj, batch.per_user(), states, noise_seed);
      const double value = losses.total.item<double>();
      if (!std::isfinite(value) || !std::isfinite(losses.fa) || !std::isfinite(losses.crosskd)) {
        std::ostringstream msg;
        msg << "non-finite training loss at epoch " << epoch << ", step " << result.steps + 1 << ": total=" << value
            << " mae=" << losses.mae << " fa=" << losses.fa << " crosskd=" << losses.crosskd;
        throw NonFiniteLossError(msg.str());
      }
      opt.zero_grad();
      losses.total.backward();
      opt.step();
      ++result.steps;
      ++batches;
      rec.mae += losses.mae;
      rec.fa += losses.fa;
      rec.crosskd += losses.crosskd;
      total += value;
      if (tc.max_steps > 0 && result.steps >= tc.max_steps) {
        budget_spent = true;
        break;
      }
    }
    if (batches > 0) {
      rec.mae /= static_cast<double>(batches);
      rec.fa /= static_cast<double>(batches);
      rec.crosskd /= static_cast<double>(batches);
      rec.total = total / static_cast<double>(batches);
    }
    rec.steps = result.steps;
    if (val.size() >= cc.num_users) {
      auto ev = evaluate_codec(model, val, eo);
      rec.val_psnr = ev.psnr_mean;
      rec.val_ssim = ev.ssim_mean;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.val_psnr > result.best_val_psnr) {
      result.best_val_psnr = rec.val_psnr;
      result.best_epoch = epoch;
      best = snapshot(*model);
      stale = 0;
    } else if (++stale >= tc.patience) {
      break;
    }
  }
  restore(*model, best);
  model->eval();
  result.model = model;
  return result;
}

}  // namespace detail

/// Trains a codec end-to-end over orthogonal (interference-free) transmission
/// with the MAE objective; returns the best-validation weights in eval mode.
inline TrainResult train_teacher(const Dataset& train, const Dataset& val, const CodecConfig& cfg,
                                 const TrainConfig& tc, const EpochCallback& on_epoch = {}) {
  SemNoma model(cfg, derive_seed(tc.seed, "init"));
  detail::Objective obj;
  obj.mode = Transmission::orthogonal;
  return detail::fit(model, obj, train, val, tc, on_epoch);
}

/// Plain supervised SemNOMA training (NOMA channel, mae_weight * MAE), starting
/// from the weights of `init`.
inline TrainResult train_semnoma(const Dataset& train, const Dataset& val, const SemNoma& init, const TrainConfig& tc,
                                 double mae_weight = 1.0, const EpochCallback& on_epoch = {}) {
  auto model = clone_codec(init);
  for (auto& p : model->parameters()) p.set_requires_grad(true);
  detail::Objective obj;
  obj.mode = Transmission::noma;
  obj.mae_weight = mae_weight;
  return detail::fit(model, obj, train, val, tc, on_epoch);
}

/// Student initialized from the teacher's weights and trained over the NOMA
/// channel with lambda_mae*MAE + lambda_fa*FA + lambda_crosskd*CrossKD. The
/// teacher is frozen (eval mode, no gradients) and sees the same images,
/// channel draws and noise seeds over orthogonal transmission.
inline TrainResult train_student(const Dataset& train, const Dataset& val, SemNoma& teacher, const DistillConfig& dc,
                                 const TrainConfig& tc, const EpochCallback& on_epoch = {}) {
  dc.validate(teacher->decoder(0)->size());
  teacher->freeze();
  auto student = clone_codec(teacher);
  for (auto& p : student->parameters()) p.set_requires_grad(true);
  detail::Objective obj;
  obj.mode = Transmission::noma;
  obj.mae_weight = dc.lambda_mae;
  obj.teacher = &teacher;
  obj.distill = &dc;
  return detail::fit(student, obj, train, val, tc, on_epoch);
}

/// Codec checkpoint: named weights + codec config + free-form training metadata.
inline void save_codec(const std::filesystem::path& path, const SemNoma& model, const nlohmann::json& metadata = {}) {
  CheckpointFile ck;
  ck.kind = "semnoma-codec";
  ck.config = model->config();
  ck.metadata = metadata.is_null() ? nlohmann::json::object() : metadata;
  ck.tensors = module_state(*model);
  write_checkpoint(path, ck);
}

struct LoadedCodec {
  SemNoma model{nullptr};
  nlohmann::json metadata;
};

inline LoadedCodec load_codec(const std::filesystem::path& path) {
  auto ck = read_checkpoint(path);
  if (ck.kind != "semnoma-codec") throw CheckpointError(path.string() + " holds a '" + ck.kind + "', not a codec");
  CodecConfig cfg;
  try {
    cfg = ck.config.get<CodecConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": bad codec config: " + e.what());
  }
  SemNoma model(cfg, 0);
  load_module_state(*model, ck);
  model->eval();
  return {model, ck.metadata};
}

}  // namespace semnoma
