#pragma once

// Forward diffusion, DDIM reverse sampling and the two-stage refinement of
// decoded images, plus a small unconditional epsilon-prediction UNet.

#include <semnoma/checkpoint.hpp>
#include <semnoma/data.hpp>
#include <semnoma/error.hpp>
#include <semnoma/rng.hpp>

#include <json.hpp>
#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

namespace semnoma {

/// beta_1..beta_T and alpha_bar_0..alpha_bar_T (float64, index 0 holds the
/// t = 0 convention beta = 0, alpha_bar = 1).
struct DiffusionSchedule {
  std::int64_t T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  torch::Tensor beta;
  torch::Tensor alpha_bar;

  static DiffusionSchedule linear(std::int64_t steps = 1000, double beta_start = 1e-4, double beta_end = 0.02) {
    if (steps < 1) throw ConfigError("diffusion schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
      throw ConfigError("diffusion schedule: need 0 < beta_start <= beta_end < 1");
    }
    DiffusionSchedule s;
    s.T = steps;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta = torch::zeros({steps + 1}, torch::kFloat64);
    s.alpha_bar = torch::ones({steps + 1}, torch::kFloat64);
    auto b = s.beta.accessor<double, 1>();
    auto a = s.alpha_bar.accessor<double, 1>();
    for (std::int64_t t = 1; t <= steps; ++t) {
      b[t] = steps == 1 ? beta_start
                        : beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / static_cast<double>(steps - 1);
      a[t] = a[t - 1] * (1.0 - b[t]);
    }
    return s;
  }

  void check(std::int64_t t, const char* what) const {
    if (t < 0 || t > T) {
      throw ConfigError(std::string(what) + ": timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    }
  }

  double beta_at(std::int64_t t) const {
    check(t, "beta");
    return beta[t].item<double>();
  }

  double alpha_bar_at(std::int64_t t) const {
    check(t, "alpha_bar");
    return alpha_bar[t].item<double>();
  }

  /// sqrt(alpha_bar_t): the factor by which diffusing to t contracts an error.
  double contraction(std::int64_t t) const { return std::sqrt(alpha_bar_at(t)); }
};

inline void to_json(nlohmann::json& j, const DiffusionSchedule& s) {
  j = {{"T", s.T}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}, {"kind", "linear"}};
}

inline void from_json(const nlohmann::json& j, DiffusionSchedule& s) {
  if (j.value("kind", "linear") != "linear") throw ConfigError("diffusion schedule: only 'linear' is supported");
  s = DiffusionSchedule::linear(j.at("T").get<std::int64_t>(), j.at("beta_start").get<double>(),
                                j.at("beta_end").get<double>());
}

struct RefineConfig {
  std::int64_t T_prime = 200;
  double eta = 0.5;
  std::int64_t num_steps = 50;

  void validate(const DiffusionSchedule& s) const {
    if (T_prime < 0 || T_prime > s.T) throw ConfigError("refine: T_prime must lie in [0, T]");
    if (eta < 0.0 || eta > 1.0) throw ConfigError("refine: eta must lie in [0, 1]");
    if (T_prime > 0 && (num_steps < 1 || num_steps > T_prime)) {
      throw ConfigError("refine: num_steps must lie in [1, T_prime]");
    }
  }
};

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) zeta, for a scalar t in [0, T].
inline torch::Tensor forward_marginal(const torch::Tensor& x0, std::int64_t t, const torch::Tensor& zeta,
                                      const DiffusionSchedule& s) {
  if (t < 0 || t > s.T) throw ConfigError("forward_marginal: timestep " + std::to_string(t) + " out of range");
  if (zeta.sizes() != x0.sizes()) throw ShapeError("forward_marginal: noise shape differs from x0");
  const double a = s.alpha_bar_at(t);
  return std::sqrt(a) * x0 + std::sqrt(1.0 - a) * zeta;
}

/// Per-sample timesteps t: [B] int64 in [1, T].
inline torch::Tensor forward_marginal(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& zeta,
                                      const DiffusionSchedule& s) {
  if (zeta.sizes() != x0.sizes()) throw ShapeError("forward_marginal: noise shape differs from x0");
  if (t.dim() != 1 || t.size(0) != x0.size(0)) throw ShapeError("forward_marginal: need one timestep per sample");
  if (t.min().item<std::int64_t>() < 0 || t.max().item<std::int64_t>() > s.T) {
    throw ConfigError("forward_marginal: timestep out of range");
  }
  std::vector<std::int64_t> view(static_cast<std::size_t>(x0.dim()), 1);
  view[0] = x0.size(0);
  auto a = s.alpha_bar.index_select(0, t).to(x0.scalar_type()).view(view);
  return torch::sqrt(a) * x0 + torch::sqrt(1.0 - a) * zeta;
}

/// sigma_t^2 = eta * (1 - alpha_bar_prev) / (1 - alpha_bar_t) * beta_t.
inline double ddim_sigma2(std::int64_t t, std::int64_t t_prev, double eta, const DiffusionSchedule& s) {
  const double a = s.alpha_bar_at(t);
  const double ap = s.alpha_bar_at(t_prev);
  return eta * (1.0 - ap) / (1.0 - a) * s.beta_at(t);
}

/// x0 estimate from x_t and a noise prediction.
inline torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps, std::int64_t t,
                                const DiffusionSchedule& s) {
  const double a = s.alpha_bar_at(t);
  return (x_t - std::sqrt(1.0 - a) * eps) / std::sqrt(a);
}

/// One DDIM update x_t -> x_{t_prev} given the noise prediction eps.
inline torch::Tensor ddim_update(const torch::Tensor& x_t, const torch::Tensor& eps, std::int64_t t, std::int64_t t_prev,
                                 double eta, const DiffusionSchedule& s, RandomStream& rng) {
  if (!(t_prev < t)) throw ConfigError("ddim_step: t_prev must be < t");
  if (t < 1 || t > s.T || t_prev < 0) throw ConfigError("ddim_step: timestep out of range");
  const double ap = s.alpha_bar_at(t_prev);
  const double sigma2 = ddim_sigma2(t, t_prev, eta, s);
  double radicand = 1.0 - ap - sigma2;
  if (radicand < 0.0) {
    if (radicand < -1e-12) {
      std::ostringstream msg;
      msg << "ddim_step: negative radicand 1 - alpha_bar_prev - sigma^2 = " << radicand << " at t=" << t
          << ", t_prev=" << t_prev << ", eta=" << eta;
      throw NumericalDomainError(msg.str());
    }
    radicand = 0.0;
  }
  auto x0 = predict_x0(x_t, eps, t, s);
  auto out = std::sqrt(ap) * x0 + std::sqrt(radicand) * eps;
  if (sigma2 > 0.0) out = out + std::sqrt(sigma2) * rng.normal(x_t.sizes(), 1.0, x_t.scalar_type());
  return out;
}

/// Anything callable as eps = f(x_t [B,C,H,W], t [B] int64).
template <typename F>
concept EpsPredictor = requires(F f, const torch::Tensor& x, const torch::Tensor& t) {
  { f(x, t) } -> std::convertible_to<torch::Tensor>;
};

template <EpsPredictor F>
torch::Tensor ddim_step(const torch::Tensor& x_t, std::int64_t t, std::int64_t t_prev, F&& denoiser, double eta,
                        const DiffusionSchedule& s, RandomStream& rng) {
  torch::Tensor eps;
  {
    torch::NoGradGuard guard;
    eps = denoiser(x_t, torch::full({x_t.size(0)}, t, torch::kInt64));
  }
  if (eps.sizes() != x_t.sizes()) throw ShapeError("ddim_step: denoiser output shape differs from input");
  return ddim_update(x_t, eps, t, t_prev, eta, s, rng);
}

/// Decreasing timesteps from t_start to 1 (both included), num_steps entries,
/// uniformly spaced and rounded.
inline std::vector<std::int64_t> ddim_timesteps(std::int64_t t_start, std::int64_t num_steps) {
  if (t_start < 1 || num_steps < 1 || num_steps > t_start) {
    throw ConfigError("ddim_timesteps: need 1 <= num_steps <= t_start");
  }
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < num_steps; ++i) {
    const double v = num_steps == 1 ? static_cast<double>(t_start)
                                    : static_cast<double>(t_start) -
                                          static_cast<double>(i) * static_cast<double>(t_start - 1) /
                                              static_cast<double>(num_steps - 1);
    out.push_back(static_cast<std::int64_t>(std::llround(v)));
  }
  return out;
}

/// Diffuse a coarse estimate in [0,255] to T' and walk back with DDIM.
template <EpsPredictor F>
torch::Tensor refine(const torch::Tensor& x_init, F&& denoiser, const RefineConfig& rc, const DiffusionSchedule& s,
                     RandomStream& rng) {
  rc.validate(s);
  if (rc.T_prime == 0) return x_init.clone();
  auto x = x_init.to(torch::kFloat32) / 127.5 - 1.0;
  x = forward_marginal(x, rc.T_prime, rng.normal(x.sizes(), 1.0, x.scalar_type()), s);
  auto ts = ddim_timesteps(rc.T_prime, rc.num_steps);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    x = ddim_step(x, ts[i], prev, denoiser, rc.eta, s, rng);
  }
  return ((x + 1.0) * 127.5).clamp(0.0, 255.0);
}

struct DenoiserConfig {
  std::int64_t height = 32;
  std::int64_t width = 32;
  std::int64_t channels = 3;
  std::int64_t base = 32;
  std::int64_t groups = 8;

  std::int64_t time_dim() const { return base * 4; }

  void validate() const {
    if (height % 2 != 0 || width % 2 != 0 || height < 2 || width < 2) {
      throw ConfigError("denoiser: resolution must be even");
    }
    if (base < 1 || groups < 1 || base % groups != 0) throw ConfigError("denoiser: base width must be a multiple of groups");
  }
};

inline void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"height", c.height}, {"width", c.width}, {"channels", c.channels}, {"base", c.base}, {"groups", c.groups}};
}

inline void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  c.height = j.at("height");
  c.width = j.at("width");
  c.channels = j.at("channels");
  c.base = j.at("base");
  c.groups = j.at("groups");
  c.validate();
}

/// Sinusoidal embedding of integer timesteps: [B] -> [B, dim].
inline torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim) {
  const auto half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / static_cast<double>(half));
  auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim, std::int64_t groups) {
    norm1 = register_module("norm1", torch::nn::GroupNorm(std::min(groups, in), in));
    conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
    temb = register_module("temb", torch::nn::Linear(time_dim, out));
    norm2 = register_module("norm2", torch::nn::GroupNorm(std::min(groups, out), out));
    conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1)));
    if (in != out) skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t) {
    auto h = conv1(torch::silu(norm1(x)));
    h = h + temb(torch::silu(t)).unsqueeze(-1).unsqueeze(-1);
    h = conv2(torch::silu(norm2(h)));
    return (skip ? skip(x) : x) + h;
  }

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear temb{nullptr};
};
TORCH_MODULE(ResBlock);

/// Two-level UNet: 32 -> 16 -> 32 with skip connections at both levels.
class DenoiserNetImpl : public torch::nn::Module {
 public:
  explicit DenoiserNetImpl(DenoiserConfig cfg = {}, std::uint64_t init_seed = 0) : cfg_(cfg) {
    cfg_.validate();
    const auto c = cfg_.base;
    const auto td = cfg_.time_dim();
    const auto g = cfg_.groups;
    time1 = register_module("time1", torch::nn::Linear(c, td));
    time2 = register_module("time2", torch::nn::Linear(td, td));
    conv_in = register_module("conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.channels, c, 3).padding(1)));
    down_block = register_module("down_block", ResBlock(c, c, td, g));
    down = register_module("down", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).stride(2).padding(1)));
    low_block = register_module("low_block", ResBlock(c, 2 * c, td, g));
    mid_block = register_module("mid_block", ResBlock(2 * c, 2 * c, td, g));
    low_up_block = register_module("low_up_block", ResBlock(4 * c, 2 * c, td, g));
    up = register_module("up", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * c, 2 * c, 3).padding(1)));
    up_block = register_module("up_block", ResBlock(3 * c, c, td, g));
    norm_out = register_module("norm_out", torch::nn::GroupNorm(std::min(g, c), c));
    conv_out = register_module("conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, cfg_.channels, 3).padding(1)));
    initialize(init_seed);
  }

  const DenoiserConfig& config() const { return cfg_; }
  bool trained() const { return trained_; }
  void mark_trained(bool v = true) { trained_ = v; }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t) {
    if (x.dim() != 4 || x.size(1) != cfg_.channels || x.size(2) != cfg_.height || x.size(3) != cfg_.width) {
      throw ShapeError("denoiser: expected B x " + std::to_string(cfg_.channels) + " x " +
                       std::to_string(cfg_.height) + " x " + std::to_string(cfg_.width) + " input");
    }
    auto temb = time2(torch::silu(time1(timestep_embedding(t, cfg_.base))));
    auto h0 = conv_in(x);
    auto h1 = down_block(h0, temb);
    auto h2 = low_block(down(h1), temb);
    auto m = mid_block(h2, temb);
    auto u = low_up_block(torch::cat({m, h2}, 1), temb);
    u = up(torch::nn::functional::interpolate(
        u, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
    u = up_block(torch::cat({u, h1}, 1), temb);
    return conv_out(torch::silu(norm_out(u)));
  }

  torch::nn::Linear time1{nullptr}, time2{nullptr};
  torch::nn::Conv2d conv_in{nullptr}, down{nullptr}, up{nullptr}, conv_out{nullptr};
  ResBlock down_block{nullptr}, low_block{nullptr}, mid_block{nullptr}, low_up_block{nullptr}, up_block{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};

 private:
  void initialize(std::uint64_t seed) {
    RandomStream rng(seed, "denoiser-init");
    torch::NoGradGuard guard;
    for (auto& item : named_parameters()) {
      const auto& name = item.key();
      auto& p = item.value();
      if (name.find("norm") != std::string::npos) {
        p.fill_(name.ends_with("weight") ? 1.0 : 0.0);
      } else if (name.ends_with("bias")) {
        p.zero_();
      } else if (name.starts_with("conv_out") || name.ends_with("conv2.weight")) {
        p.zero_();
      } else {
        const auto fan_in = p.numel() / p.size(0);
        p.copy_(rng.normal(p.sizes(), 1.0 / std::sqrt(static_cast<double>(fan_in))));
      }
    }
  }

  DenoiserConfig cfg_;
  bool trained_ = false;
};
TORCH_MODULE(DenoiserNet);

/// Refinement with a network; refuses a denoiser that was never trained.
inline torch::Tensor refine(const torch::Tensor& x_init, DenoiserNet& net, const RefineConfig& rc,
                            const DiffusionSchedule& s, RandomStream& rng) {
  if (!net->trained()) throw ConfigError("refine: denoiser has not been trained (load a trained checkpoint)");
  net->eval();
  return refine(x_init, [&](const torch::Tensor& x, const torch::Tensor& t) { return net->forward(x, t); }, rc, s, rng);
}

/// Flattens N per-user [B,3,H,W] batches into one (N*B) batch, refines, and
/// splits back per user.
inline std::vector<torch::Tensor> refine_users(const std::vector<torch::Tensor>& per_user, DenoiserNet& net,
                                               const RefineConfig& rc, const DiffusionSchedule& s, RandomStream& rng) {
  if (per_user.empty()) return {};
  auto flat = torch::cat(per_user, 0);
  auto out = refine(flat, net, rc, s, rng);
  std::vector<torch::Tensor> split;
  std::int64_t start = 0;
  for (const auto& u : per_user) {
    split.push_back(out.narrow(0, start, u.size(0)));
    start += u.size(0);
  }
  return split;
}

struct DenoiserTrainConfig {
  std::int64_t steps = 2000;
  std::int64_t batch_size = 32;
  double lr = 2e-4;
  double weight_decay = 0.0;
  std::int64_t eval_every = 0;     // 0 = only at the end
  std::int64_t eval_samples = 256;
  std::uint64_t seed = 0;
};

struct DenoiserStep {
  std::int64_t step = 0;
  double loss = 0.0;
  double eval_loss = 0.0;  // NaN when not evaluated at this step
};

struct DenoiserResult {
  DenoiserNet net{nullptr};
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  std::vector<DenoiserStep> history;
};

/// Images in [0,255] -> [-1,1].
inline torch::Tensor to_diffusion_domain(const torch::Tensor& images255) { return images255.to(torch::kFloat32) / 127.5 - 1.0; }

/// Mean epsilon-prediction MSE over a fixed set of (image, t, noise) draws
/// determined by `seed`; deterministic for fixed weights.
inline double denoiser_eval_loss(DenoiserNet& net, const Dataset& data, const DiffusionSchedule& s, std::uint64_t seed,
                                 std::int64_t samples = 256, std::int64_t batch = 64) {
  torch::NoGradGuard guard;
  const bool was_training = net->is_training();
  net->eval();
  RandomStream rng(seed, "denoiser-eval");
  samples = std::min(samples, data.size());
  double total = 0.0;
  for (std::int64_t start = 0; start < samples; start += batch) {
    const auto len = std::min(batch, samples - start);
    auto x0 = to_diffusion_domain(data.images.narrow(0, start, len));
    auto t = rng.randint(1, s.T + 1, {len});
    auto eps = rng.normal(x0.sizes());
    auto pred = net->forward(forward_marginal(x0, t, eps, s), t);
    total += (pred - eps).pow(2).mean().item<double>() * static_cast<double>(len);
  }
  if (was_training) net->train();
  return total / static_cast<double>(samples);
}

using DenoiserCallback = std::function<void(const DenoiserStep&)>;

/// Epsilon-prediction training: uniform t in [1, T], standard-normal noise, MSE.
inline DenoiserResult train_denoiser(const Dataset& data, const DiffusionSchedule& s, const DenoiserConfig& dc,
                                     const DenoiserTrainConfig& tc, const DenoiserCallback& on_step = {}) {
  if (data.size() == 0) throw ConfigError("train_denoiser: empty dataset");
  if (data.height() != dc.height || data.width() != dc.width) throw ShapeError("train_denoiser: dataset resolution differs from denoiser");
  DenoiserResult r;
  r.net = DenoiserNet(dc, derive_seed(tc.seed, "denoiser-init"));
  auto& net = r.net;
  const auto eval_seed = derive_seed(tc.seed, "denoiser-eval");
  r.initial_eval_loss = denoiser_eval_loss(net, data, s, eval_seed, tc.eval_samples);
  RandomStream rng(tc.seed, "diffusion");
  torch::optim::AdamW opt(net->parameters(), torch::optim::AdamWOptions(tc.lr).weight_decay(tc.weight_decay));
  net->train();
  const auto batch = std::min(tc.batch_size, data.size());
  for (std::int64_t step = 1; step <= tc.steps; ++step) {
    auto idx = rng.randint(0, data.size(), {batch});
    auto x0 = to_diffusion_domain(data.images.index_select(0, idx));
    auto t = rng.randint(1, s.T + 1, {batch});
    auto eps = rng.normal(x0.sizes());
    auto loss = (net->forward(forward_marginal(x0, t, eps, s), t) - eps).pow(2).mean();
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      throw NonFiniteLossError("non-finite denoiser loss at step " + std::to_string(step));
    }
    opt.zero_grad();
    loss.backward();
    opt.step();
    DenoiserStep rec{step, value, std::nan("")};
    if ((tc.eval_every > 0 && step % tc.eval_every == 0) || step == tc.steps) {
      rec.eval_loss = denoiser_eval_loss(net, data, s, eval_seed, tc.eval_samples);
    }
    r.history.push_back(rec);
    if (on_step) on_step(rec);
  }
  r.final_eval_loss = tc.steps > 0 ? r.history.back().eval_loss : r.initial_eval_loss;
  net->mark_trained();
  net->eval();
  return r;
}

inline void save_denoiser(const std::filesystem::path& path, const DenoiserNet& net, const DiffusionSchedule& s,
                          const nlohmann::json& metadata = {}) {
  CheckpointFile ck;
  ck.kind = "semnoma-denoiser";
  ck.config = {{"denoiser", net->config()}, {"schedule", s}, {"trained", net->trained()}};
  ck.metadata = metadata.is_null() ? nlohmann::json::object() : metadata;
  ck.tensors = module_state(*net);
  write_checkpoint(path, ck);
}

struct LoadedDenoiser {
  DenoiserNet net{nullptr};
  DiffusionSchedule schedule;
  nlohmann::json metadata;
};

inline LoadedDenoiser load_denoiser(const std::filesystem::path& path) {
  auto ck = read_checkpoint(path);
  if (ck.kind != "semnoma-denoiser") throw CheckpointError(path.string() + " holds a '" + ck.kind + "', not a denoiser");
  LoadedDenoiser out;
  DenoiserConfig dc;
  try {
    dc = ck.config.at("denoiser").get<DenoiserConfig>();
    out.schedule = ck.config.at("schedule").get<DiffusionSchedule>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": bad denoiser config: " + e.what());
  }
  out.net = DenoiserNet(dc, 0);
  load_module_state(*out.net, ck);
  out.net->mark_trained(ck.config.value("trained", false));
  out.net->eval();
  out.metadata = ck.metadata;
  return out;
}

}  // namespace semnoma
