#pragma once

// ConvNeXt-style joint source-channel codec with channel-adaptive feature
// modulation (AF-Module), assembled as SemNOMA: one encoder shared by all
// users plus per-user input embeddings, and one decoder per user.

#include <semnoma/channel.hpp>
#include <semnoma/error.hpp>
#include <semnoma/rng.hpp>

#include <json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

namespace semnoma {

enum class AfPlacement { none, before_stage, after_stage };

inline std::string to_string(AfPlacement p) {
  switch (p) {
    case AfPlacement::none: return "none";
    case AfPlacement::before_stage: return "before";
    case AfPlacement::after_stage: return "after";
  }
  return "none";
}

inline AfPlacement parse_af_placement(const std::string& s) {
  if (s == "none") return AfPlacement::none;
  if (s == "before") return AfPlacement::before_stage;
  if (s == "after") return AfPlacement::after_stage;
  throw ConfigError("unknown AF-Module placement '" + s + "' (expected none, before or after)");
}

struct Ratio {
  std::int64_t num = 0;
  std::int64_t den = 1;

  friend bool operator==(const Ratio&, const Ratio&) = default;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
};

struct CodecConfig {
  std::int64_t height = 32;
  std::int64_t width = 32;
  std::vector<std::int64_t> stage_depths{3, 3};
  std::vector<std::int64_t> stage_dims{96, 192};
  std::int64_t out_channels = 16;  // M
  double drop_path_rate = 0.1;
  std::int64_t num_users = 2;
  std::int64_t side_info_dim = 3;
  AfPlacement encoder_af = AfPlacement::after_stage;
  AfPlacement decoder_af = AfPlacement::before_stage;
  double af_dropout = 0.1;
  double p_avg = 1.0;
  // SNR range used to min-max normalize gamma inside the side information.
  double gamma_lo = 0.0;
  double gamma_hi = 20.0;

  std::int64_t stages() const { return static_cast<std::int64_t>(stage_dims.size()); }
  // Stem halves the resolution, each further stage transition halves it again.
  std::int64_t latent_height() const { return height >> stages(); }
  std::int64_t latent_width() const { return width >> stages(); }
  std::int64_t symbols_per_image() const {
    return out_channels * latent_height() * latent_width() / 2;
  }
  std::int64_t source_dims() const { return 3 * height * width; }

  /// Bandwidth compression ratio k/m in lowest terms.
  Ratio compression_ratio() const {
    const auto k = symbols_per_image();
    const auto m = source_dims();
    const auto g = std::gcd(k, m);
    return {k / g, m / g};
  }

  void validate() const {
    if (stage_dims.empty() || stage_dims.size() != stage_depths.size()) {
      throw ConfigError("codec: stage_dims and stage_depths must be non-empty and equal length");
    }
    for (auto d : stage_dims) {
      if (d <= 0) throw ConfigError("codec: stage dims must be positive");
    }
    for (auto d : stage_depths) {
      if (d < 0) throw ConfigError("codec: stage depths must be non-negative");
    }
    const std::int64_t factor = std::int64_t{1} << stages();
    if (height <= 0 || width <= 0 || height % factor != 0 || width % factor != 0) {
      throw ConfigError("codec: resolution " + std::to_string(height) + "x" +
                        std::to_string(width) + " not divisible by " + std::to_string(factor));
    }
    if (out_channels <= 0 || (out_channels * latent_height() * latent_width()) % 2 != 0) {
      throw ConfigError("codec: M*H''*W'' must be a positive even number");
    }
    if (num_users < 1) throw ConfigError("codec: num_users must be >= 1");
    if (side_info_dim != 3) throw ConfigError("codec: side_info_dim must be 3 (gamma, a, phi)");
    if (drop_path_rate < 0.0 || drop_path_rate > 1.0) throw ConfigError("codec: drop_path_rate outside [0,1]");
    if (af_dropout < 0.0 || af_dropout >= 1.0) throw ConfigError("codec: af_dropout outside [0,1)");
    if (!(p_avg > 0.0)) throw ConfigError("codec: p_avg must be positive");
  }

  /// 3x32x32 layout: dims [96,192], depths [3,3]; M=16 gives rho=1/6, M=32 gives 1/3.
  static CodecConfig cifar32(std::int64_t m = 16) {
    CodecConfig c;
    c.out_channels = m;
    return c;
  }

  /// 3x256x256 layout: dims [96,192,384,768], depths [2,2,6,2], M=32 (rho=1/48).
  static CodecConfig ffhq256(std::int64_t m = 32) {
    CodecConfig c;
    c.height = c.width = 256;
    c.stage_dims = {96, 192, 384, 768};
    c.stage_depths = {2, 2, 6, 2};
    c.out_channels = m;
    return c;
  }

  /// Reduced-width 32x32 codec for desk-scale runs; same k and rho as cifar32(m).
  static CodecConfig tiny32(std::int64_t m = 16) {
    CodecConfig c;
    c.stage_dims = {32, 64};
    c.stage_depths = {1, 1};
    c.out_channels = m;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const CodecConfig& c) {
  j = {{"height", c.height},
       {"width", c.width},
       {"stage_depths", c.stage_depths},
       {"stage_dims", c.stage_dims},
       {"out_channels", c.out_channels},
       {"drop_path_rate", c.drop_path_rate},
       {"num_users", c.num_users},
       {"side_info_dim", c.side_info_dim},
       {"encoder_af", to_string(c.encoder_af)},
       {"decoder_af", to_string(c.decoder_af)},
       {"af_dropout", c.af_dropout},
       {"p_avg", c.p_avg},
       {"gamma_lo", c.gamma_lo},
       {"gamma_hi", c.gamma_hi}};
}

inline void from_json(const nlohmann::json& j, CodecConfig& c) {
  j.at("height").get_to(c.height);
  j.at("width").get_to(c.width);
  j.at("stage_depths").get_to(c.stage_depths);
  j.at("stage_dims").get_to(c.stage_dims);
  j.at("out_channels").get_to(c.out_channels);
  j.at("drop_path_rate").get_to(c.drop_path_rate);
  j.at("num_users").get_to(c.num_users);
  j.at("side_info_dim").get_to(c.side_info_dim);
  c.encoder_af = parse_af_placement(j.at("encoder_af").get<std::string>());
  c.decoder_af = parse_af_placement(j.at("decoder_af").get<std::string>());
  j.at("af_dropout").get_to(c.af_dropout);
  j.at("p_avg").get_to(c.p_avg);
  j.at("gamma_lo").get_to(c.gamma_lo);
  j.at("gamma_hi").get_to(c.gamma_hi);
}

/// Shared handle to the stream that drives stochastic depth and dropout.
struct RngSlot {
  RandomStream stream{0};
};
using RngSlotPtr = std::shared_ptr<RngSlot>;

/// Stochastic depth: zeroes the residual branch per sample with probability p
/// while training and rescales survivors by 1/(1-p).
inline torch::Tensor drop_path(const torch::Tensor& x, double p, bool training, RandomStream& rng) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) return torch::zeros_like(x);
  std::vector<std::int64_t> shape(static_cast<std::size_t>(x.dim()), 1);
  shape[0] = x.size(0);
  const double keep = 1.0 - p;
  auto mask = rng.bernoulli(shape, keep, x.scalar_type());
  return x * mask / keep;
}

inline torch::Tensor dropout(const torch::Tensor& x, double p, bool training, RandomStream& rng) {
  if (!training || p <= 0.0) return x;
  const double keep = 1.0 - p;
  return x * rng.bernoulli(x.sizes(), keep, x.scalar_type()) / keep;
}

/// LayerNorm over the channel axis of an NCHW tensor.
class LayerNorm2dImpl : public torch::nn::Module {
 public:
  explicit LayerNorm2dImpl(std::int64_t channels) : channels_(channels) {
    weight = register_parameter("weight", torch::ones({channels}));
    bias = register_parameter("bias", torch::zeros({channels}));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    if (x.size(1) != channels_) throw ShapeError("LayerNorm2d: channel mismatch");
    auto y = torch::layer_norm(x.permute({0, 2, 3, 1}), {channels_}, weight, bias, 1e-6);
    return y.permute({0, 3, 1, 2});
  }

  torch::Tensor weight, bias;

 private:
  std::int64_t channels_;
};
TORCH_MODULE(LayerNorm2d);

/// 7x7 depthwise conv -> channels-last LayerNorm -> Linear(C,4C) -> GELU ->
/// Linear(4C,C) -> residual add with stochastic depth.
class ConvNeXtBlockImpl : public torch::nn::Module {
 public:
  ConvNeXtBlockImpl(std::int64_t dim, double drop_path_prob, RngSlotPtr slot)
      : dim_(dim), drop_path_(drop_path_prob), slot_(std::move(slot)) {
    dwconv = register_module(
        "dwconv", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 7).padding(3).groups(dim)));
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
    pwconv1 = register_module("pwconv1", torch::nn::Linear(dim, 4 * dim));
    pwconv2 = register_module("pwconv2", torch::nn::Linear(4 * dim, dim));
  }

  torch::Tensor branch(const torch::Tensor& x) {
    auto y = dwconv->forward(x).permute({0, 2, 3, 1});
    y = pwconv2->forward(torch::gelu(pwconv1->forward(norm->forward(y))));
    return y.permute({0, 3, 1, 2});
  }

  torch::Tensor forward(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != dim_) {
      throw ShapeError("ConvNeXt block expects " + std::to_string(dim_) + " channels");
    }
    return x + drop_path(branch(x), drop_path_, is_training(), slot_->stream);
  }

  double drop_path_prob() const { return drop_path_; }

  torch::nn::Conv2d dwconv{nullptr};
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear pwconv1{nullptr}, pwconv2{nullptr};

 private:
  std::int64_t dim_;
  double drop_path_;
  RngSlotPtr slot_;
};
TORCH_MODULE(ConvNeXtBlock);

/// Channel-adaptive feature modulation.
///
/// f_ctx = spatial mean of f_s; f_c = Linear -> LayerNorm -> LeakyReLU ->
/// Linear applied to the side information; the mask is a three-layer
/// LeakyReLU MLP (with dropout) over [f_ctx, f_c] followed by a sigmoid, and
/// the output is f_s scaled channel-wise by the mask.
class AFModuleImpl : public torch::nn::Module {
 public:
  AFModuleImpl(std::int64_t channels, std::int64_t side_dim, double dropout_p, RngSlotPtr slot)
      : channels_(channels), side_dim_(side_dim), dropout_(dropout_p), slot_(std::move(slot)) {
    side_fc1 = register_module("side_fc1", torch::nn::Linear(side_dim, channels));
    side_norm = register_module("side_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})));
    side_fc2 = register_module("side_fc2", torch::nn::Linear(channels, channels));
    fuse_fc1 = register_module("fuse_fc1", torch::nn::Linear(2 * channels, channels));
    fuse_fc2 = register_module("fuse_fc2", torch::nn::Linear(channels, channels));
    fuse_fc3 = register_module("fuse_fc3", torch::nn::Linear(channels, channels));
  }

  /// Mask of shape [B, C'] with entries in (0, 1).
  torch::Tensor mask(const torch::Tensor& f, const torch::Tensor& side) {
    check(f, side);
    auto ctx = f.mean({2, 3});
    auto fc = side_fc2->forward(torch::leaky_relu(side_norm->forward(side_fc1->forward(side))));
    auto fused = torch::cat({ctx, fc}, 1);
    auto& rng = slot_->stream;
    auto m = dropout(torch::leaky_relu(fuse_fc1->forward(fused)), dropout_, is_training(), rng);
    m = dropout(torch::leaky_relu(fuse_fc2->forward(m)), dropout_, is_training(), rng);
    return torch::sigmoid(fuse_fc3->forward(m));
  }

  torch::Tensor forward(const torch::Tensor& f, const torch::Tensor& side) {
    auto m = mask(f, side);
    return f * m.unsqueeze(-1).unsqueeze(-1);
  }

  torch::nn::Linear side_fc1{nullptr}, side_fc2{nullptr};
  torch::nn::LayerNorm side_norm{nullptr};
  torch::nn::Linear fuse_fc1{nullptr}, fuse_fc2{nullptr}, fuse_fc3{nullptr};

 private:
  void check(const torch::Tensor& f, const torch::Tensor& side) const {
    if (f.dim() != 4 || f.size(1) != channels_) {
      throw ShapeError("AF-Module expects a B x " + std::to_string(channels_) + " x H x W feature map");
    }
    if (side.dim() != 2 || side.size(1) != side_dim_) {
      throw ShapeError("AF-Module side information must be B x " + std::to_string(side_dim_) +
                       ", got width " + (side.dim() == 2 ? std::to_string(side.size(1)) : "?"));
    }
    if (side.size(0) != f.size(0)) throw ShapeError("AF-Module: batch mismatch with side information");
  }

  std::int64_t channels_, side_dim_;
  double dropout_;
  RngSlotPtr slot_;
};
TORCH_MODULE(AFModule);

/// One step of an encoder or decoder; every step sees the side information.
class CodecLayer : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& side) = 0;
  virtual std::string kind() const = 0;
};

namespace layers {

class Stem : public CodecLayer {
 public:
  Stem(std::int64_t in, std::int64_t out) {
    conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 4).stride(2).padding(1)));
    norm = register_module("norm", LayerNorm2d(out));
  }
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor&) override {
    return norm->forward(conv->forward(x));
  }
  std::string kind() const override { return "stem"; }

  torch::nn::Conv2d conv{nullptr};
  LayerNorm2d norm{nullptr};
};

class Downsample : public CodecLayer {
 public:
  Downsample(std::int64_t in, std::int64_t out) {
    norm = register_module("norm", LayerNorm2d(in));
    conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 2).stride(2)));
  }
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor&) override {
    return conv->forward(norm->forward(x));
  }
  std::string kind() const override { return "downsample"; }

  LayerNorm2d norm{nullptr};
  torch::nn::Conv2d conv{nullptr};
};

/// Nearest-neighbour 2x resize followed by a 3x3 convolution.
class Upsample : public CodecLayer {
 public:
  Upsample(std::int64_t in, std::int64_t out) {
    conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
  }
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor&) override {
    auto up = torch::nn::functional::interpolate(
        x, torch::nn::functional::InterpolateFuncOptions()
               .scale_factor(std::vector<double>{2.0, 2.0})
               .mode(torch::kNearest));
    return conv->forward(up);
  }
  std::string kind() const override { return "upsample"; }

  torch::nn::Conv2d conv{nullptr};
};

class Stage : public CodecLayer {
 public:
  Stage(std::int64_t dim, std::int64_t depth, double drop_path_prob, bool prelu, const RngSlotPtr& slot) {
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (std::int64_t i = 0; i < depth; ++i) blocks->push_back(ConvNeXtBlock(dim, drop_path_prob, slot));
    if (prelu) act = register_module("act", torch::nn::PReLU());
  }
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor&) override {
    auto y = x;
    for (auto& b : *blocks) y = b->as<ConvNeXtBlock>()->forward(y);
    return act ? act->forward(y) : y;
  }
  std::string kind() const override { return "stage"; }

  torch::nn::ModuleList blocks{nullptr};
  torch::nn::PReLU act{nullptr};
};

class Modulation : public CodecLayer {
 public:
  Modulation(std::int64_t dim, std::int64_t side_dim, double dropout_p, const RngSlotPtr& slot) {
    af = register_module("af", AFModule(dim, side_dim, dropout_p, slot));
  }
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& side) override {
    return af->forward(x, side);
  }
  std::string kind() const override { return "af"; }

  AFModule af{nullptr};
};

/// 1x1 convolution, optionally followed by LayerNorm.
class Pointwise : public CodecLayer {
 public:
  Pointwise(std::int64_t in, std::int64_t out, bool with_norm, std::string kind)
      : kind_(std::move(kind)) {
    conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
    if (with_norm) norm = register_module("norm", LayerNorm2d(out));
  }
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor&) override {
    auto y = conv->forward(x);
    return norm ? norm->forward(y) : y;
  }
  std::string kind() const override { return kind_; }

  torch::nn::Conv2d conv{nullptr};
  LayerNorm2d norm{nullptr};

 private:
  std::string kind_;
};

/// 1x1 conv to RGB, sigmoid, scaled to [0, 255].
class ImageHead : public CodecLayer {
 public:
  explicit ImageHead(std::int64_t in) {
    conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, 3, 1)));
  }
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor&) override {
    return torch::sigmoid(conv->forward(x)) * 255.0;
  }
  std::string kind() const override { return "head"; }

  torch::nn::Conv2d conv{nullptr};
};

}  // namespace layers

/// Ordered list of codec layers. Feature index j in [0, size()] names the
/// input (j = 0) or the output of the j-th layer (1-based).
class LayerStackImpl : public torch::nn::Module {
 public:
  void add(const std::string& name, std::shared_ptr<CodecLayer> layer) {
    layers_.push_back(register_module(std::to_string(layers_.size()) + "_" + name, std::move(layer)));
  }

  std::int64_t size() const { return static_cast<std::int64_t>(layers_.size()); }
  CodecLayer& layer(std::int64_t j) { return *layers_.at(static_cast<std::size_t>(j)); }

  std::vector<std::string> kinds() const {
    std::vector<std::string> out;
    for (const auto& l : layers_) out.push_back(l->kind());
    return out;
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& side) { return run_from(0, x, side); }

  /// Feeds feature f_j through layers j+1 .. size().
  torch::Tensor run_from(std::int64_t j, const torch::Tensor& feature_j, const torch::Tensor& side) {
    if (j < 0 || j > size()) throw ConfigError("layer index " + std::to_string(j) + " out of range");
    auto y = feature_j;
    for (auto i = j; i < size(); ++i) y = layers_[static_cast<std::size_t>(i)]->forward(y, side);
    return y;
  }

  /// f_0 .. f_size(); the last entry is the stack output.
  std::vector<torch::Tensor> collect(const torch::Tensor& x, const torch::Tensor& side) {
    std::vector<torch::Tensor> out{x};
    auto y = x;
    for (auto& l : layers_) {
      y = l->forward(y, side);
      out.push_back(y);
    }
    return out;
  }

 private:
  std::vector<std::shared_ptr<CodecLayer>> layers_;
};
TORCH_MODULE(LayerStack);

enum class Transmission { noma, orthogonal };

struct CodecOutput {
  std::vector<torch::Tensor> images;                 // per user, [B,3,H,W] in [0,255]
  std::vector<std::vector<torch::Tensor>> features;  // per user decoder features (if collected)
  std::vector<SymbolVector> symbols;                 // per user
  std::vector<torch::Tensor> side;                   // per user side information
  std::vector<Received> received;                    // one (NOMA) or N (orthogonal)
};

/// SemNOMA codec: shared encoder, per-user embeddings and per-user decoders.
class SemNomaImpl : public torch::nn::Module {
 public:
  explicit SemNomaImpl(CodecConfig cfg, std::uint64_t init_seed = 0)
      : cfg_(std::move(cfg)), slot_(std::make_shared<RngSlot>()) {
    cfg_.validate();
    encoder = register_module("encoder", build_encoder());
    embeddings = register_parameter("embeddings", torch::zeros({cfg_.num_users, 1, cfg_.height, cfg_.width}));
    decoders = register_module("decoders", torch::nn::ModuleList());
    for (std::int64_t i = 0; i < cfg_.num_users; ++i) {
      decoder_list_.push_back(build_decoder());
      decoders->push_back(decoder_list_.back());
    }
    initialize(init_seed);
  }

  const CodecConfig& config() const { return cfg_; }

  /// Reseeds the stream used by stochastic depth and dropout.
  void seed_dropout(std::uint64_t seed) { slot_->stream = RandomStream(seed); }
  RandomStream& dropout_stream() { return slot_->stream; }

  LayerStack& decoder(std::int64_t user) {
    check_user(user);
    return decoder_list_[static_cast<std::size_t>(user)];
  }

  torch::Tensor side_info(const ChannelBatch& states, std::int64_t user) const {
    return states.side_info(user, cfg_.gamma_lo, cfg_.gamma_hi);
  }

  /// Latent feature map before power normalization: [B, M, H'', W''].
  torch::Tensor encode_features(const torch::Tensor& images, std::int64_t user, const torch::Tensor& side) {
    check_user(user);
    if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg_.height ||
        images.size(3) != cfg_.width) {
      throw ShapeError("encode: expected B x 3 x " + std::to_string(cfg_.height) + " x " +
                       std::to_string(cfg_.width) + " images");
    }
    auto r = embeddings.index({user}).unsqueeze(0).expand({images.size(0), 1, cfg_.height, cfg_.width});
    auto z = torch::cat({images / 255.0, r.to(images.scalar_type())}, 1);
    return encoder->forward(z, side);
  }

  /// Images in [0,255] -> k power-normalized complex symbols per image.
  SymbolVector encode(const torch::Tensor& images, std::int64_t user, const torch::Tensor& side) {
    return to_symbols(encode_features(images, user, side), cfg_.p_avg);
  }

  /// Received symbols [B, k, 2] reshaped to the decoder input f_0: [B, M, H'', W''].
  torch::Tensor decoder_input(const torch::Tensor& y) const {
    if (y.dim() != 3 || y.size(1) != cfg_.symbols_per_image() || y.size(2) != 2) {
      throw ShapeError("decode: expected B x " + std::to_string(cfg_.symbols_per_image()) +
                       " x 2 received symbols");
    }
    return from_symbols(y).reshape({y.size(0), cfg_.out_channels, cfg_.latent_height(), cfg_.latent_width()});
  }

  torch::Tensor decode(const torch::Tensor& y, std::int64_t user, const torch::Tensor& side) {
    return decoder(user)->forward(decoder_input(y), side);
  }

  std::vector<torch::Tensor> decode_features(const torch::Tensor& y, std::int64_t user, const torch::Tensor& side) {
    return decoder(user)->collect(decoder_input(y), side);
  }

  /// Encode every user, transmit (superimposed or orthogonally), decode per user.
  CodecOutput forward(const std::vector<torch::Tensor>& images, const ChannelBatch& states, Transmission mode,
                      RandomStream& channel_rng, bool collect_features = false) {
    const auto n = static_cast<std::int64_t>(images.size());
    if (n != cfg_.num_users || states.users() != n) {
      throw ConfigError("SemNOMA forward: configured for " + std::to_string(cfg_.num_users) + " users, got " +
                        std::to_string(n) + " image batches and " + std::to_string(states.users()) +
                        " channel states");
    }
    CodecOutput out;
    for (std::int64_t i = 0; i < n; ++i) {
      out.side.push_back(side_info(states, i).to(images[static_cast<std::size_t>(i)].scalar_type()));
      out.symbols.push_back(encode(images[static_cast<std::size_t>(i)], i, out.side.back()));
    }
    if (mode == Transmission::noma) {
      out.received.push_back(noma_transmit(out.symbols, states, channel_rng));
    } else {
      for (std::int64_t i = 0; i < n; ++i) {
        out.received.push_back(orthogonal_transmit(out.symbols[static_cast<std::size_t>(i)], states.user(i), channel_rng));
      }
    }
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& y = out.received[mode == Transmission::noma ? 0 : static_cast<std::size_t>(i)].y;
      const auto& side = out.side[static_cast<std::size_t>(i)];
      if (collect_features) {
        out.features.push_back(decode_features(y, i, side));
        out.images.push_back(out.features.back().back());
      } else {
        out.images.push_back(decode(y, i, side));
      }
    }
    return out;
  }

  /// Evaluation mode with gradients disabled on every parameter.
  void freeze() {
    eval();
    for (auto& p : parameters()) p.set_requires_grad(false);
  }

  LayerStack encoder{nullptr};
  torch::Tensor embeddings;
  torch::nn::ModuleList decoders{nullptr};

 private:
  void check_user(std::int64_t user) const {
    if (user < 0 || user >= cfg_.num_users) throw ConfigError("user index " + std::to_string(user) + " out of range");
  }

  LayerStack build_encoder() {
    LayerStack enc;
    const auto& dims = cfg_.stage_dims;
    enc->add("stem", std::make_shared<layers::Stem>(4, dims[0]));
    for (std::size_t s = 0; s < dims.size(); ++s) {
      if (cfg_.encoder_af == AfPlacement::before_stage) add_af(enc, dims[s]);
      enc->add("stage", std::make_shared<layers::Stage>(dims[s], cfg_.stage_depths[s], cfg_.drop_path_rate, false, slot_));
      if (cfg_.encoder_af == AfPlacement::after_stage) add_af(enc, dims[s]);
      if (s + 1 < dims.size()) enc->add("down", std::make_shared<layers::Downsample>(dims[s], dims[s + 1]));
    }
    enc->add("proj", std::make_shared<layers::Pointwise>(dims.back(), cfg_.out_channels, false, "proj"));
    return enc;
  }

  LayerStack build_decoder() {
    LayerStack dec;
    std::vector<std::int64_t> dims(cfg_.stage_dims.rbegin(), cfg_.stage_dims.rend());
    std::vector<std::int64_t> depths(cfg_.stage_depths.rbegin(), cfg_.stage_depths.rend());
    dec->add("input", std::make_shared<layers::Pointwise>(cfg_.out_channels, dims[0], true, "input"));
    for (std::size_t s = 0; s < dims.size(); ++s) {
      if (cfg_.decoder_af == AfPlacement::before_stage) add_af(dec, dims[s]);
      dec->add("stage", std::make_shared<layers::Stage>(dims[s], depths[s], cfg_.drop_path_rate, true, slot_));
      if (cfg_.decoder_af == AfPlacement::after_stage) add_af(dec, dims[s]);
      const auto next = s + 1 < dims.size() ? dims[s + 1] : dims[s];
      dec->add("up", std::make_shared<layers::Upsample>(dims[s], next));
    }
    dec->add("head", std::make_shared<layers::ImageHead>(dims.back()));
    return dec;
  }

  void add_af(LayerStack& stack, std::int64_t dim) {
    stack->add("af", std::make_shared<layers::Modulation>(dim, cfg_.side_info_dim, cfg_.af_dropout, slot_));
  }

  // Truncated-normal(0.02) weights, zero biases, unit norm gains, N(0,1) user embeddings.
  void initialize(std::uint64_t seed) {
    RandomStream rng(seed, "codec-init");
    torch::NoGradGuard guard;
    for (auto& item : named_parameters()) {
      const auto& name = item.key();
      auto& p = item.value();
      if (name == "embeddings") {
        p.copy_(rng.normal(p.sizes()));
      } else if (name.ends_with("act.weight")) {
        p.fill_(0.25);
      } else if (name.find("norm") != std::string::npos) {
        p.fill_(name.ends_with("weight") ? 1.0 : 0.0);
      } else if (name.ends_with("bias")) {
        p.zero_();
      } else {
        p.copy_(rng.normal(p.sizes(), 0.02).clamp(-0.04, 0.04));
      }
    }
    slot_->stream = RandomStream(seed, "codec-dropout");
  }

  CodecConfig cfg_;
  RngSlotPtr slot_;
  std::vector<LayerStack> decoder_list_;
};
TORCH_MODULE(SemNoma);

/// Copies every parameter and buffer of src into dst (architectures must match).
inline void copy_weights(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard guard;
  auto src_params = src.named_parameters();
  auto dst_params = dst.named_parameters();
  if (src_params.size() != dst_params.size()) throw CheckpointError("copy_weights: parameter count mismatch");
  for (auto& item : dst_params) {
    const auto* s = src_params.find(item.key());
    if (s == nullptr || s->sizes() != item.value().sizes()) {
      throw CheckpointError("copy_weights: incompatible parameter '" + item.key() + "'");
    }
    item.value().copy_(*s);
  }
  auto src_buf = src.named_buffers();
  for (auto& item : dst.named_buffers()) {
    const auto* s = src_buf.find(item.key());
    if (s == nullptr) throw CheckpointError("copy_weights: missing buffer '" + item.key() + "'");
    item.value().copy_(*s);
  }
}

/// Independent deep copy (fresh dropout stream seeded like the source's init).
inline SemNoma clone_codec(const SemNoma& src, std::uint64_t dropout_seed = 0) {
  SemNoma out(src->config(), 0);
  copy_weights(*out, *src);
  out->seed_dropout(dropout_seed);
  if (!src->is_training()) out->eval();
  return out;
}

}  // namespace semnoma
