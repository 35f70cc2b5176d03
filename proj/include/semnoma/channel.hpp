#pragma once

// Differentiable uplink channel simulation: real/complex symbol mapping with
// average-power normalization, AWGN and block Rayleigh fading, NOMA
// superposition and orthogonal (interference-free) reference transmission.
//
// Complex quantities are carried as real tensors with a trailing dimension of
// size 2 (in-phase, quadrature) so autograd sees only real arithmetic.

#include <semnoma/error.hpp>
#include <semnoma/rng.hpp>

#include <torch/torch.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace semnoma {

enum class ChannelKind { awgn, rayleigh };

inline std::string to_string(ChannelKind kind) {
  return kind == ChannelKind::awgn ? "awgn" : "rayleigh";
}

inline ChannelKind parse_channel_kind(const std::string& s) {
  if (s == "awgn" || s == "AWGN") return ChannelKind::awgn;
  if (s == "rayleigh" || s == "RAYLEIGH") return ChannelKind::rayleigh;
  throw ConfigError("unknown channel kind '" + s + "' (expected awgn or rayleigh)");
}

/// Noise variance for a given SNR in dB under average power p_avg.
inline double snr_to_sigma2(double gamma_db, double p_avg = 1.0) {
  if (!(p_avg > 0.0)) throw ConfigError("p_avg must be positive");
  return p_avg * std::pow(10.0, -gamma_db / 10.0);
}

/// Side information of one user for one transmitted image.
struct ChannelState {
  double gamma_db = 0.0;
  std::complex<double> h{1.0, 0.0};
  double sigma2 = 1.0;
  ChannelKind kind = ChannelKind::awgn;

  double amplitude() const { return std::abs(h); }

  /// Phase in [-pi, pi).
  double phase() const {
    double p = std::arg(h);
    return p >= std::numbers::pi ? p - 2.0 * std::numbers::pi : p;
  }

  static ChannelState awgn(double gamma_db, double p_avg = 1.0) {
    return {gamma_db, {1.0, 0.0}, snr_to_sigma2(gamma_db, p_avg), ChannelKind::awgn};
  }
};

/// k complex symbols per image for a batch of B images: iq has shape [B, k, 2].
struct SymbolVector {
  torch::Tensor iq;
  double p_avg = 1.0;

  std::int64_t batch() const { return iq.size(0); }
  std::int64_t k() const { return iq.size(1); }

  /// Per-image average symbol power (1/k)||s||^2, shape [B].
  torch::Tensor power() const { return iq.pow(2).sum({1, 2}) / static_cast<double>(k()); }

  std::complex<double> at(std::int64_t b, std::int64_t j) const {
    auto v = iq.index({b, j}).to(torch::kFloat64);
    return {v[0].item<double>(), v[1].item<double>()};
  }
};

/// Pairs consecutive reals into complex symbols and rescales every image to
/// average power exactly p_avg. features: [2k] or [B, 2k] (any trailing layout
/// is flattened per image).
inline SymbolVector to_symbols(const torch::Tensor& features, double p_avg = 1.0) {
  if (!(p_avg > 0.0)) throw ConfigError("p_avg must be positive");
  auto flat = features.dim() <= 1 ? features.reshape({1, -1}) : features.flatten(1);
  const auto n = flat.size(1);
  if (n == 0 || n % 2 != 0) {
    throw ShapeError("to_symbols needs an even, non-zero number of reals per image, got " +
                     std::to_string(n));
  }
  const auto k = n / 2;
  auto pairs = flat.reshape({flat.size(0), k, 2});
  auto energy = pairs.pow(2).sum({1, 2});
  if ((energy == 0).any().item<bool>()) {
    throw DegenerateInputError("to_symbols: all-zero feature vector, power scale undefined");
  }
  auto scale = torch::sqrt(p_avg * static_cast<double>(k) / energy);
  return {pairs * scale.view({-1, 1, 1}), p_avg};
}

/// Inverse of the pairing in to_symbols: [B, k, 2] -> [B, 2k] (or [k,2] -> [2k]).
inline torch::Tensor from_symbols(const torch::Tensor& iq) {
  if (iq.size(-1) != 2) throw ShapeError("from_symbols expects a trailing I/Q dimension of size 2");
  if (iq.dim() == 2) return iq.reshape({-1});
  return iq.reshape({iq.size(0), -1});
}

/// Channel realizations for N users over a batch of B images.
///
/// gamma_db and sigma2 are shared by all users of a group (one receiver noise
/// floor); h differs per user and per image and is constant across the k
/// symbols of an image.
struct ChannelBatch {
  ChannelKind kind = ChannelKind::awgn;
  torch::Tensor gamma_db;  // [B] float64
  torch::Tensor sigma2;    // [B] float64
  torch::Tensor h;         // [N, B, 2] float64

  std::int64_t users() const { return h.size(0); }
  std::int64_t batch() const { return h.size(1); }

  ChannelState state(std::int64_t user, std::int64_t b) const {
    auto hv = h.index({user, b});
    return {gamma_db[b].item<double>(),
            {hv[0].item<double>(), hv[1].item<double>()},
            sigma2[b].item<double>(),
            kind};
  }

  /// Single-user view (keeps the shared SNR and noise variance).
  ChannelBatch user(std::int64_t i) const {
    return {kind, gamma_db, sigma2, h.index({torch::indexing::Slice(i, i + 1)})};
  }

  /// (gamma min-max normalized over [gamma_lo, gamma_hi], a, phi) per image: [B, 3].
  torch::Tensor side_info(std::int64_t user_index, double gamma_lo, double gamma_hi) const {
    const double span = gamma_hi > gamma_lo ? gamma_hi - gamma_lo : 1.0;
    auto g = (gamma_db - gamma_lo) / span;
    auto hv = h[user_index];
    auto a = torch::sqrt(hv.pow(2).sum(-1));
    auto phi = torch::atan2(hv.select(-1, 1), hv.select(-1, 0));
    phi = torch::where(phi >= std::numbers::pi, phi - 2.0 * std::numbers::pi, phi);
    return torch::stack({g, a, phi}, 1).to(torch::kFloat32);
  }

  /// Build from per-user, per-image states ([user][image]); all users of an
  /// image must share sigma2.
  static ChannelBatch from_states(const std::vector<std::vector<ChannelState>>& states) {
    if (states.empty() || states.front().empty()) throw ShapeError("from_states: empty state list");
    const auto n = static_cast<std::int64_t>(states.size());
    const auto b = static_cast<std::int64_t>(states.front().size());
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    ChannelBatch out{states.front().front().kind, torch::empty({b}, opts), torch::empty({b}, opts),
                     torch::empty({n, b, 2}, opts)};
    auto g = out.gamma_db.accessor<double, 1>();
    auto s2 = out.sigma2.accessor<double, 1>();
    auto hh = out.h.accessor<double, 3>();
    for (std::int64_t i = 0; i < n; ++i) {
      if (static_cast<std::int64_t>(states[i].size()) != b) {
        throw ShapeError("from_states: users have different batch sizes");
      }
      for (std::int64_t j = 0; j < b; ++j) {
        const auto& st = states[i][j];
        if (i == 0) {
          g[j] = st.gamma_db;
          s2[j] = st.sigma2;
        } else if (st.sigma2 != s2[j]) {
          throw ConfigError("from_states: users of one transmission must share sigma2");
        }
        hh[i][j][0] = st.h.real();
        hh[i][j][1] = st.h.imag();
      }
    }
    return out;
  }
};

/// Draws one channel state: gamma ~ U[lo, hi]; AWGN h = 1, Rayleigh h ~ CN(0, 1).
inline ChannelState sample_channel_state(ChannelKind kind, double gamma_lo, double gamma_hi,
                                         RandomStream& rng, double p_avg = 1.0) {
  if (gamma_lo > gamma_hi) throw ConfigError("sample_channel_state: gamma range lo > hi");
  ChannelState st;
  st.kind = kind;
  st.gamma_db = rng.uniform_scalar(gamma_lo, gamma_hi);
  st.sigma2 = snr_to_sigma2(st.gamma_db, p_avg);
  if (kind == ChannelKind::rayleigh) {
    auto hv = rng.normal({2}, std::sqrt(0.5), torch::kFloat64);
    st.h = {hv[0].item<double>(), hv[1].item<double>()};
  }
  return st;
}

/// Batched draw: one SNR per image shared by the N users, one gain per user and image.
inline ChannelBatch sample_channel_batch(ChannelKind kind, std::int64_t users, std::int64_t batch,
                                         double gamma_lo, double gamma_hi, RandomStream& rng,
                                         double p_avg = 1.0) {
  if (gamma_lo > gamma_hi) throw ConfigError("sample_channel_batch: gamma range lo > hi");
  ChannelBatch out;
  out.kind = kind;
  out.gamma_db = rng.uniform({batch}, gamma_lo, gamma_hi);
  out.sigma2 = p_avg * torch::pow(10.0, -out.gamma_db / 10.0);
  if (kind == ChannelKind::rayleigh) {
    out.h = rng.normal({users, batch, 2}, std::sqrt(0.5), torch::kFloat64);
  } else {
    out.h = torch::zeros({users, batch, 2}, torch::kFloat64);
    out.h.select(-1, 0).fill_(1.0);
  }
  return out;
}

/// Same SNR for every image (used by SNR sweeps).
inline ChannelBatch fixed_snr_batch(ChannelKind kind, std::int64_t users, std::int64_t batch,
                                    double gamma_db, RandomStream& rng, double p_avg = 1.0) {
  return sample_channel_batch(kind, users, batch, gamma_db, gamma_db, rng, p_avg);
}

struct Received {
  torch::Tensor y;  // [B, k, 2]
  ChannelBatch states;

  std::int64_t k() const { return y.size(1); }
};

namespace detail {

// h: [B, 2] float64, s: [B, k, 2] -> h*s with broadcasting over k.
inline torch::Tensor complex_scale(const torch::Tensor& h, const torch::Tensor& s) {
  auto hc = h.to(s.scalar_type()).view({h.size(0), 1, 2});
  auto hr = hc.select(-1, 0).unsqueeze(-1);
  auto hi = hc.select(-1, 1).unsqueeze(-1);
  auto sr = s.select(-1, 0).unsqueeze(-1);
  auto si = s.select(-1, 1).unsqueeze(-1);
  return torch::cat({hr * sr - hi * si, hr * si + hi * sr}, -1);
}

inline torch::Tensor complex_divide(const torch::Tensor& y, const torch::Tensor& h) {
  auto hc = h.to(y.scalar_type());
  auto mag2 = hc.pow(2).sum(-1).view({h.size(0), 1, 1});
  auto conj = torch::stack({hc.select(-1, 0), -hc.select(-1, 1)}, -1);
  return complex_scale(conj, y) / mag2;
}

}  // namespace detail

/// y = sum_i h_i s_i + n with n ~ CN(0, sigma2) drawn from rng (no gradient
/// through the noise).
inline Received noma_transmit(std::span<const SymbolVector> symbols, const ChannelBatch& states,
                              RandomStream& rng) {
  if (symbols.empty()) throw ShapeError("noma_transmit: no users");
  if (static_cast<std::int64_t>(symbols.size()) != states.users()) {
    throw ShapeError("noma_transmit: " + std::to_string(symbols.size()) + " symbol vectors but " +
                     std::to_string(states.users()) + " channel states");
  }
  const auto& first = symbols.front().iq;
  for (const auto& s : symbols) {
    if (s.iq.sizes() != first.sizes()) {
      throw ShapeError("noma_transmit: users disagree on symbol shape (k or batch)");
    }
  }
  if (first.size(0) != states.batch()) throw ShapeError("noma_transmit: batch size mismatch");

  torch::Tensor y;
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    auto term = detail::complex_scale(states.h[static_cast<std::int64_t>(i)], symbols[i].iq);
    y = y.defined() ? y + term : term;
  }
  auto stddev = torch::sqrt(states.sigma2 / 2.0).to(first.scalar_type()).view({-1, 1, 1});
  auto noise = rng.normal(first.sizes(), 1.0, first.scalar_type()) * stddev;
  return {y + noise, states};
}

inline Received noma_transmit(std::span<const SymbolVector> symbols,
                              const std::vector<ChannelState>& states, RandomStream& rng) {
  std::vector<std::vector<ChannelState>> per_user;
  for (const auto& s : states) {
    per_user.push_back(std::vector<ChannelState>(static_cast<std::size_t>(symbols.front().batch()), s));
  }
  return noma_transmit(symbols, ChannelBatch::from_states(per_user), rng);
}

/// y_i = h_i s_i + n for one user. With equalize, the receiver divides by h_i
/// (off by default: the decoder is conditioned on (a, phi) instead).
inline Received orthogonal_transmit(const SymbolVector& s, const ChannelBatch& state,
                                    RandomStream& rng, bool equalize = false) {
  if (state.users() != 1) throw ShapeError("orthogonal_transmit: expects exactly one user's states");
  auto rx = noma_transmit(std::span<const SymbolVector>(&s, 1), state, rng);
  if (equalize) rx.y = detail::complex_divide(rx.y, state.h[0]);
  return rx;
}

inline Received orthogonal_transmit(const SymbolVector& s, const ChannelState& state,
                                    RandomStream& rng, bool equalize = false) {
  std::vector<std::vector<ChannelState>> st{
      std::vector<ChannelState>(static_cast<std::size_t>(s.batch()), state)};
  return orthogonal_transmit(s, ChannelBatch::from_states(st), rng, equalize);
}

}  // namespace semnoma
