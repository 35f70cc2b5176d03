#pragma once

#include <semnoma/error.hpp>

#include <torch/torch.h>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace semnoma {

namespace detail {

inline torch::Tensor as_batch(const torch::Tensor& t) {
  auto x = t.to(torch::kFloat64);
  if (x.dim() == 3) x = x.unsqueeze(0);
  if (x.dim() != 4) throw ShapeError("metrics expect C x H x W or B x C x H x W images");
  return x;
}

inline void same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ShapeError(std::string(what) + ": image shapes differ");
}

}  // namespace detail

/// PSNR of every image in the batch (+inf where the images are identical).
inline std::vector<double> psnr_per_image(const torch::Tensor& a, const torch::Tensor& b, double peak = 255.0) {
  detail::same_shape(a, b, "psnr");
  auto x = detail::as_batch(a);
  auto y = detail::as_batch(b);
  auto mse = (x - y).pow(2).mean({1, 2, 3});
  std::vector<double> out;
  auto acc = mse.accessor<double, 1>();
  for (std::int64_t i = 0; i < mse.size(0); ++i) {
    const double m = acc[i];
    out.push_back(m == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(peak * peak / m));
  }
  return out;
}

/// Mean over the batch of per-image PSNR in dB.
inline double psnr(const torch::Tensor& a, const torch::Tensor& b, double peak = 255.0) {
  auto v = psnr_per_image(a, b, peak);
  double s = 0.0;
  for (double p : v) s += p;
  return s / static_cast<double>(v.size());
}

struct SsimOptions {
  std::int64_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double peak = 255.0;
};

/// SSIM per image: Gaussian-weighted local statistics over valid windows,
/// averaged over positions and channels.
inline std::vector<double> ssim_per_image(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& o = {}) {
  detail::same_shape(a, b, "ssim");
  auto x = detail::as_batch(a);
  auto y = detail::as_batch(b);
  if (x.size(2) < o.window || x.size(3) < o.window) {
    throw ShapeError("ssim: image smaller than the " + std::to_string(o.window) + "-pixel window");
  }
  const auto c = x.size(1);
  auto coords = torch::arange(o.window, torch::kFloat64) - static_cast<double>(o.window - 1) / 2.0;
  auto g = torch::exp(-coords.pow(2) / (2.0 * o.sigma * o.sigma));
  g = g / g.sum();
  auto kernel = torch::outer(g, g).expand({c, 1, o.window, o.window}).contiguous();
  auto filt = [&](const torch::Tensor& t) { return torch::conv2d(t, kernel, torch::Tensor(), at::IntArrayRef{1, 1}, at::IntArrayRef{0, 0}, at::IntArrayRef{1, 1}, c); };

  const double c1 = std::pow(o.k1 * o.peak, 2);
  const double c2 = std::pow(o.k2 * o.peak, 2);
  auto mx = filt(x);
  auto my = filt(y);
  auto sxx = filt(x * x) - mx * mx;
  auto syy = filt(y * y) - my * my;
  auto sxy = filt(x * y) - mx * my;
  auto map = ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  auto per = map.mean({1, 2, 3});
  std::vector<double> out(per.data_ptr<double>(), per.data_ptr<double>() + per.size(0));
  return out;
}

inline double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimOptions& o = {}) {
  auto v = ssim_per_image(a, b, o);
  double s = 0.0;
  for (double p : v) s += p;
  return s / static_cast<double>(v.size());
}

struct MetricReport {
  double psnr_db = 0.0;
  double ssim = 0.0;
  // Registered perceptual metrics; nullopt when a plugin could not produce a value.
  std::map<std::string, std::optional<double>> perceptual;
};

/// Fidelity metrics plus externally supplied perceptual metrics (LPIPS, FID, ...).
class MetricRegistry {
 public:
  using Fn = std::function<std::optional<double>(const torch::Tensor&, const torch::Tensor&)>;

  void register_perceptual(const std::string& name, Fn fn) {
    if (name == "psnr" || name == "ssim" || fns_.count(name) != 0) {
      throw ConfigError("metric '" + name + "' is already registered");
    }
    fns_.emplace(name, std::move(fn));
  }

  bool contains(const std::string& name) const { return fns_.count(name) != 0; }

  MetricReport evaluate_all(const torch::Tensor& a, const torch::Tensor& b, double peak = 255.0) const {
    MetricReport r;
    r.psnr_db = psnr(a, b, peak);
    SsimOptions o;
    o.peak = peak;
    r.ssim = ssim(a, b, o);
    for (const auto& [name, fn] : fns_) {
      std::optional<double> v;
      try {
        v = fn(a, b);
      } catch (const std::exception&) {
        v.reset();
      }
      r.perceptual.emplace(name, v);
    }
    return r;
  }

 private:
  std::map<std::string, Fn> fns_;
};

}  // namespace semnoma
