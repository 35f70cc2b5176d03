#pragma once

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include <cstdint>
#include <string_view>

namespace semnoma {

/// Mixes a root seed with a stream name (FNV-1a followed by a splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::uint64_t z = root ^ h;
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Seeded random source backed by a dedicated torch CPU generator.
///
/// Every draw made through one stream is reproducible from its seed alone;
/// independent concurrent consumers must each own a stream.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed = 0)
      : seed_(seed), gen_(at::make_generator<at::CPUGeneratorImpl>(seed)) {}

  RandomStream(std::uint64_t root, std::string_view name) : RandomStream(derive_seed(root, name)) {}

  std::uint64_t seed() const { return seed_; }
  at::Generator& generator() { return gen_; }

  /// Fresh independent stream named relative to this stream's seed.
  RandomStream fork(std::string_view name) const { return RandomStream(seed_, name); }

  torch::Tensor normal(at::IntArrayRef shape, double stddev = 1.0,
                       torch::Dtype dtype = torch::kFloat32) {
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    return t.normal_(0.0, stddev, gen_);
  }

  torch::Tensor uniform(at::IntArrayRef shape, double lo, double hi,
                        torch::Dtype dtype = torch::kFloat64) {
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    if (lo == hi) return t.fill_(lo);
    return t.uniform_(lo, hi, gen_);
  }

  double uniform_scalar(double lo, double hi) {
    return uniform({1}, lo, hi).item<double>();
  }

  /// Bernoulli(keep) mask with the given shape.
  torch::Tensor bernoulli(at::IntArrayRef shape, double keep, torch::Dtype dtype = torch::kFloat32) {
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
    return t.bernoulli_(keep, gen_);
  }

  torch::Tensor permutation(std::int64_t n) {
    return torch::randperm(n, gen_, torch::TensorOptions().dtype(torch::kInt64));
  }

  /// Integers uniform in [lo, hi).
  torch::Tensor randint(std::int64_t lo, std::int64_t hi, at::IntArrayRef shape) {
    return torch::randint(lo, hi, shape, gen_, torch::TensorOptions().dtype(torch::kInt64));
  }

  std::uint64_t next_seed() {
    return static_cast<std::uint64_t>(
        torch::randint(0, std::numeric_limits<std::int64_t>::max(), {1}, gen_,
                       torch::TensorOptions().dtype(torch::kInt64))
            .item<std::int64_t>());
  }

 private:
  std::uint64_t seed_;
  at::Generator gen_;
};

}  // namespace semnoma
