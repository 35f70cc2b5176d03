#pragma once

#include <semnoma/semnoma.hpp>

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

namespace semnoma::testing {

namespace fs = std::filesystem;

/// Fresh directory under the build tree, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::path(SEMNOMA_SCRATCH_ROOT) / (tag + "-" + std::to_string(rd()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

/// CIFAR-10 archive: $SEMNOMA_CIFAR10_DIR when set, otherwise a photo-patch
/// archive in the standard binary layout, built once under the build tree.
inline fs::path cifar_dir() {
  if (const char* env = std::getenv("SEMNOMA_CIFAR10_DIR"); env != nullptr && *env != '\0') return env;
  const fs::path dir = fs::path(SEMNOMA_SCRATCH_ROOT) / "cifar-fixture";
  if (!fs::exists(dir / "test_batch.bin")) {
    fs::remove_all(dir);
    cmd_make_fixture(SEMNOMA_PHOTO_DIR, dir, 2500, 1000, 7);
  }
  return dir;
}

inline bool using_real_cifar() {
  const char* env = std::getenv("SEMNOMA_CIFAR10_DIR");
  return env != nullptr && *env != '\0';
}

inline std::string source_path(const std::string& rel) { return (fs::path(SEMNOMA_SOURCE_DIR) / rel).string(); }

/// Minimal 32x32 codec for fast unit tests.
inline CodecConfig micro_codec(std::int64_t users = 2) {
  CodecConfig c = CodecConfig::tiny32(16);
  c.stage_dims = {8, 16};
  c.stage_depths = {1, 1};
  c.num_users = users;
  return c;
}

inline Dataset random_dataset(std::int64_t n, std::uint64_t seed, std::int64_t hw = 32) {
  RandomStream rng(seed);
  Dataset d;
  d.images = rng.randint(0, 256, {n, 3, hw, hw}).to(torch::kUInt8);
  d.labels.assign(static_cast<std::size_t>(n), 0);
  return d;
}

inline bool bitwise_equal(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes() == b.sizes() && a.scalar_type() == b.scalar_type() && torch::equal(a, b);
}

inline bool same_parameters(const torch::nn::Module& a, const torch::nn::Module& b) {
  auto pa = a.named_parameters();
  auto pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (const auto& item : pa) {
    const auto* other = pb.find(item.key());
    if (other == nullptr || !bitwise_equal(item.value(), *other)) return false;
  }
  return true;
}

}  // namespace semnoma::testing
