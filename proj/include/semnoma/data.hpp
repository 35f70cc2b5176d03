#pragma once

// Dataset ingestion (CIFAR-10 binary batches, raster image directories) and
// multi-user grouping for training and evaluation.

#include <semnoma/error.hpp>
#include <semnoma/rng.hpp>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace semnoma {

namespace fs = std::filesystem;

/// Images stored as uint8 [n, 3, H, W].
struct Dataset {
  torch::Tensor images;
  std::vector<std::uint8_t> labels;

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  std::int64_t height() const { return images.size(2); }
  std::int64_t width() const { return images.size(3); }

  Dataset slice(std::int64_t begin, std::int64_t count) const {
    begin = std::clamp<std::int64_t>(begin, 0, size());
    count = std::clamp<std::int64_t>(count, 0, size() - begin);
    Dataset d;
    d.images = images.narrow(0, begin, count).clone();
    if (!labels.empty()) d.labels.assign(labels.begin() + begin, labels.begin() + begin + count);
    return d;
  }

  /// Float images in [0,255] for the given indices: [len, 3, H, W].
  torch::Tensor gather(const torch::Tensor& indices) const {
    return images.index_select(0, indices.reshape({-1})).to(torch::kFloat32);
  }
};

struct CifarSplits {
  Dataset train;
  Dataset test;
};

inline constexpr std::int64_t kCifarRecord = 1 + 3 * 32 * 32;

namespace detail {

inline Dataset read_cifar_batches(const std::vector<fs::path>& files) {
  std::vector<std::uint8_t> raw;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw IngestionError("cannot open CIFAR-10 batch " + f.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.empty() || buf.size() % kCifarRecord != 0) {
      throw IngestionError("corrupt CIFAR-10 batch " + f.string() + ": " + std::to_string(buf.size()) +
                           " bytes is not a positive multiple of " + std::to_string(kCifarRecord));
    }
    raw.insert(raw.end(), buf.begin(), buf.end());
  }
  const auto n = static_cast<std::int64_t>(raw.size()) / kCifarRecord;
  Dataset d;
  d.images = torch::empty({n, 3, 32, 32}, torch::kUInt8);
  d.labels.resize(static_cast<std::size_t>(n));
  auto* dst = d.images.data_ptr<std::uint8_t>();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto* rec = raw.data() + i * kCifarRecord;
    d.labels[static_cast<std::size_t>(i)] = rec[0];
    std::copy(rec + 1, rec + kCifarRecord, dst + i * (kCifarRecord - 1));
  }
  return d;
}

}  // namespace detail

/// Reads data_batch_1..5.bin and test_batch.bin (standard binary layout: one
/// label byte then 1024 R, 1024 G, 1024 B bytes per image). `path` may be the
/// batch directory or its parent containing cifar-10-batches-bin/.
inline CifarSplits load_cifar10(const fs::path& path) {
  fs::path dir = path;
  if (fs::is_directory(path / "cifar-10-batches-bin")) dir = path / "cifar-10-batches-bin";
  std::vector<fs::path> train_files;
  for (int i = 1; i <= 5; ++i) train_files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  const fs::path test_file = dir / "test_batch.bin";
  std::string missing;
  for (const auto& f : train_files) {
    if (!fs::is_regular_file(f)) missing += " " + f.filename().string();
  }
  if (!fs::is_regular_file(test_file)) missing += " " + test_file.filename().string();
  if (!missing.empty()) throw IngestionError("CIFAR-10 archive at " + dir.string() + " is missing:" + missing);
  return {detail::read_cifar_batches(train_files), detail::read_cifar_batches({test_file})};
}

/// Writes images (must be 3x32x32) in the CIFAR-10 binary record layout.
inline void write_cifar_batch(const fs::path& file, const Dataset& d) {
  if (d.size() > 0 && (d.height() != 32 || d.width() != 32 || d.images.size(1) != 3)) {
    throw ShapeError("write_cifar_batch: images must be 3x32x32");
  }
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + file.string());
  auto img = d.images.contiguous();
  const auto* src = img.data_ptr<std::uint8_t>();
  for (std::int64_t i = 0; i < d.size(); ++i) {
    const char label = static_cast<char>(d.labels.empty() ? 0 : d.labels[static_cast<std::size_t>(i)]);
    out.put(label);
    out.write(reinterpret_cast<const char*>(src + i * (kCifarRecord - 1)), kCifarRecord - 1);
  }
}

/// Splits train images over data_batch_1..5.bin and writes test_batch.bin.
inline void write_cifar10(const fs::path& dir, const CifarSplits& splits) {
  fs::create_directories(dir);
  const auto n = splits.train.size();
  std::int64_t begin = 0;
  for (int i = 1; i <= 5; ++i) {
    const auto end = n * i / 5;
    write_cifar_batch(dir / ("data_batch_" + std::to_string(i) + ".bin"), splits.train.slice(begin, end - begin));
    begin = end;
  }
  write_cifar_batch(dir / "test_batch.bin", splits.test);
}

inline torch::Tensor mat_to_chw(const cv::Mat& rgb) {
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).contiguous();
}

inline cv::Mat chw_to_bgr(const torch::Tensor& chw) {
  auto hwc = chw.to(torch::kFloat32).round().clamp(0, 255).to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr<std::uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

/// Decodes a raster file to 3-channel RGB (grayscale is replicated); empty on failure.
inline cv::Mat read_rgb(const fs::path& file) {
  cv::Mat img = cv::imread(file.string(), cv::IMREAD_COLOR);
  if (img.empty()) return img;
  cv::Mat rgb;
  cv::cvtColor(img, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

inline void write_png(const fs::path& file, const torch::Tensor& chw) {
  if (!cv::imwrite(file.string(), chw_to_bgr(chw))) throw IngestionError("cannot write image " + file.string());
}

struct ImageDirResult {
  Dataset dataset;
  std::vector<std::string> files;
  std::int64_t skipped = 0;
};

/// Loads every decodable raster in `dir` (sorted by name), bicubically resized
/// to target_h x target_w. Undecodable files are skipped with a warning.
inline ImageDirResult load_image_dir(const fs::path& dir, std::int64_t target_h = 256, std::int64_t target_w = 256) {
  if (!fs::is_directory(dir)) throw IngestionError("image directory " + dir.string() + " does not exist");
  std::vector<fs::path> entries;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file()) entries.push_back(e.path());
  }
  std::sort(entries.begin(), entries.end());
  ImageDirResult r;
  std::vector<torch::Tensor> imgs;
  for (const auto& f : entries) {
    cv::Mat rgb = read_rgb(f);
    if (rgb.empty()) {
      std::cerr << "warning: skipping undecodable image " << f << "\n";
      ++r.skipped;
      continue;
    }
    cv::Mat resized;
    if (rgb.rows != target_h || rgb.cols != target_w) {
      cv::resize(rgb, resized, cv::Size(static_cast<int>(target_w), static_cast<int>(target_h)), 0, 0, cv::INTER_CUBIC);
    } else {
      resized = rgb;
    }
    imgs.push_back(mat_to_chw(resized));
    r.files.push_back(f.filename().string());
  }
  r.dataset.images = imgs.empty() ? torch::empty({0, 3, target_h, target_w}, torch::kUInt8) : torch::stack(imgs);
  r.dataset.labels.assign(imgs.size(), 0);
  return r;
}

/// N user slots x B groups of images, with source indices.
struct MultiUserBatch {
  torch::Tensor images;   // [N, B, 3, H, W] float in [0,255]
  torch::Tensor indices;  // [N, B] int64

  std::int64_t users() const { return images.size(0); }
  std::int64_t batch() const { return images.size(1); }
  torch::Tensor user(std::int64_t i) const { return images[i]; }

  std::vector<torch::Tensor> per_user() const {
    std::vector<torch::Tensor> out;
    for (std::int64_t i = 0; i < users(); ++i) out.push_back(images[i]);
    return out;
  }
};

inline MultiUserBatch materialize(const Dataset& d, const torch::Tensor& indices) {
  auto imgs = d.gather(indices);
  return {imgs.reshape({indices.size(0), indices.size(1), 3, d.height(), d.width()}), indices};
}

/// Random regrouping of training images into N user slots for one epoch.
///
/// samples_per_epoch = 0 uses the dataset size. Up to the dataset size the
/// epoch is a random permutation; larger pools are drawn with replacement.
/// Returns index tensors of shape [N, B], one per batch.
inline std::vector<torch::Tensor> group_train(const Dataset& d, std::int64_t users, std::int64_t batch,
                                              RandomStream& rng, std::int64_t samples_per_epoch = 0) {
  if (users < 2) throw ConfigError("group_train: need at least 2 users");
  if (batch < 1) throw ConfigError("group_train: batch size must be positive");
  const auto per_batch = users * batch;
  if (d.size() < per_batch) {
    throw ConfigError("group_train: dataset of " + std::to_string(d.size()) + " images is smaller than B*N = " +
                      std::to_string(per_batch));
  }
  const auto pool = samples_per_epoch > 0 ? samples_per_epoch : d.size();
  torch::Tensor order = pool <= d.size() ? rng.permutation(d.size()).narrow(0, 0, pool) : rng.randint(0, d.size(), {pool});
  std::vector<torch::Tensor> out;
  for (std::int64_t b = 0; b + per_batch <= pool; b += per_batch) {
    out.push_back(order.narrow(0, b, per_batch).reshape({users, batch}));
  }
  return out;
}

struct TestGrouping {
  std::vector<torch::Tensor> batches;  // [N, B_i] index tensors
  std::int64_t group_size = 0;
  std::int64_t dropped = 0;
};

/// Deterministic partition into N contiguous, disjoint groups; group i feeds
/// user i and groups are aligned positionally. Remainder images are dropped.
inline TestGrouping group_test(const Dataset& d, std::int64_t users, std::int64_t batch = 32) {
  if (users < 1) throw ConfigError("group_test: need at least 1 user");
  if (batch < 1) throw ConfigError("group_test: batch size must be positive");
  TestGrouping g;
  g.group_size = d.size() / users;
  g.dropped = d.size() - g.group_size * users;
  if (g.dropped > 0) {
    std::cerr << "group_test: dropping " << g.dropped << " trailing images not divisible by " << users << " users\n";
  }
  for (std::int64_t start = 0; start < g.group_size; start += batch) {
    const auto len = std::min(batch, g.group_size - start);
    auto base = torch::arange(start, start + len, torch::kInt64);
    auto offsets = (torch::arange(users, torch::kInt64) * g.group_size).unsqueeze(1);
    g.batches.push_back(base.unsqueeze(0) + offsets);
  }
  return g;
}

/// Random 32x32-style patches cut from larger photographs: each patch covers a
/// randomly sized square region (min_side..max_side source pixels) resampled to
/// patch x patch. Used to build CIFAR-layout fixtures when the real archive is absent.
inline Dataset make_patch_dataset(const std::vector<cv::Mat>& photos, std::int64_t count, RandomStream& rng,
                                  std::int64_t patch = 32, int min_side = 48, int max_side = 160) {
  if (photos.empty()) throw IngestionError("make_patch_dataset: no source photos");
  Dataset d;
  d.images = torch::empty({count, 3, patch, patch}, torch::kUInt8);
  d.labels.resize(static_cast<std::size_t>(count));
  auto draws = rng.uniform({count, 4}, 0.0, 1.0);
  auto acc = draws.accessor<double, 2>();
  for (std::int64_t i = 0; i < count; ++i) {
    const auto which = std::min<std::size_t>(static_cast<std::size_t>(acc[i][0] * photos.size()), photos.size() - 1);
    const cv::Mat& src = photos[which];
    const int limit = std::min({max_side, src.rows, src.cols});
    const int lo = std::min(min_side, limit);
    const int side = lo + static_cast<int>(acc[i][1] * (limit - lo));
    const int y = static_cast<int>(acc[i][2] * (src.rows - side));
    const int x = static_cast<int>(acc[i][3] * (src.cols - side));
    cv::Mat crop = src(cv::Rect(x, y, side, side));
    cv::Mat small;
    cv::resize(crop, small, cv::Size(static_cast<int>(patch), static_cast<int>(patch)), 0, 0, cv::INTER_AREA);
    d.images[i].copy_(mat_to_chw(small));
    d.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(which);
  }
  return d;
}

}  // namespace semnoma
