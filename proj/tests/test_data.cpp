#include "support.hpp"

#include <fstream>
#include <set>

#include <opencv2/imgcodecs.hpp>

using namespace semnoma;
using semnoma::testing::TempDir;

namespace {

std::uint64_t fnv1a(const torch::Tensor& t) {
  auto c = t.contiguous();
  const auto* p = c.data_ptr<std::uint8_t>();
  std::uint64_t h = 1469598103934665603ULL;
  for (std::int64_t i = 0; i < c.numel(); ++i) h = (h ^ p[i]) * 1099511628211ULL;
  return h;
}

std::set<std::int64_t> as_set(const torch::Tensor& t) {
  auto c = t.contiguous();
  return {c.data_ptr<std::int64_t>(), c.data_ptr<std::int64_t>() + c.numel()};
}

}  // namespace

TEST(Cifar, RoundTripPreservesBytesAndSplit) {
  TempDir dir("cifar");
  CifarSplits s{semnoma::testing::random_dataset(25, 1), semnoma::testing::random_dataset(7, 2)};
  for (std::size_t i = 0; i < s.train.labels.size(); ++i) s.train.labels[i] = static_cast<std::uint8_t>(i % 10);
  write_cifar10(dir.path(), s);
  auto a = load_cifar10(dir.path());
  auto b = load_cifar10(dir.path());
  EXPECT_EQ(a.train.size(), 25);
  EXPECT_EQ(a.test.size(), 7);
  EXPECT_TRUE(torch::equal(a.train.images, s.train.images));
  EXPECT_TRUE(torch::equal(a.test.images, s.test.images));
  EXPECT_EQ(a.train.labels, s.train.labels);
  EXPECT_EQ(a.train.images.scalar_type(), torch::kUInt8);
  EXPECT_EQ(fnv1a(a.train.images[0]), fnv1a(b.train.images[0]));
}

TEST(Cifar, FixtureHasStandardShape) {
  auto s = load_cifar10(semnoma::testing::cifar_dir());
  if (semnoma::testing::using_real_cifar()) {
    EXPECT_EQ(s.train.size(), 50000);
    EXPECT_EQ(s.test.size(), 10000);
  }
  EXPECT_EQ(s.train.images.sizes().slice(1), (std::vector<std::int64_t>{3, 32, 32}));
  EXPECT_GT(s.train.images.to(torch::kFloat32).std().item<float>(), 10.0f);
}

TEST(Cifar, MissingAndCorruptArchivesAreReported) {
  TempDir dir("cifar-bad");
  try {
    load_cifar10(dir.path());
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("data_batch_1.bin"), std::string::npos);
  }
  write_cifar10(dir.path(), {semnoma::testing::random_dataset(5, 1), semnoma::testing::random_dataset(5, 2)});
  std::ofstream(dir / "test_batch.bin", std::ios::binary | std::ios::app) << "xyz";
  EXPECT_THROW(load_cifar10(dir.path()), IngestionError);
}

TEST(ImageDir, ResizesConvertsAndSkips) {
  TempDir dir("imgdir");
  for (int i = 0; i < 3; ++i) {
    cv::Mat solid(512, 512, CV_8UC3, cv::Scalar(30, 90 + i, 200));
    cv::imwrite((dir / ("solid" + std::to_string(i) + ".png")).string(), solid);
  }
  cv::Mat gray(40, 60, CV_8UC1, cv::Scalar(77));
  cv::imwrite((dir / "gray.png").string(), gray);
  std::ofstream(dir / "broken.jpg") << "not an image";
  auto r = load_image_dir(dir.path());
  EXPECT_EQ(r.skipped, 1);
  ASSERT_EQ(r.dataset.size(), 4);
  EXPECT_EQ(r.dataset.images.sizes(), (std::vector<std::int64_t>{4, 3, 256, 256}));
  // Sorted by name: gray.png first, then the solids.
  EXPECT_EQ(r.files.front(), "gray.png");
  EXPECT_TRUE(torch::equal(r.dataset.images[0], torch::full({3, 256, 256}, 77, torch::kUInt8)));
  auto solid = r.dataset.images[1];
  EXPECT_TRUE(torch::equal(solid[0], torch::full({256, 256}, 200, torch::kUInt8)));  // R
  EXPECT_TRUE(torch::equal(solid[1], torch::full({256, 256}, 90, torch::kUInt8)));
  EXPECT_TRUE(torch::equal(solid[2], torch::full({256, 256}, 30, torch::kUInt8)));
  EXPECT_THROW(load_image_dir(dir / "nope"), IngestionError);
}

TEST(GroupTrain, ShapeDeterminismAndRegrouping) {
  auto d = semnoma::testing::random_dataset(40, 3, 8);
  RandomStream a(5), b(5);
  auto ga = group_train(d, 2, 4, a);
  auto gb = group_train(d, 2, 4, b);
  ASSERT_EQ(ga.size(), 5u);
  for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_TRUE(torch::equal(ga[i], gb[i]));
  auto batch = materialize(d, ga[0]);
  EXPECT_EQ(batch.images.sizes(), (std::vector<std::int64_t>{2, 4, 3, 8, 8}));
  EXPECT_TRUE(torch::equal(batch.user(1)[2], d.images[ga[0][1][2].item<std::int64_t>()].to(torch::kFloat32)));
  auto next = group_train(d, 2, 4, a);
  EXPECT_FALSE(torch::equal(next[0], ga[0]));
  EXPECT_THROW(group_train(d, 1, 4, a), ConfigError);
  EXPECT_THROW(group_train(d, 2, 21, a), ConfigError);
}

TEST(GroupTrain, UsageApproximatelyUniform) {
  auto d = semnoma::testing::random_dataset(1000, 4, 4);
  auto usage = [&](const std::vector<torch::Tensor>& batches) {
    auto counts = torch::zeros({1000}, torch::kInt64);
    for (const auto& b : batches) counts.index_add_(0, b.reshape({-1}), torch::ones({b.numel()}, torch::kInt64));
    return counts.max().item<double>() / counts.min().item<double>();
  };
  RandomStream once(7);
  EXPECT_EQ(usage(group_train(d, 2, 10, once)), 1.0);
  RandomStream pool(6);
  EXPECT_LT(usage(group_train(d, 2, 32, pool, 200000)), 2.0);

  RandomStream partial(8);
  std::set<std::int64_t> seen;
  for (const auto& b : group_train(d, 2, 8, partial)) {
    auto s = as_set(b);
    seen.insert(s.begin(), s.end());
  }
  EXPECT_EQ(seen.size(), 992u);
}

TEST(GroupTest, DisjointContiguousAndStable) {
  auto d = semnoma::testing::random_dataset(101, 5, 4);
  auto g = group_test(d, 2, 16);
  auto h = group_test(d, 2, 16);
  EXPECT_EQ(g.group_size, 50);
  EXPECT_EQ(g.dropped, 1);
  ASSERT_EQ(g.batches.size(), h.batches.size());
  std::set<std::int64_t> users[2];
  for (std::size_t i = 0; i < g.batches.size(); ++i) {
    EXPECT_TRUE(torch::equal(g.batches[i], h.batches[i]));
    for (int u = 0; u < 2; ++u) {
      auto s = as_set(g.batches[i][u]);
      users[u].insert(s.begin(), s.end());
    }
  }
  EXPECT_EQ(users[0].size(), 50u);
  EXPECT_EQ(*users[0].begin(), 0);
  EXPECT_EQ(*users[1].begin(), 50);
  for (auto i : users[0]) EXPECT_EQ(users[1].count(i), 0u);
}
