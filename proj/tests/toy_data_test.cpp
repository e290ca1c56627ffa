#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dfkd/toy_data.hpp"
#include "test_util.hpp"

using dfkd::LabeledImageSet;
using dfkd::synth_fgvc_dataset;

TEST(SynthDataset, CountsAndShapes) {
  auto data = synth_fgvc_dataset(2, 5, 10, 32, 0);
  EXPECT_EQ(data.num_classes(), 10);
  EXPECT_EQ(data.size(), 100);
  EXPECT_EQ(data.images.shape(), (std::vector<int>{100, 3, 32, 32}));
  EXPECT_EQ(data.labels.size(), 100u);
  for (int c = 0; c < 10; ++c)
    EXPECT_EQ(std::count(data.labels.begin(), data.labels.end(), c), 10);
}

TEST(SynthDataset, DeterministicBitIdentical) {
  auto a = synth_fgvc_dataset(2, 5, 10, 32, 0);
  auto b = synth_fgvc_dataset(2, 5, 10, 32, 0);
  ASSERT_EQ(a.images.numel(), b.images.numel());
  EXPECT_EQ(std::memcmp(a.images.data(), b.images.data(), sizeof(float) * a.images.numel()), 0);
  EXPECT_EQ(a.labels, b.labels);
  auto c = synth_fgvc_dataset(2, 5, 10, 32, 1);
  EXPECT_NE(std::memcmp(a.images.data(), c.images.data(), sizeof(float) * a.images.numel()), 0);
}

TEST(SynthDataset, ValueRange) {
  auto data = synth_fgvc_dataset(2, 3, 5, 32, 3);
  for (std::int64_t i = 0; i < data.images.numel(); ++i) {
    ASSERT_GE(data.images[i], -1.0f);
    ASSERT_LE(data.images[i], 1.0f);
  }
}

TEST(SynthDataset, RejectsBadParams) {
  EXPECT_THROW(synth_fgvc_dataset(0, 5, 10, 32, 0), std::invalid_argument);
  EXPECT_THROW(synth_fgvc_dataset(2, 0, 10, 32, 0), std::invalid_argument);
  EXPECT_THROW(synth_fgvc_dataset(2, 5, 0, 32, 0), std::invalid_argument);
  EXPECT_THROW(synth_fgvc_dataset(2, 5, 10, 30, 0), std::invalid_argument);
  EXPECT_THROW(synth_fgvc_dataset(2, 5, 10, 8, 0), std::invalid_argument);
}

// Part-region channel means, recomputed from the emitted tensors with the
// published part geometry (radius 0.09*S at distance 0.28*S, angle
// 2*pi*super/num_super + pi/4). Any two sub-classes of one super-class must
// differ by >= 0.2 in at least one channel.
TEST(SynthDataset, PartRegionSeparatesSubclasses) {
  const int num_super = 2, subs = 5, spc = 10, s = 32;
  auto data = synth_fgvc_dataset(num_super, subs, spc, s, 0);
  const double radius = std::max(2.5, 0.09 * s);
  std::vector<std::array<double, 3>> class_mean(10, {0, 0, 0});
  std::vector<int> class_count(10, 0);
  for (int img = 0; img < data.size(); ++img) {
    const int cls = data.labels[static_cast<std::size_t>(img)];
    const int super_idx = cls / subs;
    const double angle = 2.0 * M_PI * super_idx / num_super + M_PI / 4.0;
    const double cx = s / 2.0 + 0.28 * s * std::cos(angle);
    const double cy = s / 2.0 + 0.28 * s * std::sin(angle);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        if (dx * dx + dy * dy > radius * radius) continue;
        for (int c = 0; c < 3; ++c) class_mean[static_cast<std::size_t>(cls)][static_cast<std::size_t>(c)] += data.images.at(img, c, y, x);
        class_count[static_cast<std::size_t>(cls)]++;
      }
  }
  for (int cls = 0; cls < 10; ++cls)
    for (int c = 0; c < 3; ++c) class_mean[static_cast<std::size_t>(cls)][static_cast<std::size_t>(c)] /= class_count[static_cast<std::size_t>(cls)];

  for (int super_idx = 0; super_idx < num_super; ++super_idx)
    for (int u = 0; u < subs; ++u)
      for (int v = u + 1; v < subs; ++v) {
        const int a = super_idx * subs + u, b = super_idx * subs + v;
        double best = 0;
        for (int c = 0; c < 3; ++c)
          best = std::max(best, std::abs(class_mean[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] -
                                         class_mean[static_cast<std::size_t>(b)][static_cast<std::size_t>(c)]));
        EXPECT_GE(best, 0.2) << "classes " << a << " vs " << b;
      }
}

TEST(Split, StratifiedDeterministicDisjoint) {
  auto data = synth_fgvc_dataset(2, 5, 10, 32, 1);
  auto [train, test] = dfkd::split(data, 0.8, 1);
  EXPECT_EQ(train.size(), 80);
  EXPECT_EQ(test.size(), 20);
  for (int c = 0; c < 10; ++c) {
    EXPECT_EQ(std::count(train.labels.begin(), train.labels.end(), c), 8);
    EXPECT_EQ(std::count(test.labels.begin(), test.labels.end(), c), 2);
  }
  auto [train2, test2] = dfkd::split(data, 0.8, 1);
  EXPECT_EQ(std::memcmp(train.images.data(), train2.images.data(), sizeof(float) * train.images.numel()), 0);
  EXPECT_EQ(std::memcmp(test.images.data(), test2.images.data(), sizeof(float) * test.images.numel()), 0);

  // union of the two sides covers the multiset of images exactly once:
  // compare checksums of per-image byte blocks as a multiset
  auto image_crcs = [](const LabeledImageSet& d) {
    std::multiset<std::uint32_t> out;
    const std::int64_t stride = 3LL * d.image_size() * d.image_size();
    for (int i = 0; i < d.size(); ++i)
      out.insert(dfkd::crc32_bytes(d.images.data() + i * stride, sizeof(float) * stride));
    return out;
  };
  auto all = image_crcs(data);
  auto tr = image_crcs(train);
  auto te = image_crcs(test);
  tr.insert(te.begin(), te.end());
  EXPECT_EQ(all, tr);
}

TEST(Split, RejectsBadArguments) {
  auto data = synth_fgvc_dataset(2, 2, 4, 32, 0);
  EXPECT_THROW(dfkd::split(data, 1.0, 0), std::invalid_argument);
  EXPECT_THROW(dfkd::split(data, 0.0, 0), std::invalid_argument);
  auto tiny = synth_fgvc_dataset(1, 2, 1, 32, 0);  // one sample per class
  EXPECT_THROW(dfkd::split(tiny, 0.5, 0), std::invalid_argument);
}

TEST(DatasetCache, RoundTripAndChecksum) {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "dfkd_cache_test";
  fs::create_directories(dir);
  const std::string path = (dir / "toy.bin").string();
  auto data = synth_fgvc_dataset(2, 2, 3, 32, 7);
  dfkd::save_dataset(data, path);
  auto loaded = dfkd::load_dataset(path);
  EXPECT_EQ(loaded.labels, data.labels);
  EXPECT_EQ(loaded.class_names, data.class_names);
  EXPECT_EQ(std::memcmp(loaded.images.data(), data.images.data(), sizeof(float) * data.images.numel()), 0);

  // corrupt a payload byte: load must fail
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(64);
    char c;
    f.seekg(64);
    f.get(c);
    f.seekp(64);
    f.put(static_cast<char>(c ^ 0x5a));
  }
  EXPECT_THROW(dfkd::load_dataset(path), std::runtime_error);
  fs::remove_all(dir);
}
