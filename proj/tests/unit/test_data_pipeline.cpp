#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "oracles/oracle_values.hpp"
#include "test_support.hpp"
#include "vmddpm/data_pipeline.hpp"
#include "vmddpm/errors.hpp"
#include "vmddpm/image_io.hpp"

using namespace vmddpm;
using namespace vmddpm::data;

namespace {

void expect_in_range(const Tensor& t) {
  for (double v : t.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

}  // namespace

TEST(Preprocess, IntensityMapping) {
  const std::vector<std::uint8_t> gray(16 * 16, 128);
  const Tensor t = preprocess_image(gray, 16, 16, 1, 8, 1);
  ASSERT_EQ(t.shape(), (Shape{1, 8, 8}));
  for (double v : t.values()) EXPECT_NEAR(v, oracle::kMidGray, 1e-12);

  std::vector<std::uint8_t> ends(4 * 4);
  for (std::size_t i = 0; i < ends.size(); ++i) ends[i] = (i % 2) ? 255 : 0;
  const Tensor e = preprocess_image(ends, 4, 4, 1, 4, 1);
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(e[i], (i % 2) ? 1.0 : -1.0);
}

TEST(Preprocess, CenterCropBeforeResize) {
  // 100 rows, 200 columns: the outer 50 columns on each side are dropped.
  const std::size_t h = 100, w = 200;
  std::vector<std::uint8_t> px(h * w, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 50; x < 150; ++x) px[y * w + x] = 255;
  }
  const Tensor t = preprocess_image(px, h, w, 1, 10, 1);
  for (double v : t.values()) EXPECT_EQ(v, 1.0);
}

TEST(Preprocess, ChannelConversion) {
  // RGB (30, 60, 90) -> gray is the plain average 60.
  std::vector<std::uint8_t> rgb;
  for (int i = 0; i < 9; ++i) rgb.insert(rgb.end(), {30, 60, 90});
  const Tensor g = preprocess_image(rgb, 3, 3, 3, 3, 1);
  for (double v : g.values()) EXPECT_NEAR(v, 60 / 127.5 - 1, 1e-12);
  const Tensor c = preprocess_image(rgb, 3, 3, 3, 3, 3);
  ASSERT_EQ(c.shape(), (Shape{3, 3, 3}));
  EXPECT_NEAR(c.at(0, 1, 1), 30 / 127.5 - 1, 1e-12);
  EXPECT_NEAR(c.at(2, 1, 1), 90 / 127.5 - 1, 1e-12);
  const Tensor up = preprocess_image(std::vector<std::uint8_t>(9, 0), 3, 3, 1, 3, 3);
  EXPECT_EQ(up.shape(), (Shape{3, 3, 3}));
}

TEST(LoadDataset, DecodesSortsAndSkips) {
  const auto dir = testing_support::temp_dir("load_dataset");
  Tensor a({3, 12, 20}, -1.0), b({1, 16, 16}, 1.0);
  a.at(0, 5, 10) = 1.0;
  io::write_png(dir / "b.png", b);
  io::write_png(dir / "a.png", a);
  std::ofstream(dir / "broken.png") << "not an image";
  std::ofstream(dir / "notes.txt") << "ignored";
  const auto ds = load_dataset(dir, 8, 1);
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.skipped, 1u);
  EXPECT_EQ(ds.item_shape(), (Shape{1, 8, 8}));
  for (const auto& item : ds.items) {
    EXPECT_EQ(item.shape(), ds.item_shape());
    expect_in_range(item);
  }
  for (double v : ds.items[1].values()) EXPECT_EQ(v, 1.0);  // b.png sorts second
  EXPECT_NO_THROW(ds.validate());
}

TEST(LoadDataset, Errors) {
  EXPECT_THROW(load_dataset("/nonexistent/vmddpm", 8, 1), IoError);
  const auto empty = testing_support::temp_dir("load_empty");
  EXPECT_THROW(load_dataset(empty, 8, 1), DatasetError);
  DatasetHandle bad;
  bad.resolution = 4;
  bad.items.push_back(Tensor({1, 4, 4}, 2.0));
  EXPECT_THROW(bad.validate(), DatasetError);
}

TEST(Augment, FlipIsAnInvolution) {
  Rng rng(1);
  const Tensor x = normal_tensor({2, 5, 6}, rng);
  EXPECT_EQ(hflip(hflip(x)), x);
  EXPECT_NE(hflip(x), x);
  Tensor sym({1, 3, 4});
  for (std::size_t y = 0; y < 3; ++y) {
    for (std::size_t c = 0; c < 4; ++c) sym.at(0, y, c) = double(std::min(c, 3 - c) + y);
  }
  EXPECT_EQ(hflip(sym), sym);
}

TEST(Augment, FlipFrequency) {
  Rng rng(2);
  Tensor x({1, 1, 2}, std::vector<double>{0.0, 1.0});
  int flips = 0;
  for (int i = 0; i < 10000; ++i) flips += augment(x, rng)[0] == 1.0;
  EXPECT_NEAR(flips / 10000.0, 0.5, 0.02);
}

TEST(ToyData, DeterministicInRangeAndShaped) {
  for (const char* name : {"gaussians", "rings", "bars"}) {
    const auto a = synth_toy_dataset(name, 6, 16, 3);
    const auto b = synth_toy_dataset(name, 6, 16, 3);
    const auto c = synth_toy_dataset(name, 6, 16, 4);
    EXPECT_EQ(a.items, b.items) << name;
    EXPECT_NE(a.items, c.items) << name;
    for (const auto& item : a.items) {
      EXPECT_EQ(item.shape(), (Shape{1, 16, 16}));
      expect_in_range(item);
    }
  }
  EXPECT_EQ(synth_toy_dataset("rings", 2, 8, 0, 3).items[0].shape(), (Shape{3, 8, 8}));
  EXPECT_THROW(synth_toy_dataset("spirals", 2, 8, 0), ConfigError);
}

TEST(ToyData, RingsAreBrighterThanBackground) {
  const auto ds = synth_toy_dataset("rings", 16, 32, 0);
  for (const auto& item : ds.items) {
    double ring = 0, bg = 0;
    std::size_t nr = 0, nb = 0;
    for (double v : item.values()) {
      if (v > 0) {
        ring += v;
        ++nr;
      } else {
        bg += v;
        ++nb;
      }
    }
    ASSERT_GT(nr, 0u);
    ASSERT_GT(nb, nr);
    EXPECT_GT(ring / double(nr), bg / double(nb));
  }
}

TEST(Batches, EpochStructure) {
  const auto ds = synth_toy_dataset("bars", 35, 8, 1);
  BatchIterator it(ds, 16, 11, 12, false);
  EXPECT_EQ(it.batches_per_epoch(), 2u);
  const auto order = it.epoch_order(0);
  std::set<std::size_t> seen;
  for (int b = 0; b < 2; ++b) {
    const Batch batch = it.next();
    EXPECT_EQ(batch.epoch, 0u);
    ASSERT_EQ(batch.images.size(), 16u);
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(batch.images[k], ds.items[batch.indices[k]]);
    seen.insert(batch.indices.begin(), batch.indices.end());
  }
  EXPECT_EQ(seen, std::set<std::size_t>(order.begin(), order.begin() + 32));
  EXPECT_EQ(it.next().epoch, 1u);
}

TEST(Batches, SameSeedsSameStreamAndRestore) {
  const auto ds = synth_toy_dataset("gaussians", 20, 8, 1);
  BatchIterator a(ds, 4, 5, 6), b(ds, 4, 5, 6);
  for (int i = 0; i < 12; ++i) {
    const Batch x = a.next(), y = b.next();
    EXPECT_EQ(x.indices, y.indices);
    EXPECT_EQ(x.images, y.images);
  }
  const std::string state = a.state();
  std::vector<Batch> expected;
  for (int i = 0; i < 7; ++i) expected.push_back(a.next());
  BatchIterator c(ds, 4, 5, 6);
  c.restore(state);
  for (const Batch& e : expected) {
    const Batch got = c.next();
    EXPECT_EQ(got.epoch, e.epoch);
    EXPECT_EQ(got.indices, e.indices);
    EXPECT_EQ(got.images, e.images);
  }
  EXPECT_THROW(c.restore("garbage"), IoError);
}

TEST(Batches, AugmentedItemsStayInRange) {
  const auto ds = synth_toy_dataset("rings", 8, 16, 2);
  BatchIterator it(ds, 8, 1, 2, true);
  bool flipped = false;
  for (int e = 0; e < 3; ++e) {
    const Batch b = it.next();
    for (std::size_t k = 0; k < b.images.size(); ++k) {
      expect_in_range(b.images[k]);
      const Tensor& orig = ds.items[b.indices[k]];
      EXPECT_TRUE(b.images[k] == orig || b.images[k] == hflip(orig));
      flipped |= b.images[k] != orig;
    }
  }
  EXPECT_TRUE(flipped);
}
