#include <gtest/gtest.h>

#include <fstream>

#include "test_support.hpp"
#include "vmddpm/checkpoint.hpp"
#include "vmddpm/errors.hpp"
#include "vmddpm/image_io.hpp"

using namespace vmddpm;

namespace {

ckpt::Checkpoint sample_checkpoint() {
  Rng rng(1);
  ckpt::Checkpoint c;
  c.config_text = "seed = 3\nlr = 0.0001\n";
  c.step = 42;
  c.rng_state = serialize_rng(rng);
  c.data_state = "1 2 3";
  c.weights = {{"a.weight", normal_tensor({3, 4}, rng)}, {"a.bias", normal_tensor({3}, rng)}};
  c.adam_m = {{"a.weight", normal_tensor({3, 4}, rng)}};
  c.adam_v = {{"a.weight", uniform_tensor({3, 4}, 0, 1, rng)}};
  c.adam_step = 42;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const auto dir = testing_support::temp_dir("ckpt_roundtrip");
  const auto c = sample_checkpoint();
  ckpt::save(c, dir / "a.ckpt");
  const auto loaded = ckpt::load(dir / "a.ckpt");
  EXPECT_EQ(loaded.config_text, c.config_text);
  EXPECT_EQ(loaded.step, 42u);
  EXPECT_EQ(loaded.weights, c.weights);
  EXPECT_EQ(loaded.adam_v, c.adam_v);
  ckpt::save(loaded, dir / "b.ckpt");
  EXPECT_EQ(ckpt::weight_section(ckpt::load(dir / "b.ckpt")), ckpt::weight_section(c));
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(dir / "a.ckpt.tmp"));
}

TEST(Checkpoint, CorruptionIsDetected) {
  const std::string bytes = ckpt::serialize(sample_checkpoint());
  EXPECT_NO_THROW(ckpt::deserialize(bytes));
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(ckpt::deserialize(flipped), CheckpointError);
  EXPECT_THROW(ckpt::deserialize(bytes.substr(0, bytes.size() - 9)), CheckpointError);
  EXPECT_THROW(ckpt::deserialize("VMDDPMXX" + bytes.substr(8)), CheckpointError);
  EXPECT_THROW(ckpt::deserialize(""), CheckpointError);
  EXPECT_THROW(ckpt::load("/nonexistent/x.ckpt"), CheckpointError);
}

TEST(Checkpoint, FutureVersionIsRejected) {
  auto c = sample_checkpoint();
  c.version = ckpt::kFormatVersion + 1;
  EXPECT_THROW(ckpt::deserialize(ckpt::serialize(c)), CheckpointError);
}

TEST(ImageIo, PixelMappingEndpoints) {
  EXPECT_EQ(io::to_u8(-1.0), 0);
  EXPECT_EQ(io::to_u8(1.0), 255);
  EXPECT_EQ(io::to_u8(-7.0), 0);
  EXPECT_EQ(io::to_u8(3.0), 255);
  EXPECT_EQ(io::to_u8(0.0), 128);  // round(127.5)
}

TEST(ImageIo, GridLayout) {
  std::vector<Tensor> imgs;
  for (int i = 0; i < 16; ++i) imgs.emplace_back(Shape{1, 3, 2}, i / 16.0);
  Tensor g = io::make_grid(imgs);
  EXPECT_EQ(g.shape(), (Shape{1, 12, 8}));
  EXPECT_EQ(g.at(0, 11, 7), 15 / 16.0);
  EXPECT_EQ(g.at(0, 3, 2), 5 / 16.0);
  imgs.resize(5);
  g = io::make_grid(imgs);
  EXPECT_EQ(g.shape(), (Shape{1, 6, 6}));
  EXPECT_EQ(g.at(0, 5, 5), -1.0);
  EXPECT_THROW(io::make_grid({}), ShapeError);
}

TEST(ImageIo, PngBytesAreStableAndReadBack) {
  const auto dir = testing_support::temp_dir("png");
  Rng rng(2);
  const Tensor img = uniform_tensor({3, 9, 7}, -1, 1, rng);
  EXPECT_EQ(io::encode_png(img), io::encode_png(img));
  io::write_png(dir / "x.png", img);
  const Tensor back = io::read_png(dir / "x.png");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], io::to_u8(img[i]) / 127.5 - 1, 1e-12);
  EXPECT_THROW(io::encode_png(Tensor({2, 4, 4})), ShapeError);
  EXPECT_THROW(io::write_png("/nonexistent/dir/x.png", img), IoError);
}
