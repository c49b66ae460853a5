#include <gtest/gtest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "attnfd/dataset.hpp"

using namespace attnfd;
namespace fs = std::filesystem;

namespace {

class DatasetIo : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::path(::testing::TempDir()) / ("afd_dataset_" + std::to_string(::getpid()));
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string path(const std::string& name) const { return (dir / name).string(); }

  void write_bytes(const std::string& name, const std::string& bytes) {
    std::ofstream f(path(name), std::ios::binary);
    f.write(bytes.data(), std::streamsize(bytes.size()));
  }

  fs::path dir;
};

ShapesSpec small_spec() {
  ShapesSpec spec;
  spec.canvas = 16;
  spec.seed = 11;
  return spec;
}

}  // namespace

TEST(Generate, DeterministicPerSeedAndIndex) {
  ShapesSpec spec = small_spec();
  Sample a = generate(spec, 3);
  Sample b = generate(spec, 3);
  EXPECT_EQ(a.image, b.image);
  EXPECT_TRUE(a.label == b.label);
  Sample c = generate(spec, 4);
  EXPECT_NE(a.image, c.image);
  spec.seed = 12;
  Sample d = generate(spec, 3);
  EXPECT_NE(a.image, d.image);
}

TEST(Generate, ZeroShapesAllBackground) {
  ShapesSpec spec = small_spec();
  spec.shapes_min = spec.shapes_max = 0;
  spec.noise = 0;
  Sample s = generate(spec, 0);
  for (uint8_t v : s.label.v) EXPECT_EQ(v, 0);
  // background (0.15, 0.15, 0.18) lands on the 8-bit grid as 38, 38, 46
  const int64_t plane = 16 * 16;
  for (int64_t i = 0; i < plane; ++i) {
    EXPECT_DOUBLE_EQ(s.image[i], real(38) / 255);
    EXPECT_DOUBLE_EQ(s.image[plane + i], real(38) / 255);
    EXPECT_DOUBLE_EQ(s.image[2 * plane + i], real(46) / 255);
  }
}

TEST(Generate, LabelsMatchShapeMembership) {
  ShapesSpec spec = small_spec();
  spec.canvas = 24;
  for (int idx = 0; idx < 5; ++idx) {
    std::vector<ShapeDesc> shapes;
    Sample s = generate(spec, idx, &shapes);
    for (int y = 0; y < 24; ++y)
      for (int x = 0; x < 24; ++x) {
        int expect = 0;
        for (int i = int(shapes.size()) - 1; i >= 0; --i)
          if (shape_contains(shapes[std::size_t(i)], x, y)) {
            expect = shapes[std::size_t(i)].cls;
            break;
          }
        ASSERT_EQ(int(s.label.at(y, x)), expect) << "pixel " << x << "," << y;
      }
  }
}

TEST(Generate, LabelsStayInClassRange) {
  ShapesSpec spec = small_spec();
  for (int idx = 0; idx < 50; ++idx) {
    Sample s = generate(spec, idx);
    for (uint8_t v : s.label.v) EXPECT_LT(int(v), spec.classes);
  }
}

TEST(Generate, ImageOnEightBitGridInUnitRange) {
  ShapesSpec spec = small_spec();
  spec.noise = real(0.5);
  Sample s = generate(spec, 7);
  for (int64_t i = 0; i < s.image.size(); ++i) {
    EXPECT_GE(s.image[i], 0.0);
    EXPECT_LE(s.image[i], 1.0);
    const double scaled = double(s.image[i]) * 255.0;
    EXPECT_NEAR(scaled, std::round(scaled), 1e-9);
  }
}

TEST(Generate, RejectsBadSpec) {
  ShapesSpec spec = small_spec();
  spec.canvas = 4;
  EXPECT_THROW(generate(spec, 0), ConfigError);
  spec = small_spec();
  spec.classes = 5;
  EXPECT_THROW(generate(spec, 0), ConfigError);
  spec = small_spec();
  EXPECT_THROW(generate(spec, -1), ContractError);
}

TEST(Augment, IdentityDraw) {
  ShapesSpec spec = small_spec();
  Sample s = generate(spec, 1);
  AugPolicy pol;
  pol.crop = spec.canvas;
  Sample out = apply_augment(s, AugDraw{1, false, 0, 0}, pol);
  EXPECT_EQ(out.image, s.image);
  EXPECT_TRUE(out.label == s.label);
}

TEST(Augment, FlipIsInvolution) {
  ShapesSpec spec = small_spec();
  Sample s = generate(spec, 2);
  AugPolicy pol;
  pol.crop = spec.canvas;
  AugDraw flip{1, true, 0, 0};
  Sample once = apply_augment(s, flip, pol);
  Sample twice = apply_augment(once, flip, pol);
  EXPECT_EQ(twice.image, s.image);
  EXPECT_TRUE(twice.label == s.label);
  EXPECT_NE(once.image, s.image);
}

TEST(Augment, PadFillsIgnoreAndZero) {
  ShapesSpec spec = small_spec();
  spec.shapes_min = spec.shapes_max = 0;
  spec.noise = 0;
  Sample s = generate(spec, 0);
  AugPolicy pol;
  pol.crop = spec.canvas;
  // scale 0.5: a 8x8 patch pasted at offset (2,3) inside a 16x16 ignore canvas
  Sample out = apply_augment(s, AugDraw{real(0.5), false, 2, 3}, pol);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const bool inside = y >= 2 && y < 10 && x >= 3 && x < 11;
      EXPECT_EQ(out.label.at(y, x), inside ? 0 : 255);
      if (!inside)
        for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(out.image[(c * 16 + y) * 16 + x], 0.0);
    }
}

TEST(Augment, NeverInventsClassIds) {
  ShapesSpec spec = small_spec();
  AugPolicy pol;
  pol.crop = spec.canvas;
  Rng rng(99);
  for (int i = 0; i < 100; ++i) {
    Sample s = generate(spec, i % 10);
    std::set<int> seen;
    for (uint8_t v : s.label.v) seen.insert(v);
    Sample out = augment(s, rng, pol);
    EXPECT_EQ(out.h(), pol.crop);
    EXPECT_EQ(out.w(), pol.crop);
    for (uint8_t v : out.label.v)
      EXPECT_TRUE(v == 255 || seen.count(v)) << "id " << int(v) << " appeared from nowhere";
  }
}

TEST(Augment, DisabledPolicyPassesThrough) {
  ShapesSpec spec = small_spec();
  Sample s = generate(spec, 5);
  AugPolicy pol;
  pol.enabled = false;
  pol.crop = 8;  // ignored when disabled
  Rng rng(1);
  Sample out = augment(s, rng, pol);
  EXPECT_EQ(out.image, s.image);
}

TEST_F(DatasetIo, PpmFixtureBytes) {
  // 2x2 P6: pixels (r,g,b) = (255,0,0) (0,128,0) / (0,0,64) (10,20,30)
  std::string bytes = "P6\n2 2\n255\n";
  const uint8_t px[12] = {255, 0, 0, 0, 128, 0, 0, 0, 64, 10, 20, 30};
  bytes.append(reinterpret_cast<const char*>(px), 12);
  write_bytes("a.ppm", bytes);
  Tensor img = load_ppm(path("a.ppm"));
  ASSERT_EQ(img.shape(), (std::vector<int>{3, 2, 2}));
  // channel-planar layout: img[c*4 + y*2 + x]
  EXPECT_DOUBLE_EQ(img[0], 1.0);                 // r at (0,0)
  EXPECT_DOUBLE_EQ(img[4 + 1], real(128) / 255);  // g at (0,1)
  EXPECT_DOUBLE_EQ(img[8 + 2], real(64) / 255);   // b at (1,0)
  EXPECT_DOUBLE_EQ(img[3], real(10) / 255);       // r at (1,1)
}

TEST_F(DatasetIo, PnmHeaderCommentsAndWhitespace) {
  std::string bytes = "P5 # comment\n# another\n 2\t1 # w h\n255 ";
  const uint8_t px[2] = {7, 250};
  bytes.append(reinterpret_cast<const char*>(px), 2);
  write_bytes("c.pgm", bytes);
  ByteImage img = load_pgm(path("c.pgm"));
  EXPECT_EQ(img.w, 2);
  EXPECT_EQ(img.h, 1);
  EXPECT_EQ(img.at(0, 0), 7);
  EXPECT_EQ(img.at(0, 1), 250);
}

TEST_F(DatasetIo, PnmRejectsMalformedHeaders) {
  write_bytes("bad_magic.ppm", "P3\n1 1\n255\nxxx");
  EXPECT_THROW(load_ppm(path("bad_magic.ppm")), ParseError);
  write_bytes("bad_maxval.pgm", std::string("P5\n1 1\n127\n") + char(0));
  EXPECT_THROW(load_pgm(path("bad_maxval.pgm")), ParseError);
  write_bytes("truncated.ppm", "P6\n2 2\n255\nab");
  EXPECT_THROW(load_ppm(path("truncated.ppm")), ParseError);
  EXPECT_THROW(load_ppm(path("missing.ppm")), IoError);
}

TEST_F(DatasetIo, AllIgnoreLabelRoundTrips) {
  ByteImage lab(3, 2, 255);
  save_pgm(path("ig.pgm"), lab);
  ByteImage back = load_pgm(path("ig.pgm"));
  EXPECT_TRUE(back == lab);
  for (uint8_t v : back.v) EXPECT_EQ(v, 255);
}

TEST_F(DatasetIo, SampleRoundTripIsExact) {
  ShapesSpec spec = small_spec();
  Sample s = generate(spec, 6);
  save_sample(s, path("s.ppm"), path("s.pgm"));
  Sample back = load_sample(path("s.ppm"), path("s.pgm"));
  EXPECT_EQ(back.image, s.image);  // generated pixels sit on the 8-bit grid
  EXPECT_TRUE(back.label == s.label);
}

TEST_F(DatasetIo, MismatchedSizesRejected) {
  ShapesSpec spec = small_spec();
  Sample s = generate(spec, 0);
  save_sample(s, path("m.ppm"), path("m.pgm"));
  save_pgm(path("wrong.pgm"), ByteImage(8, 8, 0));
  EXPECT_THROW(load_sample(path("m.ppm"), path("wrong.pgm")), ConsistencyError);
}

TEST_F(DatasetIo, ManifestRoundTripAndErrors) {
  save_manifest(path("list.txt"), {{"img/a.ppm", "lab/a.pgm"}, {"img/b.ppm", "lab/b.pgm"}});
  auto pairs = load_manifest(path("list.txt"));
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].first, "img/a.ppm");
  EXPECT_EQ(pairs[1].second, "lab/b.pgm");

  write_bytes("broken.txt", "no_tab_here\n");
  EXPECT_THROW(load_manifest(path("broken.txt")), ParseError);
  EXPECT_THROW(load_manifest(path("absent.txt")), IoError);
}

TEST_F(DatasetIo, LoadDatasetResolvesRelativePaths) {
  fs::create_directories(dir / "img");
  fs::create_directories(dir / "lab");
  ShapesSpec spec = small_spec();
  Sample s0 = generate(spec, 0);
  Sample s1 = generate(spec, 1);
  save_sample(s0, path("img/0.ppm"), path("lab/0.pgm"));
  save_sample(s1, path("img/1.ppm"), path("lab/1.pgm"));
  save_manifest(path("train.txt"), {{"img/0.ppm", "lab/0.pgm"}, {"img/1.ppm", "lab/1.pgm"}});
  std::vector<Sample> data = load_dataset(path("train.txt"));
  ASSERT_EQ(data.size(), 2u);
  EXPECT_EQ(data[0].image, s0.image);
  EXPECT_TRUE(data[1].label == s1.label);
}
