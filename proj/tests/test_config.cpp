#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "attnfd/config.hpp"

using namespace attnfd;

TEST(Config, DefaultsValidate) {
  RunConfig cfg;
  cfg.validate();
  EXPECT_EQ(cfg.seed, 1u);
  EXPECT_EQ(cfg.method, Method::attnfd);
  EXPECT_EQ(cfg.taps.size(), 3u);
  EXPECT_EQ(cfg.canvas, 64);
  EXPECT_EQ(cfg.teacher_widths, (std::vector<int>{32, 64, 128}));
  EXPECT_EQ(cfg.student_widths, (std::vector<int>{8, 16, 32}));
  EXPECT_DOUBLE_EQ(cfg.alpha, 2.0);
}

TEST(Config, EmptyTextKeepsDefaults) {
  RunConfig cfg = parse_config_text("");
  EXPECT_EQ(config_to_text(cfg), config_to_text(RunConfig{}));
}

TEST(Config, OverridesApply) {
  RunConfig cfg = parse_config_text(
      "seed = 7\n"
      "method = kd\n"
      "taps = B,D\n"
      "data.dir = /tmp/somewhere\n"
      "net.teacher_widths = 16,32\n"
      "net.student_widths = 8,16\n"
      "distill.alpha = 0.5\n"
      "distill.normalize = pixel\n"
      "aug.enabled = false\n"
      "train.lr0 = 0.1\n");
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_EQ(cfg.method, Method::kd);
  ASSERT_EQ(cfg.taps.size(), 2u);
  EXPECT_EQ(cfg.taps[0], TapId::B);
  EXPECT_EQ(cfg.taps[1], TapId::D);
  EXPECT_EQ(cfg.data_dir, "/tmp/somewhere");
  EXPECT_EQ(cfg.teacher_widths, (std::vector<int>{16, 32}));
  EXPECT_DOUBLE_EQ(cfg.alpha, 0.5);
  EXPECT_EQ(cfg.normalize, NormMode::pixel_vector);
  EXPECT_FALSE(cfg.aug_enabled);
  EXPECT_DOUBLE_EQ(cfg.lr0, 0.1);
}

TEST(Config, CommentsAndBlankLines) {
  RunConfig cfg = parse_config_text(
      "# full line comment\n"
      "\n"
      "seed = 5   # trailing comment\n"
      "   train.epochs=2\t\n");
  EXPECT_EQ(cfg.seed, 5u);
  EXPECT_EQ(cfg.epochs, 2);
}

TEST(Config, RejectsUnknownAndDuplicateKeys) {
  EXPECT_THROW(parse_config_text("nonsense = 1\n"), ConfigError);
  EXPECT_THROW(parse_config_text("seed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(parse_config_text("just a line\n"), ConfigError);
}

TEST(Config, RejectsMalformedValues) {
  EXPECT_THROW(parse_config_text("seed = -3\n"), ConfigError);
  EXPECT_THROW(parse_config_text("train.lr0 = abc\n"), ConfigError);
  EXPECT_THROW(parse_config_text("train.epochs = 1.5\n"), ConfigError);
  EXPECT_THROW(parse_config_text("aug.enabled = yes\n"), ConfigError);
  EXPECT_THROW(parse_config_text("method = foo\n"), ConfigError);
  EXPECT_THROW(parse_config_text("taps = Q\n"), ConfigError);
  EXPECT_THROW(parse_config_text("taps = B,B\n"), ConfigError);
  EXPECT_THROW(parse_config_text("distill.normalize = both\n"), ConfigError);
}

TEST(Config, EchoRoundTripsExactly) {
  RunConfig cfg = parse_config_text(
      "seed = 12345\n"
      "method = at\n"
      "taps = D\n"
      "data.noise = 0.3\n"
      "train.lr0 = 0.07\n"
      "train.momentum = 0.85\n"
      "distill.alpha = 15\n"
      "aug.scale_max = 1.75\n");
  std::string text = config_to_text(cfg);
  RunConfig back = parse_config_text(text);
  EXPECT_EQ(config_to_text(back), text);
  EXPECT_EQ(back.seed, cfg.seed);
  EXPECT_EQ(back.method, cfg.method);
  EXPECT_DOUBLE_EQ(back.noise, cfg.noise);
  EXPECT_DOUBLE_EQ(back.lr0, cfg.lr0);
  EXPECT_DOUBLE_EQ(back.aug_scale_max, cfg.aug_scale_max);
  EXPECT_EQ(config_digest(back), config_digest(cfg));
}

TEST(Config, EchoIsSortedOnePerLine) {
  std::string text = config_to_text(RunConfig{});
  std::istringstream is(text);
  std::string line, prev;
  int lines = 0;
  while (std::getline(is, line)) {
    ++lines;
    std::string key = line.substr(0, line.find(" = "));
    EXPECT_LT(prev, key);
    prev = key;
  }
  EXPECT_EQ(lines, 30);
}

TEST(Config, DigestTracksContent) {
  RunConfig a, b;
  EXPECT_EQ(config_digest(a), config_digest(b));
  b.alpha = 3;
  EXPECT_NE(config_digest(a), config_digest(b));
}

TEST(Config, ValidateCatchesBadCombinations) {
  RunConfig cfg;
  cfg.lr0 = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);

  cfg = RunConfig();
  cfg.momentum = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);

  cfg = RunConfig();
  cfg.canvas = 60;  // not divisible by 2^3
  EXPECT_THROW(cfg.validate(), ConfigError);

  cfg = RunConfig();
  cfg.student_widths = {8, 16};  // depth differs from teacher
  EXPECT_THROW(cfg.validate(), ConfigError);

  cfg = RunConfig();
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);

  cfg = RunConfig();
  cfg.taps.clear();
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Config, LoadFromFile) {
  namespace fs = std::filesystem;
  fs::path dir = fs::path(::testing::TempDir()) / "afd_config_test";
  fs::create_directories(dir);
  const std::string path = (dir / "run.cfg").string();
  {
    std::ofstream f(path);
    f << "seed = 99\ntrain.epochs = 3\n";
  }
  RunConfig cfg = load_config_file(path);
  EXPECT_EQ(cfg.seed, 99u);
  EXPECT_EQ(cfg.epochs, 3);
  EXPECT_THROW(load_config_file((dir / "absent.cfg").string()), IoError);
  fs::remove_all(dir);
}

TEST(Config, BaseConfigLayering) {
  RunConfig base = parse_config_text("seed = 4\ntrain.epochs = 9\n");
  RunConfig layered = parse_config_text("train.epochs = 2\n", base);
  EXPECT_EQ(layered.seed, 4u);  // survives from the base
  EXPECT_EQ(layered.epochs, 2);
}
