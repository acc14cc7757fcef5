// SPDX-License-Identifier: Apache-2.0
#include "doctest_torch.hpp"

#include <fstream>
#include <opencv2/imgcodecs.hpp>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "qsf/datamodel.hpp"
#include "qsf/errors.hpp"

using namespace qsf;
namespace fs = std::filesystem;

namespace {

void write_gray(const fs::path& p, int h, int w, std::uint8_t value) {
  fs::create_directories(p.parent_path());
  cv::imwrite(p.string(), cv::Mat(h, w, CV_8U, cv::Scalar(value)));
}

void write_stem(const fs::path& split_dir, const std::string& stem, int res, bool with_thermal = true) {
  write_gray(split_dir / "V" / (stem + ".png"), res, res, 90);
  write_gray(split_dir / "D" / (stem + ".png"), res, res, 40);
  if (with_thermal) write_gray(split_dir / "T" / (stem + ".png"), res, res, 200);
  write_gray(split_dir / "GT" / (stem + ".png"), res, res, 0);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SynthConfig small_synth(int n, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.num_samples = n;
  cfg.resolution = 64;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("discovery lists complete stems sorted") {
  oracle::TempDir tmp("discover");
  const auto dir = tmp.path() / "train";
  for (const char* s : {"c", "a", "b"}) write_stem(dir, s, 32);
  const auto m = discover_dataset(tmp.path(), Split::kTrain);
  REQUIRE(m.entries.size() == 3);
  CHECK(m.entries[0].id == "a");
  CHECK(m.entries[1].id == "b");
  CHECK(m.entries[2].id == "c");
}

TEST_CASE("missing thermal image names the stem") {
  oracle::TempDir tmp("missing");
  const auto dir = tmp.path() / "train";
  write_stem(dir, "ok", 32);
  write_stem(dir, "lonely", 32, false);
  try {
    discover_dataset(tmp.path(), Split::kTrain);
    FAIL("expected MissingModality");
  } catch (const MissingModality& e) {
    CHECK(std::string(e.what()).find("lonely") != std::string::npos);
  }
}

TEST_CASE("empty or incomplete roots") {
  oracle::TempDir tmp("empty");
  CHECK_THROWS_AS(discover_dataset(tmp.path(), Split::kTrain), MissingModality);
  for (const char* sub : {"V", "D", "T", "GT"}) fs::create_directories(tmp.path() / "train" / sub);
  CHECK_THROWS_AS(discover_dataset(tmp.path(), Split::kTrain), EmptyDataset);
}

TEST_CASE("load_sample resizes and derives masks") {
  oracle::TempDir tmp("load");
  const auto dir = tmp.path() / "train";
  write_stem(dir, "big", 384);
  const auto m = discover_dataset(tmp.path(), Split::kTrain);
  SUBCASE("384 inputs at 384") {
    const auto s = load_sample(m.entries[0], 384);
    for (const auto& t : {s.visible, s.depth, s.thermal}) {
      CHECK(t.sizes() == torch::IntArrayRef({3, 384, 384}));
    }
    CHECK(s.gt.sizes() == torch::IntArrayRef({1, 384, 384}));
    CHECK(s.edge_gt.sizes() == torch::IntArrayRef({1, 384, 384}));
  }
  SUBCASE("all-black gt gives zero masks") {
    const auto s = load_sample(m.entries[0], 64);
    CHECK(s.gt.abs().sum().item<double>() == 0.0);
    CHECK(s.edge_gt.abs().sum().item<double>() == 0.0);
    CHECK(s.depth.max().item<float>() == doctest::Approx(40.0 / 255.0));
  }
  SUBCASE("resolution must divide by 32") {
    CHECK_THROWS_AS(load_sample(m.entries[0], 70), ResolutionError);
  }
}

TEST_CASE("centered square: edge band around the 4-neighbourhood transitions") {
  torch::Tensor gt = torch::zeros({1, 64, 64});
  gt.slice(1, 22, 42).slice(2, 22, 42).fill_(1.0f);
  const auto edge = oracle::to_vec(derive_edge_gt(gt));
  const auto g = oracle::to_vec(gt);
  auto at = [](const std::vector<float>& v, int y, int x) {
    if (y < 0 || y >= 64 || x < 0 || x >= 64) return -1.0f;
    return v[static_cast<std::size_t>(y) * 64 + x];
  };
  int inner = 0;
  int outer = 0;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const float c = at(g, y, x);
      // Inner ring: foreground pixels with a 4-neighbour transition.
      bool transition4 = false;
      for (auto [dy, dx] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
        const float n = at(g, y + dy, x + dx);
        transition4 |= n >= 0.0f && n != c;
      }
      // Outer ring: background pixels touching the square, diagonals included.
      bool touches = false;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) touches |= at(g, y + dy, x + dx) == 1.0f;
      const bool expected = c == 1.0f ? transition4 : touches;
      inner += c == 1.0f && expected;
      outer += c == 0.0f && expected;
      CHECK_MESSAGE((at(edge, y, x) == 1.0f) == expected, "pixel " << y << "," << x);
    }
  }
  CHECK(inner == 76);
  CHECK(outer == 84);
}

TEST_CASE("edge mask trivial cases") {
  CHECK(derive_edge_gt(torch::zeros({8, 8})).sum().item<double>() == 0.0);
  CHECK(derive_edge_gt(torch::ones({8, 8})).sum().item<double>() == 0.0);
}

TEST_CASE("edge mask matches the neighbourhood oracle on random 8x8 masks") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = oracle::random_mask(rng, 8, 8, 0.5);
    const auto edge = oracle::to_vec(derive_edge_gt(oracle::from_vec(m, {8, 8})));
    REQUIRE(edge == oracle::edge_mask(m, 8, 8));
  }
}

TEST_CASE("edge mask matches the oracle on every 4x4 mask") {
  std::vector<float> m(16);
  for (int bits = 0; bits < (1 << 16); ++bits) {
    for (int i = 0; i < 16; ++i) m[i] = (bits >> i) & 1 ? 1.0f : 0.0f;
    const auto edge = oracle::to_vec(derive_edge_gt(oracle::from_vec(m, {4, 4})));
    if (edge != oracle::edge_mask(m, 4, 4)) {
      FAIL("mismatch for mask " << bits);
    }
  }
}

TEST_CASE("augmentation") {
  oracle::TempDir tmp("aug");
  const auto manifest = synthesize_dataset(small_synth(2, 3), tmp.path());
  const auto sample = load_sample(manifest.entries[0], 64);

  SUBCASE("identity draw leaves the sample unchanged") {
    const auto out = apply_augment(sample, AugmentParams{});
    CHECK(oracle::bit_equal(out.visible, sample.visible));
    CHECK(oracle::bit_equal(out.gt, sample.gt));
    CHECK(oracle::bit_equal(out.edge_gt, sample.edge_gt));
  }
  SUBCASE("forced horizontal flip mirrors columns") {
    AugmentParams p;
    p.flip = true;
    const auto out = apply_augment(sample, p);
    const auto W = sample.width();
    for (std::int64_t x = 0; x < W; ++x) {
      CHECK(oracle::bit_equal(out.visible.select(2, x), sample.visible.select(2, W - 1 - x)));
      CHECK(oracle::bit_equal(out.gt.select(2, x), sample.gt.select(2, W - 1 - x)));
    }
  }
  SUBCASE("seeded pipeline replays bit-identically") {
    std::mt19937_64 a(99);
    std::mt19937_64 b(99);
    for (int i = 0; i < 6; ++i) {
      const auto x = augment_sample(sample, a);
      const auto y = augment_sample(sample, b);
      CHECK(oracle::bit_equal(x.visible, y.visible));
      CHECK(oracle::bit_equal(x.depth, y.depth));
      CHECK(oracle::bit_equal(x.gt, y.gt));
    }
  }
  SUBCASE("augmented masks stay binary and shapes stay square") {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 8; ++i) {
      const auto x = augment_sample(sample, rng);
      CHECK(x.visible.sizes() == sample.visible.sizes());
      const auto g = x.gt;
      CHECK((g.eq(0) | g.eq(1)).all().item<bool>());
      CHECK(oracle::bit_equal(x.edge_gt, derive_edge_gt(x.gt)));
    }
  }
}

TEST_CASE("synthetic dataset round trip") {
  oracle::TempDir tmp("synth");
  const auto written = synthesize_dataset(small_synth(8, 21), tmp.path());
  const auto found = discover_dataset(tmp.path(), Split::kTrain);
  REQUIRE(found.entries.size() == 8);
  REQUIRE(written.entries.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(found.entries[i].id == written.entries[i].id);
    const cv::Mat raw = cv::imread(found.entries[i].gt.string(), cv::IMREAD_UNCHANGED);
    REQUIRE(raw.type() == CV_8UC1);
    const auto s = load_sample(found.entries[i], 0);
    const auto g = oracle::to_vec(s.gt);
    for (int y = 0; y < raw.rows; ++y) {
      for (int x = 0; x < raw.cols; ++x) {
        const auto v = raw.at<std::uint8_t>(y, x);
        REQUIRE((v == 0 || v == 255));
        REQUIRE(g[static_cast<std::size_t>(y) * raw.cols + x] == (v == 255 ? 1.0f : 0.0f));
      }
    }
    for (const auto& t : {s.visible, s.depth, s.thermal}) {
      CHECK(t.min().item<float>() >= 0.0f);
      CHECK(t.max().item<float>() <= 1.0f);
    }
    CHECK((s.edge_gt.eq(0) | s.edge_gt.eq(1)).all().item<bool>());
    CHECK(s.gt.sum().item<double>() > 0.0);
  }
}

TEST_CASE("forced depth drop removes the object signal") {
  oracle::TempDir tmp("drop");
  auto cfg = small_synth(8, 4);
  cfg.depth.drop_object_prob = 1.0;
  const auto m = synthesize_dataset(cfg, tmp.path());
  for (const auto& e : m.entries) {
    const auto s = load_sample(e, 0);
    CHECK(s.gt.sum().item<double>() > 0.0);
    // Background depth never exceeds 0.55; rendered objects sit at >= 0.7.
    CHECK(s.depth.max().item<float>() < 0.6f);
    const auto& tags = m.challenge_tags.at(e.id);
    CHECK(std::find(tags.begin(), tags.end(), "D-NO") != tags.end());
  }
}

TEST_CASE("synthesis is byte-identical for a fixed seed") {
  oracle::TempDir a("synth_a");
  oracle::TempDir b("synth_b");
  auto cfg = small_synth(4, 77);
  cfg.thermal.background_hotspot_prob = 0.5;
  cfg.depth.noise_sigma = 0.05;
  synthesize_dataset(cfg, a.path());
  synthesize_dataset(cfg, b.path());
  int files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a.path());
    CHECK(slurp(entry.path()) == slurp(b.path() / rel));
    ++files;
  }
  CHECK(files == 4 * 4 + 1);
}

TEST_CASE("synth config validation") {
  SynthConfig cfg;
  cfg.resolution = 48;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = SynthConfig{};
  cfg.depth.drop_object_prob = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  const auto parsed = SynthConfig::from_config(FlatConfig::parse("num_samples = 5\ndepth.noise_sigma = 0.1\n"));
  CHECK(parsed.num_samples == 5);
  CHECK(parsed.depth.noise_sigma == doctest::Approx(0.1));
}

TEST_CASE("map png round trip quantizes to 8 bits") {
  oracle::TempDir tmp("png");
  const auto map = torch::linspace(0.0, 1.0, 256).reshape({1, 16, 16});
  write_map_png(map, tmp.path() / "m.png");
  const auto back = read_map_png(tmp.path() / "m.png");
  CHECK(back.sizes() == torch::IntArrayRef({16, 16}));
  CHECK(oracle::max_abs_diff(back, map.squeeze(0)) <= 0.5 / 255.0 + 1e-6);
}
