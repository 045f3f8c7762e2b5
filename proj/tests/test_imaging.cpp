#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "imim/dataset.hpp"
#include "imim/image.hpp"
#include "imim/image_io.hpp"
#include "imim/synth.hpp"
#include "test_util.hpp"

using namespace imim;

namespace {

MultimodalImage random_image(std::size_t h, std::size_t w, Modality m, std::mt19937_64& rng) {
  auto img = MultimodalImage::blank(h, w, m);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  for (auto& v : img.pixels) v = dist(rng);
  return img;
}

SingleChannelImage random_ir(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  SingleChannelImage ir{h, w, std::vector<float>(h * w)};
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  for (auto& v : ir.pixels) v = dist(rng);
  return ir;
}

}  // namespace

TEST_CASE("concat_modalities stacks IR as the fourth channel") {
  std::mt19937_64 rng(1);
  const auto rgb = random_image(512, 512, Modality::rgb, rng);
  const auto ir = random_ir(512, 512, rng);
  const auto x = concat_modalities(rgb, ir);
  CHECK(x.height == 512);
  CHECK(x.width == 512);
  CHECK(x.channels == 4);
  CHECK(x.modality == Modality::rgb_ir);
  bool ir_equal = true, rgb_equal = true;
  for (std::size_t y = 0; y < 512; ++y) {
    for (std::size_t xx = 0; xx < 512; ++xx) {
      ir_equal = ir_equal && x.at(y, xx, 3) == ir.at(y, xx);
      for (std::size_t c = 0; c < 3; ++c) rgb_equal = rgb_equal && x.at(y, xx, c) == rgb.at(y, xx, c);
    }
  }
  CHECK(ir_equal);
  CHECK(rgb_equal);
  CHECK(rgb_part(x) == rgb);
  CHECK(ir_part(x) == ir);
}

TEST_CASE("concat of zero images is zero") {
  const auto x = concat_modalities(MultimodalImage::blank(4, 4, Modality::rgb), SingleChannelImage{4, 4, std::vector<float>(16, 0.0f)});
  for (float v : x.pixels) CHECK(v == 0.0f);
}

TEST_CASE("concat with mismatched sizes names both shapes") {
  try {
    concat_modalities(MultimodalImage::blank(4, 6, Modality::rgb), SingleChannelImage{5, 6, std::vector<float>(30)});
    FAIL("expected a fusion error");
  } catch (const FusionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("4x6") != std::string::npos);
    CHECK(msg.find("5x6") != std::string::npos);
  }
}

TEST_CASE("bilinear resize keeps constants and identity") {
  const auto c = MultimodalImage::blank(480, 480, Modality::rgb_ir, 0.37f);
  const auto up = resize_bilinear(c, 512, 512);
  CHECK(up.height == 512);
  CHECK(std::all_of(up.pixels.begin(), up.pixels.end(), [](float v) { return v == 0.37f; }));
  std::mt19937_64 rng(2);
  const auto img = random_image(7, 9, Modality::rgb, rng);
  CHECK(resize_bilinear(img, 7, 9) == img);
  CHECK_THROWS_AS(resize_bilinear(img, 1, 9), ContractError);
}

TEST_CASE("bilinear checkerboard matches closed-form weights") {
  // [[0,1],[1,0]] to 4x4: sample position s = i/3, value = a(1-s)(1-t) + ...
  auto board = MultimodalImage::blank(2, 2, Modality::rgb);
  const float cells[2][2] = {{0, 1}, {1, 0}};
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x)
      for (std::size_t c = 0; c < 3; ++c) board.at(y, x, c) = cells[y][x];
  const auto up = resize_bilinear(board, 4, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      const double s = i / 3.0, t = j / 3.0;
      const double expect = (1 - s) * t + s * (1 - t);
      CHECK(up.at(i, j, 0) == doctest::Approx(expect).epsilon(1e-6));
    }
  }
  CHECK(up.at(1, 1, 0) == doctest::Approx(4.0 / 9.0).epsilon(1e-6));
  CHECK(up.at(0, 0, 0) == 0.0f);
  CHECK(up.at(0, 3, 0) == 1.0f);
}

TEST_CASE("tile counts and brute-force crops") {
  std::mt19937_64 rng(3);
  const auto img = random_image(512, 512, Modality::rgb_ir, rng);
  CHECK(tile(img, 256, 256).size() == 4);
  const auto tiles = tile(img, 256, 128);
  REQUIRE(tiles.size() == 9);
  std::size_t k = 0;
  for (std::size_t ty = 0; ty < 3; ++ty) {
    for (std::size_t tx = 0; tx < 3; ++tx, ++k) {
      bool same = tiles[k].height == 256 && tiles[k].width == 256;
      for (std::size_t y = 0; y < 256 && same; ++y)
        for (std::size_t x = 0; x < 256 && same; ++x)
          for (std::size_t c = 0; c < 4; ++c) same = same && tiles[k].at(y, x, c) == img.at(ty * 128 + y, tx * 128 + x, c);
      CHECK(same);
    }
  }
  const auto small = random_image(16, 16, Modality::rgb, rng);
  const auto one = tile(small, 16, 1);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == small);
  CHECK_THROWS_AS(tile(small, 32, 1), TilingError);
  CHECK_THROWS_AS(tile(small, 8, 0), TilingError);
}

TEST_CASE("tile count formula on non-square images") {
  std::mt19937_64 rng(4);
  const auto img = random_image(40, 70, Modality::rgb, rng);
  for (std::size_t t : {8, 16, 40}) {
    for (std::size_t s : {1, 3, 8, 16}) {
      const auto expected = ((40 - t) / s + 1) * ((70 - t) / s + 1);
      CHECK(tile(img, t, s).size() == expected);
    }
  }
}

TEST_CASE("tile then reassemble is bit-exact") {
  std::mt19937_64 rng(5);
  const auto img = random_image(64, 96, Modality::rgb_ir, rng);
  CHECK(reassemble(tile(img, 32, 32), 64, 96) == img);
  CHECK(reassemble(tile(img, 16, 16), 64, 96) == img);
}

TEST_CASE("expand resizes then tiles") {
  std::mt19937_64 rng(6);
  const auto img = random_image(480, 480, Modality::rgb_ir, rng);
  const auto tiles = expand(img, 512, 256, 128);
  CHECK(tiles.size() == 9);
  CHECK(tiles[0].height == 256);
}

TEST_CASE("synthetic scenes are deterministic and in range") {
  const auto a = synth_pair(42, 128, 128);
  const auto b = synth_pair(42, 128, 128);
  CHECK(a.image == b.image);
  CHECK(a.boxes == b.boxes);
  CHECK(a.image.channels == 4);
  CHECK(std::all_of(a.image.pixels.begin(), a.image.pixels.end(), [](float v) { return v >= 0.0f && v <= 1.0f; }));
  CHECK(a.boxes.size() >= 1);
  CHECK(a.boxes.size() <= 8);
  CHECK_FALSE(synth_pair(43, 128, 128).image == a.image);
  CHECK_THROWS(synth_pair(1, 100, 128));
}

TEST_CASE("synthetic IR correlates with background luminance") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = synth_pair(seed, 128, 128);
    const double r = background_ir_luminance_correlation(s);
    INFO("seed " << seed << " r=" << r);
    CHECK(r >= 0.5);
    CHECK(r <= 0.99);
  }
}

TEST_CASE("synthetic classes that share RGB differ in IR") {
  // Pairs (0,1) and (2,3) share a palette; their thermal offsets differ in sign.
  double ir_sum[kSynthClasses] = {}, rgb_sum[kSynthClasses] = {};
  std::size_t count[kSynthClasses] = {};
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const auto s = synth_pair(seed, 128, 128);
    for (const auto& b : s.boxes) {
      const auto cy = b.y + b.h / 2, cx = b.x + b.w / 2;
      ir_sum[b.cls] += s.image.at(cy, cx, 3) - luminance(s.image.at(cy, cx, 0), s.image.at(cy, cx, 1), s.image.at(cy, cx, 2));
      rgb_sum[b.cls] += s.image.at(cy, cx, 0);
      ++count[b.cls];
    }
  }
  for (int c = 0; c < kSynthClasses; ++c) REQUIRE(count[c] > 0);
  auto mean = [&](double* v, int c) { return v[c] / static_cast<double>(count[c]); };
  CHECK(std::abs(mean(rgb_sum, 0) - mean(rgb_sum, 1)) < 0.1);
  CHECK(mean(ir_sum, 0) - mean(ir_sum, 1) > 0.2);
  CHECK(mean(ir_sum, 2) - mean(ir_sum, 3) > 0.2);
}

TEST_CASE("annotation JSON round-trip") {
  const std::vector<Box> boxes{{1, 2, 3, 4, 0}, {10, 20, 30, 40, 3}};
  CHECK(annotations_from_json(annotations_to_json(boxes)) == boxes);
  CHECK(annotations_to_json(boxes).find("\"class\"") != std::string::npos);
}

TEST_CASE("PNG and PNM round-trips at 8 bits") {
  testutil::TempDir dir("io");
  RasterImage r{3, 5, 4, {}};
  for (std::size_t i = 0; i < 60; ++i) r.pixels.push_back(static_cast<float>(i * 4 % 256) / 255.0f);
  write_raster(dir.str("a.png"), r);
  const auto back = read_raster(dir.str("a.png"));
  CHECK(back.channels == 4);
  CHECK(back.pixels == r.pixels);

  RasterImage g{2, 3, 1, {0, 1, 0.5f, 0.25f, 0.75f, 1}};
  for (auto& v : g.pixels) v = std::round(v * 255.0f) / 255.0f;
  write_raster(dir.str("g.pgm"), g);
  CHECK(read_raster(dir.str("g.pgm")).pixels == g.pixels);

  std::ofstream(dir.str("ascii.ppm")) << "P3\n# comment\n2 1\n255\n255 0 0  0 0 255\n";
  const auto a = read_raster(dir.str("ascii.ppm"));
  CHECK(a.channels == 3);
  CHECK(a.pixels[0] == 1.0f);
  CHECK(a.pixels[5] == 1.0f);
  CHECK_THROWS_AS(read_raster(dir.str("missing.png")), FormatError);
}

TEST_CASE("load_image fuses rgb|ir pairs and replicates gray") {
  testutil::TempDir dir("fuse");
  RasterImage rgb{2, 2, 3, std::vector<float>(12, 1.0f)};
  RasterImage ir{2, 2, 1, {0, 1, 0, 1}};
  write_raster(dir.str("rgb.png"), rgb);
  write_raster(dir.str("ir.pgm"), ir);
  const auto x = load_image(dir.str("rgb.png") + "|" + dir.str("ir.pgm"));
  CHECK(x.modality == Modality::rgb_ir);
  CHECK(x.at(0, 1, 3) == 1.0f);
  CHECK(x.at(0, 0, 3) == 0.0f);
  const auto gray = load_image(dir.str("ir.pgm"));
  CHECK(gray.channels == 3);
  CHECK(gray.at(0, 1, 2) == 1.0f);
  CHECK_THROWS_AS(load_image(dir.str("rgb.png") + "|" + dir.str("rgb.png")), FusionError);
}

TEST_CASE("manifest JSON, validation and order") {
  const auto m = synthetic_manifest(9, 5, 2, Modality::rgb_ir);
  CHECK(m.samples.size() == 7);
  CHECK(m.indices("train").size() == 5);
  CHECK(m.indices("eval").size() == 2);
  const auto back = DatasetManifest::parse(m.to_json());
  CHECK(back.to_json() == m.to_json());
  CHECK(synthetic_manifest(9, 5, 2, Modality::rgb_ir).to_json() == m.to_json());

  auto dup = m;
  dup.samples[1].id = dup.samples[0].id;
  CHECK_THROWS_AS(dup.validate(), ContractError);
  auto bad = m;
  bad.samples[0].split = "test";
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("dataset loads synthetic and file samples") {
  testutil::TempDir dir("ds");
  const auto s = synth_pair(5, 32, 32);
  save_image(dir.str("scene.png"), s.image);
  std::ofstream(dir.str("scene.json")) << annotations_to_json(s.boxes);
  DatasetManifest m;
  m.samples.push_back({"file", "scene.png", "train", Modality::rgb_ir});
  m.samples.push_back({"gen", "synth:5", "eval", Modality::rgb});
  DatasetOptions opts;
  opts.height = opts.width = 32;
  opts.base_dir = dir.path().string();
  const Dataset train(m, "train", opts), eval(m, "eval", opts);
  REQUIRE(train.size() == 1);
  CHECK(train[0].boxes == s.boxes);
  CHECK(train[0].image.channels == 4);
  REQUIRE(eval.size() == 1);
  CHECK(eval[0].image == rgb_part(s.image));

  opts.expansion = {true, 64, 32, 16};
  const Dataset expanded(m, "train", opts);
  CHECK(expanded.size() == 9);
}
