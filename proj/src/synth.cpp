#include "imim/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "imim/random.hpp"

namespace imim {

namespace {

// Portable draws: libstdc++ distributions are not specified bit-for-bit.
double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit_draw(rng); }
std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(unit_draw(rng) * static_cast<double>(hi - lo + 1));
}

// Sum of a few random plane waves with 0.5-2 cycles per image side.
struct SmoothField {
  struct Wave {
    double fy, fx, phase, amp;
  };
  std::vector<Wave> waves;

  SmoothField(std::mt19937_64& rng, std::size_t count, double amplitude) {
    for (std::size_t i = 0; i < count; ++i) {
      Wave w;
      w.fy = uniform(rng, -2.0, 2.0);
      w.fx = uniform(rng, -2.0, 2.0);
      w.phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      w.amp = amplitude * uniform(rng, 0.5, 1.0);
      waves.push_back(w);
    }
  }

  double operator()(double v, double u) const {
    double s = 0.0;
    for (const auto& w : waves) s += w.amp * std::cos(2.0 * std::numbers::pi * (w.fy * v + w.fx * u) + w.phase);
    return s;
  }
};

constexpr std::array<std::array<double, 3>, kSynthClasses / 2> kPalette{{
    {0.85, 0.30, 0.20},
    {0.20, 0.40, 0.85},
}};
constexpr std::array<double, 2> kThermalOffset{0.30, -0.25};

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace

double luminance(float r, float g, float b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

SynthSample synth_pair(std::uint64_t seed, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0) {
    throw ContractError("synthetic images need sides that are positive multiples of 16");
  }
  std::mt19937_64 rng(seed);
  SynthSample out;
  out.image = MultimodalImage::blank(height, width, Modality::rgb_ir);

  const double base = uniform(rng, 0.35, 0.6);
  const SmoothField lum_field(rng, 3, 0.09);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = uniform(rng, 0.8, 1.2);
  std::array<SmoothField, 3> chroma{SmoothField(rng, 2, 0.03), SmoothField(rng, 2, 0.03), SmoothField(rng, 2, 0.03)};
  const double ir_gain = uniform(rng, 0.6, 0.9);
  const double ir_bias = uniform(rng, 0.05, 0.15);
  const SmoothField ir_noise(rng, 2, 0.035);

  auto& img = out.image;
  for (std::size_t y = 0; y < height; ++y) {
    const double v = static_cast<double>(y) / static_cast<double>(height);
    for (std::size_t x = 0; x < width; ++x) {
      const double u = static_cast<double>(x) / static_cast<double>(width);
      const double l = base + lum_field(v, u);
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = clamp01(l * tint[c] + chroma[c](v, u));
      const double lum = luminance(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
      img.at(y, x, 3) = clamp01(ir_gain * lum + ir_bias + ir_noise(v, u));
    }
  }

  const std::size_t side = std::min(height, width);
  const std::size_t min_size = std::max<std::size_t>(2, side / 16);
  const std::size_t max_size = std::max<std::size_t>(min_size + 1, side / 5);
  const std::size_t n_objects = uniform_index(rng, 1, 8);
  for (std::size_t k = 0; k < n_objects; ++k) {
    Box box;
    box.cls = static_cast<int>(uniform_index(rng, 0, kSynthClasses - 1));
    box.w = uniform_index(rng, min_size, max_size);
    box.h = uniform_index(rng, min_size, max_size);
    box.x = uniform_index(rng, 0, width - box.w);
    box.y = uniform_index(rng, 0, height - box.h);
    const auto& colour = kPalette[static_cast<std::size_t>(box.cls) / 2];
    std::array<double, 3> rgb{};
    for (std::size_t c = 0; c < 3; ++c) rgb[c] = colour[c] + uniform(rng, -0.06, 0.06);
    const double thermal = kThermalOffset[static_cast<std::size_t>(box.cls) % 2] + uniform(rng, -0.04, 0.04);
    for (std::size_t y = box.y; y < box.y + box.h; ++y) {
      for (std::size_t x = box.x; x < box.x + box.w; ++x) {
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = clamp01(rgb[c]);
        const double lum = luminance(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
        img.at(y, x, 3) = clamp01(ir_gain * lum + ir_bias + thermal);
      }
    }
    out.boxes.push_back(box);
  }
  return out;
}

double background_ir_luminance_correlation(const SynthSample& sample) {
  const auto& img = sample.image;
  std::vector<bool> covered(img.height * img.width, false);
  for (const auto& b : sample.boxes)
    for (std::size_t y = b.y; y < b.y + b.h; ++y)
      for (std::size_t x = b.x; x < b.x + b.w; ++x) covered[y * img.width + x] = true;
  double n = 0, sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      if (covered[y * img.width + x]) continue;
      const double l = luminance(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
      const double ir = img.at(y, x, 3);
      n += 1;
      sx += l;
      sy += ir;
      sxx += l * l;
      syy += ir * ir;
      sxy += l * ir;
    }
  }
  const double cov = sxy - sx * sy / n;
  const double vx = sxx - sx * sx / n, vy = syy - sy * sy / n;
  return cov / std::sqrt(vx * vy);
}

std::string annotations_to_json(const std::vector<Box>& boxes) {
  nlohmann::json j;
  j["boxes"] = nlohmann::json::array();
  for (const auto& b : boxes) j["boxes"].push_back({{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}, {"class", b.cls}});
  return j.dump(2);
}

std::vector<Box> annotations_from_json(const std::string& text) {
  std::vector<Box> boxes;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& b : j.at("boxes")) {
      boxes.push_back(Box{b.at("x").get<std::size_t>(), b.at("y").get<std::size_t>(), b.at("w").get<std::size_t>(),
                          b.at("h").get<std::size_t>(), b.at("class").get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad annotation JSON: ") + e.what());
  }
  return boxes;
}

}  // namespace imim
