#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "imim/image.hpp"

namespace imim {

/// Axis-aligned object box in pixel coordinates.
struct Box {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t w = 0;
  std::size_t h = 0;
  int cls = 0;
  bool operator==(const Box&) const = default;
};

struct SynthSample {
  MultimodalImage image;  // always rgb_ir
  std::vector<Box> boxes;
};

// Object classes come in pairs that share one base colour and differ only in
// their thermal offset, so half of the class information lives in the IR band.
inline constexpr int kSynthClasses = 4;

/// Deterministic RGB+IR scene: smooth low-frequency background, 1-8 boxes.
/// Height and width must be multiples of 16.
SynthSample synth_pair(std::uint64_t seed, std::size_t height, std::size_t width);

/// Pearson correlation of IR against RGB luminance over pixels outside every box.
double background_ir_luminance_correlation(const SynthSample& sample);

double luminance(float r, float g, float b);

std::string annotations_to_json(const std::vector<Box>& boxes);
std::vector<Box> annotations_from_json(const std::string& text);

}  // namespace imim
