#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "imim/error.hpp"

namespace imim {

enum class Modality { rgb, rgb_ir };

std::string to_string(Modality m);
Modality parse_modality(const std::string& s);
std::size_t channel_count(Modality m);

/// Height x width x channels block of pixels in [0,1], row-major, channel-last.
/// Channel order is R, G, B and, for rgb_ir, IR last.
struct MultimodalImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  Modality modality = Modality::rgb;
  std::vector<float> pixels;

  static MultimodalImage blank(std::size_t height, std::size_t width, Modality modality, float value = 0.0f);

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }

  /// Throws ContractError when any invariant is broken.
  void validate() const;

  bool operator==(const MultimodalImage&) const = default;
};

/// One-band image (the IR plane before fusion).
struct SingleChannelImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  bool operator==(const SingleChannelImage&) const = default;
};

class FusionError : public Error {
 public:
  using Error::Error;
};

class TilingError : public Error {
 public:
  using Error::Error;
};

/// Channel-wise concatenation x = x_rgb (+) x_ir -> [R,G,B,IR].
MultimodalImage concat_modalities(const MultimodalImage& rgb, const SingleChannelImage& ir);

/// Leading three channels as an rgb image.
MultimodalImage rgb_part(const MultimodalImage& img);
/// The IR plane of an rgb_ir image.
SingleChannelImage ir_part(const MultimodalImage& img);

/// Bilinear resize with corner-aligned sampling (corner pixels map onto corner pixels).
MultimodalImage resize_bilinear(const MultimodalImage& img, std::size_t new_h, std::size_t new_w);

/// Raster-order crops of size tile x tile taken every `stride` pixels.
std::vector<MultimodalImage> tile(const MultimodalImage& img, std::size_t tile_px, std::size_t stride);

/// Inverse of tile() for stride == tile_px.
MultimodalImage reassemble(const std::vector<MultimodalImage>& tiles, std::size_t height, std::size_t width);

/// Pixel-exact crop.
MultimodalImage crop(const MultimodalImage& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w);

/// Resize to `resize_px` square and tile; the data-expansion step for small corpora.
std::vector<MultimodalImage> expand(const MultimodalImage& img, std::size_t resize_px, std::size_t tile_px,
                                    std::size_t stride);

}  // namespace imim
