#include "imim/image.hpp"

#include <algorithm>
#include <cmath>

namespace imim {

namespace {

std::string dims(std::size_t h, std::size_t w, std::size_t c) {
  return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
}

}  // namespace

std::string to_string(Modality m) { return m == Modality::rgb ? "rgb" : "rgb_ir"; }

Modality parse_modality(const std::string& s) {
  if (s == "rgb") return Modality::rgb;
  if (s == "rgb_ir") return Modality::rgb_ir;
  throw ContractError("unknown modality '" + s + "' (expected rgb or rgb_ir)");
}

std::size_t channel_count(Modality m) { return m == Modality::rgb ? 3 : 4; }

MultimodalImage MultimodalImage::blank(std::size_t height, std::size_t width, Modality modality, float value) {
  MultimodalImage img;
  img.height = height;
  img.width = width;
  img.modality = modality;
  img.channels = channel_count(modality);
  img.pixels.assign(height * width * img.channels, value);
  return img;
}

void MultimodalImage::validate() const {
  if (height == 0 || width == 0) throw ContractError("image has zero extent");
  if (channels != channel_count(modality)) {
    throw ContractError("image has " + std::to_string(channels) + " channels but modality " +
                        to_string(modality));
  }
  if (pixels.size() != height * width * channels) {
    throw ContractError("pixel buffer of " + std::to_string(pixels.size()) + " values for " +
                        dims(height, width, channels));
  }
  for (float v : pixels) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("pixel value outside [0,1]");
  }
}

MultimodalImage concat_modalities(const MultimodalImage& rgb, const SingleChannelImage& ir) {
  if (rgb.channels != 3) {
    throw FusionError("RGB input must have 3 channels, got " + dims(rgb.height, rgb.width, rgb.channels));
  }
  if (rgb.height != ir.height || rgb.width != ir.width) {
    throw FusionError("cannot fuse RGB " + dims(rgb.height, rgb.width, rgb.channels) + " with IR " +
                      dims(ir.height, ir.width, 1));
  }
  if (ir.pixels.size() != ir.height * ir.width) throw FusionError("IR plane is not single-channel");
  auto out = MultimodalImage::blank(rgb.height, rgb.width, Modality::rgb_ir);
  const std::size_t n = rgb.height * rgb.width;
  for (std::size_t i = 0; i < n; ++i) {
    out.pixels[i * 4 + 0] = rgb.pixels[i * 3 + 0];
    out.pixels[i * 4 + 1] = rgb.pixels[i * 3 + 1];
    out.pixels[i * 4 + 2] = rgb.pixels[i * 3 + 2];
    out.pixels[i * 4 + 3] = ir.pixels[i];
  }
  return out;
}

MultimodalImage rgb_part(const MultimodalImage& img) {
  if (img.channels == 3) return img;
  auto out = MultimodalImage::blank(img.height, img.width, Modality::rgb);
  const std::size_t n = img.height * img.width;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = img.pixels[i * img.channels + c];
  return out;
}

SingleChannelImage ir_part(const MultimodalImage& img) {
  if (img.modality != Modality::rgb_ir) throw ContractError("image carries no IR channel");
  SingleChannelImage ir{img.height, img.width, std::vector<float>(img.height * img.width)};
  for (std::size_t i = 0; i < ir.pixels.size(); ++i) ir.pixels[i] = img.pixels[i * 4 + 3];
  return ir;
}

MultimodalImage resize_bilinear(const MultimodalImage& img, std::size_t new_h, std::size_t new_w) {
  if (new_h < 2 || new_w < 2) throw ContractError("resize target must be at least 2x2");
  if (new_h == img.height && new_w == img.width) return img;
  auto out = MultimodalImage::blank(new_h, new_w, img.modality);
  const double sy = img.height > 1 ? static_cast<double>(img.height - 1) / static_cast<double>(new_h - 1) : 0.0;
  const double sx = img.width > 1 ? static_cast<double>(img.width - 1) / static_cast<double>(new_w - 1) : 0.0;
  for (std::size_t y = 0; y < new_h; ++y) {
    const double fy = static_cast<double>(y) * sy;
    const auto y0 = std::min(static_cast<std::size_t>(fy), img.height - 1);
    const auto y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < new_w; ++x) {
      const double fx = static_cast<double>(x) * sx;
      const auto x0 = std::min(static_cast<std::size_t>(fx), img.width - 1);
      const auto x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = (1.0 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
        const double bottom = (1.0 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
        const double v = (1.0 - wy) * top + wy * bottom;
        out.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

MultimodalImage crop(const MultimodalImage& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > img.height || x0 + w > img.width) throw TilingError("crop window leaves the image");
  auto out = MultimodalImage::blank(h, w, img.modality);
  for (std::size_t y = 0; y < h; ++y) {
    const auto* src = img.pixels.data() + ((y0 + y) * img.width + x0) * img.channels;
    std::copy_n(src, w * img.channels, out.pixels.data() + y * w * img.channels);
  }
  return out;
}

std::vector<MultimodalImage> tile(const MultimodalImage& img, std::size_t tile_px, std::size_t stride) {
  if (stride == 0) throw TilingError("tile stride must be at least 1");
  if (tile_px == 0 || tile_px > std::min(img.height, img.width)) {
    throw TilingError("tile of " + std::to_string(tile_px) + " px does not fit a " + std::to_string(img.height) +
                      "x" + std::to_string(img.width) + " image");
  }
  const std::size_t rows = (img.height - tile_px) / stride + 1;
  const std::size_t cols = (img.width - tile_px) / stride + 1;
  std::vector<MultimodalImage> tiles;
  tiles.reserve(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) tiles.push_back(crop(img, r * stride, c * stride, tile_px, tile_px));
  return tiles;
}

MultimodalImage reassemble(const std::vector<MultimodalImage>& tiles, std::size_t height, std::size_t width) {
  if (tiles.empty()) throw TilingError("no tiles to reassemble");
  const auto t = tiles.front().height;
  if (t == 0 || height % t != 0 || width % t != 0 || (height / t) * (width / t) != tiles.size()) {
    throw TilingError("tiles do not cover a " + std::to_string(height) + "x" + std::to_string(width) + " image");
  }
  auto out = MultimodalImage::blank(height, width, tiles.front().modality);
  const std::size_t cols = width / t;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const auto& tl = tiles[i];
    if (tl.height != t || tl.width != t || tl.modality != out.modality) throw TilingError("inconsistent tile");
    const std::size_t y0 = (i / cols) * t, x0 = (i % cols) * t;
    for (std::size_t y = 0; y < t; ++y)
      std::copy_n(tl.pixels.data() + y * t * tl.channels, t * tl.channels,
                  out.pixels.data() + ((y0 + y) * width + x0) * out.channels);
  }
  return out;
}

std::vector<MultimodalImage> expand(const MultimodalImage& img, std::size_t resize_px, std::size_t tile_px,
                                    std::size_t stride) {
  return tile(resize_bilinear(img, resize_px, resize_px), tile_px, stride);
}

}  // namespace imim
