#pragma once

#include <string>

#include "imim/image.hpp"

namespace imim {

/// Raw decoded 8-bit raster normalized to [0,1]; channels is 1, 3 or 4.
struct RasterImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;
};

/// Reads PNG (8-bit gray/RGB/RGBA) or binary/ASCII PGM/PPM, dividing by 255.
RasterImage read_raster(const std::string& path);
/// Writes an 8-bit PNG, or PGM/PPM when the extension is .pgm/.ppm.
void write_raster(const std::string& path, const RasterImage& img);

/// Loads a file as a model input. 4-channel files are taken as RGB+IR;
/// "rgb_path|ir_path" fuses a colour file with a single-band IR file.
MultimodalImage load_image(const std::string& source);
void save_image(const std::string& path, const MultimodalImage& img);

}  // namespace imim
