#include "imim/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace imim {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), s.rbegin(),
                    [](char a, char b) { return std::tolower(a) == std::tolower(b); });
}

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

RasterImage read_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw FormatError("cannot read PNG " + path + ": " + image.message);
  }
  const bool has_alpha = (image.format & PNG_FORMAT_FLAG_ALPHA) != 0;
  const bool has_color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  std::size_t channels = has_color ? (has_alpha ? 4 : 3) : 1;
  if (!has_color && has_alpha) channels = 1;  // gray+alpha: drop alpha
  image.format = channels == 1 ? PNG_FORMAT_GRAY : (channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_RGBA);
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw FormatError("cannot decode PNG " + path + ": " + image.message);
  }
  RasterImage out{image.height, image.width, channels, std::vector<float>(buffer.size())};
  for (std::size_t i = 0; i < buffer.size(); ++i) out.pixels[i] = static_cast<float>(buffer[i]) / 255.0f;
  return out;
}

void write_png(const std::string& path, const RasterImage& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = img.channels == 1 ? PNG_FORMAT_GRAY : (img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_RGBA);
  std::vector<png_byte> buffer(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), buffer.begin(), to_byte);
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw FormatError("cannot write PNG " + path + ": " + image.message);
  }
}

// Netpbm header tokens, skipping '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

RasterImage read_netpbm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  const auto magic = next_token(in);
  std::size_t channels = 0;
  bool binary = false;
  if (magic == "P5" || magic == "P2") channels = 1;
  if (magic == "P6" || magic == "P3") channels = 3;
  binary = magic == "P5" || magic == "P6";
  if (channels == 0) throw FormatError(path + " is not a PGM/PPM file");
  RasterImage out;
  try {
    out.width = std::stoul(next_token(in));
    out.height = std::stoul(next_token(in));
    const auto maxval = std::stoul(next_token(in));
    if (maxval == 0 || maxval > 255) throw FormatError(path + ": only 8-bit netpbm is supported");
    out.channels = channels;
    out.pixels.resize(out.width * out.height * channels);
    const float scale = 255.0f / static_cast<float>(maxval);
    for (auto& v : out.pixels) {
      unsigned value;
      if (binary) {
        char byte;
        if (!in.get(byte)) throw FormatError(path + ": truncated pixel data");
        value = static_cast<unsigned char>(byte);
      } else {
        value = static_cast<unsigned>(std::stoul(next_token(in)));
      }
      v = std::round(static_cast<float>(value) * scale) / 255.0f;
    }
  } catch (const std::invalid_argument&) {
    throw FormatError(path + ": malformed netpbm header");
  }
  return out;
}

void write_netpbm(const std::string& path, const RasterImage& img) {
  if (img.channels != 1 && img.channels != 3) throw FormatError("netpbm holds 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << (img.channels == 1 ? "P5" : "P6") << "\n" << img.width << " " << img.height << "\n255\n";
  for (float v : img.pixels) out.put(static_cast<char>(to_byte(v)));
}

}  // namespace

RasterImage read_raster(const std::string& path) {
  if (ends_with(path, ".png")) return read_png(path);
  if (ends_with(path, ".pgm") || ends_with(path, ".ppm") || ends_with(path, ".pnm")) return read_netpbm(path);
  throw FormatError("unsupported image type: " + path);
}

void write_raster(const std::string& path, const RasterImage& img) {
  if (ends_with(path, ".pgm") || ends_with(path, ".ppm")) return write_netpbm(path, img);
  write_png(path, img);
}

MultimodalImage load_image(const std::string& source) {
  if (const auto bar = source.find('|'); bar != std::string::npos) {
    const auto rgb = load_image(source.substr(0, bar));
    const auto ir = read_raster(source.substr(bar + 1));
    if (ir.channels != 1) throw FusionError("IR file " + source.substr(bar + 1) + " is not single-channel");
    return concat_modalities(rgb_part(rgb), SingleChannelImage{ir.height, ir.width, ir.pixels});
  }
  auto raster = read_raster(source);
  MultimodalImage img;
  img.height = raster.height;
  img.width = raster.width;
  switch (raster.channels) {
    case 1: {
      img.channels = 3;
      img.modality = Modality::rgb;
      img.pixels.resize(raster.pixels.size() * 3);
      for (std::size_t i = 0; i < raster.pixels.size(); ++i)
        std::fill_n(img.pixels.begin() + i * 3, 3, raster.pixels[i]);
      break;
    }
    case 3:
    case 4:
      img.channels = raster.channels;
      img.modality = raster.channels == 4 ? Modality::rgb_ir : Modality::rgb;
      img.pixels = std::move(raster.pixels);
      break;
    default:
      throw FormatError(source + ": unsupported channel count");
  }
  return img;
}

void save_image(const std::string& path, const MultimodalImage& img) {
  write_raster(path, RasterImage{img.height, img.width, img.channels, img.pixels});
}

}  // namespace imim
