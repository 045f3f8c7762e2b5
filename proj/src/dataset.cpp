#include "imim/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "imim/image_io.hpp"

namespace imim {

namespace fs = std::filesystem;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

DatasetManifest DatasetManifest::parse(const std::string& json_text) {
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(json_text);
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("samples")) {
      SampleRecord r;
      r.id = s.at("id").get<std::string>();
      r.source = s.at("source").get<std::string>();
      r.split = s.at("split").get<std::string>();
      r.modality = parse_modality(s.at("modality").get<std::string>());
      m.samples.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad manifest: ") + e.what());
  }
  m.validate();
  return m;
}

DatasetManifest DatasetManifest::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string DatasetManifest::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["samples"] = nlohmann::json::array();
  for (const auto& s : samples) {
    j["samples"].push_back(
        {{"id", s.id}, {"source", s.source}, {"split", s.split}, {"modality", to_string(s.modality)}});
  }
  return j.dump(2);
}

void DatasetManifest::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write manifest " + path);
  out << to_json() << '\n';
}

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (!ids.insert(s.id).second) {
      throw ContractError("sample id '" + s.id + "' appears more than once; splits must be disjoint");
    }
    if (s.split != "train" && s.split != "eval") {
      throw ContractError("sample '" + s.id + "' has unknown split '" + s.split + "'");
    }
  }
}

std::vector<std::size_t> DatasetManifest::indices(const std::string& split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == split) out.push_back(i);
  return out;
}

DatasetManifest synthetic_manifest(std::uint64_t seed, std::size_t n_train, std::size_t n_eval, Modality modality) {
  DatasetManifest m;
  m.seed = seed;
  for (std::size_t i = 0; i < n_train + n_eval; ++i) {
    const bool train = i < n_train;
    SampleRecord r;
    r.id = (train ? "train_" : "eval_") + std::to_string(train ? i : i - n_train);
    r.source = "synth:" + std::to_string(mix_seed(seed, i));
    r.split = train ? "train" : "eval";
    r.modality = modality;
    m.samples.push_back(std::move(r));
  }
  return m;
}

LoadedSample load_sample(const SampleRecord& record, const DatasetOptions& options) {
  LoadedSample out;
  out.id = record.id;
  if (record.source.rfind("synth:", 0) == 0) {
    const auto seed = std::stoull(record.source.substr(6));
    // Scenes are drawn on a 16 px lattice; other sizes are resampled from the
    // next larger lattice size, boxes scaled with them.
    auto up16 = [](std::size_t v) { return std::max<std::size_t>(16, (v + 15) / 16 * 16); };
    const auto rh = up16(options.height), rw = up16(options.width);
    auto s = synth_pair(seed, rh, rw);
    if (rh != options.height || rw != options.width) {
      s.image = resize_bilinear(s.image, options.height, options.width);
      for (auto& b : s.boxes) {
        const auto x0 = b.x * options.width / rw, y0 = b.y * options.height / rh;
        const auto x1 = std::max(x0 + 1, ((b.x + b.w) * options.width + rw - 1) / rw);
        const auto y1 = std::max(y0 + 1, ((b.y + b.h) * options.height + rh - 1) / rh);
        b = {x0, y0, std::min(x1, options.width) - x0, std::min(y1, options.height) - y0, b.cls};
      }
    }
    out.image = std::move(s.image);
    out.boxes = std::move(s.boxes);
  } else {
    auto resolve = [&](const std::string& p) {
      const fs::path path(p);
      return (path.is_relative() && !options.base_dir.empty()) ? (fs::path(options.base_dir) / path).string() : p;
    };
    std::string source = record.source;
    if (const auto bar = source.find('|'); bar != std::string::npos) {
      source = resolve(source.substr(0, bar)) + "|" + resolve(source.substr(bar + 1));
    } else {
      source = resolve(source);
    }
    out.image = load_image(source);
    const auto primary = fs::path(source.substr(0, source.find('|')));
    const auto sidecar = fs::path(primary).replace_extension(".json");
    if (fs::exists(sidecar)) {
      std::ifstream in(sidecar);
      std::stringstream ss;
      ss << in.rdbuf();
      out.boxes = annotations_from_json(ss.str());
    }
    if (out.image.height != options.height || out.image.width != options.width) {
      if (!out.boxes.empty()) {
        throw ContractError("annotated image " + record.id + " must already be " + std::to_string(options.height) +
                            "x" + std::to_string(options.width));
      }
      out.image = resize_bilinear(out.image, options.height, options.width);
    }
  }
  if (record.modality == Modality::rgb) {
    out.image = rgb_part(out.image);
  } else if (out.image.modality != Modality::rgb_ir) {
    throw FusionError("sample " + record.id + " is declared rgb_ir but has no IR channel");
  }
  out.image.validate();
  return out;
}

Dataset::Dataset(const DatasetManifest& manifest, const std::string& split, const DatasetOptions& options) {
  for (auto i : manifest.indices(split)) {
    auto sample = load_sample(manifest.samples[i], options);
    if (options.expansion.enabled && split == "train") {
      const auto& e = options.expansion;
      auto tiles = expand(sample.image, e.resize_px, e.tile_px, e.stride);
      for (std::size_t t = 0; t < tiles.size(); ++t) {
        LoadedSample piece;
        piece.id = sample.id + "#" + std::to_string(t);
        piece.image = tiles[t].height == options.height && tiles[t].width == options.width
                          ? std::move(tiles[t])
                          : resize_bilinear(tiles[t], options.height, options.width);
        items_.push_back(std::move(piece));
      }
    } else {
      items_.push_back(std::move(sample));
    }
  }
}

}  // namespace imim
