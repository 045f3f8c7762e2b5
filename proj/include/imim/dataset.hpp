#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "imim/image.hpp"
#include "imim/synth.hpp"

namespace imim {

struct SampleRecord {
  std::string id;
  // File path, "rgb_path|ir_path", or "synth:<seed>".
  std::string source;
  std::string split;  // "train" or "eval"
  Modality modality = Modality::rgb_ir;
};

/// Ordered sample list; JSON {seed, samples:[{id, source, split, modality}]}.
struct DatasetManifest {
  std::uint64_t seed = 0;
  std::vector<SampleRecord> samples;

  static DatasetManifest load(const std::string& path);
  static DatasetManifest parse(const std::string& json_text);
  std::string to_json() const;
  void save(const std::string& path) const;

  /// Unique ids; each id in exactly one split.
  void validate() const;
  std::vector<std::size_t> indices(const std::string& split) const;
};

/// Manifest of generated scenes. Sample seeds derive from `seed` and the index.
DatasetManifest synthetic_manifest(std::uint64_t seed, std::size_t n_train, std::size_t n_eval,
                                   Modality modality);

struct LoadedSample {
  std::string id;
  MultimodalImage image;
  std::vector<Box> boxes;  // empty when no annotations exist
};

struct ExpansionOptions {
  bool enabled = false;
  std::size_t resize_px = 512;
  std::size_t tile_px = 256;
  std::size_t stride = 128;
};

struct DatasetOptions {
  std::size_t height = 128;
  std::size_t width = 128;
  std::string base_dir;  // resolves relative file sources
  ExpansionOptions expansion;
};

/// Resolves one record to an image of the requested modality and size.
LoadedSample load_sample(const SampleRecord& record, const DatasetOptions& options);

/// Eagerly materialized split; expansion tiles train images when enabled.
class Dataset {
 public:
  Dataset(const DatasetManifest& manifest, const std::string& split, const DatasetOptions& options);

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const LoadedSample& operator[](std::size_t i) const { return items_.at(i); }
  const std::vector<LoadedSample>& items() const { return items_; }

 private:
  std::vector<LoadedSample> items_;
};

/// splitmix64 finalizer; derives independent seeds from (seed, index).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace imim
