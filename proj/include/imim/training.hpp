#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imim/dataset.hpp"
#include "imim/model.hpp"
#include "imim/optim.hpp"

namespace imim {

/// Every hyperparameter and switch of one run. Serialized flat, one JSON key
/// per CLI flag; the patch size doubles as the mask size.
struct RunConfig {
  MimConfig model;
  Modality modality = Modality::rgb_ir;
  double mask_ratio = 0.75;
  std::size_t batch_size = 16;
  std::size_t steps = 2000;
  AdamWOptions optim;
  std::uint64_t seed = 0;
  std::string manifest;  // empty: synthetic corpus of n_train + n_eval scenes
  std::size_t n_train = 256;
  std::size_t n_eval = 32;
  std::size_t checkpoint_every = 500;
  bool standardize = false;
  ExpansionOptions expansion;
  std::size_t probe_max_iter = 100;
  bool log_wall_time = false;  // fills the seconds column; breaks byte-identity

  /// Keeps model.channels in step with the modality, then checks ranges.
  void validate() const;
  void sync();
  nlohmann::json to_json() const;
  /// Missing keys keep defaults; unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
  /// Applies the keys of `overrides` on top of this config.
  void merge(const nlohmann::json& overrides);
  /// Short stable hex digest of the serialized config.
  std::string hash() const;
};

/// Field names accepted by RunConfig JSON, in documentation order.
const std::vector<std::string>& run_config_keys();

/// Train and eval images of a run, already in the configured modality.
struct RunData {
  DatasetManifest manifest;
  std::vector<LoadedSample> train;
  std::vector<LoadedSample> eval;
  std::vector<double> channel_mean;  // empty unless standardize is on
  std::vector<double> channel_std;
};

RunData load_run_data(const RunConfig& config);

/// Tokenizes with the run's patch size and optional standardization.
TokenGrid prepare_tokens(const MultimodalImage& image, const RunConfig& config, const RunData& data);

struct TrainState {
  TrainState(RunConfig config, MimModel model);

  RunConfig config;
  MimModel model;
  std::vector<AdamMoments> moments;  // aligned with model.trainable()
  std::uint64_t step = 0;
  std::mt19937_64 rng;

  void save(const std::string& path) const;
  static TrainState load(const std::string& path);
};

/// Fresh state: the first draw of the seeded stream initializes the model.
TrainState initial_state(const RunConfig& config);

struct MetricRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct PretrainOptions {
  std::string run_dir;  // empty: nothing is written
  std::function<void(const MetricRow&)> on_step;
};

struct PretrainResult {
  TrainState state;
  std::vector<MetricRow> metrics;
};

/// Runs config.steps optimizer steps. Resumes from `resume` when given.
PretrainResult pretrain(const RunConfig& config, const PretrainOptions& options = {},
                        const TrainState* resume = nullptr);

std::string checkpoint_name(std::uint64_t step);
std::string format_metric_row(const MetricRow& row, bool with_seconds);

/// Writes patch_proj, pos_embed and the encoder blocks only.
void export_encoder(const TrainState& state, const std::string& path);
void export_encoder(const MimModel& model, const std::string& path);

}  // namespace imim
