#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imim/training.hpp"

namespace imim {

class StratificationError : public Error {
 public:
  using Error::Error;
};

/// 10 log10(1 / mse) for pixels in [0,1]; +inf when mse is 0.
double psnr_from_mse(double mse);

/// Mean squared error over the rows of `plan.masked_idx` only.
double masked_region_mse(std::span<const double> reconstruction, std::span<const double> target,
                         std::size_t patch_dim, const MaskPlan& plan);

struct ReconstructionMetrics {
  double mse = 0.0;
  double psnr_db = 0.0;
  std::size_t n_samples = 0;
};

/// Fixed held-out plans: the plan of eval image i depends only on (seed, i).
MaskPlan eval_plan(const RunConfig& config, std::uint64_t seed, std::size_t index);

/// Masked-region MSE/PSNR in pixel units over the first n eval images.
ReconstructionMetrics eval_reconstruction(const MimModel& model, const RunConfig& config, const RunData& data,
                                          std::size_t n, std::uint64_t seed);

struct ProbeOptions {
  std::size_t max_iter = 100;  // Newton iterations
  double tolerance = 1e-9;     // stop when every gradient entry is below this
  double l2 = 1e-4;
  std::uint64_t seed = 0;
  bool shuffle_labels = false;  // null check: permutes training labels
};

struct ProbeResult {
  double accuracy = 0.0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t n_classes = 0;
  std::vector<std::string> warnings;
};

/// Box features: full-grid encoding, tokens averaged with weights equal to
/// their pixel overlap with the box. One row per box.
struct BoxFeatures {
  std::vector<std::vector<double>> features;
  std::vector<int> labels;
};
BoxFeatures pooled_box_features(const MimModel& encoder, const RunConfig& config, const RunData& data,
                                const std::vector<LoadedSample>& samples);

/// Multinomial logistic regression on z-scored features, solved to
/// convergence by damped Newton from zero weights. Returns held-out accuracy.
ProbeResult fit_probe(const BoxFeatures& train, const BoxFeatures& test, const ProbeOptions& options);

/// Frozen encoder; trains on train-split boxes, scores eval-split boxes.
ProbeResult linear_probe(const MimModel& encoder, const RunConfig& config, const RunData& data,
                         const ProbeOptions& options);

struct EvalRow {
  std::string variant;
  double mse = 0.0;
  double psnr_db = 0.0;
  double probe_acc = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_eval = 0;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  std::string to_csv() const;
  nlohmann::json to_json() const;
  /// Writes <stem>.csv and <stem>.json.
  void save(const std::string& stem) const;
};

/// Sweep axes and their default values.
const std::vector<std::string>& sweep_axes();
std::vector<std::string> default_axis_values(const std::string& axis);
/// Copy of `base` with one axis set to `value`.
RunConfig apply_axis(const RunConfig& base, const std::string& axis, const std::string& value);

struct SweepOptions {
  std::vector<std::string> values;  // empty: the axis defaults
  std::size_t jobs = 1;
  std::string run_root;  // per-cell run directories when set
  std::size_t n_eval = 0;  // 0: whole eval split
  bool probe = true;
};

EvalReport ablation_sweep(const RunConfig& base, const std::string& axis, const SweepOptions& options = {});

/// original | masked | reconstruction, with an IR row below for rgb_ir.
MultimodalImage visual_panel(const MultimodalImage& original, const MaskPlan& plan, std::size_t patch_size,
                             const MultimodalImage& reconstruction);

}  // namespace imim
