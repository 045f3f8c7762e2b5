#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "imim/model.hpp"

namespace imim {

struct AdamWOptions {
  double lr = 1e-3;
  double weight_decay = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

/// One AdamW update of a single parameter buffer; `step` counts from 1.
/// Decay is decoupled: p -= lr*wd*p, then the bias-corrected Adam step.
void adamw_step(std::span<double> param, std::span<const double> grad, AdamMoments& moments, std::uint64_t step,
                const AdamWOptions& opt, const std::string& name = "param");

/// AdamW over a fixed, named parameter list.
class AdamW {
 public:
  AdamW(std::vector<NamedTensor> params, AdamWOptions options);

  /// Checks every gradient for NaN first, so a failed step updates nothing.
  void step();

  std::uint64_t step_count() const { return step_; }
  void set_step_count(std::uint64_t s) { step_ = s; }
  const AdamWOptions& options() const { return options_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  std::vector<AdamMoments>& moments() { return moments_; }
  const std::vector<AdamMoments>& moments() const { return moments_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<AdamMoments> moments_;
  AdamWOptions options_;
  std::uint64_t step_ = 0;
};

}  // namespace imim
