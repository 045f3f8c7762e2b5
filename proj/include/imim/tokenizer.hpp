#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "imim/image.hpp"
#include "imim/tensor.hpp"

namespace imim {

class TokenizationError : public Error {
 public:
  using Error::Error;
};

class PlanError : public Error {
 public:
  using Error::Error;
};

/// Patch tokens of one image. Token k is the patch at grid cell
/// (k / grid_w, k % grid_w); inside a token, values are ordered
/// (row, column, channel) with channel fastest.
struct TokenGrid {
  Tensor tokens;  // [grid_h * grid_w, patch_size^2 * channels]
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t patch_size = 0;
  std::size_t channels = 0;

  std::size_t n_tokens() const { return grid_h * grid_w; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
};

TokenGrid tokenize(const MultimodalImage& img, std::size_t patch_size);
MultimodalImage detokenize(const TokenGrid& grid);
/// Token-space buffer back to pixels, for model outputs that are not TokenGrids.
MultimodalImage detokenize_values(std::span<const double> tokens, std::size_t grid_h, std::size_t grid_w,
                                  std::size_t patch_size, std::size_t channels, bool clamp = false);

/// Per-channel (x - mean) / std applied in token space.
void standardize_tokens(TokenGrid& grid, std::span<const double> mean, std::span<const double> stddev);

/// Partition of the token grid into masked and unmasked positions.
struct MaskPlan {
  std::vector<std::size_t> masked_idx;    // ascending
  std::vector<std::size_t> unmasked_idx;  // ascending
  double mask_ratio = 0.0;
  std::uint64_t seed = 0;
  std::size_t n_tokens = 0;

  bool is_masked(std::size_t token) const;
  std::string to_json() const;
  static MaskPlan from_json(const std::string& text);
  bool operator==(const MaskPlan&) const = default;
};

/// Number of masked tokens: round(mask_ratio * n_tokens).
std::size_t masked_count(std::size_t n_tokens, double mask_ratio);

/// Seeded Fisher-Yates subset of round(ratio * n) tokens.
MaskPlan make_mask_plan(std::size_t n_tokens, double mask_ratio, std::uint64_t seed);

/// Plan with an explicit masked set (tests, held-out evaluation).
MaskPlan mask_plan_from_indices(std::size_t n_tokens, std::vector<std::size_t> masked);

struct SplitTokens {
  Tensor unmasked;  // [u, patch_dim], rows in ascending original index
  std::vector<std::size_t> unmasked_positions;
  std::vector<std::size_t> masked_positions;
};

/// Keeps the visible tokens; masked content is dropped, only positions survive.
SplitTokens split_tokens(const TokenGrid& grid, const MaskPlan& plan);

}  // namespace imim
