#include "imim/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "imim/ops.hpp"
#include "imim/random.hpp"

namespace imim {

namespace {

std::string valid_patch_sizes(std::size_t h, std::size_t w) {
  std::string s;
  for (std::size_t p = 1; p <= std::min(h, w); ++p) {
    if (h % p == 0 && w % p == 0) s += (s.empty() ? "" : ", ") + std::to_string(p);
  }
  return s;
}

}  // namespace

TokenGrid tokenize(const MultimodalImage& img, std::size_t patch_size) {
  if (patch_size == 0 || img.height % patch_size != 0 || img.width % patch_size != 0) {
    throw TokenizationError("a " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                            " image cannot be cut into " + std::to_string(patch_size) +
                            " px patches; valid sizes: " + valid_patch_sizes(img.height, img.width));
  }
  TokenGrid grid;
  grid.grid_h = img.height / patch_size;
  grid.grid_w = img.width / patch_size;
  grid.patch_size = patch_size;
  grid.channels = img.channels;
  const std::size_t row_len = patch_size * img.channels;
  std::vector<double> data(grid.n_tokens() * grid.patch_dim());
  auto out = data.begin();
  for (std::size_t gy = 0; gy < grid.grid_h; ++gy) {
    for (std::size_t gx = 0; gx < grid.grid_w; ++gx) {
      for (std::size_t py = 0; py < patch_size; ++py) {
        const auto* src = img.pixels.data() + ((gy * patch_size + py) * img.width + gx * patch_size) * img.channels;
        out = std::copy_n(src, row_len, out);
      }
    }
  }
  grid.tokens = Tensor::from({grid.n_tokens(), grid.patch_dim()}, std::move(data));
  return grid;
}

MultimodalImage detokenize_values(std::span<const double> tokens, std::size_t grid_h, std::size_t grid_w,
                                  std::size_t patch_size, std::size_t channels, bool clamp) {
  if (channels != 3 && channels != 4) throw TokenizationError("tokens must carry 3 or 4 channels");
  const std::size_t patch_dim = patch_size * patch_size * channels;
  if (tokens.size() != grid_h * grid_w * patch_dim) throw TokenizationError("token buffer does not match grid");
  auto img = MultimodalImage::blank(grid_h * patch_size, grid_w * patch_size,
                                    channels == 4 ? Modality::rgb_ir : Modality::rgb);
  const std::size_t row_len = patch_size * channels;
  auto in = tokens.begin();
  for (std::size_t gy = 0; gy < grid_h; ++gy) {
    for (std::size_t gx = 0; gx < grid_w; ++gx) {
      for (std::size_t py = 0; py < patch_size; ++py) {
        auto* dst = img.pixels.data() + ((gy * patch_size + py) * img.width + gx * patch_size) * channels;
        for (std::size_t i = 0; i < row_len; ++i, ++in) {
          const double v = clamp ? std::clamp(*in, 0.0, 1.0) : *in;
          dst[i] = static_cast<float>(v);
        }
      }
    }
  }
  return img;
}

MultimodalImage detokenize(const TokenGrid& grid) {
  return detokenize_values(grid.tokens.data(), grid.grid_h, grid.grid_w, grid.patch_size, grid.channels);
}

void standardize_tokens(TokenGrid& grid, std::span<const double> mean, std::span<const double> stddev) {
  if (mean.size() != grid.channels || stddev.size() != grid.channels) {
    throw ContractError("standardization needs one mean/std per channel");
  }
  std::vector<double> data(grid.tokens.data().begin(), grid.tokens.data().end());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto c = i % grid.channels;
    data[i] = (data[i] - mean[c]) / stddev[c];
  }
  grid.tokens = Tensor::from(grid.tokens.shape(), std::move(data));
}

bool MaskPlan::is_masked(std::size_t token) const {
  return std::binary_search(masked_idx.begin(), masked_idx.end(), token);
}

std::string MaskPlan::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["ratio"] = mask_ratio;
  j["n_tokens"] = n_tokens;
  j["masked_idx"] = masked_idx;
  return j.dump();
}

MaskPlan MaskPlan::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    auto plan = mask_plan_from_indices(j.at("n_tokens").get<std::size_t>(),
                                       j.at("masked_idx").get<std::vector<std::size_t>>());
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.mask_ratio = j.at("ratio").get<double>();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad mask plan JSON: ") + e.what());
  }
}

std::size_t masked_count(std::size_t n_tokens, double mask_ratio) {
  return static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(n_tokens)));
}

MaskPlan make_mask_plan(std::size_t n_tokens, double mask_ratio, std::uint64_t seed) {
  if (n_tokens < 2) throw PlanError("a mask plan needs at least 2 tokens");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw PlanError("mask ratio must lie strictly between 0 and 1");
  const auto n_masked = masked_count(n_tokens, mask_ratio);
  if (n_masked == 0 || n_masked == n_tokens) {
    throw PlanError("mask ratio " + std::to_string(mask_ratio) + " over " + std::to_string(n_tokens) +
                    " tokens leaves an empty masked or unmasked set");
  }
  std::vector<std::size_t> perm(n_tokens);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = n_tokens - 1; i > 0; --i) {
    std::swap(perm[i], perm[bounded_draw(rng, i + 1)]);
  }
  MaskPlan plan;
  plan.masked_idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_masked));
  plan.unmasked_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_masked), perm.end());
  std::sort(plan.masked_idx.begin(), plan.masked_idx.end());
  std::sort(plan.unmasked_idx.begin(), plan.unmasked_idx.end());
  plan.mask_ratio = mask_ratio;
  plan.seed = seed;
  plan.n_tokens = n_tokens;
  return plan;
}

MaskPlan mask_plan_from_indices(std::size_t n_tokens, std::vector<std::size_t> masked) {
  std::sort(masked.begin(), masked.end());
  if (std::adjacent_find(masked.begin(), masked.end()) != masked.end()) throw PlanError("duplicate masked index");
  if (!masked.empty() && masked.back() >= n_tokens) throw PlanError("masked index outside the token grid");
  if (masked.empty() || masked.size() == n_tokens) throw PlanError("plan must mask some but not all tokens");
  MaskPlan plan;
  plan.n_tokens = n_tokens;
  plan.mask_ratio = static_cast<double>(masked.size()) / static_cast<double>(n_tokens);
  for (std::size_t i = 0, m = 0; i < n_tokens; ++i) {
    if (m < masked.size() && masked[m] == i) {
      ++m;
    } else {
      plan.unmasked_idx.push_back(i);
    }
  }
  plan.masked_idx = std::move(masked);
  return plan;
}

SplitTokens split_tokens(const TokenGrid& grid, const MaskPlan& plan) {
  if (plan.n_tokens != grid.n_tokens() || plan.masked_idx.size() + plan.unmasked_idx.size() != grid.n_tokens()) {
    throw ContractError("mask plan over " + std::to_string(plan.n_tokens) + " tokens does not match a grid of " +
                        std::to_string(grid.n_tokens()));
  }
  if (plan.masked_idx.empty() || plan.unmasked_idx.empty()) {
    throw ContractError("mask plan must have both masked and unmasked tokens");
  }
  SplitTokens out;
  out.unmasked = ops::gather_rows(grid.tokens, plan.unmasked_idx);
  out.unmasked_positions = plan.unmasked_idx;
  out.masked_positions = plan.masked_idx;
  return out;
}

}  // namespace imim
