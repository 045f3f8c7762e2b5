#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "imim/tensor.hpp"
#include "imim/tokenizer.hpp"

namespace imim {

/// Where the cross-attention queries come from; null_baseline skips it.
enum class QueryMode { q_masked, q_unmasked, null_baseline };
/// Pixels that enter the reconstruction loss.
enum class LossScope { full_image, masked_only };

std::string to_string(QueryMode m);
std::string to_string(LossScope s);
QueryMode parse_query_mode(const std::string& s);
LossScope parse_loss_scope(const std::string& s);

struct MimConfig {
  std::size_t embed_dim = 64;
  std::size_t encoder_depth = 4;
  std::size_t n_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t patch_size = 32;
  std::size_t channels = 4;
  std::size_t image_h = 128;
  std::size_t image_w = 128;
  QueryMode query_mode = QueryMode::q_masked;
  LossScope loss_scope = LossScope::full_image;

  std::size_t grid_h() const { return image_h / patch_size; }
  std::size_t grid_w() const { return image_w / patch_size; }
  std::size_t n_tokens() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return embed_dim / n_heads; }

  void validate() const;
  nlohmann::json to_json() const;
  static MimConfig from_json(const nlohmann::json& j);
  bool operator==(const MimConfig&) const = default;
};

enum class InitMode {
  standard,    // U(+-1/sqrt(fan_in)) weights, zero biases, identity norms, zero W_O
  zeros,       // every parameter zero, norms identity
  randomized,  // every parameter random, including W_O and norm affines
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct NormParams {
  Tensor gamma;
  Tensor beta;
};

struct EncoderBlock {
  NormParams norm1;
  Linear qkv;
  Linear attn_out;
  NormParams norm2;
  Linear fc1;
  Linear fc2;
};

struct CrossAttentionParams {
  Linear q, k, v, o;
};

struct CrossAttentionResult {
  Tensor output;  // [m, d], one row per masked position
  // weights[h] is the softmax matrix of head h: [queries, keys].
  std::vector<Tensor> weights;
};

struct ReconstructionOutput {
  Tensor reconstruction;  // f_c(x) in token layout [n_tokens, patch_dim]
  Tensor features;        // merged per-token features [n_tokens, d]
  Tensor loss;            // scalar
  MultimodalImage image(const MimConfig& cfg) const;
};

/// Intermediate tensors of a batched forward pass, rows grouped by sample.
struct BatchOutput {
  Tensor loss;           // mean over samples of the per-sample loss
  Tensor encoded;        // [sum u_s, d]
  Tensor masked_feats;   // [sum m_s, d] decoder inputs at masked positions
  Tensor cross_out;      // [sum m_s, d]; undefined for null_baseline
  Tensor features;       // [B * n_tokens, d]
  Tensor reconstruction; // [B * n_tokens, patch_dim]
};

/// Position-embedding table: 2-D sine/cosine over the patch grid.
Tensor sincos_position_table(std::size_t grid_h, std::size_t grid_w, std::size_t dim);

/// Squared-error reconstruction loss of one sample, normalized per pixel.
/// x and f have identical shapes. masked_only needs token layout
/// [n_tokens, patch_dim] and the plan that selects masked rows.
Tensor reconstruction_loss(const Tensor& x, const Tensor& f, LossScope scope, const MaskPlan* plan = nullptr);

/// Encoder + cross-attention + per-token decoder for interactive masked image
/// modeling, and the null-token baseline when query_mode is null_baseline.
class MimModel {
 public:
  MimModel(const MimConfig& config, std::uint64_t seed, InitMode init = InitMode::standard);

  const MimConfig& config() const { return config_; }
  bool encoder_only() const { return encoder_only_; }

  /// Every tensor including the frozen position table, in checkpoint order.
  std::vector<NamedTensor> named_tensors() const;
  std::vector<NamedTensor> trainable() const;
  std::size_t parameter_count() const;
  void zero_grad();

  /// Unmasked patches [u, patch_dim] at grid `positions` -> features [u, d].
  Tensor encode(const Tensor& unmasked, std::span<const std::size_t> positions) const;
  /// Encoder input for the whole grid, as used by the frozen-encoder probe.
  Tensor encode_full(const TokenGrid& grid) const;

  /// mask_embed + pos_embed[p] for each masked position p: [m, d].
  Tensor masked_queries(std::span<const std::size_t> masked_positions) const;

  /// Scaled dot-product multi-head attention between masked positions and
  /// encoder features. Returns the raw attention output (after W_O).
  CrossAttentionResult cross_attention(std::span<const std::size_t> masked_positions, const Tensor& enc_feats,
                                       QueryMode mode) const;

  /// Scatters both feature sets onto the grid, decodes every token, and
  /// scores it against `target` per the configured loss scope.
  ReconstructionOutput merge_and_decode(const Tensor& enc_feats, const Tensor& masked_feats, const MaskPlan& plan,
                                        const TokenGrid& target) const;

  /// Null-token path: masked positions get only mask_embed + pos_embed.
  ReconstructionOutput baseline_forward(const TokenGrid& grid, const MaskPlan& plan) const;

  /// Full pass for one sample under the configured query mode.
  ReconstructionOutput forward(const TokenGrid& grid, const MaskPlan& plan) const;

  /// Batched pass; loss is the mean of per-sample losses.
  BatchOutput forward_batch(std::span<const TokenGrid> grids, std::span<const MaskPlan> plans) const;

  /// Copy of the encoder tensors only.
  std::vector<NamedTensor> encoder_tensors() const;

  void save(const std::string& path) const;
  static MimModel load(const std::string& path);
  /// Rebuilds a model from tensors; missing decoder parts make it encoder-only.
  static MimModel from_tensors(const MimConfig& config, const std::vector<NamedTensor>& tensors);

  // Parameter access for tests and tools.
  Linear patch_proj;
  Tensor pos_embed;
  Tensor mask_embed;
  std::vector<EncoderBlock> blocks;
  NormParams encoder_norm;
  CrossAttentionParams cross;
  Linear decoder;

 private:
  MimModel() = default;

  Tensor encode_rows(const Tensor& patches, std::span<const std::size_t> positions,
                     std::span<const std::size_t> segments) const;
  Tensor cross_rows(const Tensor& queries, const Tensor& enc, std::span<const std::size_t> m_segments,
                    std::span<const std::size_t> u_segments, QueryMode mode, std::vector<Tensor>* weights) const;
  BatchOutput run_batch(std::span<const TokenGrid> grids, std::span<const MaskPlan> plans, QueryMode mode) const;
  void require_decoder() const;

  MimConfig config_;
  bool encoder_only_ = false;
};

/// Block-diagonal multi-head attention. Row groups of q and k/v pair up by
/// segment. With transpose_readout the per-head result A^T (A V) is returned
/// (one row per key) instead of A V.
Tensor segmented_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                           std::span<const std::size_t> q_segments, std::span<const std::size_t> kv_segments,
                           bool transpose_readout, std::vector<Tensor>* weights);

}  // namespace imim
