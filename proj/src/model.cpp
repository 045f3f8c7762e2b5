#include "imim/model.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "imim/checkpoint.hpp"
#include "imim/ops.hpp"
#include "imim/random.hpp"

namespace imim {

std::string to_string(QueryMode m) {
  switch (m) {
    case QueryMode::q_masked:
      return "q_masked";
    case QueryMode::q_unmasked:
      return "q_unmasked";
    case QueryMode::null_baseline:
      return "null_baseline";
  }
  return "?";
}

std::string to_string(LossScope s) { return s == LossScope::full_image ? "full_image" : "masked_only"; }

QueryMode parse_query_mode(const std::string& s) {
  if (s == "q_masked") return QueryMode::q_masked;
  if (s == "q_unmasked") return QueryMode::q_unmasked;
  if (s == "null_baseline") return QueryMode::null_baseline;
  throw ContractError("unknown query mode '" + s + "' (q_masked, q_unmasked, null_baseline)");
}

LossScope parse_loss_scope(const std::string& s) {
  if (s == "full_image") return LossScope::full_image;
  if (s == "masked_only") return LossScope::masked_only;
  throw ContractError("unknown loss scope '" + s + "' (full_image, masked_only)");
}

void MimConfig::validate() const {
  if (embed_dim == 0 || n_heads == 0 || embed_dim % n_heads != 0) {
    throw ContractError("embed_dim " + std::to_string(embed_dim) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
  }
  if (mlp_ratio == 0) throw ContractError("mlp_ratio must be positive");
  if (channels != 3 && channels != 4) throw ContractError("channels must be 3 (rgb) or 4 (rgb_ir)");
  if (patch_size == 0 || image_h % patch_size != 0 || image_w % patch_size != 0) {
    throw TokenizationError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                            " is not divisible into " + std::to_string(patch_size) + " px patches");
  }
  if (n_tokens() < 2) throw ContractError("the patch grid needs at least 2 tokens");
}

nlohmann::json MimConfig::to_json() const {
  return {{"embed_dim", embed_dim},   {"encoder_depth", encoder_depth},     {"n_heads", n_heads},
          {"mlp_ratio", mlp_ratio},   {"patch_size", patch_size},           {"channels", channels},
          {"image_h", image_h},       {"image_w", image_w},                 {"query_mode", to_string(query_mode)},
          {"loss_scope", to_string(loss_scope)}};
}

MimConfig MimConfig::from_json(const nlohmann::json& j) {
  MimConfig c;
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.encoder_depth = j.at("encoder_depth").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.image_h = j.at("image_h").get<std::size_t>();
  c.image_w = j.at("image_w").get<std::size_t>();
  c.query_mode = parse_query_mode(j.at("query_mode").get<std::string>());
  c.loss_scope = parse_loss_scope(j.at("loss_scope").get<std::string>());
  return c;
}

Tensor sincos_position_table(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
  const std::size_t n = grid_h * grid_w;
  std::vector<double> table(n * dim, 0.0);
  // Fills `width` columns starting at `col` with a 1-D sin/cos code of `pos`.
  auto encode_1d = [&](std::size_t token, std::size_t col, std::size_t width, double pos) {
    const std::size_t half = width / 2;
    for (std::size_t i = 0; i < half; ++i) {
      const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(half));
      table[token * dim + col + i] = std::sin(pos * omega);
      table[token * dim + col + half + i] = std::cos(pos * omega);
    }
  };
  for (std::size_t t = 0; t < n; ++t) {
    if (dim % 4 == 0) {
      encode_1d(t, 0, dim / 2, static_cast<double>(t / grid_w));
      encode_1d(t, dim / 2, dim / 2, static_cast<double>(t % grid_w));
    } else {
      encode_1d(t, 0, dim - dim % 2, static_cast<double>(t));
    }
  }
  return Tensor::from({n, dim}, std::move(table));
}

Tensor reconstruction_loss(const Tensor& x, const Tensor& f, LossScope scope, const MaskPlan* plan) {
  if (x.shape() != f.shape()) {
    throw ContractError("reconstruction loss: shape mismatch " + shape_str(x.shape()) + " vs " +
                        shape_str(f.shape()));
  }
  std::vector<double> weight(x.numel(), 0.0);
  if (scope == LossScope::full_image) {
    std::fill(weight.begin(), weight.end(), 1.0 / static_cast<double>(x.numel()));
  } else {
    if (plan == nullptr || x.rank() != 2 || x.dim(0) != plan->n_tokens) {
      throw ContractError("masked_only loss needs token-layout tensors and the matching mask plan");
    }
    const auto pd = x.dim(1);
    const double w = 1.0 / static_cast<double>(plan->masked_idx.size() * pd);
    for (auto t : plan->masked_idx) std::fill_n(weight.begin() + static_cast<std::ptrdiff_t>(t * pd), pd, w);
  }
  return ops::weighted_sse(f, x, weight);
}

MultimodalImage ReconstructionOutput::image(const MimConfig& cfg) const {
  return detokenize_values(reconstruction.data(), cfg.grid_h(), cfg.grid_w(), cfg.patch_size, cfg.channels, true);
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = bound * (2.0 * unit_draw(rng) - 1.0);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Linear make_linear(std::size_t in, std::size_t out, InitMode init, std::mt19937_64& rng, bool zero_init = false) {
  Linear l;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  if (init == InitMode::zeros || (init == InitMode::standard && zero_init)) {
    l.weight = Tensor::zeros({in, out}, true);
    l.bias = Tensor::zeros({out}, true);
  } else {
    l.weight = uniform_tensor({in, out}, bound, rng);
    l.bias = init == InitMode::randomized ? uniform_tensor({out}, 0.1, rng) : Tensor::zeros({out}, true);
  }
  return l;
}

NormParams make_norm(std::size_t d, InitMode init, std::mt19937_64& rng) {
  if (init != InitMode::randomized) return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
  auto gamma = uniform_tensor({d}, 0.2, rng);
  for (auto& g : gamma.mutable_data()) g += 1.0;
  return {gamma, uniform_tensor({d}, 0.1, rng)};
}

void require_partition(const MaskPlan& plan, std::size_t n_tokens) {
  if (plan.n_tokens != n_tokens) {
    throw ContractError("mask plan covers " + std::to_string(plan.n_tokens) + " tokens, grid has " +
                        std::to_string(n_tokens));
  }
  std::vector<int> hits(n_tokens, 0);
  for (auto i : plan.masked_idx) {
    if (i >= n_tokens) throw ContractError("masked index " + std::to_string(i) + " outside the grid");
    ++hits[i];
  }
  for (auto i : plan.unmasked_idx) {
    if (i >= n_tokens) throw ContractError("unmasked index " + std::to_string(i) + " outside the grid");
    ++hits[i];
  }
  for (std::size_t i = 0; i < n_tokens; ++i) {
    if (hits[i] == 0) throw ContractError("token " + std::to_string(i) + " is neither masked nor unmasked");
    if (hits[i] > 1) throw ContractError("token " + std::to_string(i) + " is both masked and unmasked");
  }
  if (plan.masked_idx.empty() || plan.unmasked_idx.empty()) {
    throw ContractError("mask plan needs at least one masked and one unmasked token");
  }
}

Tensor concat_or_single(const std::vector<Tensor>& parts) {
  return parts.size() == 1 ? parts.front() : ops::concat_rows(parts);
}

}  // namespace

MimModel::MimModel(const MimConfig& config, std::uint64_t seed, InitMode init) : config_(config) {
  config_.validate();
  const auto d = config_.embed_dim;
  std::mt19937_64 rng(seed);

  patch_proj = make_linear(config_.patch_dim(), d, init, rng);
  pos_embed = sincos_position_table(config_.grid_h(), config_.grid_w(), d);
  mask_embed = init == InitMode::zeros ? Tensor::zeros({1, d}, true)
                                       : uniform_tensor({1, d}, init == InitMode::randomized ? 0.5 : 1.0 / std::sqrt(static_cast<double>(d)), rng);
  for (std::size_t i = 0; i < config_.encoder_depth; ++i) {
    EncoderBlock b;
    const auto hidden = d * config_.mlp_ratio;
    b.norm1 = make_norm(d, init, rng);
    b.qkv = make_linear(d, 3 * d, init, rng);
    b.attn_out = make_linear(d, d, init, rng);
    b.norm2 = make_norm(d, init, rng);
    b.fc1 = make_linear(d, hidden, init, rng);
    b.fc2 = make_linear(hidden, d, init, rng);
    blocks.push_back(std::move(b));
  }
  encoder_norm = make_norm(d, init, rng);
  decoder = make_linear(d, config_.patch_dim(), init, rng);
  // Drawn last so that a baseline and an interactive model built from the
  // same seed share every other parameter.
  if (config_.query_mode != QueryMode::null_baseline) {
    cross.q = make_linear(d, d, init, rng);
    cross.k = make_linear(d, d, init, rng);
    cross.v = make_linear(d, d, init, rng);
    cross.o = make_linear(d, d, init, rng, /*zero_init=*/true);
  }
}

std::vector<NamedTensor> MimModel::named_tensors() const {
  std::vector<NamedTensor> out;
  out.push_back({"patch_proj.weight", patch_proj.weight});
  out.push_back({"patch_proj.bias", patch_proj.bias});
  out.push_back({"pos_embed", pos_embed});
  if (!encoder_only_) out.push_back({"mask_embed", mask_embed});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto p = "encoder.blocks." + std::to_string(i) + ".";
    const auto& b = blocks[i];
    out.push_back({p + "norm1.gamma", b.norm1.gamma});
    out.push_back({p + "norm1.beta", b.norm1.beta});
    out.push_back({p + "attn.qkv.weight", b.qkv.weight});
    out.push_back({p + "attn.qkv.bias", b.qkv.bias});
    out.push_back({p + "attn.out.weight", b.attn_out.weight});
    out.push_back({p + "attn.out.bias", b.attn_out.bias});
    out.push_back({p + "norm2.gamma", b.norm2.gamma});
    out.push_back({p + "norm2.beta", b.norm2.beta});
    out.push_back({p + "mlp.fc1.weight", b.fc1.weight});
    out.push_back({p + "mlp.fc1.bias", b.fc1.bias});
    out.push_back({p + "mlp.fc2.weight", b.fc2.weight});
    out.push_back({p + "mlp.fc2.bias", b.fc2.bias});
  }
  out.push_back({"encoder.norm.gamma", encoder_norm.gamma});
  out.push_back({"encoder.norm.beta", encoder_norm.beta});
  if (encoder_only_) return out;
  if (config_.query_mode != QueryMode::null_baseline) {
    out.push_back({"cross_attn.q.weight", cross.q.weight});
    out.push_back({"cross_attn.q.bias", cross.q.bias});
    out.push_back({"cross_attn.k.weight", cross.k.weight});
    out.push_back({"cross_attn.k.bias", cross.k.bias});
    out.push_back({"cross_attn.v.weight", cross.v.weight});
    out.push_back({"cross_attn.v.bias", cross.v.bias});
    out.push_back({"cross_attn.o.weight", cross.o.weight});
    out.push_back({"cross_attn.o.bias", cross.o.bias});
  }
  out.push_back({"decoder.weight", decoder.weight});
  out.push_back({"decoder.bias", decoder.bias});
  return out;
}

std::vector<NamedTensor> MimModel::trainable() const {
  auto all = named_tensors();
  std::erase_if(all, [](const NamedTensor& t) { return !t.tensor.requires_grad(); });
  return all;
}

std::size_t MimModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : trainable()) n += t.tensor.numel();
  return n;
}

void MimModel::zero_grad() {
  for (auto& t : named_tensors()) t.tensor.zero_grad();
}

std::vector<NamedTensor> MimModel::encoder_tensors() const {
  std::vector<NamedTensor> out;
  for (auto& t : named_tensors()) {
    if (t.name.rfind("patch_proj.", 0) == 0 || t.name == "pos_embed" || t.name.rfind("encoder.", 0) == 0) {
      out.push_back(t);
    }
  }
  return out;
}

void MimModel::require_decoder() const {
  if (encoder_only_) throw ContractError("this model was loaded from an encoder-only export; it has no decoder");
}

Tensor segmented_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                           std::span<const std::size_t> q_segments, std::span<const std::size_t> kv_segments,
                           bool transpose_readout, std::vector<Tensor>* weights) {
  if (q_segments.size() != kv_segments.size()) throw ContractError("attention: segment lists differ in length");
  if (k.shape() != v.shape()) throw DimensionError("attention: key/value shapes differ");
  const auto d = q.dim(1);
  if (k.dim(1) != d || d % n_heads != 0) throw DimensionError("attention: feature widths do not split into heads");
  const auto dk = d / n_heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  const std::size_t q_total = std::accumulate(q_segments.begin(), q_segments.end(), std::size_t{0});
  const std::size_t kv_total = std::accumulate(kv_segments.begin(), kv_segments.end(), std::size_t{0});
  if (q_total != q.dim(0) || kv_total != k.dim(0)) throw ContractError("attention: segments do not cover the rows");

  std::vector<Tensor> segment_out;
  std::size_t q_off = 0, k_off = 0;
  for (std::size_t s = 0; s < q_segments.size(); ++s) {
    if (q_segments[s] == 0 || kv_segments[s] == 0) throw ContractError("attention: empty query or key set");
    const bool whole = q_segments.size() == 1;
    const auto qs = whole ? q : ops::slice_rows(q, q_off, q_segments[s]);
    const auto ks = whole ? k : ops::slice_rows(k, k_off, kv_segments[s]);
    const auto vs = whole ? v : ops::slice_rows(v, k_off, kv_segments[s]);
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const auto qh = n_heads == 1 ? qs : ops::slice_cols(qs, h * dk, dk);
      const auto kh = n_heads == 1 ? ks : ops::slice_cols(ks, h * dk, dk);
      const auto vh = n_heads == 1 ? vs : ops::slice_cols(vs, h * dk, dk);
      const auto scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt_dk);
      const auto attn = ops::softmax(scores, -1);
      auto out = ops::matmul(attn, vh);
      if (transpose_readout) out = ops::matmul(ops::transpose(attn), out);
      if (weights) weights->push_back(attn);
      heads.push_back(std::move(out));
    }
    segment_out.push_back(n_heads == 1 ? heads.front() : ops::concat_cols(heads));
    q_off += q_segments[s];
    k_off += kv_segments[s];
  }
  return concat_or_single(segment_out);
}

Tensor MimModel::encode_rows(const Tensor& patches, std::span<const std::size_t> positions,
                             std::span<const std::size_t> segments) const {
  auto x = ops::add(ops::linear(patches, patch_proj.weight, patch_proj.bias), ops::gather_rows(pos_embed, positions));
  const auto d = config_.embed_dim;
  for (const auto& b : blocks) {
    const auto a = ops::layernorm(x, b.norm1.gamma, b.norm1.beta);
    const auto qkv = ops::linear(a, b.qkv.weight, b.qkv.bias);
    const auto attn = segmented_attention(ops::slice_cols(qkv, 0, d), ops::slice_cols(qkv, d, d),
                                          ops::slice_cols(qkv, 2 * d, d), config_.n_heads, segments, segments,
                                          false, nullptr);
    x = ops::add(x, ops::linear(attn, b.attn_out.weight, b.attn_out.bias));
    const auto h = ops::layernorm(x, b.norm2.gamma, b.norm2.beta);
    x = ops::add(x, ops::linear(ops::gelu(ops::linear(h, b.fc1.weight, b.fc1.bias)), b.fc2.weight, b.fc2.bias));
  }
  return ops::layernorm(x, encoder_norm.gamma, encoder_norm.beta);
}

Tensor MimModel::encode(const Tensor& unmasked, std::span<const std::size_t> positions) const {
  if (!unmasked.defined() || unmasked.rank() != 2 || unmasked.dim(1) != config_.patch_dim()) {
    throw ContractError("encode expects [u, " + std::to_string(config_.patch_dim()) + "] patches");
  }
  if (positions.size() != unmasked.dim(0)) throw ContractError("encode: one position per patch is required");
  std::set<std::size_t> seen;
  for (auto p : positions) {
    if (p >= config_.n_tokens()) {
      throw ContractError("position " + std::to_string(p) + " outside a grid of " +
                          std::to_string(config_.n_tokens()) + " tokens");
    }
    if (!seen.insert(p).second) throw ContractError("position " + std::to_string(p) + " repeated");
  }
  const std::size_t seg = positions.size();
  return encode_rows(unmasked, positions, std::span<const std::size_t>(&seg, 1));
}

Tensor MimModel::encode_full(const TokenGrid& grid) const {
  std::vector<std::size_t> all(grid.n_tokens());
  std::iota(all.begin(), all.end(), 0);
  return encode(grid.tokens, all);
}

Tensor MimModel::masked_queries(std::span<const std::size_t> masked_positions) const {
  require_decoder();
  return ops::add_rowwise(ops::gather_rows(pos_embed, masked_positions), mask_embed);
}

Tensor MimModel::cross_rows(const Tensor& queries, const Tensor& enc, std::span<const std::size_t> m_segments,
                            std::span<const std::size_t> u_segments, QueryMode mode,
                            std::vector<Tensor>* weights) const {
  Tensor attn;
  if (mode == QueryMode::q_masked) {
    attn = segmented_attention(ops::linear(queries, cross.q.weight, cross.q.bias),
                               ops::linear(enc, cross.k.weight, cross.k.bias),
                               ops::linear(enc, cross.v.weight, cross.v.bias), config_.n_heads, m_segments,
                               u_segments, false, weights);
  } else {
    // Unmasked features ask; mask-position embeddings answer. Each masked
    // position collects the outputs it contributed to through A^T.
    attn = segmented_attention(ops::linear(enc, cross.q.weight, cross.q.bias),
                               ops::linear(queries, cross.k.weight, cross.k.bias),
                               ops::linear(queries, cross.v.weight, cross.v.bias), config_.n_heads, u_segments,
                               m_segments, true, weights);
  }
  return ops::linear(attn, cross.o.weight, cross.o.bias);
}

CrossAttentionResult MimModel::cross_attention(std::span<const std::size_t> masked_positions, const Tensor& enc_feats,
                                               QueryMode mode) const {
  require_decoder();
  if (mode == QueryMode::null_baseline) throw ContractError("the null baseline has no cross-attention");
  if (config_.query_mode == QueryMode::null_baseline) throw ContractError("model was built without cross-attention");
  if (masked_positions.empty()) throw ContractError("cross-attention needs at least one masked position");
  if (!enc_feats.defined() || enc_feats.rank() != 2 || enc_feats.dim(1) != config_.embed_dim) {
    throw ContractError("cross-attention needs a non-empty key set of width " + std::to_string(config_.embed_dim));
  }
  const std::size_t m = masked_positions.size(), u = enc_feats.dim(0);
  CrossAttentionResult r;
  r.output = cross_rows(masked_queries(masked_positions), enc_feats, std::span<const std::size_t>(&m, 1),
                        std::span<const std::size_t>(&u, 1), mode, &r.weights);
  return r;
}

ReconstructionOutput MimModel::merge_and_decode(const Tensor& enc_feats, const Tensor& masked_feats,
                                                const MaskPlan& plan, const TokenGrid& target) const {
  require_decoder();
  const auto n = config_.n_tokens();
  require_partition(plan, n);
  if (target.n_tokens() != n || target.patch_dim() != config_.patch_dim()) {
    throw ContractError("target grid does not match the model configuration");
  }
  if (enc_feats.dim(0) != plan.unmasked_idx.size() || masked_feats.dim(0) != plan.masked_idx.size()) {
    throw ContractError("feature rows do not match the mask plan (" + std::to_string(enc_feats.dim(0)) + "+" +
                        std::to_string(masked_feats.dim(0)) + " rows for " + std::to_string(n) + " tokens)");
  }
  ReconstructionOutput out;
  out.features = ops::add(ops::scatter_rows(enc_feats, plan.unmasked_idx, n),
                          ops::scatter_rows(masked_feats, plan.masked_idx, n));
  out.reconstruction = ops::linear(out.features, decoder.weight, decoder.bias);
  out.loss = reconstruction_loss(target.tokens, out.reconstruction, config_.loss_scope, &plan);
  return out;
}

ReconstructionOutput MimModel::baseline_forward(const TokenGrid& grid, const MaskPlan& plan) const {
  require_decoder();
  const auto b = run_batch(std::span<const TokenGrid>(&grid, 1), std::span<const MaskPlan>(&plan, 1),
                           QueryMode::null_baseline);
  return {b.reconstruction, b.features, b.loss};
}

ReconstructionOutput MimModel::forward(const TokenGrid& grid, const MaskPlan& plan) const {
  const auto b = forward_batch(std::span<const TokenGrid>(&grid, 1), std::span<const MaskPlan>(&plan, 1));
  return {b.reconstruction, b.features, b.loss};
}

BatchOutput MimModel::forward_batch(std::span<const TokenGrid> grids, std::span<const MaskPlan> plans) const {
  require_decoder();
  return run_batch(grids, plans, config_.query_mode);
}

BatchOutput MimModel::run_batch(std::span<const TokenGrid> grids, std::span<const MaskPlan> plans,
                                QueryMode mode) const {
  const auto& cfg = config_;
  if (grids.empty() || grids.size() != plans.size()) throw ContractError("batch needs one mask plan per image");
  const std::size_t batch = grids.size();
  const std::size_t n = cfg.n_tokens();
  const std::size_t pd = cfg.patch_dim();

  std::vector<Tensor> visible, targets;
  std::vector<std::size_t> u_pos, m_pos, u_rows, m_rows, u_seg, m_seg;
  std::vector<double> weight(batch * n * pd, 0.0);
  for (std::size_t s = 0; s < batch; ++s) {
    const auto& grid = grids[s];
    const auto& plan = plans[s];
    if (grid.n_tokens() != n || grid.patch_dim() != pd) {
      throw ContractError("image " + std::to_string(s) + " tokenizes to [" + std::to_string(grid.n_tokens()) + ", " +
                          std::to_string(grid.patch_dim()) + "], model expects [" + std::to_string(n) + ", " +
                          std::to_string(pd) + "]");
    }
    require_partition(plan, n);
    auto split = split_tokens(grid, plan);
    visible.push_back(split.unmasked);
    targets.push_back(grid.tokens);
    for (auto p : plan.unmasked_idx) {
      u_pos.push_back(p);
      u_rows.push_back(s * n + p);
    }
    for (auto p : plan.masked_idx) {
      m_pos.push_back(p);
      m_rows.push_back(s * n + p);
    }
    u_seg.push_back(plan.unmasked_idx.size());
    m_seg.push_back(plan.masked_idx.size());

    // Per-sample mean over the scored pixels, then mean over the batch.
    auto* w = weight.data() + s * n * pd;
    if (cfg.loss_scope == LossScope::full_image) {
      std::fill_n(w, n * pd, 1.0 / static_cast<double>(n * pd) / static_cast<double>(batch));
    } else {
      const double v = 1.0 / static_cast<double>(plan.masked_idx.size() * pd) / static_cast<double>(batch);
      for (auto t : plan.masked_idx) std::fill_n(w + t * pd, pd, v);
    }
  }

  BatchOutput out;
  out.encoded = encode_rows(concat_or_single(visible), u_pos, u_seg);
  const auto queries = masked_queries(m_pos);
  if (mode == QueryMode::null_baseline) {
    out.masked_feats = queries;
  } else {
    out.cross_out = cross_rows(queries, out.encoded, m_seg, u_seg, mode, nullptr);
    out.masked_feats = ops::add(queries, out.cross_out);
  }
  out.features = ops::add(ops::scatter_rows(out.encoded, u_rows, batch * n),
                          ops::scatter_rows(out.masked_feats, m_rows, batch * n));
  out.reconstruction = ops::linear(out.features, decoder.weight, decoder.bias);
  out.loss = ops::weighted_sse(out.reconstruction, concat_or_single(targets), weight);
  return out;
}

void MimModel::save(const std::string& path) const {
  Checkpoint ckpt;
  ckpt.kind = encoder_only_ ? "encoder" : "model";
  ckpt.meta["config"] = config_.to_json();
  ckpt.tensors = named_tensors();
  write_checkpoint(path, ckpt);
}

MimModel MimModel::load(const std::string& path) {
  const auto ckpt = read_checkpoint(path);
  if (!ckpt.meta.contains("config")) throw FormatError(path + ": checkpoint carries no model configuration");
  return from_tensors(MimConfig::from_json(ckpt.meta.at("config")), ckpt.tensors);
}

MimModel MimModel::from_tensors(const MimConfig& config, const std::vector<NamedTensor>& tensors) {
  MimModel model(config, 0, InitMode::zeros);
  bool has_decoder = false;
  for (const auto& t : tensors) has_decoder = has_decoder || t.name == "decoder.weight";
  model.encoder_only_ = !has_decoder;
  auto find = [&](const std::string& name) -> const Tensor* {
    for (const auto& t : tensors)
      if (t.name == name) return &t.tensor;
    return nullptr;
  };
  for (auto& slot : model.named_tensors()) {
    const Tensor* src = find(slot.name);
    if (!src) throw FormatError("checkpoint is missing tensor '" + slot.name + "'");
    if (src->shape() != slot.tensor.shape()) {
      throw FormatError("tensor '" + slot.name + "' has shape " + shape_str(src->shape()) + ", expected " +
                        shape_str(slot.tensor.shape()));
    }
    auto dst = slot.tensor;
    std::copy(src->data().begin(), src->data().end(), dst.mutable_data().begin());
  }
  return model;
}

}  // namespace imim
