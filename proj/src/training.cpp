#include "imim/training.hpp"

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "imim/checkpoint.hpp"
#include "imim/random.hpp"

namespace imim {

namespace fs = std::filesystem;

namespace {

template <typename T>
T get_field(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ContractError(std::string("config field '") + key + "' has the wrong type: " + j.at(key).dump());
  }
}

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = {
      "embed_dim",     "encoder_depth", "n_heads",       "mlp_ratio",    "patch_size",       "image_h",
      "image_w",       "modality",      "query_mode",    "loss_scope",   "mask_ratio",       "batch_size",
      "steps",         "lr",            "weight_decay",  "beta1",        "beta2",            "eps",
      "seed",          "manifest",      "n_train",       "n_eval",       "checkpoint_every", "standardize",
      "expand",        "expand_resize", "expand_tile",   "expand_stride", "probe_max_iter",  "log_wall_time"};
  return keys;
}

void RunConfig::sync() { model.channels = channel_count(modality); }

void RunConfig::validate() const {
  if (model.channels != channel_count(modality)) {
    throw ContractError("model channels " + std::to_string(model.channels) + " do not match modality " +
                        to_string(modality));
  }
  model.validate();
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ContractError("mask_ratio must lie strictly between 0 and 1");
  const auto m = masked_count(model.n_tokens(), mask_ratio);
  if (m == 0 || m == model.n_tokens()) {
    throw PlanError("mask_ratio " + std::to_string(mask_ratio) + " leaves an empty masked or unmasked set over " +
                    std::to_string(model.n_tokens()) + " tokens");
  }
  if (batch_size == 0) throw ContractError("batch_size must be at least 1");
  if (!(optim.lr >= 0.0) || !(optim.weight_decay >= 0.0)) throw ContractError("lr and weight_decay must be >= 0");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0) || !(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    throw ContractError("beta1 and beta2 must lie in [0, 1)");
  }
  if (!(optim.eps > 0.0)) throw ContractError("eps must be positive");
  if (manifest.empty() && n_train == 0) throw ContractError("dataset is empty: n_train is 0 and no manifest is set");
  if (expansion.enabled && (expansion.tile_px == 0 || expansion.stride == 0)) {
    throw ContractError("expansion tile and stride must be positive");
  }
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["embed_dim"] = model.embed_dim;
  j["encoder_depth"] = model.encoder_depth;
  j["n_heads"] = model.n_heads;
  j["mlp_ratio"] = model.mlp_ratio;
  j["patch_size"] = model.patch_size;
  j["image_h"] = model.image_h;
  j["image_w"] = model.image_w;
  j["modality"] = to_string(modality);
  j["query_mode"] = to_string(model.query_mode);
  j["loss_scope"] = to_string(model.loss_scope);
  j["mask_ratio"] = mask_ratio;
  j["batch_size"] = batch_size;
  j["steps"] = steps;
  j["lr"] = optim.lr;
  j["weight_decay"] = optim.weight_decay;
  j["beta1"] = optim.beta1;
  j["beta2"] = optim.beta2;
  j["eps"] = optim.eps;
  j["seed"] = seed;
  j["manifest"] = manifest;
  j["n_train"] = n_train;
  j["n_eval"] = n_eval;
  j["checkpoint_every"] = checkpoint_every;
  j["standardize"] = standardize;
  j["expand"] = expansion.enabled;
  j["expand_resize"] = expansion.resize_px;
  j["expand_tile"] = expansion.tile_px;
  j["expand_stride"] = expansion.stride;
  j["probe_max_iter"] = probe_max_iter;
  j["log_wall_time"] = log_wall_time;
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  c.merge(j);
  return c;
}

void RunConfig::merge(const nlohmann::json& overrides) {
  if (!overrides.is_object()) throw ContractError("run config must be a JSON object");
  auto j = to_json();
  for (const auto& [key, value] : overrides.items()) {
    if (!j.contains(key)) throw ContractError("unknown config field '" + key + "'");
    j[key] = value;
  }
  RunConfig c;
  c.model.embed_dim = get_field<std::size_t>(j, "embed_dim");
  c.model.encoder_depth = get_field<std::size_t>(j, "encoder_depth");
  c.model.n_heads = get_field<std::size_t>(j, "n_heads");
  c.model.mlp_ratio = get_field<std::size_t>(j, "mlp_ratio");
  c.model.patch_size = get_field<std::size_t>(j, "patch_size");
  c.model.image_h = get_field<std::size_t>(j, "image_h");
  c.model.image_w = get_field<std::size_t>(j, "image_w");
  c.modality = parse_modality(get_field<std::string>(j, "modality"));
  c.model.query_mode = parse_query_mode(get_field<std::string>(j, "query_mode"));
  c.model.loss_scope = parse_loss_scope(get_field<std::string>(j, "loss_scope"));
  c.mask_ratio = get_field<double>(j, "mask_ratio");
  c.batch_size = get_field<std::size_t>(j, "batch_size");
  c.steps = get_field<std::size_t>(j, "steps");
  c.optim.lr = get_field<double>(j, "lr");
  c.optim.weight_decay = get_field<double>(j, "weight_decay");
  c.optim.beta1 = get_field<double>(j, "beta1");
  c.optim.beta2 = get_field<double>(j, "beta2");
  c.optim.eps = get_field<double>(j, "eps");
  c.seed = get_field<std::uint64_t>(j, "seed");
  c.manifest = get_field<std::string>(j, "manifest");
  c.n_train = get_field<std::size_t>(j, "n_train");
  c.n_eval = get_field<std::size_t>(j, "n_eval");
  c.checkpoint_every = get_field<std::size_t>(j, "checkpoint_every");
  c.standardize = get_field<bool>(j, "standardize");
  c.expansion.enabled = get_field<bool>(j, "expand");
  c.expansion.resize_px = get_field<std::size_t>(j, "expand_resize");
  c.expansion.tile_px = get_field<std::size_t>(j, "expand_tile");
  c.expansion.stride = get_field<std::size_t>(j, "expand_stride");
  c.probe_max_iter = get_field<std::size_t>(j, "probe_max_iter");
  c.log_wall_time = get_field<bool>(j, "log_wall_time");
  c.sync();
  *this = c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

std::string RunConfig::hash() const {
  // FNV-1a over the canonical dump.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return std::string(buf).substr(0, 12);
}

RunData load_run_data(const RunConfig& config) {
  RunData data;
  DatasetOptions opts;
  opts.height = config.model.image_h;
  opts.width = config.model.image_w;
  opts.expansion = config.expansion;
  if (config.manifest.empty()) {
    data.manifest = synthetic_manifest(config.seed, config.n_train, config.n_eval, config.modality);
  } else {
    data.manifest = DatasetManifest::load(config.manifest);
    opts.base_dir = fs::path(config.manifest).parent_path().string();
  }
  data.manifest.validate();
  auto convert = [&](std::vector<LoadedSample> items) {
    for (auto& s : items) {
      if (config.modality == Modality::rgb && s.image.modality == Modality::rgb_ir) {
        s.image = rgb_part(s.image);
      } else if (config.modality == Modality::rgb_ir && s.image.modality != Modality::rgb_ir) {
        throw FusionError("sample " + s.id + " has no IR channel but the run is rgb_ir");
      }
    }
    return items;
  };
  data.train = convert(Dataset(data.manifest, "train", opts).items());
  data.eval = convert(Dataset(data.manifest, "eval", opts).items());
  if (data.train.empty()) throw ContractError("dataset is empty: no training samples");

  if (config.standardize) {
    const auto c = config.model.channels;
    std::vector<double> sum(c, 0.0), sq(c, 0.0);
    std::size_t count = 0;
    for (const auto& s : data.train) {
      for (std::size_t i = 0; i < s.image.pixels.size(); ++i) {
        const double v = s.image.pixels[i];
        sum[i % c] += v;
        sq[i % c] += v * v;
      }
      count += s.image.height * s.image.width;
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double mean = sum[ch] / static_cast<double>(count);
      const double var = std::max(sq[ch] / static_cast<double>(count) - mean * mean, 0.0);
      data.channel_mean.push_back(mean);
      data.channel_std.push_back(std::max(std::sqrt(var), 1e-6));
    }
  }
  return data;
}

TokenGrid prepare_tokens(const MultimodalImage& image, const RunConfig& config, const RunData& data) {
  auto grid = tokenize(image, config.model.patch_size);
  if (config.standardize) standardize_tokens(grid, data.channel_mean, data.channel_std);
  return grid;
}

TrainState::TrainState(RunConfig config_in, MimModel model_in) : config(std::move(config_in)), model(std::move(model_in)) {
  for (const auto& p : model.trainable()) {
    moments.push_back({std::vector<double>(p.tensor.numel(), 0.0), std::vector<double>(p.tensor.numel(), 0.0)});
  }
}

void TrainState::save(const std::string& path) const {
  Checkpoint ckpt;
  ckpt.kind = "train_state";
  ckpt.meta["config"] = model.config().to_json();
  ckpt.meta["run"] = config.to_json();
  ckpt.meta["step"] = step;
  ckpt.meta["rng"] = rng_text(rng);
  ckpt.tensors = model.named_tensors();
  const auto params = model.trainable();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto n = params[i].tensor.numel();
    ckpt.tensors.push_back({"adamw.m." + params[i].name, Tensor::from({n}, moments[i].m)});
    ckpt.tensors.push_back({"adamw.v." + params[i].name, Tensor::from({n}, moments[i].v)});
  }
  write_checkpoint(path, ckpt);
}

TrainState TrainState::load(const std::string& path) {
  const auto ckpt = read_checkpoint(path);
  if (ckpt.kind != "train_state") throw FormatError(path + " holds a '" + ckpt.kind + "' checkpoint, not a train state");
  try {
    const auto run = RunConfig::from_json(ckpt.meta.at("run"));
    TrainState state(run, MimModel::from_tensors(run.model, ckpt.tensors));
    state.step = ckpt.meta.at("step").get<std::uint64_t>();
    std::istringstream is(ckpt.meta.at("rng").get<std::string>());
    is >> state.rng;
    if (!is) throw FormatError(path + ": unreadable PRNG state");
    const auto params = state.model.trainable();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto m = ckpt.get("adamw.m." + params[i].name).data();
      const auto v = ckpt.get("adamw.v." + params[i].name).data();
      state.moments[i].m.assign(m.begin(), m.end());
      state.moments[i].v.assign(v.begin(), v.end());
    }
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad train-state header: " + e.what());
  }
}

TrainState initial_state(const RunConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const auto init_seed = rng();
  TrainState state(config, MimModel(config.model, init_seed));
  state.rng = rng;
  return state;
}

std::string checkpoint_name(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06" PRIu64 ".imim", step);
  return buf;
}

std::string format_metric_row(const MetricRow& row, bool with_seconds) {
  char buf[160];
  if (with_seconds) {
    std::snprintf(buf, sizeof buf, "%" PRIu64 ",%.17g,%.17g,%.3f", row.step, row.loss, row.lr, row.seconds);
  } else {
    std::snprintf(buf, sizeof buf, "%" PRIu64 ",%.17g,%.17g,", row.step, row.loss, row.lr);
  }
  return buf;
}

PretrainResult pretrain(const RunConfig& config_in, const PretrainOptions& options, const TrainState* resume) {
  RunConfig config = config_in;
  config.sync();
  config.validate();
  const auto data = load_run_data(config);

  PretrainResult result{resume ? *resume : initial_state(config), {}};
  auto& state = result.state;
  if (resume && !(state.model.config() == config.model)) {
    throw ContractError("resumed state was trained with a different model configuration");
  }
  state.config = config;
  AdamW opt(state.model.trainable(), config.optim);
  opt.moments() = state.moments;
  opt.set_step_count(state.step);

  const bool write = !options.run_dir.empty();
  const fs::path dir(options.run_dir);
  std::ofstream metrics;
  if (write) {
    fs::create_directories(dir / "checkpoints");
    const auto mode = resume ? std::ios::app : std::ios::trunc;
    metrics.open(dir / "metrics.csv", std::ios::out | mode);
    if (!metrics) throw FormatError("cannot write metrics under " + dir.string());
    if (!resume) {
      metrics << "step,loss,lr,seconds\n";
      state.save((dir / "checkpoints" / checkpoint_name(0)).string());
    }
  }
  std::string last_good = write && !resume ? (dir / "checkpoints" / checkpoint_name(0)).string() : "";

  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n_tokens = config.model.n_tokens();
  std::vector<TokenGrid> grids(config.batch_size);
  std::vector<MaskPlan> plans(config.batch_size);
  while (state.step < config.steps) {
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const auto idx = bounded_draw(state.rng, data.train.size());
      const auto mask_seed = state.rng();
      grids[b] = prepare_tokens(data.train[idx].image, config, data);
      plans[b] = make_mask_plan(n_tokens, config.mask_ratio, mask_seed);
    }
    const auto retained = [&] {
      return last_good.empty() ? std::string() : "; last good checkpoint: " + last_good;
    };
    double loss = 0.0;
    try {
      state.model.zero_grad();
      const auto out = state.model.forward_batch(grids, plans);
      loss = out.loss.item();
      if (!std::isfinite(loss)) {
        throw NumericError("loss became non-finite at step " + std::to_string(state.step + 1));
      }
      out.loss.backward();
      opt.step();
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + retained());
    }
    ++state.step;

    MetricRow row{state.step, loss, config.optim.lr,
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    result.metrics.push_back(row);
    if (options.on_step) options.on_step(row);
    if (write) {
      metrics << format_metric_row(row, config.log_wall_time) << '\n' << std::flush;
      const bool periodic = config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0;
      if (periodic || state.step == config.steps) {
        state.moments = opt.moments();
        last_good = (dir / "checkpoints" / checkpoint_name(state.step)).string();
        state.save(last_good);
      }
    }
  }
  state.moments = opt.moments();
  return result;
}

void export_encoder(const MimModel& model, const std::string& path) {
  Checkpoint ckpt;
  ckpt.kind = "encoder";
  ckpt.meta["config"] = model.config().to_json();
  ckpt.tensors = model.encoder_tensors();
  write_checkpoint(path, ckpt);
}

void export_encoder(const TrainState& state, const std::string& path) {
  if (state.model.encoder_only()) {
    throw ExportError("train state holds an encoder-only model; nothing complete to export from");
  }
  if (state.moments.size() != state.model.trainable().size()) {
    throw ExportError("train state is incomplete: optimizer moments do not cover the parameters");
  }
  export_encoder(state.model, path);
}

}  // namespace imim
