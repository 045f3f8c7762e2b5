#include "imim/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>

#include "imim/checkpoint.hpp"
#include "imim/eval.hpp"
#include "imim/gradcheck.hpp"
#include "imim/image_io.hpp"
#include "imim/synth.hpp"

namespace imim::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public Error {
 public:
  using Error::Error;
};

const std::map<std::string, std::string>& flag_help() {
  static const std::map<std::string, std::string> help = {
      {"embed_dim", "token embedding width d"},
      {"encoder_depth", "number of encoder blocks"},
      {"n_heads", "attention heads"},
      {"mlp_ratio", "MLP hidden width as a multiple of d"},
      {"patch_size", "patch (= mask) size in pixels"},
      {"image_h", "image height in pixels"},
      {"image_w", "image width in pixels"},
      {"modality", "rgb or rgb_ir"},
      {"query_mode", "q_masked, q_unmasked or null_baseline"},
      {"loss_scope", "full_image or masked_only"},
      {"mask_ratio", "fraction of tokens masked"},
      {"batch_size", "images per optimizer step"},
      {"steps", "optimizer steps"},
      {"lr", "AdamW learning rate"},
      {"weight_decay", "decoupled weight decay"},
      {"beta1", "AdamW first-moment decay"},
      {"beta2", "AdamW second-moment decay"},
      {"eps", "AdamW epsilon"},
      {"seed", "run seed (IMIM_SEED overrides the config file)"},
      {"manifest", "dataset manifest JSON; empty uses the synthetic corpus"},
      {"n_train", "synthetic training scenes"},
      {"n_eval", "synthetic held-out scenes"},
      {"checkpoint_every", "steps between checkpoints (0: final only)"},
      {"standardize", "per-channel mean/std standardization"},
      {"expand", "resize-and-tile data expansion of training images"},
      {"expand_resize", "expansion resize target in pixels"},
      {"expand_tile", "expansion tile size in pixels"},
      {"expand_stride", "expansion tile stride in pixels"},
      {"probe_max_iter", "linear-probe Newton iteration cap"},
      {"log_wall_time", "fill the seconds column of metrics.csv"},
  };
  return help;
}

std::string flag_name(const std::string& key) {
  std::string s = "--" + key;
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

std::string json_scalar_text(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_float()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v.get<double>());
    return buf;
  }
  return v.dump();
}

std::string type_name(const nlohmann::json& v) {
  if (v.is_boolean()) return "BOOL";
  if (v.is_number_unsigned() || v.is_number_integer()) return "UINT";
  if (v.is_number_float()) return "FLOAT";
  return "TEXT";
}

nlohmann::json parse_flag_value(const std::string& key, const std::string& text, const nlohmann::json& like) {
  try {
    if (like.is_boolean()) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw std::invalid_argument(text);
    }
    if (like.is_number_unsigned() || like.is_number_integer()) {
      std::size_t used = 0;
      if (text.empty() || text[0] == '-') throw std::invalid_argument(text);
      const auto v = std::stoull(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    }
    if (like.is_number_float()) {
      std::size_t used = 0;
      const auto v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return v;
    }
  } catch (const std::logic_error&) {
    throw UsageError("invalid value '" + text + "' for " + flag_name(key));
  }
  return text;
}

// Options shared by the verbs that take a run configuration.
struct ConfigFlags {
  RunConfig defaults;
  std::map<std::string, std::string> raw;
  std::map<std::string, CLI::Option*> options;
  std::string config_path;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "RunConfig JSON file; flags override its fields")->type_name("PATH");
    const auto j = defaults.to_json();
    for (const auto& key : run_config_keys()) {
      const auto& v = j.at(key);
      options[key] = app->add_option(flag_name(key), raw[key], flag_help().at(key))
                         ->type_name(type_name(v))
                         ->default_str(json_scalar_text(v));
    }
  }

  // default < checkpoint < config file < IMIM_SEED < flag.
  RunConfig resolve(const nlohmann::json* checkpoint_layer = nullptr) const {
    try {
      RunConfig c = defaults;
      if (checkpoint_layer) c.merge(*checkpoint_layer);
      if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw UsageError("cannot open config file " + config_path);
        nlohmann::json file;
        try {
          file = nlohmann::json::parse(in);
        } catch (const nlohmann::json::parse_error& e) {
          throw UsageError(config_path + ": " + e.what());
        }
        c.merge(file);
      }
      if (const char* env = std::getenv("IMIM_SEED"); env && *env) {
        c.merge({{"seed", parse_flag_value("seed", env, nlohmann::json(std::uint64_t{0}))}});
      }
      const auto like = defaults.to_json();
      nlohmann::json flags = nlohmann::json::object();
      for (const auto& [key, opt] : options) {
        if (opt->count() > 0) flags[key] = parse_flag_value(key, raw.at(key), like.at(key));
      }
      c.merge(flags);
      c.validate();
      return c;
    } catch (const UsageError&) {
      throw;
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
};

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path prepare_run_dir(const std::string& requested, const RunConfig& config) {
  const fs::path dir = requested.empty() ? fs::path("runs") / (config.hash() + "-" + utc_timestamp()) : fs::path(requested);
  for (const char* sub : {"checkpoints", "reports", "visuals"}) fs::create_directories(dir / sub);
  std::ofstream(dir / "config.json") << config.to_json().dump(2) << '\n';
  return dir;
}

// Model plus the run configuration recorded next to it, if any.
struct LoadedModel {
  std::optional<MimModel> model;
  nlohmann::json layer = nlohmann::json::object();
};

LoadedModel load_model(const std::string& path) {
  if (!fs::exists(path)) throw FormatError("checkpoint not found: " + path);
  const auto header = read_checkpoint(path);
  LoadedModel out;
  if (header.kind == "train_state") {
    auto state = TrainState::load(path);
    out.layer = state.config.to_json();
    out.model.emplace(state.model);
    return out;
  }
  out.model.emplace(MimModel::load(path));
  const auto cfg = out.model->config().to_json();
  for (const char* key : {"embed_dim", "encoder_depth", "n_heads", "mlp_ratio", "patch_size", "image_h", "image_w",
                          "query_mode", "loss_scope"}) {
    out.layer[key] = cfg.at(key);
  }
  out.layer["modality"] = cfg.at("channels").get<std::size_t>() == 4 ? "rgb_ir" : "rgb";
  return out;
}

void require_matching(const MimModel& model, const RunConfig& config) {
  if (!(model.config() == config.model)) {
    throw UsageError("flags describe a different model than the checkpoint (" + model.config().to_json().dump() +
                     ")");
  }
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_visual(const fs::path& path, const MimModel& model, const RunConfig& config, const RunData& data,
                  const MultimodalImage& image, const MaskPlan& plan) {
  NoGradGuard no_grad;
  const auto out = model.forward(prepare_tokens(image, config, data), plan);
  std::vector<double> pred(out.reconstruction.data().begin(), out.reconstruction.data().end());
  if (config.standardize) {
    const auto c = config.model.channels;
    for (std::size_t k = 0; k < pred.size(); ++k) pred[k] = pred[k] * data.channel_std[k % c] + data.channel_mean[k % c];
  }
  const auto& cfg = config.model;
  const auto recon = detokenize_values(pred, cfg.grid_h(), cfg.grid_w(), cfg.patch_size, cfg.channels, true);
  save_image(path.string(), visual_panel(image, plan, cfg.patch_size, recon));
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Interactive masked image modeling on RGB and RGB+IR imagery", "imim"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every verb");

  // synth
  auto* synth = app.add_subcommand("synth", "Write the synthetic RGB+IR corpus as PNG files plus a manifest");
  ConfigFlags synth_flags;
  std::string synth_out = "synth_data";
  synth_flags.attach(synth);
  synth->add_option("--out", synth_out, "output directory")->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Pretrain encoder and decoder; writes metrics and checkpoints");
  ConfigFlags pre_flags;
  std::string pre_dir, pre_resume;
  pre_flags.attach(pre);
  pre->add_option("--run-dir", pre_dir, "run directory (default runs/<config hash>-<UTC time>)");
  pre->add_option("--resume", pre_resume, "train-state checkpoint to continue from")->type_name("PATH");

  // export-encoder
  auto* exp = app.add_subcommand("export-encoder", "Drop decoder and cross-attention; keep the encoder");
  std::string exp_ckpt, exp_out;
  exp->add_option("--checkpoint", exp_ckpt, "train-state or model checkpoint")->required()->type_name("PATH");
  exp->add_option("--out", exp_out, "output path (default: encoder.imim next to the checkpoint)")
      ->type_name("PATH");

  // eval
  auto* ev = app.add_subcommand("eval", "Masked-region MSE/PSNR and frozen-encoder linear probe");
  ConfigFlags ev_flags;
  std::string ev_ckpt, ev_dir;
  std::size_t ev_n = 0, ev_visuals = 4;
  bool ev_no_probe = false, ev_random = false;
  ev_flags.attach(ev);
  ev->add_option("--checkpoint", ev_ckpt, "train-state, model or encoder checkpoint")->type_name("PATH");
  ev->add_flag("--random-init", ev_random, "evaluate a freshly initialized model instead of a checkpoint");
  ev->add_option("--n", ev_n, "held-out images to score (0: all)")->capture_default_str();
  ev->add_option("--visuals", ev_visuals, "side-by-side reconstruction PNGs to write")->capture_default_str();
  ev->add_flag("--no-probe", ev_no_probe, "skip the linear probe");
  ev->add_option("--run-dir", ev_dir, "run directory (default runs/<config hash>-<UTC time>)");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Pretrain and evaluate one run per value of an ablation axis");
  ConfigFlags sw_flags;
  std::string sw_axis, sw_values, sw_dir;
  std::size_t sw_jobs = 1;
  bool sw_no_probe = false;
  sw_flags.attach(sw);
  sw->add_option("--axis", sw_axis, "query_mode, mask_size, modality or mask_ratio")->required();
  sw->add_option("--values", sw_values, "comma-separated axis values (default: the axis presets)");
  sw->add_option("--jobs", sw_jobs, "cells trained in parallel")->capture_default_str();
  sw->add_flag("--no-probe", sw_no_probe, "skip the linear probe");
  sw->add_option("--run-dir", sw_dir, "run directory (default runs/<config hash>-<UTC time>)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
  ConfigFlags gc_flags;
  gc_flags.defaults = tiny_run_config();
  double gc_step = 1e-5, gc_tol = 1e-4;
  gc_flags.attach(gc);
  gc->add_option("--fd-step", gc_step, "central-difference step")->capture_default_str();
  gc->add_option("--tolerance", gc_tol, "largest accepted gradient error")->capture_default_str();

  // reconstruct
  auto* rc = app.add_subcommand("reconstruct", "Mask an image and write original | masked | reconstruction");
  ConfigFlags rc_flags;
  std::string rc_ckpt, rc_input, rc_out, rc_dir;
  std::size_t rc_index = 0;
  std::uint64_t rc_mask_seed = 0;
  rc_flags.attach(rc);
  rc->add_option("--checkpoint", rc_ckpt, "train-state or model checkpoint")->required()->type_name("PATH");
  rc->add_option("--input", rc_input, "image file or rgb|ir pair (default: a held-out sample)")->type_name("PATH");
  rc->add_option("--index", rc_index, "held-out sample index when no --input is given")->capture_default_str();
  auto* rc_seed_opt =
      rc->add_option("--mask-seed", rc_mask_seed, "mask-plan seed (default: the run seed)")->type_name("UINT");
  rc->add_option("--out", rc_out, "output PNG (default <run dir>/visuals/reconstruct.png)")->type_name("PATH");
  rc->add_option("--run-dir", rc_dir, "run directory (default runs/<config hash>-<UTC time>)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) {
      const auto cfg = synth_flags.resolve();
      const fs::path dir(synth_out);
      fs::create_directories(dir / "images");
      auto manifest = synthetic_manifest(cfg.seed, cfg.n_train, cfg.n_eval, cfg.modality);
      DatasetOptions opts;
      opts.height = cfg.model.image_h;
      opts.width = cfg.model.image_w;
      for (auto& rec : manifest.samples) {
        const auto sample = load_sample(rec, opts);
        const auto rel = fs::path("images") / (rec.id + ".png");
        save_image((dir / rel).string(), sample.image);
        std::ofstream(dir / fs::path(rel).replace_extension(".json")) << annotations_to_json(sample.boxes) << '\n';
        rec.source = rel.string();
      }
      manifest.save((dir / "manifest.json").string());
      out << "wrote " << manifest.samples.size() << " samples to " << dir.string() << '\n';
      return kExitOk;
    }

    if (pre->parsed()) {
      std::optional<TrainState> resume;
      nlohmann::json layer;
      if (!pre_resume.empty()) {
        if (!fs::exists(pre_resume)) throw FormatError("checkpoint not found: " + pre_resume);
        resume.emplace(TrainState::load(pre_resume));
        layer = resume->config.to_json();
      }
      const auto cfg = pre_flags.resolve(resume ? &layer : nullptr);
      const auto dir = prepare_run_dir(pre_dir, cfg);
      PretrainOptions po;
      po.run_dir = dir.string();
      const auto result = pretrain(cfg, po, resume ? &*resume : nullptr);
      result.state.model.save((dir / "checkpoints" / "model.imim").string());
      out << "run_dir: " << dir.string() << '\n';
      out << "steps: " << result.state.step << '\n';
      if (!result.metrics.empty()) {
        out << "initial_loss: " << fmt(result.metrics.front().loss) << '\n';
        out << "final_loss: " << fmt(result.metrics.back().loss) << '\n';
      }
      return kExitOk;
    }

    if (exp->parsed()) {
      if (!fs::exists(exp_ckpt)) throw FormatError("checkpoint not found: " + exp_ckpt);
      const auto target =
          exp_out.empty() ? (fs::path(exp_ckpt).parent_path() / "encoder.imim").string() : exp_out;
      const auto header = read_checkpoint(exp_ckpt);
      if (header.kind == "train_state") {
        export_encoder(TrainState::load(exp_ckpt), target);
      } else if (header.kind == "model") {
        export_encoder(MimModel::load(exp_ckpt), target);
      } else {
        throw ExportError(exp_ckpt + " holds a '" + header.kind + "' checkpoint, not a complete model");
      }
      out << "wrote " << target << " (" << fs::file_size(target) << " bytes)\n";
      return kExitOk;
    }

    if (ev->parsed()) {
      if (ev_ckpt.empty() == !ev_random) throw UsageError("eval needs exactly one of --checkpoint or --random-init");
      LoadedModel loaded;
      if (!ev_random) loaded = load_model(ev_ckpt);
      const auto cfg = ev_flags.resolve(ev_random ? nullptr : &loaded.layer);
      if (ev_random) loaded.model.emplace(initial_state(cfg).model);
      const auto& model = *loaded.model;
      require_matching(model, cfg);
      const auto dir = prepare_run_dir(ev_dir, cfg);
      const auto data = load_run_data(cfg);
      EvalRow row;
      row.variant = ev_random ? "random_init" : fs::path(ev_ckpt).stem().string();
      row.seed = cfg.seed;
      row.mse = row.psnr_db = std::numeric_limits<double>::quiet_NaN();
      if (!model.encoder_only()) {
        const auto rec = eval_reconstruction(model, cfg, data, ev_n == 0 ? data.eval.size() : ev_n, cfg.seed);
        row.mse = rec.mse;
        row.psnr_db = rec.psnr_db;
        row.n_eval = rec.n_samples;
        for (std::size_t i = 0; i < std::min(ev_visuals, data.eval.size()); ++i) {
          char name[32];
          std::snprintf(name, sizeof name, "eval_%03zu.png", i);
          write_visual(dir / "visuals" / name, model, cfg, data, data.eval[i].image, eval_plan(cfg, cfg.seed, i));
        }
      }
      if (!ev_no_probe) {
        ProbeOptions po;
        po.max_iter = cfg.probe_max_iter;
        po.seed = cfg.seed;
        const auto probe = linear_probe(model, cfg, data, po);
        for (const auto& w : probe.warnings) err << "warning: " << w << '\n';
        row.probe_acc = probe.accuracy;
      }
      EvalReport report{{row}};
      report.save((dir / "reports" / "eval").string());
      out << "run_dir: " << dir.string() << '\n';
      out << "masked_mse: " << fmt(row.mse) << '\n';
      out << "masked_psnr_db: " << fmt(row.psnr_db) << '\n';
      out << "probe_acc: " << fmt(row.probe_acc) << '\n';
      return kExitOk;
    }

    if (sw->parsed()) {
      const auto cfg = sw_flags.resolve();
      SweepOptions so;
      so.jobs = sw_jobs;
      so.probe = !sw_no_probe;
      if (!sw_values.empty()) {
        std::stringstream ss(sw_values);
        for (std::string v; std::getline(ss, v, ',');)
          if (!v.empty()) so.values.push_back(v);
      }
      try {
        const auto values = so.values.empty() ? default_axis_values(sw_axis) : so.values;
        for (const auto& v : values) apply_axis(cfg, sw_axis, v);
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      const auto dir = prepare_run_dir(sw_dir, cfg);
      so.run_root = (dir / "cells").string();
      const auto report = ablation_sweep(cfg, sw_axis, so);
      report.save((dir / "reports" / ("sweep_" + sw_axis)).string());
      out << report.to_csv();
      return kExitOk;
    }

    if (gc->parsed()) {
      const auto cfg = gc_flags.resolve();
      const auto report = gradcheck_model(cfg, cfg.seed, gc_step);
      for (const auto& g : report.groups) {
        char line[160];
        std::snprintf(line, sizeof line, "%-40s %6zu  max_rel_err %.3e", g.name.c_str(), g.checked, g.max_error);
        out << line << '\n';
      }
      out << (report.passed(gc_tol) ? "PASS" : "FAIL") << " max_rel_err " << fmt(report.max_error) << '\n';
      return report.passed(gc_tol) ? kExitOk : kExitRuntime;
    }

    if (rc->parsed()) {
      auto loaded = load_model(rc_ckpt);
      const auto cfg = rc_flags.resolve(&loaded.layer);
      const auto& model = *loaded.model;
      require_matching(model, cfg);
      if (model.encoder_only()) throw ContractError("an encoder-only checkpoint cannot reconstruct");
      const auto data = load_run_data(cfg);
      MultimodalImage image;
      if (rc_input.empty()) {
        if (rc_index >= data.eval.size()) throw UsageError("--index is past the held-out set");
        image = data.eval[rc_index].image;
      } else {
        image = load_image(rc_input);
        if (image.height != cfg.model.image_h || image.width != cfg.model.image_w) {
          image = resize_bilinear(image, cfg.model.image_h, cfg.model.image_w);
        }
        if (cfg.modality == Modality::rgb) image = rgb_part(image);
        if (image.modality != cfg.modality) throw FusionError(rc_input + " has no IR channel for an rgb_ir model");
      }
      const auto seed = rc_seed_opt->count() ? rc_mask_seed : cfg.seed;
      const auto plan = make_mask_plan(cfg.model.n_tokens(), cfg.mask_ratio, seed);
      const auto dir = prepare_run_dir(rc_dir, cfg);
      const fs::path target = rc_out.empty() ? dir / "visuals" / "reconstruct.png" : fs::path(rc_out);
      write_visual(target, model, cfg, data, image, plan);
      out << "wrote " << target.string() << '\n';
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n\n" << app.help() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace imim::cli
