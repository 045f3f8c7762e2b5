#include "imim/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <thread>

#include <Eigen/Dense>

#include "imim/ops.hpp"
#include "imim/random.hpp"

namespace imim {

namespace fs = std::filesystem;

double psnr_from_mse(double mse) {
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double masked_region_mse(std::span<const double> reconstruction, std::span<const double> target,
                         std::size_t patch_dim, const MaskPlan& plan) {
  if (reconstruction.size() != target.size() || target.size() != plan.n_tokens * patch_dim) {
    throw ContractError("masked-region MSE: buffers do not match the plan");
  }
  if (plan.masked_idx.empty()) throw ContractError("masked-region MSE: plan masks nothing");
  double sum = 0.0;
  for (auto t : plan.masked_idx) {
    for (std::size_t i = t * patch_dim; i < (t + 1) * patch_dim; ++i) {
      const double e = reconstruction[i] - target[i];
      sum += e * e;
    }
  }
  return sum / static_cast<double>(plan.masked_idx.size() * patch_dim);
}

MaskPlan eval_plan(const RunConfig& config, std::uint64_t seed, std::size_t index) {
  return make_mask_plan(config.model.n_tokens(), config.mask_ratio, mix_seed(mix_seed(seed, 0xe7a1), index));
}

ReconstructionMetrics eval_reconstruction(const MimModel& model, const RunConfig& config, const RunData& data,
                                          std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ContractError("evaluation needs n >= 1");
  if (data.eval.empty()) throw ContractError("evaluation set is empty");
  NoGradGuard no_grad;
  const std::size_t count = std::min(n, data.eval.size());
  const std::size_t pd = config.model.patch_dim();
  const std::size_t c = config.model.channels;
  double sum = 0.0;
  std::size_t pixels = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto plan = eval_plan(config, seed, i);
    const auto raw = tokenize(data.eval[i].image, config.model.patch_size);
    const auto input = prepare_tokens(data.eval[i].image, config, data);
    const auto out = model.forward(input, plan);
    std::vector<double> pred(out.reconstruction.data().begin(), out.reconstruction.data().end());
    if (config.standardize) {
      for (std::size_t k = 0; k < pred.size(); ++k) pred[k] = pred[k] * data.channel_std[k % c] + data.channel_mean[k % c];
    }
    const auto m = plan.masked_idx.size() * pd;
    sum += masked_region_mse(pred, raw.tokens.data(), pd, plan) * static_cast<double>(m);
    pixels += m;
  }
  ReconstructionMetrics r;
  r.mse = sum / static_cast<double>(pixels);
  r.psnr_db = psnr_from_mse(r.mse);
  r.n_samples = count;
  return r;
}

BoxFeatures pooled_box_features(const MimModel& encoder, const RunConfig& config, const RunData& data,
                                const std::vector<LoadedSample>& samples) {
  NoGradGuard no_grad;
  const auto& cfg = config.model;
  const std::size_t p = cfg.patch_size, d = cfg.embed_dim;
  BoxFeatures out;
  for (const auto& s : samples) {
    if (s.boxes.empty()) continue;
    const auto feats = encoder.encode_full(prepare_tokens(s.image, config, data));
    const auto f = feats.data();
    for (const auto& box : s.boxes) {
      std::vector<double> pooled(d, 0.0);
      double total = 0.0;
      for (std::size_t gy = 0; gy < cfg.grid_h(); ++gy) {
        for (std::size_t gx = 0; gx < cfg.grid_w(); ++gx) {
          const auto oy = std::min(box.y + box.h, (gy + 1) * p);
          const auto ox = std::min(box.x + box.w, (gx + 1) * p);
          const auto y0 = std::max(box.y, gy * p), x0 = std::max(box.x, gx * p);
          if (oy <= y0 || ox <= x0) continue;
          const double w = static_cast<double>((oy - y0) * (ox - x0));
          const auto* row = f.data() + (gy * cfg.grid_w() + gx) * d;
          for (std::size_t j = 0; j < d; ++j) pooled[j] += w * row[j];
          total += w;
        }
      }
      if (total == 0.0) continue;
      for (auto& v : pooled) v /= total;
      out.features.push_back(std::move(pooled));
      out.labels.push_back(box.cls);
    }
  }
  return out;
}

ProbeResult fit_probe(const BoxFeatures& train, const BoxFeatures& test, const ProbeOptions& options) {
  ProbeResult r;
  r.n_train = train.labels.size();
  r.n_test = test.labels.size();
  if (r.n_train == 0 || r.n_test == 0) throw StratificationError("linear probe needs labelled boxes in both splits");

  std::set<int> train_classes(train.labels.begin(), train.labels.end());
  std::set<int> all_classes = train_classes;
  all_classes.insert(test.labels.begin(), test.labels.end());
  for (int c : all_classes) {
    if (!train_classes.count(c)) {
      throw StratificationError("class " + std::to_string(c) + " has zero training samples");
    }
  }
  const std::vector<int> classes(all_classes.begin(), all_classes.end());
  r.n_classes = classes.size();
  if (r.n_classes == 1) {
    r.accuracy = 1.0;
    r.warnings.push_back("only one class present; probe accuracy is trivially 1.0");
    return r;
  }
  auto class_index = [&](int label) {
    return static_cast<std::size_t>(std::lower_bound(classes.begin(), classes.end(), label) - classes.begin());
  };

  std::vector<int> labels = train.labels;
  if (options.shuffle_labels) {
    std::mt19937_64 rng(options.seed);
    for (std::size_t i = labels.size() - 1; i > 0; --i) std::swap(labels[i], labels[bounded_draw(rng, i + 1)]);
  }

  const std::size_t n = r.n_train, d = train.features.front().size(), k = r.n_classes;
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (const auto& x : train.features)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x[j] / static_cast<double>(n);
  for (const auto& x : train.features)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (x[j] - mean[j]) * (x[j] - mean[j]) / static_cast<double>(n);
  for (auto& s : sd) s = s > 1e-24 ? std::sqrt(s) : 1.0;
  auto zscore = [&](const std::vector<double>& x) {
    std::vector<double> z(d);
    for (std::size_t j = 0; j < d; ++j) z[j] = (x[j] - mean[j]) / sd[j];
    return z;
  };
  std::vector<std::vector<double>> xs;
  for (const auto& x : train.features) xs.push_back(zscore(x));

  // Damped Newton on the mean cross-entropy plus (l2/2)|W|^2. W is [d+1, k]
  // with the bias as the last row; the ridge covers the bias too, which makes
  // the objective strictly convex despite softmax's shift invariance.
  const std::size_t dim = (d + 1) * k;
  Eigen::MatrixXd X(n, d + 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) X(i, j) = xs[i][j];
    X(i, d) = 1.0;
  }
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n, k);
  for (std::size_t i = 0; i < n; ++i) Y(i, class_index(labels[i])) = 1.0;
  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(d + 1, k);
  const double inv_n = 1.0 / static_cast<double>(n);

  auto probabilities = [](Eigen::MatrixXd logits) {
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      logits.row(i).array() -= logits.row(i).maxCoeff();
      logits.row(i) = logits.row(i).array().exp();
      logits.row(i) /= logits.row(i).sum();
    }
    return logits;
  };
  auto objective = [&](const Eigen::MatrixXd& w) {
    Eigen::MatrixXd z = X * w;
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double mx = z.row(i).maxCoeff();
      const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
      total += lse - (z.row(i).array() * Y.row(i).array()).sum();
    }
    return total * inv_n + 0.5 * options.l2 * w.squaredNorm();
  };

  double f = objective(W);
  for (std::size_t iter = 0; iter < options.max_iter; ++iter) {
    const Eigen::MatrixXd P = probabilities(X * W);
    const Eigen::MatrixXd G = X.transpose() * (P - Y) * inv_n + options.l2 * W;
    if (G.cwiseAbs().maxCoeff() < options.tolerance) break;
    // Hessian over vec(W) with index (j, c) -> c * (d+1) + j.
    Eigen::MatrixXd H = options.l2 * Eigen::MatrixXd::Identity(dim, dim);
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = a; b < k; ++b) {
        Eigen::VectorXd s(n);
        for (std::size_t i = 0; i < n; ++i) s(i) = P(i, a) * ((a == b ? 1.0 : 0.0) - P(i, b)) * inv_n;
        const Eigen::MatrixXd block = X.transpose() * s.asDiagonal() * X;
        H.block(a * (d + 1), b * (d + 1), d + 1, d + 1) += block;
        if (a != b) H.block(b * (d + 1), a * (d + 1), d + 1, d + 1) += block.transpose();
      }
    }
    const Eigen::VectorXd g = Eigen::Map<const Eigen::VectorXd>(G.data(), static_cast<Eigen::Index>(dim));
    const Eigen::VectorXd step = H.ldlt().solve(g);
    const Eigen::MatrixXd D = Eigen::Map<const Eigen::MatrixXd>(step.data(), static_cast<Eigen::Index>(d + 1),
                                                                 static_cast<Eigen::Index>(k));
    // Armijo backtracking keeps every iterate a descent step.
    double t = 1.0;
    const double slope = g.dot(step);
    Eigen::MatrixXd candidate = W - D;
    double fc = objective(candidate);
    while (fc > f - 1e-4 * t * slope && t > 1e-10) {
      t *= 0.5;
      candidate = W - t * D;
      fc = objective(candidate);
    }
    if (!(fc < f)) break;
    W = candidate;
    f = fc;
  }

  std::vector<double> logits(k);
  auto predict = [&](const std::vector<double>& z, std::vector<double>& out) {
    for (std::size_t c = 0; c < k; ++c) {
      out[c] = W(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(c));
      for (std::size_t j = 0; j < d; ++j) out[c] += z[j] * W(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c));
    }
  };
  std::size_t correct = 0;
  for (std::size_t i = 0; i < r.n_test; ++i) {
    predict(zscore(test.features[i]), logits);
    const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (best == class_index(test.labels[i])) ++correct;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.n_test);
  return r;
}

ProbeResult linear_probe(const MimModel& encoder, const RunConfig& config, const RunData& data,
                         const ProbeOptions& options) {
  const auto train = pooled_box_features(encoder, config, data, data.train);
  const auto test = pooled_box_features(encoder, config, data, data.eval);
  auto r = fit_probe(train, test, options);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  return r;
}

namespace {

std::string format_double(double v) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json json_double(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

}  // namespace

std::string EvalReport::to_csv() const {
  std::string s = "variant,mse,psnr_db,probe_acc,seed\n";
  for (const auto& r : rows) {
    s += r.variant + "," + format_double(r.mse) + "," + format_double(r.psnr_db) + "," + format_double(r.probe_acc) +
         "," + std::to_string(r.seed) + "\n";
  }
  return s;
}

nlohmann::json EvalReport::to_json() const {
  auto arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"variant", r.variant},
                   {"mse", json_double(r.mse)},
                   {"psnr_db", json_double(r.psnr_db)},
                   {"probe_acc", json_double(r.probe_acc)},
                   {"n_eval", r.n_eval},
                   {"seed", r.seed}});
  }
  return {{"rows", arr}};
}

void EvalReport::save(const std::string& stem) const {
  const fs::path base(stem);
  if (base.has_parent_path()) fs::create_directories(base.parent_path());
  std::ofstream csv(stem + ".csv"), js(stem + ".json");
  if (!csv || !js) throw FormatError("cannot write report " + stem);
  csv << to_csv();
  js << to_json().dump(2) << '\n';
}

const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> axes = {"query_mode", "mask_size", "modality", "mask_ratio"};
  return axes;
}

std::vector<std::string> default_axis_values(const std::string& axis) {
  if (axis == "query_mode") return {"q_masked", "q_unmasked", "null_baseline"};
  if (axis == "mask_size") return {"16", "32", "64"};
  if (axis == "modality") return {"rgb", "rgb_ir"};
  if (axis == "mask_ratio") return {"0.5", "0.6", "0.75"};
  throw ContractError("unknown sweep axis '" + axis + "' (query_mode, mask_size, modality, mask_ratio)");
}

RunConfig apply_axis(const RunConfig& base, const std::string& axis, const std::string& value) {
  RunConfig c = base;
  try {
    if (axis == "query_mode") {
      c.model.query_mode = parse_query_mode(value);
    } else if (axis == "mask_size") {
      c.model.patch_size = std::stoul(value);
    } else if (axis == "modality") {
      c.modality = parse_modality(value);
    } else if (axis == "mask_ratio") {
      c.mask_ratio = std::stod(value);
    } else {
      default_axis_values(axis);  // throws
    }
  } catch (const std::logic_error&) {
    throw ContractError("bad value '" + value + "' for sweep axis " + axis);
  }
  c.sync();
  c.validate();
  return c;
}

EvalReport ablation_sweep(const RunConfig& base, const std::string& axis, const SweepOptions& options) {
  const auto values = options.values.empty() ? default_axis_values(axis) : options.values;
  std::vector<RunConfig> cells;
  for (const auto& v : values) cells.push_back(apply_axis(base, axis, v));

  EvalReport report;
  report.rows.resize(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        const auto& cfg = cells[i];
        PretrainOptions po;
        if (!options.run_root.empty()) po.run_dir = (fs::path(options.run_root) / (axis + "=" + values[i])).string();
        const auto result = pretrain(cfg, po);
        const auto data = load_run_data(cfg);
        const auto n = options.n_eval == 0 ? data.eval.size() : options.n_eval;
        const auto rec = eval_reconstruction(result.state.model, cfg, data, n, cfg.seed);
        EvalRow row{axis + "=" + values[i], rec.mse, rec.psnr_db, std::numeric_limits<double>::quiet_NaN(),
                    rec.n_samples, cfg.seed};
        if (options.probe) {
          ProbeOptions probe;
          probe.max_iter = cfg.probe_max_iter;
          probe.seed = cfg.seed;
          row.probe_acc = linear_probe(result.state.model, cfg, data, probe).accuracy;
        }
        report.rows[i] = row;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto jobs = std::max<std::size_t>(1, std::min(options.jobs, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return report;
}

MultimodalImage visual_panel(const MultimodalImage& original, const MaskPlan& plan, std::size_t patch_size,
                             const MultimodalImage& reconstruction) {
  if (original.height != reconstruction.height || original.width != reconstruction.width ||
      original.channels != reconstruction.channels) {
    throw ContractError("visual panel: original and reconstruction differ in shape");
  }
  const std::size_t h = original.height, w = original.width;
  const bool ir = original.modality == Modality::rgb_ir;
  const std::size_t gw = w / patch_size;
  auto panel = MultimodalImage::blank(ir ? 2 * h : h, 3 * w, Modality::rgb);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const bool masked = plan.is_masked((y / patch_size) * gw + x / patch_size);
      for (std::size_t c = 0; c < 3; ++c) {
        panel.at(y, x, c) = original.at(y, x, c);
        panel.at(y, w + x, c) = masked ? 0.5f : original.at(y, x, c);
        panel.at(y, 2 * w + x, c) = std::clamp(reconstruction.at(y, x, c), 0.0f, 1.0f);
      }
      if (ir) {
        const float vals[3] = {original.at(y, x, 3), masked ? 0.5f : original.at(y, x, 3),
                               std::clamp(reconstruction.at(y, x, 3), 0.0f, 1.0f)};
        for (std::size_t k = 0; k < 3; ++k)
          for (std::size_t c = 0; c < 3; ++c) panel.at(h + y, k * w + x, c) = vals[k];
      }
    }
  }
  return panel;
}

}  // namespace imim
