#include "imim/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "imim/random.hpp"

namespace imim {

double gradient_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-3);
}

RunConfig tiny_run_config() {
  RunConfig c;
  c.model.embed_dim = 8;
  c.model.encoder_depth = 1;
  c.model.n_heads = 2;
  c.model.patch_size = 4;
  c.model.image_h = 8;
  c.model.image_w = 8;
  c.modality = Modality::rgb;
  c.mask_ratio = 0.75;
  c.batch_size = 2;
  c.steps = 200;
  c.n_train = 16;
  c.n_eval = 4;
  c.checkpoint_every = 100;
  c.sync();
  return c;
}

GradcheckReport gradcheck_model(const RunConfig& config, std::uint64_t seed, double step) {
  config.validate();
  std::mt19937_64 rng(seed);
  MimModel model(config.model, rng(), InitMode::randomized);
  const auto& cfg = config.model;
  std::vector<TokenGrid> grids;
  std::vector<MaskPlan> plans;
  for (std::size_t b = 0; b < std::max<std::size_t>(config.batch_size, 1); ++b) {
    auto img = MultimodalImage::blank(cfg.image_h, cfg.image_w, config.modality);
    for (auto& v : img.pixels) v = static_cast<float>(unit_draw(rng));
    grids.push_back(tokenize(img, cfg.patch_size));
    plans.push_back(make_mask_plan(cfg.n_tokens(), config.mask_ratio, rng()));
  }
  auto loss_value = [&] {
    NoGradGuard guard;
    return model.forward_batch(grids, plans).loss.item();
  };

  model.zero_grad();
  model.forward_batch(grids, plans).loss.backward();

  GradcheckReport report;
  for (auto& p : model.trainable()) {
    GradcheckGroup g{p.name, 0, 0.0};
    auto t = p.tensor;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + step;
      const double up = loss_value();
      data[i] = orig - step;
      const double down = loss_value();
      data[i] = orig;
      g.max_error = std::max(g.max_error, gradient_error(analytic[i], (up - down) / (2.0 * step)));
      ++g.checked;
    }
    report.max_error = std::max(report.max_error, g.max_error);
    report.groups.push_back(g);
  }
  return report;
}

}  // namespace imim
