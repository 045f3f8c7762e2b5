#include "imim/optim.hpp"

#include <cmath>

namespace imim {

void adamw_step(std::span<double> param, std::span<const double> grad, AdamMoments& moments, std::uint64_t step,
                const AdamWOptions& opt, const std::string& name) {
  if (grad.size() != param.size() || moments.m.size() != param.size() || moments.v.size() != param.size()) {
    throw DimensionError("adamw: parameter, gradient and moment sizes differ for '" + name + "'");
  }
  if (step == 0) throw ContractError("adamw: step counts from 1");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (std::isnan(grad[i])) {
      throw NumericError("NaN gradient in parameter '" + name + "' at element " + std::to_string(i));
    }
  }
  const double t = static_cast<double>(step);
  const double bc1 = 1.0 - std::pow(opt.beta1, t);
  const double bc2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    moments.m[i] = opt.beta1 * moments.m[i] + (1.0 - opt.beta1) * g;
    moments.v[i] = opt.beta2 * moments.v[i] + (1.0 - opt.beta2) * g * g;
    param[i] -= opt.lr * opt.weight_decay * param[i];
    const double m_hat = moments.m[i] / bc1;
    const double v_hat = moments.v[i] / bc2;
    param[i] -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps);
  }
}

AdamW::AdamW(std::vector<NamedTensor> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    moments_.push_back({std::vector<double>(p.tensor.numel(), 0.0), std::vector<double>(p.tensor.numel(), 0.0)});
  }
}

void AdamW::step() {
  for (const auto& p : params_) {
    for (double g : p.tensor.grad()) {
      if (std::isnan(g)) throw NumericError("NaN gradient in parameter '" + p.name + "'");
    }
  }
  ++step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto t = params_[i].tensor;
    adamw_step(t.mutable_data(), t.grad(), moments_[i], step_, options_, params_[i].name);
  }
}

}  // namespace imim
