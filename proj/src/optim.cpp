#include "hpc/optim.hpp"

#include <cmath>

namespace hpc::optim {

void Adam::add_group(std::vector<diff::Tensor> params, double lr) {
  for (auto& p : params) {
    const std::size_t n = p.size();
    slots_.push_back({std::move(p), lr, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    auto g = s.param.grad();
    auto x = s.param.mutable_values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      s.m[i] = options_.beta1 * s.m[i] + (1 - options_.beta1) * g[i];
      s.v[i] = options_.beta2 * s.v[i] + (1 - options_.beta2) * g[i] * g[i];
      x[i] -= scale_ * s.lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + options_.eps);
    }
    s.param.zero_grad();
  }
}

}  // namespace hpc::optim
