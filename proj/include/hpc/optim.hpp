#pragma once

#include <vector>

#include "hpc/tensor.hpp"

namespace hpc::optim {

/// Adam with bias correction. Parameters are grouped by learning rate.
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(Options options) : options_(options) {}

  void add_group(std::vector<diff::Tensor> params, double lr);
  /// Applies one update from the accumulated gradients, then clears them.
  /// Parameters without a gradient are skipped for this step.
  void step();
  std::size_t steps() const { return t_; }
  /// Multiplies every group's learning rate, for schedules.
  void set_lr_scale(double scale) { scale_ = scale; }

 private:
  struct Slot {
    diff::Tensor param;
    double lr;
    std::vector<double> m, v;
  };
  Options options_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
  double scale_ = 1.0;
};

}  // namespace hpc::optim
