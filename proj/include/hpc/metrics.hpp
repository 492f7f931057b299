#pragma once

#include <limits>
#include <span>
#include <stdexcept>

#include "hpc/tensor.hpp"

namespace hpc::metrics {

using diff::Tensor;

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Mean absolute difference.
Tensor l1(const Tensor& a, const Tensor& b);

/// SSIM of two [h, w, c] images with values in [0, 1]: an 11x11 Gaussian
/// window (sigma 1.5) slid over every position where it fits, averaged over
/// positions and channels. Differentiable in both arguments.
Tensor ssim(const Tensor& a, const Tensor& b);

/// Value returned by psnr for identical images.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// 10 log10(1 / MSE) for peak 1.
double psnr(std::span<const double> a, std::span<const double> b);
double psnr(const Tensor& a, const Tensor& b);

}  // namespace hpc::metrics
