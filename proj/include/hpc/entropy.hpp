#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "hpc/tensor.hpp"

namespace hpc::entropy {

using diff::Tensor;

/// Smallest probability any symbol is charged, in estimates and in tables.
inline constexpr double kMinProbability = 1.0 / 65536.0;
inline constexpr int kCdfBits = 16;
inline constexpr std::uint32_t kCdfTotal = 1u << kCdfBits;

class EncodeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Rounds half-to-even; gradient passes straight through.
Tensor quantize_ste(const Tensor& x);
/// x + U(-1/2, 1/2) noise drawn from `rng`; gradient is the identity.
Tensor quantize_noise(const Tensor& x, std::mt19937_64& rng);

/// Learned per-channel monotone CDF. Each channel runs the chain
/// 1 -> 3 -> 3 -> 3 -> 1 with softplus-positive matrices and tanh-bounded
/// gates between hidden layers; the CDF is sigmoid of the chain output.
struct FactorizedModel {
  static constexpr std::size_t kMatrixCount = 24;  // 3 + 9 + 9 + 3
  static constexpr std::size_t kBiasCount = 10;    // 3 + 3 + 3 + 1
  static constexpr std::size_t kFactorCount = 9;   // 3 + 3 + 3

  Tensor matrices;  // [channels, 24], pre-softplus
  Tensor biases;    // [channels, 10]
  Tensor factors;   // [channels, 9], pre-tanh

  std::size_t channels() const { return matrices.dim(0); }

  /// Conventional initialization: matrices set so the chain starts near a
  /// wide logistic of scale `init_scale`, biases uniform in [-1/2, 1/2], gates 0.
  static FactorizedModel init(std::size_t channels, std::mt19937_64& rng, double init_scale = 10.0);
  /// Same shapes, tensors rebuilt from raw row-major values.
  static FactorizedModel from_values(std::size_t channels, std::span<const double> matrices,
                                     std::span<const double> biases, std::span<const double> factors);
};

/// Chain output (CDF logits) for every element of x: [n, C]. A model with one
/// channel is shared across all columns.
Tensor factorized_logits(const FactorizedModel& model, const Tensor& x);
/// p(s) = CDF(s + 1/2) - CDF(s - 1/2), floored at kMinProbability.
Tensor factorized_pmf(const FactorizedModel& model, const Tensor& x);

/// Sum of -log2 p over all elements.
Tensor bits_from_pmf(const Tensor& pmf);

struct BitsResult {
  Tensor bits;  // scalar
  Tensor pmf;   // same shape as the symbols
};

BitsResult factorized_bits(const FactorizedModel& model, const Tensor& x);

/// Normal(mu, sigma2) convolved with a unit-width uniform, evaluated at each x.
/// mu and sigma2 are one-element tensors; sigma2 is floored at 1e-6. Result is
/// floored at kMinProbability.
Tensor gaussian_pmf(const Tensor& x, const Tensor& mu, const Tensor& sigma2);
BitsResult gaussian_bits(const Tensor& x, const Tensor& mu, const Tensor& sigma2);

/// Plain double evaluations used to build coding tables.
double gaussian_pmf_value(double s, double mu, double sigma2);
/// pmf over the integers [s_min, s_max] for one channel of a model, unfloored.
std::vector<double> factorized_pmf_values(const FactorizedModel& model, std::size_t channel, std::int32_t s_min,
                                          std::int32_t s_max);

/// 16-bit cumulative frequency table over an integer alphabet.
class CdfTable {
 public:
  /// Every symbol gets at least one count; remaining counts are split in
  /// proportion to `pmf` (largest remainders, lower symbol first on ties).
  static CdfTable from_pmf(std::int32_t s_min, std::span<const double> pmf);
  /// Gaussian table over [s_min, s_max].
  static CdfTable gaussian(std::int32_t s_min, std::int32_t s_max, double mu, double sigma2);

  std::int32_t s_min() const { return s_min_; }
  std::int32_t s_max() const { return s_min_ + static_cast<std::int32_t>(cum_.size()) - 2; }
  std::size_t alphabet_size() const { return cum_.size() - 1; }
  bool contains(std::int64_t s) const { return s >= s_min_ && s <= s_max(); }
  std::uint32_t low(std::int32_t s) const { return cum_[static_cast<std::size_t>(s - s_min_)]; }
  std::uint32_t freq(std::int32_t s) const {
    const auto i = static_cast<std::size_t>(s - s_min_);
    return cum_[i + 1] - cum_[i];
  }
  /// Symbol whose interval contains the scaled target in [0, 2^16).
  std::int32_t lookup(std::uint32_t target) const;
  /// Ideal code length of `s` under this table, in bits.
  double bits(std::int32_t s) const;
  const std::vector<std::uint32_t>& cumulative() const { return cum_; }

 private:
  std::int32_t s_min_ = 0;
  std::vector<std::uint32_t> cum_;  // alphabet_size + 1 entries, cum_[0] = 0, back() = 2^16
};

/// Byte-oriented range coder with 32-bit state and carry propagation.
/// Tables may change from symbol to symbol; the decoder must replay the same
/// sequence of tables.
class RangeEncoder {
 public:
  void encode(std::int32_t symbol, const CdfTable& table);
  /// Terminates the stream with the fewest bytes that pin down the final
  /// interval; the decoder reads missing trailing bytes as zero.
  std::vector<std::uint8_t> finish();

 private:
  void shift_low();
  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
  bool first_byte_ = true;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> bytes);
  std::int32_t decode(const CdfTable& table);

 private:
  std::uint8_t next();
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint32_t code_ = 0;
};

std::vector<std::uint8_t> range_encode(std::span<const std::int32_t> symbols, const CdfTable& table);
std::vector<std::int32_t> range_decode(std::span<const std::uint8_t> bytes, const CdfTable& table, std::size_t count);

}  // namespace hpc::entropy
