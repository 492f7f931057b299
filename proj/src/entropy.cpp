#include "hpc/entropy.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>

#include "hpc/ops.hpp"

namespace hpc::entropy {

using diff::DimensionError;
using diff::NumericError;
using diff::Shape;

Tensor quantize_ste(const Tensor& x) { return diff::round_ste(x); }

Tensor quantize_noise(const Tensor& x, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(-0.5, 0.5);
  std::vector<double> u(x.size());
  for (double& v : u) v = uni(rng);
  return diff::add_constant(x, u);
}

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Activated parameters of one channel's chain.
struct Chain {
  std::array<double, FactorizedModel::kMatrixCount> m;
  std::array<double, FactorizedModel::kBiasCount> b;
  std::array<double, FactorizedModel::kFactorCount> g;
};

// Intermediate values of one chain evaluation, kept for the backward pass.
struct Trace {
  double x = 0;
  std::array<std::array<double, 3>, 3> u{};  // pre-gate
  std::array<std::array<double, 3>, 3> v{};  // post-gate
  double y = 0;
};

Chain load_chain(const FactorizedModel& model, std::size_t c) {
  Chain ch;
  auto m = model.matrices.values();
  auto b = model.biases.values();
  auto f = model.factors.values();
  for (std::size_t i = 0; i < ch.m.size(); ++i) ch.m[i] = softplus(m[c * ch.m.size() + i]);
  for (std::size_t i = 0; i < ch.b.size(); ++i) ch.b[i] = b[c * ch.b.size() + i];
  for (std::size_t i = 0; i < ch.g.size(); ++i) ch.g[i] = std::tanh(f[c * ch.g.size() + i]);
  return ch;
}

void chain_forward(const Chain& ch, double x, Trace& t) {
  t.x = x;
  for (int i = 0; i < 3; ++i) t.u[0][i] = ch.m[i] * x + ch.b[i];
  for (int layer = 0; layer < 3; ++layer) {
    if (layer > 0) {
      const std::size_t mo = 3 + 9 * static_cast<std::size_t>(layer - 1);
      for (int i = 0; i < 3; ++i) {
        double acc = ch.b[3 * layer + i];
        for (int j = 0; j < 3; ++j) acc += ch.m[mo + 3 * i + j] * t.v[layer - 1][j];
        t.u[layer][i] = acc;
      }
    }
    for (int i = 0; i < 3; ++i) t.v[layer][i] = t.u[layer][i] + ch.g[3 * layer + i] * std::tanh(t.u[layer][i]);
  }
  t.y = ch.b[9];
  for (int j = 0; j < 3; ++j) t.y += ch.m[21 + j] * t.v[2][j];
}

double chain_value(const Chain& ch, double x) {
  Trace t;
  chain_forward(ch, x, t);
  return t.y;
}

// Accumulates d(loss)/d(activated params) into `d` and returns d(loss)/dx.
double chain_backward(const Chain& ch, const Trace& t, double dy, Chain& d) {
  std::array<double, 3> dv{};
  d.b[9] += dy;
  for (int j = 0; j < 3; ++j) {
    d.m[21 + j] += dy * t.v[2][j];
    dv[j] = dy * ch.m[21 + j];
  }
  double dx = 0;
  for (int layer = 2; layer >= 0; --layer) {
    std::array<double, 3> du{};
    for (int i = 0; i < 3; ++i) {
      const double th = std::tanh(t.u[layer][i]);
      const std::size_t gi = 3 * static_cast<std::size_t>(layer) + i;
      du[i] = dv[i] * (1.0 + ch.g[gi] * (1.0 - th * th));
      d.g[gi] += dv[i] * th;
      d.b[gi] += du[i];
    }
    if (layer == 0) {
      for (int i = 0; i < 3; ++i) {
        d.m[i] += du[i] * t.x;
        dx += du[i] * ch.m[i];
      }
    } else {
      const std::size_t mo = 3 + 9 * static_cast<std::size_t>(layer - 1);
      std::array<double, 3> prev{};
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
          d.m[mo + 3 * i + j] += du[i] * t.v[layer - 1][j];
          prev[j] += du[i] * ch.m[mo + 3 * i + j];
        }
      }
      dv = prev;
    }
  }
  return dx;
}

std::size_t model_channel(const FactorizedModel& model, std::size_t column, std::size_t columns) {
  const std::size_t mc = model.channels();
  if (mc == 1) return 0;
  if (mc != columns) {
    throw DimensionError("factorized model has " + std::to_string(mc) + " channels, tensor has " +
                         std::to_string(columns));
  }
  return column;
}

std::size_t columns_of(const Tensor& x) { return x.rank() >= 2 ? x.shape().back() : 1; }

// Scatters per-channel gradients of activated parameters back to the raw tensors.
void scatter_chain_grads(const FactorizedModel& model, const std::vector<Chain>& grads) {
  const auto m = model.matrices.values();
  const auto f = model.factors.values();
  const bool need_m = model.matrices.requires_grad();
  const bool need_b = model.biases.requires_grad();
  const bool need_f = model.factors.requires_grad();
  for (std::size_t c = 0; c < grads.size(); ++c) {
    const Chain& d = grads[c];
    if (need_m) {
      auto gm = model.matrices.grad_buffer();
      for (std::size_t i = 0; i < d.m.size(); ++i) gm[c * d.m.size() + i] += d.m[i] * sigmoid(m[c * d.m.size() + i]);
    }
    if (need_b) {
      auto gb = model.biases.grad_buffer();
      for (std::size_t i = 0; i < d.b.size(); ++i) gb[c * d.b.size() + i] += d.b[i];
    }
    if (need_f) {
      auto gf = model.factors.grad_buffer();
      for (std::size_t i = 0; i < d.g.size(); ++i) {
        const double th = std::tanh(f[c * d.g.size() + i]);
        gf[c * d.g.size() + i] += d.g[i] * (1.0 - th * th);
      }
    }
  }
}

std::vector<Chain> load_chains(const FactorizedModel& model) {
  std::vector<Chain> chains;
  for (std::size_t c = 0; c < model.channels(); ++c) chains.push_back(load_chain(model, c));
  return chains;
}

}  // namespace

FactorizedModel FactorizedModel::init(std::size_t channels, std::mt19937_64& rng, double init_scale) {
  // Width profile 1 -> 3 -> 3 -> 3 -> 1; each of the four maps contributes a
  // factor init_scale^(1/4) so the composed slope is about 1 / init_scale.
  const double per_layer = std::pow(init_scale, 1.0 / 4.0);
  const std::array<double, 4> fan_out{3, 3, 3, 1};
  std::vector<double> m, b, f(channels * kFactorCount, 0.0);
  std::uniform_real_distribution<double> uni(-0.5, 0.5);
  for (std::size_t c = 0; c < channels; ++c) {
    for (int layer = 0; layer < 4; ++layer) {
      const std::size_t count = layer == 0 ? 3 : (layer == 3 ? 3 : 9);
      const double w = std::log(std::expm1(1.0 / per_layer / fan_out[static_cast<std::size_t>(layer)]));
      for (std::size_t i = 0; i < count; ++i) m.push_back(w);
    }
    for (std::size_t i = 0; i < kBiasCount; ++i) b.push_back(uni(rng));
  }
  return from_values(channels, m, b, f);
}

FactorizedModel FactorizedModel::from_values(std::size_t channels, std::span<const double> matrices,
                                             std::span<const double> biases, std::span<const double> factors) {
  FactorizedModel model;
  model.matrices = Tensor::parameter({channels, kMatrixCount}, {matrices.begin(), matrices.end()});
  model.biases = Tensor::parameter({channels, kBiasCount}, {biases.begin(), biases.end()});
  model.factors = Tensor::parameter({channels, kFactorCount}, {factors.begin(), factors.end()});
  return model;
}

Tensor factorized_logits(const FactorizedModel& model, const Tensor& x) {
  const std::size_t cols = columns_of(x);
  const auto chains = load_chains(model);
  std::vector<double> y(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = chain_value(chains[model_channel(model, i % cols, cols)], xv[i]);
  return diff::make_result(
      x.shape(), std::move(y), {x, model.matrices, model.biases, model.factors},
      [x, model, chains, cols](std::span<const double> g) {
        std::vector<Chain> grads(chains.size(), Chain{});
        auto xv = x.values();
        const bool need_x = x.requires_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t c = model_channel(model, i % cols, cols);
          Trace t;
          chain_forward(chains[c], xv[i], t);
          const double dx = chain_backward(chains[c], t, g[i], grads[c]);
          if (need_x) x.grad_buffer()[i] += dx;
        }
        scatter_chain_grads(model, grads);
      });
}

Tensor factorized_pmf(const FactorizedModel& model, const Tensor& x) {
  const std::size_t cols = columns_of(x);
  const auto chains = load_chains(model);
  auto xv = x.values();
  std::vector<double> p(x.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Chain& ch = chains[model_channel(model, i % cols, cols)];
    const double lo = chain_value(ch, xv[i] - 0.5);
    const double hi = chain_value(ch, xv[i] + 0.5);
    // Evaluate on the side of the sigmoid where the difference is not a
    // cancellation of two values near 1.
    const double s = lo + hi > 0 ? -1.0 : 1.0;
    p[i] = s * (sigmoid(s * hi) - sigmoid(s * lo));
    if (!std::isfinite(p[i])) throw NumericError("factorized pmf is not finite", i);
    p[i] = std::max(p[i], kMinProbability);
  }
  return diff::make_result_y(
      x.shape(), std::move(p), {x, model.matrices, model.biases, model.factors},
      [x, model, chains, cols](std::span<const double> g, std::span<const double>) {
        std::vector<Chain> grads(chains.size(), Chain{});
        auto xv = x.values();
        const bool need_x = x.requires_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t c = model_channel(model, i % cols, cols);
          Trace tl, th;
          chain_forward(chains[c], xv[i] - 0.5, tl);
          chain_forward(chains[c], xv[i] + 0.5, th);
          const double s = tl.y + th.y > 0 ? -1.0 : 1.0;
          const double p = s * (sigmoid(s * th.y) - sigmoid(s * tl.y));
          if (p < kMinProbability) continue;
          const double dhi = g[i] * sigmoid(th.y) * sigmoid(-th.y);
          const double dlo = -g[i] * sigmoid(tl.y) * sigmoid(-tl.y);
          double dx = chain_backward(chains[c], th, dhi, grads[c]);
          dx += chain_backward(chains[c], tl, dlo, grads[c]);
          if (need_x) x.grad_buffer()[i] += dx;
        }
        scatter_chain_grads(model, grads);
      });
}

Tensor bits_from_pmf(const Tensor& pmf) { return diff::scale(diff::sum(diff::log(pmf)), -1.0 / std::log(2.0)); }

BitsResult factorized_bits(const FactorizedModel& model, const Tensor& x) {
  Tensor pmf = factorized_pmf(model, x);
  return {bits_from_pmf(pmf), pmf};
}

namespace {

constexpr double kVarianceFloor = 1e-6;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// Phi(b) - Phi(a) for a <= b, computed from the tail nearer to the interval.
double normal_mass(double a, double b) {
  if (a > 0) return 0.5 * (std::erfc(a * kInvSqrt2) - std::erfc(b * kInvSqrt2));
  if (b < 0) return 0.5 * (std::erfc(-b * kInvSqrt2) - std::erfc(-a * kInvSqrt2));
  return 1.0 - 0.5 * (std::erfc(-a * kInvSqrt2) + std::erfc(b * kInvSqrt2));
}

double normal_density(double z) { return kInvSqrt2Pi * std::exp(-0.5 * z * z); }

}  // namespace

double gaussian_pmf_value(double s, double mu, double sigma2) {
  const double sigma = std::sqrt(std::max(sigma2, kVarianceFloor));
  return normal_mass((s - 0.5 - mu) / sigma, (s + 0.5 - mu) / sigma);
}

Tensor gaussian_pmf(const Tensor& x, const Tensor& mu, const Tensor& sigma2) {
  if (mu.size() != 1 || sigma2.size() != 1) throw DimensionError("gaussian_pmf expects scalar mean and variance");
  const double m = mu[0];
  const bool floored = sigma2[0] < kVarianceFloor;
  const double sigma = std::sqrt(floored ? kVarianceFloor : sigma2[0]);
  auto xv = x.values();
  std::vector<double> p(x.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = normal_mass((xv[i] - 0.5 - m) / sigma, (xv[i] + 0.5 - m) / sigma);
    if (!std::isfinite(p[i])) throw NumericError("gaussian pmf is not finite", i);
    p[i] = std::max(p[i], kMinProbability);
  }
  return diff::make_result_y(
      x.shape(), std::move(p), {x, mu, sigma2},
      [x, mu, sigma2, m, sigma, floored](std::span<const double> g, std::span<const double>) {
        auto xv = x.values();
        double gmu = 0, gsigma = 0;
        const bool need_x = x.requires_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double a = (xv[i] - 0.5 - m) / sigma;
          const double b = (xv[i] + 0.5 - m) / sigma;
          if (normal_mass(a, b) < kMinProbability) continue;
          const double pa = normal_density(a), pb = normal_density(b);
          const double dx = (pb - pa) / sigma;
          if (need_x) x.grad_buffer()[i] += g[i] * dx;
          gmu -= g[i] * dx;
          gsigma -= g[i] * (pb * b - pa * a) / sigma;
        }
        if (mu.requires_grad()) mu.grad_buffer()[0] += gmu;
        if (sigma2.requires_grad() && !floored) sigma2.grad_buffer()[0] += gsigma / (2.0 * sigma);
      });
}

BitsResult gaussian_bits(const Tensor& x, const Tensor& mu, const Tensor& sigma2) {
  Tensor pmf = gaussian_pmf(x, mu, sigma2);
  return {bits_from_pmf(pmf), pmf};
}

std::vector<double> factorized_pmf_values(const FactorizedModel& model, std::size_t channel, std::int32_t s_min,
                                          std::int32_t s_max) {
  const Chain ch = load_chain(model, model.channels() == 1 ? 0 : channel);
  std::vector<double> p;
  p.reserve(static_cast<std::size_t>(s_max - s_min + 1));
  for (std::int64_t s = s_min; s <= s_max; ++s) {
    const double lo = chain_value(ch, static_cast<double>(s) - 0.5);
    const double hi = chain_value(ch, static_cast<double>(s) + 0.5);
    const double sg = lo + hi > 0 ? -1.0 : 1.0;
    p.push_back(sg * (sigmoid(sg * hi) - sigmoid(sg * lo)));
  }
  return p;
}

CdfTable CdfTable::from_pmf(std::int32_t s_min, std::span<const double> pmf) {
  const std::size_t n = pmf.size();
  if (n == 0 || n > kCdfTotal) throw EncodeError("alphabet size " + std::to_string(n) + " outside [1, 65536]");
  double total = 0;
  for (double p : pmf) total += std::isfinite(p) && p > 0 ? p : 0.0;
  const double spare = static_cast<double>(kCdfTotal - n);
  std::vector<std::uint32_t> count(n, 1);
  std::vector<double> frac(n, 0.0);
  std::uint64_t used = n;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::isfinite(pmf[i]) && pmf[i] > 0 ? pmf[i] : 0.0;
    const double share = total > 0 ? p / total * spare : spare / static_cast<double>(n);
    const double whole = std::floor(share);
    count[i] += static_cast<std::uint32_t>(whole);
    frac[i] = share - whole;
    used += static_cast<std::uint64_t>(whole);
  }
  if (used < kCdfTotal) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t missing = kCdfTotal - used;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(missing, n)), order.end(),
                      [&](std::size_t a, std::size_t b) { return frac[a] != frac[b] ? frac[a] > frac[b] : a < b; });
    for (std::size_t i = 0; i < missing; ++i) ++count[order[i % n]];
  } else {
    // Floating-point slack can overshoot by a count or two; take it from the largest bins.
    while (used > kCdfTotal) {
      auto it = std::max_element(count.begin(), count.end());
      --*it;
      --used;
    }
  }
  CdfTable table;
  table.s_min_ = s_min;
  table.cum_.resize(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) table.cum_[i + 1] = table.cum_[i] + count[i];
  return table;
}

CdfTable CdfTable::gaussian(std::int32_t s_min, std::int32_t s_max, double mu, double sigma2) {
  std::vector<double> p;
  p.reserve(static_cast<std::size_t>(s_max - s_min + 1));
  for (std::int64_t s = s_min; s <= s_max; ++s) p.push_back(gaussian_pmf_value(static_cast<double>(s), mu, sigma2));
  return from_pmf(s_min, p);
}

std::int32_t CdfTable::lookup(std::uint32_t target) const {
  auto it = std::upper_bound(cum_.begin() + 1, cum_.end(), target);
  const auto idx = static_cast<std::int32_t>(std::min<std::ptrdiff_t>(it - cum_.begin() - 1,
                                                                     static_cast<std::ptrdiff_t>(cum_.size()) - 2));
  return s_min_ + idx;
}

double CdfTable::bits(std::int32_t s) const {
  return -std::log2(static_cast<double>(freq(s)) / static_cast<double>(kCdfTotal));
}

void RangeEncoder::encode(std::int32_t symbol, const CdfTable& table) {
  if (!table.contains(symbol)) {
    throw EncodeError("symbol " + std::to_string(symbol) + " outside alphabet [" + std::to_string(table.s_min()) +
                      ", " + std::to_string(table.s_max()) + "]");
  }
  const std::uint32_t r = range_ >> kCdfBits;
  low_ += static_cast<std::uint64_t>(r) * table.low(symbol);
  range_ = r * table.freq(symbol);
  while (range_ < (1u << 24)) {
    range_ <<= 8;
    shift_low();
  }
}

void RangeEncoder::shift_low() {
  if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
    const auto carry = static_cast<std::uint8_t>(low_ >> 32);
    std::uint8_t temp = cache_;
    do {
      const auto byte = static_cast<std::uint8_t>(temp + carry);
      // The very first byte is always zero (the interval starts inside
      // [0, 2^32)) and is not stored.
      if (first_byte_) {
        first_byte_ = false;
      } else {
        out_.push_back(byte);
      }
      temp = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = static_cast<std::uint8_t>(low_ >> 24);
  }
  ++cache_size_;
  low_ = (low_ & 0x00FFFFFFu) << 8;
}

std::vector<std::uint8_t> RangeEncoder::finish() {
  // Pick the value in [low, low + range) with the most trailing zero bits.
  const std::uint64_t hi = low_ + range_ - 1;
  for (int k = 32; k >= 0; --k) {
    const std::uint64_t v = (hi >> k) << k;
    if (v >= low_) {
      low_ = v;
      break;
    }
  }
  for (int i = 0; i < 5; ++i) shift_low();
  while (!out_.empty() && out_.back() == 0) out_.pop_back();
  return std::move(out_);
}

RangeDecoder::RangeDecoder(std::span<const std::uint8_t> bytes) : bytes_(bytes) {
  for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next();
}

std::uint8_t RangeDecoder::next() { return pos_ < bytes_.size() ? bytes_[pos_++] : 0; }

std::int32_t RangeDecoder::decode(const CdfTable& table) {
  const std::uint32_t r = range_ >> kCdfBits;
  const std::uint32_t target = std::min<std::uint32_t>(code_ / r, kCdfTotal - 1);
  const std::int32_t s = table.lookup(target);
  code_ -= r * table.low(s);
  range_ = r * table.freq(s);
  while (range_ < (1u << 24)) {
    code_ = (code_ << 8) | next();
    range_ <<= 8;
  }
  return s;
}

std::vector<std::uint8_t> range_encode(std::span<const std::int32_t> symbols, const CdfTable& table) {
  RangeEncoder enc;
  for (auto s : symbols) enc.encode(s, table);
  return enc.finish();
}

std::vector<std::int32_t> range_decode(std::span<const std::uint8_t> bytes, const CdfTable& table,
                                       std::size_t count) {
  RangeDecoder dec(bytes);
  std::vector<std::int32_t> out(count);
  for (auto& s : out) s = dec.decode(table);
  return out;
}

}  // namespace hpc::entropy
