#include "hpc/netcodec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "hpc/entropy.hpp"
#include "hpc/errors.hpp"
#include "hpc/ops.hpp"

namespace hpc::netcodec {

using diff::NumericError;

void NetworkLayout::add(std::string name, Shape shape) {
  layers_.push_back({std::move(name), std::move(shape)});
  offsets_.push_back(offsets_.back() + layers_.back().size());
}

std::size_t NetworkLayout::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].name == name) return i;
  }
  throw std::out_of_range("no layer named " + name);
}

std::uint64_t NetworkLayout::digest() const {
  // FNV-1a over names and dimensions, with separators so that ("ab", [1]) and
  // ("a", [b1]) cannot collide structurally.
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](std::uint8_t byte) {
    h ^= byte;
    h *= 0x100000001b3ull;
  };
  for (const auto& layer : layers_) {
    for (char c : layer.name) mix(static_cast<std::uint8_t>(c));
    mix(0);
    for (auto d : layer.shape) {
      for (int b = 0; b < 8; ++b) mix(static_cast<std::uint8_t>(static_cast<std::uint64_t>(d) >> (8 * b)));
    }
    mix(0xFF);
  }
  return h;
}

FrameType gop_type(std::uint32_t t, std::uint32_t gop) {
  if (gop == 0) throw std::invalid_argument("GOP size must be at least 1");
  return t % gop == 0 ? FrameType::kIntra : FrameType::kPredicted;
}

bool valid_bit_depth(int bits) { return bits == 4 || bits == 8 || bits == 16; }

namespace {

void check_bits(int bits) {
  if (!valid_bit_depth(bits)) throw std::invalid_argument("bit depth " + std::to_string(bits) + " not in {4, 8, 16}");
}

double levels(int bits) { return static_cast<double>((1u << bits) - 1u); }

void check_finite(std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw NumericError("non-finite parameter", i);
  }
}

}  // namespace

std::pair<float, float> float_range(double lo, double hi) {
  float fl = static_cast<float>(lo);
  float fh = static_cast<float>(hi);
  if (static_cast<double>(fl) > lo) fl = std::nextafter(fl, -std::numeric_limits<float>::infinity());
  if (static_cast<double>(fh) < hi) fh = std::nextafter(fh, std::numeric_limits<float>::infinity());
  return {fl, fh};
}

std::vector<std::int32_t> quantize_with_range(std::span<const double> values, float min, float max, int bits) {
  check_bits(bits);
  check_finite(values);
  std::vector<std::int32_t> symbols(values.size(), 0);
  const double lo = min, span = static_cast<double>(max) - lo;
  if (span <= 0) return symbols;
  const double top = levels(bits);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double q = std::nearbyint((values[i] - lo) / span * top);
    symbols[i] = static_cast<std::int32_t>(std::clamp(q, 0.0, top));
  }
  return symbols;
}

Quantized quantize_minmax(std::span<const double> values, int bits) {
  check_finite(values);
  Quantized q;
  if (values.empty()) return q;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  std::tie(q.min, q.max) = float_range(*lo, *hi);
  q.symbols = quantize_with_range(values, q.min, q.max, bits);
  return q;
}

std::vector<double> dequantize_minmax(std::span<const std::int32_t> symbols, float min, float max, int bits) {
  check_bits(bits);
  const std::int64_t top = (std::int64_t{1} << bits) - 1;
  const double lo = min, span = static_cast<double>(max) - lo;
  std::vector<double> out(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (symbols[i] < 0 || symbols[i] > top) {
      throw FormatError("symbol " + std::to_string(symbols[i]) + " outside [0, " + std::to_string(top) + "]");
    }
    out[i] = span <= 0 ? lo : lo + static_cast<double>(symbols[i]) * span / static_cast<double>(top);
  }
  return out;
}

std::size_t CodedNetwork::side_bytes() const {
  switch (mode) {
    case CodingMode::kIntra: return side.size() * 16;
    case CodingMode::kPredicted: return side.size() * 20;
    case CodingMode::kRaw: return 0;
  }
  return 0;
}

std::pair<float, float> symbol_stats(std::span<const std::int32_t> symbols) {
  if (symbols.empty()) return {0.0f, 1e-6f};
  double mean = 0;
  for (auto s : symbols) mean += s;
  mean /= static_cast<double>(symbols.size());
  double var = 0;
  for (auto s : symbols) var += (s - mean) * (s - mean);
  var = std::max(var / static_cast<double>(symbols.size()), 1e-6);
  return {static_cast<float>(mean), static_cast<float>(var)};
}

namespace {

entropy::CdfTable layer_table(const LayerSideInfo& side, int bits) {
  return entropy::CdfTable::gaussian(0, static_cast<std::int32_t>(levels(bits)), side.mean, side.variance);
}

void encode_layer(entropy::RangeEncoder& enc, LayerSideInfo& side, const std::vector<std::int32_t>& symbols,
                  int bits) {
  std::tie(side.mean, side.variance) = symbol_stats(symbols);
  const auto table = layer_table(side, bits);
  for (auto s : symbols) enc.encode(s, table);
}

}  // namespace

CodedNetwork encode_iframe(const NetworkParams& params, int bits) {
  check_bits(bits);
  CodedNetwork coded;
  coded.mode = CodingMode::kIntra;
  entropy::RangeEncoder enc;
  for (std::size_t l = 0; l < params.layout.layer_count(); ++l) {
    auto q = quantize_minmax(params.layer(l), bits);
    LayerSideInfo side;
    side.min = q.min;
    side.max = q.max;
    encode_layer(enc, side, q.symbols, bits);
    coded.side.push_back(side);
  }
  coded.payload = enc.finish();
  return coded;
}

CodedNetwork encode_pframe(const NetworkParams& params, const NetworkParams& reference, std::span<const double> eta,
                           int bits) {
  check_bits(bits);
  if (params.layout.digest() != reference.layout.digest()) throw StreamError("reference layout does not match");
  if (eta.size() != params.layout.layer_count()) throw std::invalid_argument("one eta per layer required");
  CodedNetwork coded;
  coded.mode = CodingMode::kPredicted;
  entropy::RangeEncoder enc;
  for (std::size_t l = 0; l < params.layout.layer_count(); ++l) {
    LayerSideInfo side;
    side.eta = static_cast<float>(eta[l]);
    if (!std::isfinite(side.eta)) throw NumericError("non-finite eta", l);
    auto p = params.layer(l);
    auto ref = reference.layer(l);
    std::vector<double> delta(p.size());
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < p.size(); ++i) {
      delta[i] = p[i] - static_cast<double>(side.eta) * ref[i];
      lo = std::min({lo, delta[i], ref[i]});
      hi = std::max({hi, delta[i], ref[i]});
    }
    if (p.empty()) lo = hi = 0;
    std::tie(side.min, side.max) = float_range(lo, hi);
    encode_layer(enc, side, quantize_with_range(delta, side.min, side.max, bits), bits);
    coded.side.push_back(side);
  }
  coded.payload = enc.finish();
  return coded;
}

CodedNetwork encode_raw(const NetworkParams& params) {
  check_finite(params.values);
  CodedNetwork coded;
  coded.mode = CodingMode::kRaw;
  coded.payload.reserve(params.values.size() * 4);
  for (double v : params.values) {
    const float f = static_cast<float>(v);
    std::uint32_t bitsv;
    std::memcpy(&bitsv, &f, 4);
    for (int b = 0; b < 4; ++b) coded.payload.push_back(static_cast<std::uint8_t>(bitsv >> (8 * b)));
  }
  return coded;
}

NetworkParams decode_network(const CodedNetwork& coded, const NetworkLayout& layout, int bits,
                             const NetworkParams* reference) {
  NetworkParams out(layout);
  if (coded.mode == CodingMode::kRaw) {
    if (coded.payload.size() != layout.total() * 4) {
      throw FormatError("raw network payload has " + std::to_string(coded.payload.size()) + " bytes, expected " +
                        std::to_string(layout.total() * 4));
    }
    for (std::size_t i = 0; i < layout.total(); ++i) {
      std::uint32_t v = 0;
      for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(coded.payload[4 * i + static_cast<std::size_t>(b)]) << (8 * b);
      float f;
      std::memcpy(&f, &v, 4);
      out.values[i] = f;
    }
    return out;
  }
  check_bits(bits);
  if (coded.side.size() != layout.layer_count()) throw FormatError("side info does not match layer count");
  const bool predicted = coded.mode == CodingMode::kPredicted;
  if (predicted) {
    if (reference == nullptr) throw StreamError("predicted network frame without a reference");
    if (reference->layout.digest() != layout.digest()) throw StreamError("reference layout does not match");
  }
  entropy::RangeDecoder dec(coded.payload);
  for (std::size_t l = 0; l < layout.layer_count(); ++l) {
    const auto& side = coded.side[l];
    if (!(side.min <= side.max) || !std::isfinite(side.variance) || !std::isfinite(side.mean)) {
      throw FormatError("bad side info for layer " + std::to_string(l));
    }
    const auto table = layer_table(side, bits);
    std::vector<std::int32_t> symbols(layout.layers()[l].size());
    for (auto& s : symbols) s = dec.decode(table);
    auto values = dequantize_minmax(symbols, side.min, side.max, bits);
    auto dst = out.layer(l);
    if (predicted) {
      auto ref = reference->layer(l);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<double>(side.eta) * ref[i] + values[i];
    } else {
      std::copy(values.begin(), values.end(), dst.begin());
    }
  }
  return out;
}

namespace {

// Shared body of both proxies: values are scaled into symbol space with a
// constant range, rounded straight-through for reconstruction, and noised for
// the rate estimate.
LayerProxy minmax_proxy(const Tensor& values, double lo, double hi, int bits, std::mt19937_64* rng) {
  const double span = hi - lo;
  if (!(span > 0)) {
    // Constant layer: every symbol is zero and codes for free. The gradient
    // still passes straight through so the layer can leave the constant.
    std::vector<double> c(values.size(), lo);
    Tensor recon = diff::add_constant(diff::sub(values, values.detach()), c);
    return {recon, Tensor::scalar(0.0)};
  }
  const double k = levels(bits) / span;
  Tensor scaled = diff::scale(diff::add_scalar(values, -lo), k);
  Tensor symbols = diff::round_ste(scaled);
  Tensor recon = diff::add_scalar(diff::scale(symbols, 1.0 / k), lo);
  // The noisy proxy stands in for the symbols everywhere, statistics included;
  // rounded-symbol statistics collapse towards the variance floor for small
  // residuals and make the perturbed values look very expensive.
  Tensor coded = rng != nullptr ? entropy::quantize_noise(scaled, *rng) : symbols;
  Tensor mu = diff::mean(coded);
  Tensor var = diff::mean(diff::square(diff::sub(coded, mu)));
  return {recon, entropy::gaussian_bits(coded, mu, var).bits};
}

}  // namespace

LayerProxy intra_proxy(const Tensor& layer, int bits, std::mt19937_64* rng) {
  check_bits(bits);
  auto v = layer.values();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return minmax_proxy(layer, *lo, *hi, bits, rng);
}

LayerProxy intra_proxy(const Tensor& layer, int bits, std::mt19937_64& rng) { return intra_proxy(layer, bits, &rng); }

LayerProxy predicted_proxy(const Tensor& layer, std::span<const double> reference, const Tensor& eta, int bits,
                           std::mt19937_64& rng) {
  return predicted_proxy(layer, reference, eta, bits, &rng);
}

LayerProxy predicted_proxy(const Tensor& layer, std::span<const double> reference, const Tensor& eta, int bits,
                           std::mt19937_64* rng) {
  check_bits(bits);
  Tensor ref = Tensor::constant(layer.shape(), {reference.begin(), reference.end()});
  Tensor predicted = diff::mul(ref, eta);
  Tensor delta = diff::sub(layer, predicted);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double r : reference) lo = std::min(lo, r), hi = std::max(hi, r);
  for (double d : delta.values()) lo = std::min(lo, d), hi = std::max(hi, d);
  LayerProxy p = minmax_proxy(delta, lo, hi, bits, rng);
  p.reconstructed = diff::add(predicted, p.reconstructed);
  return p;
}

}  // namespace hpc::netcodec
