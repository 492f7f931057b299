#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hpc/tensor.hpp"

namespace hpc::netcodec {

using diff::Shape;
using diff::Tensor;

struct LayerSpec {
  std::string name;
  Shape shape;
  std::size_t size() const { return diff::shape_size(shape); }
};

/// Ordered list of transmitted layers. The digest hashes names and shapes in
/// order, so any architecture change is caught before decoding.
class NetworkLayout {
 public:
  void add(std::string name, Shape shape);
  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t layer_count() const { return layers_.size(); }
  std::size_t offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t total() const { return offsets_.back(); }
  std::size_t index_of(const std::string& name) const;
  std::uint64_t digest() const;

 private:
  std::vector<LayerSpec> layers_;
  std::vector<std::size_t> offsets_{0};
};

/// Flat parameter vector segmented by a layout.
struct NetworkParams {
  NetworkLayout layout;
  std::vector<double> values;

  explicit NetworkParams(NetworkLayout l) : layout(std::move(l)), values(layout.total(), 0.0) {}
  std::span<double> layer(std::size_t i) { return std::span(values).subspan(layout.offset(i), layout.layers()[i].size()); }
  std::span<const double> layer(std::size_t i) const {
    return std::span(values).subspan(layout.offset(i), layout.layers()[i].size());
  }
};

enum class FrameType : std::uint8_t { kIntra = 0, kPredicted = 1 };

/// I iff t mod T_GOP == 0.
FrameType gop_type(std::uint32_t t, std::uint32_t gop);

/// Bit depths accepted by the quantizer.
bool valid_bit_depth(int bits);

struct Quantized {
  std::vector<std::int32_t> symbols;
  float min = 0;
  float max = 0;
};

/// Min-max scaling to [0, 2^B - 1] followed by round-half-to-even. The range
/// is stored at float32, widened outward so every value stays inside it.
Quantized quantize_minmax(std::span<const double> values, int bits);
/// As quantize_minmax with a caller-provided range (already float32).
std::vector<std::int32_t> quantize_with_range(std::span<const double> values, float min, float max, int bits);
/// Affine inverse. min == max dequantizes everything to min.
std::vector<double> dequantize_minmax(std::span<const std::int32_t> symbols, float min, float max, int bits);
/// Narrowest float32 interval containing [lo, hi].
std::pair<float, float> float_range(double lo, double hi);

/// Per-layer side information, all float32 on the wire.
struct LayerSideInfo {
  float min = 0;     // v_min for predicted frames
  float max = 0;     // v_max for predicted frames
  float mean = 0;    // symbol statistics for the Gaussian table
  float variance = 0;
  float eta = 1;     // predicted frames only
};

enum class CodingMode : std::uint8_t { kIntra = 0, kPredicted = 1, kRaw = 2 };

struct CodedNetwork {
  CodingMode mode = CodingMode::kIntra;
  std::vector<LayerSideInfo> side;  // empty in raw mode
  std::vector<std::uint8_t> payload;
  /// Bytes the side info occupies when serialized.
  std::size_t side_bytes() const;
};

/// Symbol statistics with the variance floor applied, rounded to float32.
std::pair<float, float> symbol_stats(std::span<const std::int32_t> symbols);

CodedNetwork encode_iframe(const NetworkParams& params, int bits);
CodedNetwork encode_pframe(const NetworkParams& params, const NetworkParams& reference, std::span<const double> eta,
                           int bits);
/// Stores every parameter as raw float32.
CodedNetwork encode_raw(const NetworkParams& params);

/// Reconstructs P-hat. `reference` is required for predicted frames.
NetworkParams decode_network(const CodedNetwork& coded, const NetworkLayout& layout, int bits,
                             const NetworkParams* reference);

/// Differentiable training proxies for one layer. `reconstructed` is the
/// straight-through dequantized layer used on the distortion path; `bits` is
/// the Gaussian-model rate of the noise-perturbed symbols.
struct LayerProxy {
  Tensor reconstructed;
  Tensor bits;
};

LayerProxy intra_proxy(const Tensor& layer, int bits, std::mt19937_64& rng);
/// Residual against a constant reference with learnable scalar `eta`.
LayerProxy predicted_proxy(const Tensor& layer, std::span<const double> reference, const Tensor& eta, int bits,
                           std::mt19937_64& rng);
/// With a null `rng` the rate is evaluated on the rounded symbols instead.
LayerProxy intra_proxy(const Tensor& layer, int bits, std::mt19937_64* rng);
LayerProxy predicted_proxy(const Tensor& layer, std::span<const double> reference, const Tensor& eta, int bits,
                           std::mt19937_64* rng);

}  // namespace hpc::netcodec
