#include "hpc/stream_codec.hpp"

#include <algorithm>
#include <limits>

#include "hpc/errors.hpp"
#include "hpc/ops.hpp"

namespace hpc::codec {

using bitstream::LatentBlock;
using netcodec::CodingMode;
using netcodec::NetworkParams;

namespace {

// Widest per-scale latent alphabet either side accepts.
constexpr std::int64_t kMaxLatentAlphabet = 1 << 12;

template <typename T>
T narrow(std::size_t v, const char* what) {
  if (v > std::numeric_limits<T>::max()) throw std::invalid_argument(std::string(what) + " does not fit the header");
  return static_cast<T>(v);
}

std::vector<entropy::CdfTable> scale_tables(const entropy::FactorizedModel& model, std::size_t channels,
                                            std::int32_t lo, std::int32_t hi) {
  std::vector<entropy::CdfTable> tables;
  const bool shared = model.channels() == 1;
  if (shared) {
    auto t = entropy::CdfTable::from_pmf(lo, entropy::factorized_pmf_values(model, 0, lo, hi));
    tables.assign(channels, t);
    return tables;
  }
  for (std::size_t c = 0; c < channels; ++c) {
    tables.push_back(entropy::CdfTable::from_pmf(lo, entropy::factorized_pmf_values(model, c, lo, hi)));
  }
  return tables;
}

deform::Frame reconstruct_with(const StreamConfig& cfg, const latent::FrameStructure& s, const deform::Frame& prev,
                               const LatentSymbols& symbols, const NetworkParams& net, std::uint32_t index) {
  const std::size_t c = cfg.model.channels;
  std::vector<diff::Tensor> embeddings;
  for (std::size_t r = 0; r < symbols.size(); ++r) {
    const std::size_t rows = s.hierarchy.levels[r].size();
    if (symbols[r].size() != rows * c) throw latent::StructuralError("latent symbols do not match the hierarchy");
    embeddings.push_back(diff::Tensor::constant({rows, c}, std::vector<double>(symbols[r].begin(), symbols[r].end())));
  }
  auto w = latent::make_weights(net, false);
  auto field = latent::run_model(cfg.model, s, embeddings, w);
  return deform::materialize(prev, deform::apply_deformation(prev, field), index);
}

std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }

}  // namespace

bitstream::StreamHeader make_header(const StreamConfig& cfg, std::uint32_t frames, std::uint32_t anchors,
                                    std::uint64_t initial_length) {
  bitstream::StreamHeader h;
  h.frames = frames;
  h.anchors = anchors;
  h.offsets = narrow<std::uint8_t>(cfg.model.offsets, "M");
  h.feature_dim = narrow<std::uint8_t>(cfg.model.feature_dim, "D");
  h.channels = narrow<std::uint8_t>(cfg.model.channels, "C");
  h.levels = narrow<std::uint8_t>(static_cast<std::size_t>(cfg.model.active_levels()), "L");
  h.bit_depth = narrow<std::uint8_t>(static_cast<std::size_t>(cfg.bits), "B");
  h.gop = narrow<std::uint16_t>(cfg.gop, "T_GOP");
  h.digest = latent::build_layout(cfg.model).digest();
  h.initial_length = initial_length;
  h.flags = static_cast<std::uint8_t>((cfg.raw_networks ? bitstream::kRawNetworks : 0) |
                                      (cfg.model.use_ila ? bitstream::kUseIla : 0) |
                                      (cfg.model.shared_entropy ? bitstream::kSharedEntropy : 0) |
                                      (cfg.model.include_self ? bitstream::kIncludeSelf : 0));
  h.k = narrow<std::uint8_t>(cfg.model.k, "k");
  h.height = narrow<std::uint16_t>(cfg.height, "height");
  h.width = narrow<std::uint16_t>(cfg.width, "width");
  h.camera_cx = static_cast<float>(cfg.camera.cx);
  h.camera_cy = static_cast<float>(cfg.camera.cy);
  h.camera_extent = static_cast<float>(cfg.camera.extent);
  return h;
}

StreamConfig config_from_header(const bitstream::StreamHeader& h) {
  StreamConfig cfg;
  cfg.model.offsets = h.offsets;
  cfg.model.feature_dim = h.feature_dim;
  cfg.model.channels = h.channels;
  cfg.model.levels = h.levels;
  cfg.model.use_cla = h.levels > 1;
  cfg.model.use_ila = (h.flags & bitstream::kUseIla) != 0;
  cfg.model.shared_entropy = (h.flags & bitstream::kSharedEntropy) != 0;
  cfg.model.include_self = (h.flags & bitstream::kIncludeSelf) != 0;
  cfg.model.k = h.k;
  cfg.raw_networks = (h.flags & bitstream::kRawNetworks) != 0;
  cfg.bits = h.bit_depth;
  cfg.gop = h.gop;
  cfg.height = h.height;
  cfg.width = h.width;
  cfg.camera = {h.camera_cx, h.camera_cy, h.camera_extent};
  if (!cfg.raw_networks && !netcodec::valid_bit_depth(cfg.bits)) {
    throw FormatError("unsupported bit depth " + std::to_string(cfg.bits), 18);
  }
  if (cfg.model.use_ila && cfg.model.k == 0) throw FormatError("kNN size of zero", 38);
  if (latent::build_layout(cfg.model).digest() != h.digest) {
    throw FormatError("network layout digest does not match this decoder", 21);
  }
  return cfg;
}

entropy::FactorizedModel entropy_model(const NetworkParams& net, const latent::ModelConfig& cfg) {
  const auto& layout = net.layout;
  return entropy::FactorizedModel::from_values(cfg.shared_entropy ? 1 : cfg.channels,
                                               net.layer(layout.index_of("entropy.matrices")),
                                               net.layer(layout.index_of("entropy.biases")),
                                               net.layer(layout.index_of("entropy.factors")));
}

LatentBlock encode_latents(const LatentSymbols& symbols, const entropy::FactorizedModel& model, std::size_t channels) {
  LatentBlock block;
  entropy::RangeEncoder enc;
  for (const auto& scale : symbols) {
    std::int32_t lo = 0, hi = 0;
    if (!scale.empty()) {
      auto [mn, mx] = std::minmax_element(scale.begin(), scale.end());
      lo = *mn;
      hi = *mx;
    }
    if (static_cast<std::int64_t>(hi) - lo + 1 > kMaxLatentAlphabet) {
      throw entropy::EncodeError("latent alphabet [" + std::to_string(lo) + ", " + std::to_string(hi) +
                                 "] is too wide to code");
    }
    block.lo.push_back(lo);
    block.hi.push_back(hi);
    auto tables = scale_tables(model, channels, lo, hi);
    for (std::size_t i = 0; i < scale.size(); ++i) enc.encode(scale[i], tables[i % channels]);
  }
  block.payload = enc.finish();
  return block;
}

LatentSymbols decode_latents(const LatentBlock& block, std::span<const std::size_t> rows,
                             const entropy::FactorizedModel& model, std::size_t channels) {
  if (block.lo.size() != rows.size()) throw FormatError("latent bounds do not match the number of scales");
  entropy::RangeDecoder dec(block.payload);
  LatentSymbols out(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<std::int64_t>(block.hi[r]) - block.lo[r] + 1 > kMaxLatentAlphabet) {
      throw FormatError("latent alphabet too wide");
    }
    auto tables = scale_tables(model, channels, block.lo[r], block.hi[r]);
    out[r].resize(rows[r] * channels);
    for (std::size_t i = 0; i < out[r].size(); ++i) out[r][i] = dec.decode(tables[i % channels]);
  }
  return out;
}

double latent_table_bits(const LatentSymbols& symbols, const LatentBlock& bounds,
                         const entropy::FactorizedModel& model, std::size_t channels) {
  double bits = 0;
  for (std::size_t r = 0; r < symbols.size(); ++r) {
    auto tables = scale_tables(model, channels, bounds.lo[r], bounds.hi[r]);
    for (std::size_t i = 0; i < symbols[r].size(); ++i) bits += tables[i % channels].bits(symbols[r][i]);
  }
  return bits;
}

deform::Frame reconstruct_frame(const StreamConfig& cfg, const deform::Frame& prev, std::span<const float> epsilons,
                                const LatentSymbols& symbols, const NetworkParams& net, std::uint32_t index) {
  auto eps = to_double(epsilons);
  auto s = latent::rebuild_structure(cfg.model, prev.anchors(), eps);
  return reconstruct_with(cfg, s, prev, symbols, net, index);
}

CodingMode coding_mode(const StreamConfig& cfg, std::uint32_t index) {
  if (cfg.raw_networks) return CodingMode::kRaw;
  return netcodec::gop_type(index, cfg.gop) == netcodec::FrameType::kIntra ? CodingMode::kIntra
                                                                            : CodingMode::kPredicted;
}

EncodedFrame encode_frame(const StreamConfig& cfg, const DecoderState& prev, std::uint32_t index,
                          std::span<const float> epsilons, const LatentSymbols& symbols, const NetworkParams& params,
                          std::span<const double> eta) {
  EncodedFrame out{{}, {prev.frame, prev.network}};
  auto& chunk = out.chunk;
  chunk.index = index;
  chunk.type = netcodec::gop_type(index, cfg.gop);
  chunk.epsilons.assign(epsilons.begin(), epsilons.end());
  switch (coding_mode(cfg, index)) {
    case CodingMode::kRaw: chunk.network = netcodec::encode_raw(params); break;
    case CodingMode::kIntra: chunk.network = netcodec::encode_iframe(params, cfg.bits); break;
    case CodingMode::kPredicted:
      chunk.network = netcodec::encode_pframe(params, prev.network, eta, cfg.bits);
      break;
  }
  out.state.network = netcodec::decode_network(chunk.network, params.layout, cfg.bits, &prev.network);
  chunk.latent = encode_latents(symbols, entropy_model(out.state.network, cfg.model), cfg.model.channels);
  out.state.frame = reconstruct_frame(cfg, prev.frame, epsilons, symbols, out.state.network, index);
  return out;
}

DecoderState decode_frame(const StreamConfig& cfg, const DecoderState& prev, const bitstream::FrameChunk& chunk) {
  if (static_cast<int>(chunk.epsilons.size()) + 1 != cfg.model.active_levels()) {
    throw FormatError("chunk carries " + std::to_string(chunk.epsilons.size()) + " grid sizes");
  }
  auto eps = to_double(chunk.epsilons);
  for (double e : eps) {
    if (!(e > 0) || !std::isfinite(e)) throw FormatError("invalid grid size in chunk");
  }
  auto s = latent::rebuild_structure(cfg.model, prev.frame.anchors(), eps);
  DecoderState out{prev.frame, netcodec::decode_network(chunk.network, prev.network.layout, cfg.bits, &prev.network)};
  std::vector<std::size_t> rows;
  for (const auto& level : s.hierarchy.levels) rows.push_back(level.size());
  auto symbols = decode_latents(chunk.latent, rows, entropy_model(out.network, cfg.model), cfg.model.channels);
  out.frame = reconstruct_with(cfg, s, prev.frame, symbols, out.network, chunk.index);
  return out;
}

NetworkParams round_network(const NetworkParams& params) {
  NetworkParams out = params;
  for (double& v : out.values) v = static_cast<double>(static_cast<float>(v));
  return out;
}

DecoderState initial_state(const deform::Frame& frame, const NetworkParams& params) {
  DecoderState s{frame, round_network(params)};
  s.frame.round_to_float();
  s.frame.t = 0;
  return s;
}

diff::Tensor render_frame(const StreamConfig& cfg, const deform::FrameTensors& frame, const std::vector<double>& l,
                          const diff::Tensor& decoder0, const diff::Tensor& decoder1) {
  auto g = deform::decode_attributes(frame, l, cfg.model.offsets, decoder0, decoder1);
  return deform::render_ortho(g, cfg.camera, cfg.height, cfg.width);
}

diff::Tensor render_state(const StreamConfig& cfg, const DecoderState& state) {
  auto w = latent::make_weights(state.network, false);
  return render_frame(cfg, deform::frame_tensors(state.frame), state.frame.l, w["decoder.0"], w["decoder.1"]);
}

}  // namespace hpc::codec
