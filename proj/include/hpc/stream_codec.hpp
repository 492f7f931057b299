#pragma once

#include <cstdint>
#include <vector>

#include "hpc/bitstream.hpp"
#include "hpc/deformation.hpp"
#include "hpc/entropy.hpp"
#include "hpc/latent_model.hpp"
#include "hpc/netcodec.hpp"

namespace hpc::codec {

/// Everything both ends agree on before the first chunk; mirrors the header.
struct StreamConfig {
  latent::ModelConfig model;
  int bits = 8;                // B for network coding
  std::uint32_t gop = 5;       // T_GOP
  bool raw_networks = false;   // float32 parameters, no network compression
  std::size_t height = 64;
  std::size_t width = 64;
  deform::Camera camera;
};

bitstream::StreamHeader make_header(const StreamConfig& cfg, std::uint32_t frames, std::uint32_t anchors,
                                    std::uint64_t initial_length);
/// Inverse of make_header. Throws FormatError when the header cannot describe
/// a model this build knows.
StreamConfig config_from_header(const bitstream::StreamHeader& h);

/// Reconstructed state after a frame: the anchors and the decoded networks.
struct DecoderState {
  deform::Frame frame;
  netcodec::NetworkParams network;
};

/// Integer latent symbols per scale, finest first, each [n_r, C] row-major.
using LatentSymbols = std::vector<std::vector<std::int32_t>>;

/// Factorized model held in a decoded network.
entropy::FactorizedModel entropy_model(const netcodec::NetworkParams& net, const latent::ModelConfig& cfg);

/// Range-codes latent symbols; channel c of scale r uses a table over that
/// scale's [lo, hi].
bitstream::LatentBlock encode_latents(const LatentSymbols& symbols, const entropy::FactorizedModel& model,
                                      std::size_t channels);
LatentSymbols decode_latents(const bitstream::LatentBlock& block, std::span<const std::size_t> rows,
                             const entropy::FactorizedModel& model, std::size_t channels);

/// Ideal code length of the latents under the coding tables, in bits.
double latent_table_bits(const LatentSymbols& symbols, const bitstream::LatentBlock& bounds,
                         const entropy::FactorizedModel& model, std::size_t channels);

/// Deterministic frame update shared by encoder and decoder.
deform::Frame reconstruct_frame(const StreamConfig& cfg, const deform::Frame& prev, std::span<const float> epsilons,
                                const LatentSymbols& symbols, const netcodec::NetworkParams& net,
                                std::uint32_t index);

/// Network coding mode for frame `index` under the stream's settings.
netcodec::CodingMode coding_mode(const StreamConfig& cfg, std::uint32_t index);

struct EncodedFrame {
  bitstream::FrameChunk chunk;
  DecoderState state;
};

/// Codes one frame from trained quantities. `params` holds the continuous
/// network, `eta` one value per layer (ignored unless predicted).
EncodedFrame encode_frame(const StreamConfig& cfg, const DecoderState& prev, std::uint32_t index,
                          std::span<const float> epsilons, const LatentSymbols& symbols,
                          const netcodec::NetworkParams& params, std::span<const double> eta);

/// Decoder side: needs only the previous state and the chunk.
DecoderState decode_frame(const StreamConfig& cfg, const DecoderState& prev, const bitstream::FrameChunk& chunk);

/// Initial state as a decoder sees it (float32 network, float32 frame).
DecoderState initial_state(const deform::Frame& frame, const netcodec::NetworkParams& params);
/// Float32-rounded copy of a network.
netcodec::NetworkParams round_network(const netcodec::NetworkParams& params);

/// Renders a state through its decoded attribute decoder.
diff::Tensor render_state(const StreamConfig& cfg, const DecoderState& state);
/// Renders arbitrary frame tensors with a set of decoder layers.
diff::Tensor render_frame(const StreamConfig& cfg, const deform::FrameTensors& frame, const std::vector<double>& l,
                          const diff::Tensor& decoder0, const diff::Tensor& decoder1);

}  // namespace hpc::codec
