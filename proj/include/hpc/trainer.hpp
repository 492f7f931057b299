#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hpc/bitstream.hpp"
#include "hpc/scene.hpp"
#include "hpc/stream_codec.hpp"

namespace hpc::trainer {

using diff::Tensor;

struct RdConfig {
  double lambda = 0.01;        // weight of the rate term, in bits per pixel
  double lambda_ssim = 0.2;
  std::size_t iterations = 500;
  double lr = 2e-3;            // network parameters
  double latent_lr = 2e-2;
  double entropy_lr = 2e-2;    // factorized-model layers
  double eta_lr = 1e-4;
  double latent_init_std = 0.01;
  bool warm_start_latents = false;
  std::uint64_t seed = 1;
  int bits = 8;
  std::uint32_t gop = 5;
  bool nnc = true;   // false: networks stored as raw float32
  bool ila = true;
  bool cla = true;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t iteration, double lambda)
      : std::runtime_error(what + " at iteration " + std::to_string(iteration) + " (lambda " +
                           std::to_string(lambda) + ")"),
        iteration_(iteration),
        lambda_(lambda) {}
  std::size_t iteration() const { return iteration_; }
  double lambda() const { return lambda_; }

 private:
  std::size_t iteration_;
  double lambda_;
};

/// Distortion L1 + lambda_ssim (1 - SSIM) plus lambda times the estimated
/// rate in bits per pixel.
Tensor rd_loss(const Tensor& rendered, const Tensor& target, const Tensor& latent_bits, const Tensor& network_bits,
               const RdConfig& cfg);
/// The distortion part alone.
Tensor distortion(const Tensor& rendered, const Tensor& target, double lambda_ssim);

struct FrameReport {
  std::uint32_t index = 0;
  netcodec::FrameType type = netcodec::FrameType::kIntra;
  // Estimates come from the rate models on rounded symbols; the noisy
  // variants are the training-time values on uniformly perturbed ones.
  double latent_bits_estimated = 0;
  double latent_bits_noisy = 0;
  double latent_bits_actual = 0;    // latent payload
  double network_bits_estimated = 0;
  double network_bits_noisy = 0;
  double network_bits_actual = 0;   // network payload
  std::size_t latent_bytes = 0;     // bounds, length and payload
  std::size_t network_bytes = 0;    // mode, side info, length and payload
  std::size_t chunk_bytes = 0;      // the whole framed chunk
  double psnr = 0;
  double ssim = 0;
  double identity_psnr = 0;  // previous decoded frame against this target
  double kb() const { return static_cast<double>(chunk_bytes) / 1000.0; }
};

struct RateReport {
  std::vector<FrameReport> frames;  // coded frames, 1..T-1
  std::size_t header_bytes = 0;
  std::size_t initial_bytes = 0;
  double initial_psnr = 0;

  double mean_kb() const;
  double mean_psnr() const;
  double mean_ssim() const;
  std::size_t coded_bytes() const;  // sum of chunk sizes
  std::string to_csv() const;
  std::string to_json() const;
};

/// Per-iteration values of one frame's optimisation.
struct TrainTrace {
  std::vector<double> loss, latent_bits, network_bits, distortion;
};

struct TrainedFrame {
  codec::EncodedFrame encoded;
  FrameReport report;
  std::vector<Tensor> latents;  // continuous, for warm starts
};

codec::StreamConfig stream_config(const RdConfig& cfg, const scene::SyntheticScene& s);

/// Optimises frame `index` against `target` starting from the decoded state of
/// the previous frame, then codes it for real.
TrainedFrame train_frame(const codec::StreamConfig& scfg, const RdConfig& cfg, const codec::DecoderState& prev,
                         std::uint32_t index, const deform::Image& target, TrainTrace* trace = nullptr,
                         const std::vector<Tensor>* warm_latents = nullptr);

/// Initial network: deterministic init from the seed with the scene's decoder.
netcodec::NetworkParams initial_network(const codec::StreamConfig& scfg, const RdConfig& cfg,
                                        const scene::SyntheticScene& s);

struct StreamResult {
  bitstream::Bytes bytes;
  RateReport report;
  std::vector<codec::DecoderState> states;  // encoder side, frame 0 first
};

/// Codes a whole scene: frame 0 stored raw, later frames trained in order.
/// A decoder pass over the finished bytes must reproduce every frame's PSNR.
StreamResult run_stream(const scene::SyntheticScene& s, const RdConfig& cfg);

struct DecodedFrame {
  std::uint32_t index = 0;
  codec::DecoderState state;
  deform::Image image;
  bool flagged = false;   // decoded from damaged or unreliable references
  std::string error;      // why this chunk itself failed, if it did
};

struct DecodedStream {
  codec::StreamConfig config;
  bitstream::StreamHeader header;
  std::vector<DecodedFrame> frames;
};

/// Decodes a stream. A chunk that fails its CRC or parse is concealed by
/// repeating the previous state; frames are flagged until an intra-coded
/// network restores the reference chain.
DecodedStream decode_stream(std::span<const std::uint8_t> bytes);

}  // namespace hpc::trainer
