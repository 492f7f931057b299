#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hpc/deformation.hpp"
#include "hpc/errors.hpp"
#include "hpc/netcodec.hpp"

namespace hpc::bitstream {

using Bytes = std::vector<std::uint8_t>;

inline constexpr char kMagic[4] = {'H', 'P', 'C', 'S'};
inline constexpr std::uint16_t kVersion = 1;

enum HeaderFlags : std::uint8_t {
  kRawNetworks = 1,    // parameters stored as float32 (no network compression)
  kUseIla = 2,
  kSharedEntropy = 4,
  kIncludeSelf = 8,
};

/// Fixed-size stream header. Fields after `initial_length` carry what a
/// decoder needs beyond the base layout: model toggles, kNN size and the
/// rendering camera.
struct StreamHeader {
  std::uint16_t version = kVersion;
  std::uint32_t frames = 0;   // including the initial frame
  std::uint32_t anchors = 0;
  std::uint8_t offsets = 0;      // M
  std::uint8_t feature_dim = 0;  // D
  std::uint8_t channels = 0;     // C
  std::uint8_t levels = 0;       // scales actually used by the hierarchy
  std::uint8_t bit_depth = 0;    // B
  std::uint16_t gop = 1;
  std::uint64_t digest = 0;
  std::uint64_t initial_length = 0;
  std::uint8_t flags = 0;
  std::uint8_t k = 0;
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  float camera_cx = 0.5f;
  float camera_cy = 0.5f;
  float camera_extent = 1.0f;

  static constexpr std::size_t kSize = 4 + 2 + 4 + 4 + 5 + 2 + 8 + 8 + 1 + 1 + 2 + 2 + 12;
  bool operator==(const StreamHeader&) const = default;
};

/// Range-coded latent symbols of every scale, finest first. Each scale's
/// symbols lie in [lo, hi]; every channel of that scale is coded over that
/// alphabet with its own factorized table.
struct LatentBlock {
  std::vector<std::int32_t> lo;  // per scale
  std::vector<std::int32_t> hi;
  Bytes payload;
  bool operator==(const LatentBlock&) const = default;
};

struct FrameChunk {
  std::uint32_t index = 0;
  netcodec::FrameType type = netcodec::FrameType::kIntra;
  std::vector<float> epsilons;  // L - 1 grid sizes, finest first
  LatentBlock latent;
  netcodec::CodedNetwork network;

  bool operator==(const FrameChunk& o) const;
};

/// Byte sizes of a chunk's parts once serialized.
struct ChunkSizes {
  std::size_t total = 0;  // length prefix, body and CRC
  std::size_t latent = 0;  // bounds, length prefix and payload
  std::size_t network = 0;  // mode, side info, length prefix and payload
  std::size_t overhead() const { return total - latent - network; }
};

Bytes write_header(const StreamHeader& h);
/// Checks magic and version before anything else.
StreamHeader read_header(std::span<const std::uint8_t> bytes);

/// [u32 n][u32 M][u32 D] then X, o, F, l as float32.
Bytes write_initial_frame(const deform::Frame& frame);
deform::Frame read_initial_frame(std::span<const std::uint8_t> bytes, std::size_t base_offset = 0);
inline constexpr std::size_t initial_frame_size(std::size_t n, std::size_t m, std::size_t d) {
  return 12 + 4 * (3 * n + 3 * n * m + n * d + 3 * n);
}

/// A network block: [u8 mode][u32 layers][side info][u32 length][payload].
Bytes write_network(const netcodec::CodedNetwork& net);
netcodec::CodedNetwork read_network(std::span<const std::uint8_t> bytes, std::size_t& pos, std::size_t base_offset);

/// The initial payload: the raw initial frame followed by the initial network block.
Bytes write_initial_payload(const deform::Frame& frame, const netcodec::CodedNetwork& net);
std::pair<deform::Frame, netcodec::CodedNetwork> read_initial_payload(std::span<const std::uint8_t> bytes,
                                                                       std::size_t base_offset = 0);

/// [u64 body length][body][u32 CRC32 of body].
Bytes write_chunk(const FrameChunk& chunk, ChunkSizes* sizes = nullptr);
/// Parses one body. `levels` comes from the header.
FrameChunk read_chunk_body(std::span<const std::uint8_t> body, int levels, std::size_t base_offset = 0);

Bytes write_stream(const StreamHeader& header, std::span<const std::uint8_t> initial_payload,
                   std::span<const FrameChunk> chunks);

/// One framed chunk as seen by the reader. A CRC or parse failure is reported
/// here rather than thrown, so a decoder can skip to the next chunk.
struct ChunkRecord {
  std::uint64_t offset = 0;  // of the length prefix
  std::size_t size = 0;      // framed size
  std::optional<FrameChunk> chunk;
  std::string error;
};

/// Sequential reader over a stream; chunks are pulled one at a time.
class StreamReader {
 public:
  explicit StreamReader(std::istream& in);
  const StreamHeader& header() const { return header_; }
  const Bytes& initial_payload() const { return initial_; }
  /// Next chunk, or nullopt at a clean end of stream. Truncation throws.
  std::optional<ChunkRecord> next();

 private:
  std::istream& in_;
  StreamHeader header_;
  Bytes initial_;
  std::uint64_t pos_ = 0;
};

/// Reads a whole in-memory stream.
struct ParsedStream {
  StreamHeader header;
  Bytes initial_payload;
  std::vector<ChunkRecord> chunks;
};
ParsedStream read_stream(std::span<const std::uint8_t> bytes);

}  // namespace hpc::bitstream
