#include "hpc/bitstream.hpp"

#include <zlib.h>

#include <cstring>

#include "hpc/byte_io.hpp"

namespace hpc::bitstream {

using netcodec::CodedNetwork;
using netcodec::CodingMode;
using io::Reader;
using io::Writer;

namespace {

std::uint32_t crc32_of(std::span<const std::uint8_t> b) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; chunk bodies are far below 4 GiB but split anyway.
  std::size_t done = 0;
  while (done < b.size()) {
    const std::size_t n = std::min<std::size_t>(b.size() - done, 1u << 30);
    crc = ::crc32(crc, b.data() + done, static_cast<uInt>(n));
    done += n;
  }
  return static_cast<std::uint32_t>(crc);
}

void put_floats(Writer& w, const std::vector<double>& v) {
  for (double x : v) w.put_f32(static_cast<float>(x));
}

std::vector<double> get_floats(Reader& r, std::size_t n, const char* what) {
  std::vector<double> v(n);
  for (auto& x : v) x = r.get_f32(what);
  return v;
}

}  // namespace

bool FrameChunk::operator==(const FrameChunk& o) const {
  if (index != o.index || type != o.type || epsilons != o.epsilons || !(latent == o.latent)) return false;
  if (network.mode != o.network.mode || network.payload != o.network.payload ||
      network.side.size() != o.network.side.size()) {
    return false;
  }
  for (std::size_t i = 0; i < network.side.size(); ++i) {
    const auto& a = network.side[i];
    const auto& b = o.network.side[i];
    if (std::bit_cast<std::uint32_t>(a.min) != std::bit_cast<std::uint32_t>(b.min) ||
        std::bit_cast<std::uint32_t>(a.max) != std::bit_cast<std::uint32_t>(b.max) ||
        std::bit_cast<std::uint32_t>(a.mean) != std::bit_cast<std::uint32_t>(b.mean) ||
        std::bit_cast<std::uint32_t>(a.variance) != std::bit_cast<std::uint32_t>(b.variance)) {
      return false;
    }
    if (network.mode == CodingMode::kPredicted &&
        std::bit_cast<std::uint32_t>(a.eta) != std::bit_cast<std::uint32_t>(b.eta)) {
      return false;
    }
  }
  return true;
}

Bytes write_header(const StreamHeader& h) {
  Bytes out;
  Writer w(out);
  for (char c : kMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(h.version);
  w.put(h.frames);
  w.put(h.anchors);
  w.put(h.offsets);
  w.put(h.feature_dim);
  w.put(h.channels);
  w.put(h.levels);
  w.put(h.bit_depth);
  w.put(h.gop);
  w.put(h.digest);
  w.put(h.initial_length);
  w.put(h.flags);
  w.put(h.k);
  w.put(h.height);
  w.put(h.width);
  w.put_f32(h.camera_cx);
  w.put_f32(h.camera_cy);
  w.put_f32(h.camera_extent);
  return out;
}

StreamHeader read_header(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, 0, 0);
  auto magic = r.get_bytes(4, "header magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("bad magic", 0);
  StreamHeader h;
  h.version = r.get<std::uint16_t>("header version");
  if (h.version != kVersion) throw FormatError("unsupported version " + std::to_string(h.version), 4);
  h.frames = r.get<std::uint32_t>("header");
  h.anchors = r.get<std::uint32_t>("header");
  h.offsets = r.get<std::uint8_t>("header");
  h.feature_dim = r.get<std::uint8_t>("header");
  h.channels = r.get<std::uint8_t>("header");
  h.levels = r.get<std::uint8_t>("header");
  h.bit_depth = r.get<std::uint8_t>("header");
  h.gop = r.get<std::uint16_t>("header");
  h.digest = r.get<std::uint64_t>("header");
  h.initial_length = r.get<std::uint64_t>("header");
  h.flags = r.get<std::uint8_t>("header");
  h.k = r.get<std::uint8_t>("header");
  h.height = r.get<std::uint16_t>("header");
  h.width = r.get<std::uint16_t>("header");
  h.camera_cx = r.get_f32("header");
  h.camera_cy = r.get_f32("header");
  h.camera_extent = r.get_f32("header");
  if (h.levels == 0) throw FormatError("header declares zero scales", 17);
  if (h.gop == 0) throw FormatError("header declares a zero GOP", 19);
  return h;
}

Bytes write_initial_frame(const deform::Frame& f) {
  if (f.x.size() != 3 * f.n || f.o.size() != 3 * f.n * f.m || f.f.size() != f.n * f.d || f.l.size() != 3 * f.n) {
    throw std::invalid_argument("frame arrays do not match its declared shape");
  }
  Bytes out;
  out.reserve(initial_frame_size(f.n, f.m, f.d));
  Writer w(out);
  w.put(static_cast<std::uint32_t>(f.n));
  w.put(static_cast<std::uint32_t>(f.m));
  w.put(static_cast<std::uint32_t>(f.d));
  put_floats(w, f.x);
  put_floats(w, f.o);
  put_floats(w, f.f);
  put_floats(w, f.l);
  return out;
}

namespace {

deform::Frame read_frame(Reader& r) {
  deform::Frame f;
  f.n = r.get<std::uint32_t>("initial frame shape");
  f.m = r.get<std::uint32_t>("initial frame shape");
  f.d = r.get<std::uint32_t>("initial frame shape");
  const std::uint64_t n = f.n, m = f.m, d = f.d;
  const std::uint64_t need = 4 * (3 * n + 3 * n * m + n * d + 3 * n);
  if (m > 255 || d > 255 || need > r.remaining()) throw FormatError("truncated initial frame arrays", r.where());
  f.x = get_floats(r, 3 * f.n, "initial frame positions");
  f.o = get_floats(r, 3 * f.n * f.m, "initial frame offsets");
  f.f = get_floats(r, f.n * f.d, "initial frame features");
  f.l = get_floats(r, 3 * f.n, "initial frame scaling");
  f.t = 0;
  return f;
}

}  // namespace

deform::Frame read_initial_frame(std::span<const std::uint8_t> bytes, std::size_t base_offset) {
  Reader r(bytes, 0, base_offset);
  auto f = read_frame(r);
  if (r.pos() != bytes.size()) throw FormatError("trailing bytes after initial frame", r.where());
  return f;
}

Bytes write_network(const CodedNetwork& net) {
  Bytes out;
  Writer w(out);
  w.put(static_cast<std::uint8_t>(net.mode));
  w.put(static_cast<std::uint32_t>(net.side.size()));
  for (const auto& s : net.side) {
    w.put_f32(s.min);
    w.put_f32(s.max);
    w.put_f32(s.mean);
    w.put_f32(s.variance);
    if (net.mode == CodingMode::kPredicted) w.put_f32(s.eta);
  }
  w.put(static_cast<std::uint32_t>(net.payload.size()));
  w.put_bytes(net.payload);
  return out;
}

CodedNetwork read_network(std::span<const std::uint8_t> bytes, std::size_t& pos, std::size_t base_offset) {
  Reader r(bytes, pos, base_offset);
  CodedNetwork net;
  const auto mode_at = r.where();
  const auto mode = r.get<std::uint8_t>("network mode");
  if (mode > static_cast<std::uint8_t>(CodingMode::kRaw)) throw FormatError("unknown network mode", mode_at);
  net.mode = static_cast<CodingMode>(mode);
  const auto layers = r.get<std::uint32_t>("network layer count");
  if (net.mode == CodingMode::kRaw && layers != 0) throw FormatError("raw network with side info", mode_at);
  const std::size_t per = net.mode == CodingMode::kPredicted ? 20 : 16;
  if (static_cast<std::uint64_t>(layers) * per > bytes.size() - r.pos()) {
    throw FormatError("truncated network side info", r.where());
  }
  net.side.resize(layers);
  for (auto& s : net.side) {
    s.min = r.get_f32("network side info");
    s.max = r.get_f32("network side info");
    s.mean = r.get_f32("network side info");
    s.variance = r.get_f32("network side info");
    s.eta = net.mode == CodingMode::kPredicted ? r.get_f32("network side info") : 1.0f;
  }
  const auto len = r.get<std::uint32_t>("network payload length");
  auto payload = r.get_bytes(len, "network payload");
  net.payload.assign(payload.begin(), payload.end());
  pos = r.pos();
  return net;
}

Bytes write_initial_payload(const deform::Frame& frame, const CodedNetwork& net) {
  Bytes out = write_initial_frame(frame);
  Bytes n = write_network(net);
  out.insert(out.end(), n.begin(), n.end());
  return out;
}

std::pair<deform::Frame, CodedNetwork> read_initial_payload(std::span<const std::uint8_t> bytes,
                                                             std::size_t base_offset) {
  Reader r(bytes, 0, base_offset);
  auto frame = read_frame(r);
  std::size_t pos = r.pos();
  auto net = read_network(bytes, pos, base_offset);
  if (pos != bytes.size()) throw FormatError("trailing bytes in initial payload", base_offset + pos);
  return {std::move(frame), std::move(net)};
}

Bytes write_chunk(const FrameChunk& c, ChunkSizes* sizes) {
  Bytes body;
  Writer w(body);
  w.put(c.index);
  w.put(static_cast<std::uint8_t>(c.type));
  for (float e : c.epsilons) w.put_f32(e);
  const std::size_t latent_start = body.size();
  if (c.latent.lo.size() != c.epsilons.size() + 1 || c.latent.hi.size() != c.latent.lo.size()) {
    throw std::invalid_argument("latent bounds must cover every scale");
  }
  for (std::size_t s = 0; s < c.latent.lo.size(); ++s) {
    w.put(c.latent.lo[s]);
    w.put(c.latent.hi[s]);
  }
  w.put(static_cast<std::uint32_t>(c.latent.payload.size()));
  w.put_bytes(c.latent.payload);
  const std::size_t latent_bytes = body.size() - latent_start;
  Bytes net = write_network(c.network);
  w.put_bytes(net);

  Bytes out;
  out.reserve(body.size() + 12);
  Writer framed(out);
  framed.put(static_cast<std::uint64_t>(body.size()));
  framed.put_bytes(body);
  framed.put(crc32_of(body));
  if (sizes != nullptr) *sizes = {out.size(), latent_bytes, net.size()};
  return out;
}

FrameChunk read_chunk_body(std::span<const std::uint8_t> body, int levels, std::size_t base_offset) {
  Reader r(body, 0, base_offset);
  FrameChunk c;
  c.index = r.get<std::uint32_t>("frame index");
  const auto type_at = r.where();
  const auto type = r.get<std::uint8_t>("frame type");
  if (type > 1) throw FormatError("unknown frame type " + std::to_string(type), type_at);
  c.type = static_cast<netcodec::FrameType>(type);
  for (int s = 0; s + 1 < levels; ++s) c.epsilons.push_back(r.get_f32("grid sizes"));
  for (int s = 0; s < levels; ++s) {
    const auto at = r.where();
    c.latent.lo.push_back(r.get<std::int32_t>("latent bounds"));
    c.latent.hi.push_back(r.get<std::int32_t>("latent bounds"));
    if (c.latent.lo.back() > c.latent.hi.back()) throw FormatError("empty latent alphabet", at);
  }
  const auto len = r.get<std::uint32_t>("latent payload length");
  auto payload = r.get_bytes(len, "latent payload");
  c.latent.payload.assign(payload.begin(), payload.end());
  std::size_t pos = r.pos();
  c.network = read_network(body, pos, base_offset);
  if (pos != body.size()) throw FormatError("trailing bytes in chunk body", base_offset + pos);
  return c;
}

Bytes write_stream(const StreamHeader& header, std::span<const std::uint8_t> initial_payload,
                   std::span<const FrameChunk> chunks) {
  if (header.initial_length != initial_payload.size()) {
    throw std::invalid_argument("header initial length does not match the payload");
  }
  Bytes out = write_header(header);
  out.insert(out.end(), initial_payload.begin(), initial_payload.end());
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    if (i > 0 && chunks[i].index <= chunks[i - 1].index) throw std::invalid_argument("chunks out of frame order");
    Bytes c = write_chunk(chunks[i]);
    out.insert(out.end(), c.begin(), c.end());
  }
  return out;
}

StreamReader::StreamReader(std::istream& in) : in_(in) {
  Bytes head(StreamHeader::kSize);
  in_.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in_.gcount()));
  header_ = read_header(head);
  pos_ = StreamHeader::kSize;
  initial_.resize(header_.initial_length);
  in_.read(reinterpret_cast<char*>(initial_.data()), static_cast<std::streamsize>(initial_.size()));
  if (static_cast<std::uint64_t>(in_.gcount()) != header_.initial_length) {
    throw FormatError("truncated initial payload", pos_ + static_cast<std::uint64_t>(in_.gcount()));
  }
  pos_ += header_.initial_length;
}

std::optional<ChunkRecord> StreamReader::next() {
  std::uint8_t len_bytes[8];
  in_.read(reinterpret_cast<char*>(len_bytes), 8);
  const auto got = static_cast<std::size_t>(in_.gcount());
  if (got == 0) return std::nullopt;
  if (got < 8) throw FormatError("truncated chunk length", pos_ + got);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(len_bytes[i]) << (8 * i);
  ChunkRecord rec;
  rec.offset = pos_;
  constexpr std::uint64_t kMaxChunk = std::uint64_t{1} << 32;
  if (len > kMaxChunk) throw FormatError("implausible chunk length " + std::to_string(len), pos_);
  Bytes body(len + 4);
  in_.read(reinterpret_cast<char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (static_cast<std::uint64_t>(in_.gcount()) != len + 4) {
    throw FormatError("truncated chunk", pos_ + 8 + static_cast<std::uint64_t>(in_.gcount()));
  }
  rec.size = static_cast<std::size_t>(len + 12);
  const std::span<const std::uint8_t> view(body.data(), len);
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(body[len + static_cast<std::size_t>(i)]) << (8 * i);
  if (crc32_of(view) != stored) {
    rec.error = FormatError("chunk CRC mismatch", pos_ + 8 + len).what();
  } else {
    try {
      rec.chunk = read_chunk_body(view, header_.levels, pos_ + 8);
    } catch (const FormatError& e) {
      rec.error = e.what();
    }
  }
  pos_ += rec.size;
  return rec;
}

ParsedStream read_stream(std::span<const std::uint8_t> bytes) {
  // A view stream avoids copying the buffer.
  struct ViewBuf : std::streambuf {
    explicit ViewBuf(std::span<const std::uint8_t> b) {
      char* p = const_cast<char*>(reinterpret_cast<const char*>(b.data()));
      setg(p, p, p + b.size());
    }
  } buf(bytes);
  std::istream in(&buf);
  StreamReader reader(in);
  ParsedStream out;
  out.header = reader.header();
  out.initial_payload = reader.initial_payload();
  while (auto rec = reader.next()) out.chunks.push_back(std::move(*rec));
  return out;
}

}  // namespace hpc::bitstream
