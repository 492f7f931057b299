#include "hpc/scene.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include "hpc/byte_io.hpp"
#include "hpc/latent_model.hpp"

namespace hpc::scene {

namespace {

constexpr char kSceneMagic[4] = {'H', 'P', 'S', 'C'};
constexpr std::uint16_t kSceneVersion = 1;

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

// Rodrigues rotation of v about unit axis k by angle a.
void rotate(const double* k, double a, const double* v, double* out) {
  const double c = std::cos(a), s = std::sin(a);
  const double dot = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
  const double cross[3] = {k[1] * v[2] - k[2] * v[1], k[2] * v[0] - k[0] * v[2], k[0] * v[1] - k[1] * v[0]};
  for (int i = 0; i < 3; ++i) out[i] = v[i] * c + cross[i] * s + k[i] * dot * (1 - c);
}

deform::Frame advance(const deform::Frame& prev, const std::vector<std::uint32_t>& cluster_of,
                      const std::vector<ClusterMotion>& motion, double drift, std::mt19937_64& rng) {
  deform::Frame next = prev;
  next.t = prev.t + 1;
  std::vector<std::array<double, 4>> centroid(motion.size(), {0, 0, 0, 0});
  for (std::size_t i = 0; i < prev.n; ++i) {
    auto& c = centroid[cluster_of[i]];
    for (int a = 0; a < 3; ++a) c[static_cast<std::size_t>(a)] += prev.x[3 * i + static_cast<std::size_t>(a)];
    c[3] += 1;
  }
  for (std::size_t i = 0; i < prev.n; ++i) {
    const auto& mo = motion[cluster_of[i]];
    const auto& c = centroid[cluster_of[i]];
    double rel[3], out[3];
    for (int a = 0; a < 3; ++a) rel[a] = prev.x[3 * i + static_cast<std::size_t>(a)] - c[static_cast<std::size_t>(a)] / c[3];
    rotate(mo.axis, mo.angle, rel, out);
    for (int a = 0; a < 3; ++a) {
      next.x[3 * i + static_cast<std::size_t>(a)] = c[static_cast<std::size_t>(a)] / c[3] + out[a] + mo.translation[a];
    }
    for (std::size_t k = 0; k < prev.m; ++k) {
      const double* o = prev.o.data() + (i * prev.m + k) * 3;
      rotate(mo.axis, mo.angle, o, next.o.data() + (i * prev.m + k) * 3);
    }
  }
  std::normal_distribution<double> noise(0, drift);
  for (double& v : next.f) v += noise(rng);
  next.round_to_float();
  return next;
}

}  // namespace

SyntheticScene generate_scene(const SceneParams& p) {
  if (p.anchors == 0 || p.frames == 0 || p.clusters == 0 || p.offsets == 0 || p.feature_dim == 0) {
    throw std::invalid_argument("scene sizes must be positive");
  }
  SyntheticScene s;
  s.params = p;
  std::mt19937_64 rng(p.seed);
  std::uniform_real_distribution<double> uni(0, 1);
  std::normal_distribution<double> normal(0, 1);

  std::vector<std::array<double, 3>> centres(p.clusters);
  for (auto& c : centres) c = {0.2 + 0.6 * uni(rng), 0.2 + 0.6 * uni(rng), 0.3 + 0.4 * uni(rng)};

  deform::Frame f;
  f.n = p.anchors;
  f.m = p.offsets;
  f.d = p.feature_dim;
  s.cluster_of.resize(p.anchors);
  for (std::uint32_t i = 0; i < p.anchors; ++i) {
    const std::uint32_t c = i % p.clusters;
    s.cluster_of[i] = c;
    f.x.push_back(std::clamp(centres[c][0] + 0.08 * normal(rng), 0.05, 0.95));
    f.x.push_back(std::clamp(centres[c][1] + 0.08 * normal(rng), 0.05, 0.95));
    f.x.push_back(std::clamp(centres[c][2] + 0.05 * normal(rng), 0.05, 0.95));
    const double li = p.anchor_scale * (0.8 + 0.4 * uni(rng));
    for (int a = 0; a < 3; ++a) f.l.push_back(li);
  }
  for (std::size_t i = 0; i < f.n * f.m * 3; ++i) f.o.push_back(normal(rng));
  for (std::size_t i = 0; i < f.n * f.d; ++i) f.f.push_back(0.7 * normal(rng));
  f.round_to_float();

  for (std::uint32_t c = 0; c < p.clusters; ++c) {
    ClusterMotion mo{};
    double norm = 0;
    for (double& a : mo.axis) {
      a = normal(rng);
      norm += a * a;
    }
    for (double& a : mo.axis) a /= std::sqrt(norm);
    mo.angle = (uni(rng) * 2 - 1) * p.max_angle_deg * M_PI / 180.0;
    // Uniform direction, length up to the bound.
    double dir[3], dn = 0;
    for (double& a : dir) {
      a = normal(rng);
      dn += a * a;
    }
    const double len = p.max_translation * uni(rng);
    for (int a = 0; a < 3; ++a) mo.translation[a] = dir[a] / std::sqrt(dn) * len;
    s.motion.push_back(mo);
  }

  // Ground-truth attribute decoder: features to colour, opacity, scale and
  // rotation with biases that keep Gaussians mostly opaque and compact.
  const std::size_t d = p.feature_dim, h = p.decoder_hidden, out = p.offsets * latent::kAttributesPerOffset;
  s.decoder0.assign((d + 1) * h, 0.0);
  for (std::size_t i = 0; i < d * h; ++i) s.decoder0[i] = normal(rng) * std::sqrt(2.0 / static_cast<double>(d));
  for (std::size_t j = 0; j < h; ++j) s.decoder0[d * h + j] = 0.1 * normal(rng);
  s.decoder1.assign((h + 1) * out, 0.0);
  for (std::size_t i = 0; i < h * out; ++i) s.decoder1[i] = normal(rng) * std::sqrt(1.0 / static_cast<double>(h));
  for (std::size_t k = 0; k < p.offsets; ++k) {
    double* bias = s.decoder1.data() + h * out + k * latent::kAttributesPerOffset;
    bias[3] = 1.0;   // opacity logit
    for (int a = 4; a < 7; ++a) bias[a] = -0.3;  // scale logit
  }
  for (double& v : s.decoder0) v = f32(v);
  for (double& v : s.decoder1) v = f32(v);

  s.frames.push_back(std::move(f));
  for (std::uint32_t t = 1; t < p.frames; ++t) {
    s.frames.push_back(advance(s.frames.back(), s.cluster_of, s.motion, p.feature_drift, rng));
  }
  for (std::uint32_t t = 0; t < p.frames; ++t) s.images.push_back(render_ground_truth(s, t));
  return s;
}

deform::Image render_ground_truth(const SyntheticScene& s, std::size_t t) {
  const auto& p = s.params;
  const std::size_t d = p.feature_dim, h = p.decoder_hidden, out = p.offsets * latent::kAttributesPerOffset;
  auto g = deform::decode_attributes(deform::frame_tensors(s.frames.at(t)), s.frames[t].l, p.offsets,
                                     diff::Tensor::constant({d + 1, h}, s.decoder0),
                                     diff::Tensor::constant({h + 1, out}, s.decoder1));
  return deform::to_image(deform::render_ortho(g, s.camera, p.height, p.width));
}

bitstream::Bytes write_scene(const SyntheticScene& s) {
  const auto& p = s.params;
  bitstream::Bytes out;
  io::Writer w(out);
  for (char c : kSceneMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(kSceneVersion);
  w.put(p.seed);
  for (std::uint32_t v : {p.anchors, p.frames, p.clusters, p.offsets, p.feature_dim, p.decoder_hidden, p.height,
                          p.width}) {
    w.put(v);
  }
  for (double v : {p.anchor_scale, p.max_angle_deg, p.max_translation, p.feature_drift}) {
    w.put(std::bit_cast<std::uint64_t>(v));
  }
  w.put_f32(static_cast<float>(s.camera.cx));
  w.put_f32(static_cast<float>(s.camera.cy));
  w.put_f32(static_cast<float>(s.camera.extent));
  auto frame = bitstream::write_initial_frame(s.frames.at(0));
  w.put(static_cast<std::uint64_t>(frame.size()));
  w.put_bytes(frame);
  for (double v : s.decoder0) w.put_f32(static_cast<float>(v));
  for (double v : s.decoder1) w.put_f32(static_cast<float>(v));
  if (s.images.size() != p.frames) throw std::invalid_argument("scene must hold one image per frame");
  for (const auto& img : s.images) {
    if (img.height != p.height || img.width != p.width) throw std::invalid_argument("scene image size mismatch");
    for (float v : img.rgb) w.put_f32(v);
  }
  return out;
}

SyntheticScene read_scene(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes, 0, 0);
  auto magic = r.get_bytes(4, "scene magic");
  if (std::memcmp(magic.data(), kSceneMagic, 4) != 0) throw FormatError("not a scene file", 0);
  if (r.get<std::uint16_t>("scene version") != kSceneVersion) throw FormatError("unsupported scene version", 4);
  SyntheticScene s;
  auto& p = s.params;
  p.seed = r.get<std::uint64_t>("scene header");
  for (std::uint32_t* v : {&p.anchors, &p.frames, &p.clusters, &p.offsets, &p.feature_dim, &p.decoder_hidden,
                           &p.height, &p.width}) {
    *v = r.get<std::uint32_t>("scene header");
  }
  for (double* v : {&p.anchor_scale, &p.max_angle_deg, &p.max_translation, &p.feature_drift}) {
    *v = std::bit_cast<double>(r.get<std::uint64_t>("scene header"));
  }
  s.camera.cx = r.get_f32("scene camera");
  s.camera.cy = r.get_f32("scene camera");
  s.camera.extent = r.get_f32("scene camera");
  const auto frame_len = r.get<std::uint64_t>("scene frame length");
  const auto frame_at = r.where();
  auto frame_bytes = r.get_bytes(static_cast<std::size_t>(std::min<std::uint64_t>(frame_len, r.remaining())),
                                 "scene initial frame");
  if (frame_bytes.size() != frame_len) throw FormatError("truncated scene initial frame", r.where());
  s.frames.push_back(bitstream::read_initial_frame(frame_bytes, frame_at));
  if (s.frames[0].n != p.anchors || s.frames[0].m != p.offsets || s.frames[0].d != p.feature_dim) {
    throw FormatError("scene frame shape does not match its header", frame_at);
  }
  const std::uint64_t d = p.feature_dim, h = p.decoder_hidden, out = std::uint64_t{p.offsets} * latent::kAttributesPerOffset;
  const std::uint64_t pixels = std::uint64_t{p.height} * p.width * 3;
  const unsigned __int128 expected = 4 * ((static_cast<unsigned __int128>(d) + 1) * h +
                                          (static_cast<unsigned __int128>(h) + 1) * out +
                                          static_cast<unsigned __int128>(pixels) * p.frames);
  if (expected != r.remaining()) {
    throw FormatError("scene payload size does not match its header", r.where());
  }
  for (std::uint64_t i = 0; i < (d + 1) * h; ++i) s.decoder0.push_back(r.get_f32("scene decoder"));
  for (std::uint64_t i = 0; i < (h + 1) * out; ++i) s.decoder1.push_back(r.get_f32("scene decoder"));
  for (std::uint32_t t = 0; t < p.frames; ++t) {
    deform::Image img{p.height, p.width, {}};
    img.rgb.resize(pixels);
    for (float& v : img.rgb) v = r.get_f32("scene image");
    s.images.push_back(std::move(img));
  }
  return s;
}

void save_scene(const std::string& path, const SyntheticScene& s) {
  auto bytes = write_scene(s);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

SyntheticScene load_scene(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  bitstream::Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return read_scene(bytes);
}

}  // namespace hpc::scene
