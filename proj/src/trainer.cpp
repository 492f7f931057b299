#include "hpc/trainer.hpp"

#include <bit>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "hpc/entropy.hpp"
#include "hpc/metrics.hpp"
#include "hpc/ops.hpp"
#include "hpc/optim.hpp"

namespace hpc::trainer {

using netcodec::CodingMode;
using netcodec::NetworkParams;

namespace {

// Independent RNG stream per (seed, lambda, frame).
std::mt19937_64 frame_rng(const RdConfig& cfg, std::uint32_t index) {
  const auto lb = std::bit_cast<std::uint64_t>(cfg.lambda);
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(lb), static_cast<std::uint32_t>(lb >> 32), index};
  return std::mt19937_64(seq);
}

double pixels_of(const Tensor& img) { return static_cast<double>(img.dim(0) * img.dim(1)); }

struct Proxies {
  latent::Weights weights;
  Tensor network_bits;
};

// Training-time stand-ins for the coded network: STE reconstruction and the
// Gaussian-model rate of noisy symbols, per layer.
Proxies network_proxies(const codec::StreamConfig& scfg, CodingMode mode, const NetworkParams& layout_src,
                        const std::vector<Tensor>& params, const std::vector<Tensor>& eta, const NetworkParams& ref,
                        std::mt19937_64* rng) {
  Proxies p;
  p.weights.layout = &layout_src.layout;
  double raw_bits = 0;
  std::vector<Tensor> bits;
  for (std::size_t l = 0; l < params.size(); ++l) {
    switch (mode) {
      case CodingMode::kRaw:
        p.weights.layers.push_back(params[l]);
        raw_bits += 32.0 * static_cast<double>(params[l].size());
        break;
      case CodingMode::kIntra: {
        auto proxy = netcodec::intra_proxy(params[l], scfg.bits, rng);
        p.weights.layers.push_back(proxy.reconstructed);
        bits.push_back(proxy.bits);
        break;
      }
      case CodingMode::kPredicted: {
        auto proxy = netcodec::predicted_proxy(params[l], ref.layer(l), eta[l], scfg.bits, rng);
        p.weights.layers.push_back(proxy.reconstructed);
        bits.push_back(proxy.bits);
        break;
      }
    }
  }
  p.network_bits = Tensor::scalar(raw_bits);
  for (const auto& b : bits) p.network_bits = diff::add(p.network_bits, b);
  return p;
}

entropy::FactorizedModel model_from(const latent::Weights& w) {
  return {w["entropy.matrices"], w["entropy.biases"], w["entropy.factors"]};
}

// Noisy latents when `rng` is set, rounded ones otherwise.
Tensor latent_rate(const entropy::FactorizedModel& model, const std::vector<Tensor>& latents, std::mt19937_64* rng) {
  Tensor bits = Tensor::scalar(0.0);
  for (const auto& e : latents) {
    Tensor q = rng != nullptr ? entropy::quantize_noise(e, *rng) : entropy::quantize_ste(e);
    bits = diff::add(bits, entropy::factorized_bits(model, q).bits);
  }
  return bits;
}

Tensor render_with(const codec::StreamConfig& scfg, const latent::FrameStructure& s, const codec::DecoderState& prev,
                   const std::vector<Tensor>& latents, const latent::Weights& w) {
  std::vector<Tensor> rounded;
  for (const auto& e : latents) rounded.push_back(entropy::quantize_ste(e));
  auto field = latent::run_model(scfg.model, s, rounded, w);
  auto frame = deform::apply_deformation(prev.frame, field);
  return codec::render_frame(scfg, frame, prev.frame.l, w["decoder.0"], w["decoder.1"]);
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

Tensor distortion(const Tensor& rendered, const Tensor& target, double lambda_ssim) {
  Tensor d = metrics::l1(rendered, target);
  if (lambda_ssim == 0) return d;
  Tensor dssim = diff::add_scalar(diff::scale(metrics::ssim(rendered, target), -1.0), 1.0);
  return diff::add(d, diff::scale(dssim, lambda_ssim));
}

Tensor rd_loss(const Tensor& rendered, const Tensor& target, const Tensor& latent_bits, const Tensor& network_bits,
               const RdConfig& cfg) {
  if (rendered.shape() != target.shape()) throw metrics::ParameterError("rendered and target shapes differ");
  Tensor rate = diff::scale(diff::add(latent_bits, network_bits), cfg.lambda / pixels_of(rendered));
  return diff::add(distortion(rendered, target, cfg.lambda_ssim), rate);
}

codec::StreamConfig stream_config(const RdConfig& cfg, const scene::SyntheticScene& s) {
  codec::StreamConfig scfg;
  scfg.model.offsets = s.params.offsets;
  scfg.model.feature_dim = s.params.feature_dim;
  scfg.model.decoder_hidden = s.params.decoder_hidden;
  scfg.model.use_ila = cfg.ila;
  scfg.model.use_cla = cfg.cla;
  scfg.bits = cfg.bits;
  scfg.gop = cfg.gop;
  scfg.raw_networks = !cfg.nnc;
  scfg.height = s.params.height;
  scfg.width = s.params.width;
  scfg.camera = s.camera;
  if (!scfg.raw_networks && !netcodec::valid_bit_depth(cfg.bits)) {
    throw std::invalid_argument("unsupported bit depth " + std::to_string(cfg.bits));
  }
  if (cfg.gop == 0) throw std::invalid_argument("GOP size must be positive");
  if (!(cfg.lambda > 0)) throw std::invalid_argument("lambda must be positive");
  return scfg;
}

NetworkParams initial_network(const codec::StreamConfig& scfg, const RdConfig& cfg, const scene::SyntheticScene& s) {
  std::mt19937_64 rng(cfg.seed);
  auto net = latent::init_params(scfg.model, rng);
  auto copy = [&](const char* name, const std::vector<double>& v) {
    auto dst = net.layer(net.layout.index_of(name));
    if (dst.size() != v.size()) throw std::invalid_argument(std::string("scene decoder does not fit ") + name);
    std::copy(v.begin(), v.end(), dst.begin());
  };
  copy("decoder.0", s.decoder0);
  copy("decoder.1", s.decoder1);
  return codec::round_network(net);
}

TrainedFrame train_frame(const codec::StreamConfig& scfg, const RdConfig& cfg, const codec::DecoderState& prev,
                         std::uint32_t index, const deform::Image& target_img, TrainTrace* trace,
                         const std::vector<Tensor>* warm_latents) {
  auto rng = frame_rng(cfg, index);
  const auto anchors = prev.frame.anchors();
  std::vector<float> eps;
  {
    auto s = latent::build_structure(scfg.model, anchors);
    for (double e : s.hierarchy.epsilons()) eps.push_back(static_cast<float>(e));
  }
  const auto s = latent::rebuild_structure(scfg.model, anchors, std::vector<double>(eps.begin(), eps.end()));
  const Tensor target = deform::image_tensor(target_img);
  const CodingMode mode = codec::coding_mode(scfg, index);
  const std::size_t c = scfg.model.channels;

  std::vector<Tensor> latents;
  std::normal_distribution<double> init(0.0, cfg.latent_init_std);
  for (std::size_t r = 0; r < s.hierarchy.levels.size(); ++r) {
    const std::size_t rows = s.hierarchy.levels[r].size();
    if (warm_latents != nullptr && r < warm_latents->size() && (*warm_latents)[r].dim(0) == rows) {
      auto v = (*warm_latents)[r].values();
      latents.push_back(Tensor::parameter({rows, c}, {v.begin(), v.end()}));
      continue;
    }
    std::vector<double> v(rows * c);
    for (double& x : v) x = init(rng);
    latents.push_back(Tensor::parameter({rows, c}, std::move(v)));
  }
  std::vector<Tensor> params, eta;
  for (std::size_t l = 0; l < prev.network.layout.layer_count(); ++l) {
    auto v = prev.network.layer(l);
    params.push_back(Tensor::parameter(prev.network.layout.layers()[l].shape, {v.begin(), v.end()}));
    eta.push_back(Tensor::parameter({1}, {1.0}));
  }

  optim::Adam adam;
  adam.add_group(latents, cfg.latent_lr);
  std::vector<Tensor> net_group, entropy_group;
  for (std::size_t l = 0; l < params.size(); ++l) {
    const bool is_entropy = prev.network.layout.layers()[l].name.starts_with("entropy.");
    (is_entropy ? entropy_group : net_group).push_back(params[l]);
  }
  adam.add_group(net_group, cfg.lr);
  adam.add_group(entropy_group, cfg.entropy_lr);
  if (mode == CodingMode::kPredicted) adam.add_group(eta, cfg.eta_lr);

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    // Cosine decay to 5% so the last iterate, which is what gets coded, settles.
    const double progress = static_cast<double>(it) / static_cast<double>(cfg.iterations);
    adam.set_lr_scale(0.05 + 0.95 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    diff::Tape tape;
    diff::TapeScope scope(tape);
    auto proxies = network_proxies(scfg, mode, prev.network, params, eta, prev.network, &rng);
    Tensor lat_bits = latent_rate(model_from(proxies.weights), latents, &rng);
    Tensor img = render_with(scfg, s, prev, latents, proxies.weights);
    Tensor dist = distortion(img, target, cfg.lambda_ssim);
    Tensor loss = diff::add(dist, diff::scale(diff::add(lat_bits, proxies.network_bits), cfg.lambda / pixels_of(img)));
    if (!finite(loss.item())) throw TrainingError("non-finite loss", it, cfg.lambda);
    if (trace != nullptr) {
      trace->loss.push_back(loss.item());
      trace->latent_bits.push_back(lat_bits.item());
      trace->network_bits.push_back(proxies.network_bits.item());
      trace->distortion.push_back(dist.item());
    }
    tape.backward(loss);
    adam.step();
    if (mode == CodingMode::kRaw) {
      // Raw networks are stored at float32; keep the trained values representable.
      for (auto& p : params)
        for (double& v : p.mutable_values()) v = static_cast<double>(static_cast<float>(v));
    }
  }

  // Rate models at the trained parameters, on rounded and on noisy symbols.
  double est_latent = 0, est_network = 0, noisy_latent = 0, noisy_network = 0;
  {
    diff::Tape tape;
    diff::TapeScope scope(tape);
    auto proxies = network_proxies(scfg, mode, prev.network, params, eta, prev.network, nullptr);
    est_latent = latent_rate(model_from(proxies.weights), latents, nullptr).item();
    est_network = proxies.network_bits.item();
    auto noisy = network_proxies(scfg, mode, prev.network, params, eta, prev.network, &rng);
    noisy_latent = latent_rate(model_from(noisy.weights), latents, &rng).item();
    noisy_network = noisy.network_bits.item();
  }

  NetworkParams trained = prev.network;
  for (std::size_t l = 0; l < params.size(); ++l) {
    auto dst = trained.layer(l);
    std::copy(params[l].values().begin(), params[l].values().end(), dst.begin());
  }
  std::vector<double> eta_values;
  for (const auto& e : eta) eta_values.push_back(e[0]);
  codec::LatentSymbols symbols;
  for (const auto& e : latents) {
    auto q = entropy::quantize_ste(e.detach());
    symbols.emplace_back();
    for (double v : q.values()) symbols.back().push_back(static_cast<std::int32_t>(v));
  }

  TrainedFrame out{codec::encode_frame(scfg, prev, index, eps, symbols, trained, eta_values), {}, latents};
  bitstream::ChunkSizes sizes;
  bitstream::write_chunk(out.encoded.chunk, &sizes);
  auto& rep = out.report;
  rep.index = index;
  rep.type = out.encoded.chunk.type;
  rep.latent_bits_estimated = est_latent;
  rep.latent_bits_noisy = noisy_latent;
  rep.network_bits_noisy = noisy_network;
  rep.latent_bits_actual = 8.0 * static_cast<double>(out.encoded.chunk.latent.payload.size());
  rep.network_bits_estimated = est_network;
  rep.network_bits_actual = 8.0 * static_cast<double>(out.encoded.chunk.network.payload.size());
  rep.latent_bytes = sizes.latent;
  rep.network_bytes = sizes.network;
  rep.chunk_bytes = sizes.total;
  // Scored on the stored float32 image, exactly what a decoder writes out.
  const Tensor decoded = deform::image_tensor(deform::to_image(codec::render_state(scfg, out.encoded.state)));
  rep.psnr = metrics::psnr(decoded, target);
  rep.ssim = metrics::ssim(decoded, target).item();
  rep.identity_psnr =
      metrics::psnr(deform::image_tensor(deform::to_image(codec::render_state(scfg, prev))), target);
  return out;
}

StreamResult run_stream(const scene::SyntheticScene& scene, const RdConfig& cfg) {
  const auto scfg = stream_config(cfg, scene);
  StreamResult res;
  const auto net0 = initial_network(scfg, cfg, scene);
  res.states.push_back(codec::initial_state(scene.frames.at(0), net0));
  const auto initial = bitstream::write_initial_payload(res.states[0].frame, netcodec::encode_raw(res.states[0].network));
  res.report.initial_bytes = initial.size();
  res.report.header_bytes = bitstream::StreamHeader::kSize;
  res.report.initial_psnr = metrics::psnr(deform::image_tensor(deform::to_image(codec::render_state(scfg, res.states[0]))),
                                          deform::image_tensor(scene.images[0]));

  std::vector<bitstream::FrameChunk> chunks;
  std::vector<Tensor> warm;
  for (std::uint32_t t = 1; t < scene.params.frames; ++t) {
    auto trained = train_frame(scfg, cfg, res.states.back(), t, scene.images.at(t), nullptr,
                               cfg.warm_start_latents && !warm.empty() ? &warm : nullptr);
    chunks.push_back(trained.encoded.chunk);
    res.states.push_back(trained.encoded.state);
    res.report.frames.push_back(trained.report);
    warm = std::move(trained.latents);
  }
  const auto header = codec::make_header(scfg, scene.params.frames, scene.params.anchors, initial.size());
  res.bytes = bitstream::write_stream(header, initial, chunks);

  // Decoder-side verification: the stream alone must reproduce every frame.
  auto decoded = decode_stream(res.bytes);
  if (decoded.frames.size() != res.states.size()) throw StreamError("decoder produced a different frame count");
  for (std::size_t t = 0; t < res.states.size(); ++t) {
    const auto& d = decoded.frames[t];
    if (d.flagged || !(d.state.frame == res.states[t].frame) || d.state.network.values != res.states[t].network.values) {
      throw StreamError("decoder state differs from the encoder at frame " + std::to_string(t));
    }
    if (t > 0) {
      const double p = metrics::psnr(deform::image_tensor(d.image), deform::image_tensor(scene.images[t]));
      const double q = res.report.frames[t - 1].psnr;
      if (p != q) throw StreamError("decoded PSNR differs from the encoder at frame " + std::to_string(t));
    }
  }
  return res;
}

DecodedStream decode_stream(std::span<const std::uint8_t> bytes) {
  auto parsed = bitstream::read_stream(bytes);
  DecodedStream out;
  out.header = parsed.header;
  out.config = codec::config_from_header(parsed.header);
  auto [frame0, net0] = bitstream::read_initial_payload(parsed.initial_payload, bitstream::StreamHeader::kSize);
  if (frame0.n != parsed.header.anchors || frame0.m != parsed.header.offsets ||
      frame0.d != parsed.header.feature_dim) {
    throw FormatError("initial frame shape does not match the header", bitstream::StreamHeader::kSize);
  }
  const auto layout = latent::build_layout(out.config.model);
  if (net0.mode != CodingMode::kRaw) throw FormatError("initial network must be stored raw");
  auto params0 = netcodec::decode_network(net0, layout, out.config.bits, nullptr);
  codec::DecoderState state{frame0, params0};
  out.frames.push_back({0, state, deform::to_image(codec::render_state(out.config, state)), false, {}});

  bool broken = false;
  std::uint32_t expected = 1;
  for (auto& rec : parsed.chunks) {
    DecodedFrame f{rec.chunk ? rec.chunk->index : expected, state, {}, false, {}};
    try {
      if (!rec.chunk) throw FormatError(rec.error);
      if (rec.chunk->index != expected) throw FormatError("unexpected frame index", rec.offset + 8);
      const bool resets = rec.chunk->network.mode != CodingMode::kPredicted;
      state = codec::decode_frame(out.config, state, *rec.chunk);
      if (resets) broken = false;
      f.flagged = broken;
    } catch (const std::exception& e) {
      // Conceal: keep the previous state, mark the reference chain broken.
      f.error = e.what();
      state.frame.t = expected;
      broken = true;
      f.flagged = true;
    }
    f.state = state;
    f.image = deform::to_image(codec::render_state(out.config, state));
    out.frames.push_back(std::move(f));
    ++expected;
  }
  if (out.frames.size() != parsed.header.frames) {
    throw FormatError("stream holds " + std::to_string(out.frames.size()) + " frames, header declares " +
                      std::to_string(parsed.header.frames));
  }
  return out;
}

double RateReport::mean_kb() const {
  if (frames.empty()) return 0;
  double s = 0;
  for (const auto& f : frames) s += f.kb();
  return s / static_cast<double>(frames.size());
}

double RateReport::mean_psnr() const {
  if (frames.empty()) return 0;
  double s = 0;
  for (const auto& f : frames) s += f.psnr;
  return s / static_cast<double>(frames.size());
}

double RateReport::mean_ssim() const {
  if (frames.empty()) return 0;
  double s = 0;
  for (const auto& f : frames) s += f.ssim;
  return s / static_cast<double>(frames.size());
}

std::size_t RateReport::coded_bytes() const {
  std::size_t s = 0;
  for (const auto& f : frames) s += f.chunk_bytes;
  return s;
}

std::string RateReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "frame,type,latent_bits_est,latent_bits_noisy,latent_bits_actual,network_bits_est,network_bits_noisy,"
        "network_bits_actual,latent_bytes,"
        "network_bytes,chunk_bytes,kb,psnr,ssim,identity_psnr\n";
  for (const auto& f : frames) {
    os << f.index << ',' << (f.type == netcodec::FrameType::kIntra ? 'I' : 'P') << ',' << f.latent_bits_estimated
       << ',' << f.latent_bits_noisy << ',' << f.latent_bits_actual << ',' << f.network_bits_estimated << ','
       << f.network_bits_noisy << ',' << f.network_bits_actual << ','
       << f.latent_bytes << ',' << f.network_bytes << ',' << f.chunk_bytes << ',' << f.kb() << ',' << f.psnr << ','
       << f.ssim << ',' << f.identity_psnr << '\n';
  }
  return os.str();
}

std::string RateReport::to_json() const {
  nlohmann::json j;
  j["header_bytes"] = header_bytes;
  j["initial_bytes"] = initial_bytes;
  j["initial_psnr"] = std::isfinite(initial_psnr) ? nlohmann::json(initial_psnr) : nlohmann::json("inf");
  j["mean_kb_per_frame"] = mean_kb();
  j["mean_psnr"] = mean_psnr();
  j["mean_ssim"] = mean_ssim();
  j["coded_bytes"] = coded_bytes();
  j["frames"] = nlohmann::json::array();
  for (const auto& f : frames) {
    j["frames"].push_back({{"frame", f.index},
                           {"type", f.type == netcodec::FrameType::kIntra ? "I" : "P"},
                           {"latent_bits_estimated", f.latent_bits_estimated},
                           {"latent_bits_noisy", f.latent_bits_noisy},
                           {"latent_bits_actual", f.latent_bits_actual},
                           {"network_bits_estimated", f.network_bits_estimated},
                           {"network_bits_noisy", f.network_bits_noisy},
                           {"network_bits_actual", f.network_bits_actual},
                           {"latent_bytes", f.latent_bytes},
                           {"network_bytes", f.network_bytes},
                           {"chunk_bytes", f.chunk_bytes},
                           {"kb", f.kb()},
                           {"psnr", f.psnr},
                           {"ssim", f.ssim},
                           {"identity_psnr", f.identity_psnr}});
  }
  return j.dump(2);
}

}  // namespace hpc::trainer
