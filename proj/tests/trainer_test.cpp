#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "hpc/metrics.hpp"
#include "hpc/trainer.hpp"

namespace tr = hpc::trainer;
namespace sc = hpc::scene;
namespace nc = hpc::netcodec;

namespace {

sc::SceneParams tiny(std::uint32_t frames = 3) {
  sc::SceneParams p;
  p.anchors = 60;
  p.frames = frames;
  p.height = 32;
  p.width = 32;
  p.max_angle_deg = 8;
  p.max_translation = 0.03;
  return p;
}

tr::RdConfig quick(std::size_t iterations = 40) {
  tr::RdConfig c;
  c.iterations = iterations;
  c.lambda = 0.002;
  return c;
}

double mean(const std::vector<double>& v, std::size_t from, std::size_t to) {
  return std::accumulate(v.begin() + from, v.begin() + to, 0.0) / double(to - from);
}

}  // namespace

TEST(Trainer, StreamsAreDeterministic) {
  auto s = sc::generate_scene(tiny());
  auto a = tr::run_stream(s, quick(15)), b = tr::run_stream(s, quick(15));
  EXPECT_EQ(a.bytes, b.bytes);
  auto cfg = quick(15);
  cfg.seed = 9;
  EXPECT_NE(tr::run_stream(s, cfg).bytes, a.bytes);
}

TEST(Trainer, DecoderReproducesEncoderStates) {
  auto s = sc::generate_scene(tiny(4));
  auto cfg = quick(15);
  cfg.gop = 2;
  auto res = tr::run_stream(s, cfg);
  auto dec = tr::decode_stream(res.bytes);
  ASSERT_EQ(dec.frames.size(), 4u);
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_FALSE(dec.frames[t].flagged);
    EXPECT_EQ(dec.frames[t].state.frame, res.states[t].frame);
    EXPECT_EQ(dec.frames[t].state.network.values, res.states[t].network.values);
  }
  EXPECT_EQ(res.report.frames[1].type, nc::FrameType::kIntra);
  EXPECT_EQ(res.report.frames[0].type, nc::FrameType::kPredicted);
  EXPECT_EQ(res.report.coded_bytes() + res.report.header_bytes + res.report.initial_bytes, res.bytes.size());
}

TEST(Trainer, LossFallsAndTrainingBeatsStandingStill) {
  auto s = sc::generate_scene(tiny(2));
  auto cfg = quick(120);
  auto scfg = tr::stream_config(cfg, s);
  auto prev = hpc::codec::initial_state(s.frames[0], tr::initial_network(scfg, cfg, s));
  tr::TrainTrace trace;
  auto out = tr::train_frame(scfg, cfg, prev, 1, s.images[1], &trace);
  ASSERT_EQ(trace.loss.size(), 120u);
  EXPECT_LT(mean(trace.loss, 100, 120), mean(trace.loss, 0, 20));
  EXPECT_LT(mean(trace.distortion, 100, 120), mean(trace.distortion, 0, 20));
  EXPECT_GT(out.report.psnr, out.report.identity_psnr);
}

TEST(Trainer, StaticSceneStaysSharp) {
  auto p = tiny(2);
  p.max_angle_deg = 0;
  p.max_translation = 0;
  p.feature_drift = 0;
  auto s = sc::generate_scene(p);
  auto res = tr::run_stream(s, quick(30));
  // Standing still already reproduces the target.
  EXPECT_GT(res.report.frames[0].identity_psnr, 100.0);
  EXPECT_GT(res.report.frames[0].psnr, 40.0);
}

TEST(Trainer, LargerLambdaSpendsFewerBits) {
  auto s = sc::generate_scene(tiny(2));
  auto lo = quick(80), hi = quick(80);
  hi.lambda = 0.2;
  auto a = tr::run_stream(s, lo), b = tr::run_stream(s, hi);
  EXPECT_LT(b.report.coded_bytes(), a.report.coded_bytes());
}

TEST(Trainer, ComponentTogglesRun) {
  auto s = sc::generate_scene(tiny(3));
  for (int variant = 0; variant < 3; ++variant) {
    auto cfg = quick(10);
    cfg.ila = variant != 0;
    cfg.cla = variant != 1;
    cfg.nnc = variant != 2;
    auto res = tr::run_stream(s, cfg);
    auto dec = tr::decode_stream(res.bytes);
    EXPECT_EQ(dec.config.model.use_ila, cfg.ila);
    EXPECT_EQ(dec.config.model.use_cla, cfg.cla);
    EXPECT_EQ(dec.config.raw_networks, !cfg.nnc);
    EXPECT_EQ(dec.frames.back().state.frame, res.states.back().frame);
    if (!cfg.nnc) {
      const double params = double(res.states[0].network.values.size());
      EXPECT_EQ(res.report.frames[0].network_bits_actual, 32.0 * params);
    }
  }
}

TEST(Trainer, ReportsAgreeWithThePayloads) {
  auto s = sc::generate_scene(tiny(2));
  auto res = tr::run_stream(s, quick(20));
  const auto& f = res.report.frames.at(0);
  EXPECT_GT(f.network_bits_actual, 0.0);
  EXPECT_LE(f.latent_bytes + f.network_bytes, f.chunk_bytes);
  EXPECT_NE(res.report.to_csv().find("frame,type"), std::string::npos);
  EXPECT_NE(res.report.to_json().find("\"mean_psnr\""), std::string::npos);
}

TEST(Trainer, RejectsBadSettings) {
  auto s = sc::generate_scene(tiny(2));
  auto cfg = quick(1);
  cfg.bits = 7;
  EXPECT_THROW(tr::stream_config(cfg, s), std::invalid_argument);
  cfg = quick(1);
  cfg.gop = 0;
  EXPECT_THROW(tr::stream_config(cfg, s), std::invalid_argument);
  cfg = quick(1);
  cfg.lambda = -1;
  EXPECT_THROW(tr::stream_config(cfg, s), std::invalid_argument);
}

TEST(Trainer, CorruptPFrameIsConcealedUntilTheNextIFrame) {
  auto s = sc::generate_scene(tiny(6));
  auto cfg = quick(10);
  cfg.gop = 3;  // frame 3 is intra; 1, 2, 4, 5 predicted
  auto res = tr::run_stream(s, cfg);
  auto clean = tr::decode_stream(res.bytes);
  // Flip one byte inside the body of frame 1's chunk.
  auto bytes = res.bytes;
  const std::size_t chunk1 = res.report.header_bytes + res.report.initial_bytes;
  bytes[chunk1 + 8 + res.report.frames[0].chunk_bytes / 2] ^= 0x40;
  auto dec = tr::decode_stream(bytes);
  ASSERT_EQ(dec.frames.size(), 6u);
  EXPECT_FALSE(dec.frames[0].flagged);
  EXPECT_TRUE(dec.frames[1].flagged);
  EXPECT_FALSE(dec.frames[1].error.empty());
  EXPECT_TRUE(dec.frames[2].flagged);
  for (std::size_t t = 3; t < 6; ++t) {
    EXPECT_FALSE(dec.frames[t].flagged) << t;
    EXPECT_TRUE(dec.frames[t].error.empty()) << dec.frames[t].error;
    EXPECT_EQ(dec.frames[t].state.network.values, clean.frames[t].state.network.values) << t;
  }
}
