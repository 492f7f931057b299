#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>

#include "hpc/metrics.hpp"
#include "hpc/scene.hpp"

namespace sc = hpc::scene;

namespace {

sc::SceneParams small() {
  sc::SceneParams p;
  p.anchors = 60;
  p.frames = 3;
  p.height = 32;
  p.width = 32;
  return p;
}

double dist(const std::vector<double>& x, std::size_t i, std::size_t j) {
  double s = 0;
  for (int a = 0; a < 3; ++a) s += (x[3 * i + a] - x[3 * j + a]) * (x[3 * i + a] - x[3 * j + a]);
  return std::sqrt(s);
}

}  // namespace

TEST(Scene, SameSeedSameScene) {
  auto a = sc::generate_scene(small()), b = sc::generate_scene(small());
  ASSERT_EQ(a.frames.size(), 3u);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(a.frames[t], b.frames[t]);
    EXPECT_EQ(a.images[t], b.images[t]);
  }
  auto p = small();
  p.seed = 2;
  EXPECT_NE(sc::generate_scene(p).frames[0], a.frames[0]);
}

TEST(Scene, ClustersMoveRigidly) {
  auto s = sc::generate_scene(small());
  for (std::size_t t = 1; t < s.frames.size(); ++t) {
    for (std::size_t i = 0; i < s.params.anchors; ++i) {
      for (std::size_t j = i + 1; j < s.params.anchors; ++j) {
        if (s.cluster_of[i] != s.cluster_of[j]) continue;
        EXPECT_NEAR(dist(s.frames[t].x, i, j), dist(s.frames[t - 1].x, i, j), 1e-5);
      }
    }
    EXPECT_EQ(s.frames[t].l, s.frames[0].l);
    EXPECT_EQ(s.frames[t].t, t);
  }
}

TEST(Scene, MotionRespectsItsBounds) {
  auto p = small();
  auto s = sc::generate_scene(p);
  ASSERT_EQ(s.motion.size(), p.clusters);
  for (const auto& m : s.motion) {
    EXPECT_LE(std::abs(m.angle), p.max_angle_deg * M_PI / 180.0);
    EXPECT_NEAR(std::hypot(m.axis[0], m.axis[1], m.axis[2]), 1.0, 1e-12);
    EXPECT_LE(std::hypot(m.translation[0], m.translation[1], m.translation[2]), p.max_translation + 1e-12);
  }
}

TEST(Scene, ImagesAreGroundTruthRenders) {
  auto s = sc::generate_scene(small());
  for (std::size_t t = 0; t < s.frames.size(); ++t) EXPECT_EQ(s.images[t], sc::render_ground_truth(s, t));
  // Something is visible and the scene actually changes.
  double lit = 0;
  for (float v : s.images[0].rgb) lit += v;
  EXPECT_GT(lit, 0.0);
  EXPECT_LT(hpc::metrics::psnr(hpc::deform::image_tensor(s.images[0]), hpc::deform::image_tensor(s.images[1])),
            hpc::metrics::kPsnrIdentical);
}

TEST(Scene, FileRoundTrip) {
  auto s = sc::generate_scene(small());
  auto bytes = sc::write_scene(s);
  auto r = sc::read_scene(bytes);
  EXPECT_EQ(r.params, s.params);
  EXPECT_EQ(r.frames.at(0), s.frames[0]);
  EXPECT_EQ(r.decoder0, s.decoder0);
  EXPECT_EQ(r.decoder1, s.decoder1);
  EXPECT_EQ(r.images, s.images);
  EXPECT_EQ(r.camera.extent, s.camera.extent);

  const std::string path = ::testing::TempDir() + "scene_roundtrip.hpsc";
  sc::save_scene(path, s);
  EXPECT_EQ(sc::load_scene(path).images, s.images);
  std::remove(path.c_str());
}

TEST(Scene, RegeneratingFromStoredParamsReproducesTheFile) {
  auto s = sc::generate_scene(small());
  auto r = sc::read_scene(sc::write_scene(s));
  EXPECT_EQ(sc::write_scene(sc::generate_scene(r.params)), sc::write_scene(s));
}

TEST(Scene, CorruptFilesAreRejected) {
  auto bytes = sc::write_scene(sc::generate_scene(small()));
  auto bad = bytes;
  bad[0] = 'X';
  try {
    sc::read_scene(bad);
    FAIL();
  } catch (const hpc::FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, std::size_t{70}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(sc::read_scene(std::span(bytes).first(cut)), hpc::FormatError) << cut;
  }
  bytes.push_back(0);
  EXPECT_THROW(sc::read_scene(bytes), hpc::FormatError);
}

TEST(Scene, RejectsEmptySizes) {
  auto p = small();
  p.anchors = 0;
  EXPECT_THROW(sc::generate_scene(p), std::invalid_argument);
}
