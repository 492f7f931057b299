#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <random>

#include "hpc/deformation.hpp"
#include "hpc/ops.hpp"
#include "support/gradcheck.hpp"

namespace df = hpc::deform;
namespace l = hpc::latent;
namespace d = hpc::diff;
using d::Tensor;

namespace {

df::Frame random_frame(std::size_t n, std::size_t m, std::size_t dim, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(-1, 1);
  df::Frame f;
  f.n = n;
  f.m = m;
  f.d = dim;
  for (std::size_t i = 0; i < 3 * n; ++i) f.x.push_back(uni(rng));
  for (std::size_t i = 0; i < 3 * n * m; ++i) f.o.push_back(uni(rng));
  for (std::size_t i = 0; i < n * dim; ++i) f.f.push_back(uni(rng));
  for (std::size_t i = 0; i < 3 * n; ++i) f.l.push_back(0.05);
  f.round_to_float();
  return f;
}

Tensor random_tensor(d::Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> uni(lo, hi);
  std::vector<double> v(d::shape_size(shape));
  for (double& x : v) x = uni(rng);
  return Tensor::constant(std::move(shape), std::move(v));
}

l::DeformationField zero_field(std::size_t n, std::size_t m, std::size_t dim) {
  l::DeformationField z;
  z.feature_residual = Tensor::zeros({n, dim});
  z.translation = Tensor::zeros({n, 3});
  std::vector<double> q(4 * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) q[4 * i] = 1.0;
  z.rotation = Tensor::constant({n, 4}, q);
  z.offset_residual = Tensor::zeros({n, m * 3});
  return z;
}

Tensor pixel(const Tensor& img, std::size_t i, std::size_t j, std::size_t c) {
  return Tensor::scalar(img[(i * img.dim(1) + j) * 3 + c]);
}

double px(const Tensor& img, std::size_t i, std::size_t j, std::size_t c) { return pixel(img, i, j, c).item(); }

// One splat with isotropic covariance v at (x, y, z).
struct Splat {
  double x, y, z, v, op, r, g, b;
};

Tensor render_splats(const std::vector<Splat>& s, std::size_t size, const df::Camera& cam = {}) {
  std::vector<double> mean, cov, col, op;
  for (const auto& p : s) {
    mean.insert(mean.end(), {p.x, p.y, p.z});
    cov.insert(cov.end(), {p.v, 0.0, p.v});
    col.insert(col.end(), {p.r, p.g, p.b});
    op.push_back(p.op);
  }
  const std::size_t g = s.size();
  return df::rasterize(Tensor::constant({g, 3}, mean), Tensor::constant({g, 3}, cov), Tensor::constant({g, 3}, col),
                       Tensor::constant({g, 1}, op), cam, size, size);
}

}  // namespace

TEST(Deformation, IdentityFieldLeavesFrameBitExact) {
  std::mt19937_64 rng(1);
  auto f = random_frame(20, 3, 4, rng);
  auto out = df::materialize(f, df::apply_deformation(f, zero_field(20, 3, 4)), 1);
  EXPECT_EQ(out.x, f.x);
  EXPECT_EQ(out.o, f.o);
  EXPECT_EQ(out.f, f.f);
  EXPECT_EQ(out.l, f.l);
  EXPECT_EQ(out.t, 1u);
}

TEST(Deformation, UnitTranslationMovesOnlyPositions) {
  std::mt19937_64 rng(2);
  auto f = random_frame(5, 2, 3, rng);
  auto field = zero_field(5, 2, 3);
  field.translation = Tensor::constant({5, 3}, std::vector<double>(15, 1.0));
  auto out = df::materialize(f, df::apply_deformation(f, field), 1);
  for (std::size_t i = 0; i < 15; ++i) EXPECT_EQ(out.x[i], static_cast<double>(static_cast<float>(f.x[i] + 1.0)));
  EXPECT_EQ(out.o, f.o);
  EXPECT_EQ(out.f, f.f);
}

TEST(Deformation, MaterializeRoundsToFloat) {
  df::Frame f;
  f.n = 1;
  f.m = 1;
  f.d = 1;
  f.x = {0, 0, 0};
  f.o = {0, 0, 0};
  f.f = {0};
  f.l = {1, 1, 1};
  df::FrameTensors t{Tensor::constant({1, 3}, {0.1, 0.2, 0.3}), Tensor::constant({1, 3}, {1.0 / 3, 0, 0}),
                     Tensor::constant({1, 1}, {M_PI})};
  auto out = df::materialize(f, t, 7);
  EXPECT_EQ(out.x[0], static_cast<double>(0.1f));
  EXPECT_EQ(out.o[0], static_cast<double>(1.0f / 3));
  EXPECT_EQ(out.f[0], static_cast<double>(static_cast<float>(M_PI)));
}

TEST(Deformation, QuarterTurnAboutZ) {
  const double h = std::sqrt(0.5);
  Tensor q = Tensor::constant({1, 4}, {h, 0, 0, h});
  Tensor v = Tensor::constant({1, 6}, {1, 0, 0, 0, 1, 2});
  Tensor r = df::quat_rotate(q, v);
  const double want[] = {0, 1, 0, -1, 0, 2};
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(r[static_cast<std::size_t>(i)], want[i], 1e-15);
}

TEST(Deformation, RotationPreservesNorms) {
  std::mt19937_64 rng(3);
  Tensor q = l::quat_normalize(random_tensor({50, 4}, rng, -1, 1));
  Tensor v = random_tensor({50, 12}, rng, -2, 2);
  Tensor r = df::quat_rotate(q, v);
  for (std::size_t k = 0; k < 200; ++k) {
    double a = 0, b = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      a += v[3 * k + c] * v[3 * k + c];
      b += r[3 * k + c] * r[3 * k + c];
    }
    EXPECT_NEAR(a, b, 1e-12);
  }
}

TEST(Deformation, GaussianMeansFollowScaledOffsets) {
  df::FrameTensors t{Tensor::constant({1, 3}, {1, 2, 3}), Tensor::constant({1, 6}, {1, 0, -1, 2, 2, 2}),
                     Tensor::constant({1, 2}, {0.3, -0.1})};
  std::vector<double> lv = {0.5, 0.25, 2.0};
  Tensor dec0 = Tensor::zeros({3, 4});
  Tensor dec1 = Tensor::zeros({5, 22});
  auto g = df::decode_attributes(t, lv, 2, dec0, dec1);
  ASSERT_EQ(g.count(), 2u);
  const double want[] = {1.5, 2.0, 1.0, 2.0, 2.5, 7.0};
  for (int i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(g.mean[static_cast<std::size_t>(i)], want[i]);
  // Zero decoder: neutral attributes.
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(g.color[i], 0.5);
  EXPECT_DOUBLE_EQ(g.opacity[0], 0.5);
  EXPECT_DOUBLE_EQ(g.scale[0], 0.5);
  EXPECT_DOUBLE_EQ(g.scale[2], 2.0);
  EXPECT_DOUBLE_EQ(g.rotation[0], 1.0);
  EXPECT_DOUBLE_EQ(g.rotation[5], 0.0);
}

TEST(Deformation, ScalesStayWithinTwoNatsOfAnchorScale) {
  std::mt19937_64 rng(4);
  df::FrameTensors t{random_tensor({4, 3}, rng, 0, 1), random_tensor({4, 6}, rng, -1, 1),
                     random_tensor({4, 3}, rng, -3, 3)};
  std::vector<double> lv(12, 0.1);
  auto g = df::decode_attributes(t, lv, 2, random_tensor({4, 8}, rng, -3, 3), random_tensor({9, 22}, rng, -3, 3));
  for (std::size_t i = 0; i < g.scale.size(); ++i) {
    EXPECT_GE(g.scale[i], 0.1 * std::exp(-2.0) * (1 - 1e-12));
    EXPECT_LE(g.scale[i], 0.1 * std::exp(2.0) * (1 + 1e-12));
  }
}

TEST(Deformation, ProjectedCovarianceOfAxisAlignedSplat) {
  Tensor q = Tensor::constant({1, 4}, {1, 0, 0, 0});
  Tensor s = Tensor::constant({1, 3}, {0.2, 0.1, 5.0});
  Tensor c = df::projected_cov2d(q, s, 0.01);
  EXPECT_NEAR(c[0], 0.05, 1e-15);
  EXPECT_NEAR(c[1], 0.0, 1e-15);
  EXPECT_NEAR(c[2], 0.02, 1e-15);
  // A quarter turn about z swaps the in-plane axes.
  const double h = std::sqrt(0.5);
  c = df::projected_cov2d(Tensor::constant({1, 4}, {h, 0, 0, h}), s, 0.0);
  EXPECT_NEAR(c[0], 0.01, 1e-15);
  EXPECT_NEAR(c[2], 0.04, 1e-15);
}

TEST(Render, NoGaussiansGivesBlack) {
  Tensor img = df::rasterize(Tensor(), Tensor(), Tensor(), Tensor(), {}, 4, 5);
  ASSERT_EQ(img.size(), 60u);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(img[i], 0.0);
}

TEST(Render, SingleSplatPeakAndFalloff) {
  // 8x8 over the unit square: pixel centres at (j + 0.5) / 8.
  const double cx = 4.5 / 8, cy = 2.5 / 8, v = 0.004;
  Tensor img = render_splats({{cx, cy, 0, v, 0.6, 1, 0.5, 0}}, 8);
  EXPECT_NEAR(px(img, 2, 4, 0), 0.6, 1e-12);
  EXPECT_NEAR(px(img, 2, 4, 1), 0.3, 1e-12);
  EXPECT_EQ(px(img, 2, 4, 2), 0.0);
  const double step = 1.0 / 8;
  EXPECT_NEAR(px(img, 2, 5, 0), 0.6 * std::exp(-0.5 * step * step / v), 1e-12);
  EXPECT_NEAR(px(img, 3, 5, 0), 0.6 * std::exp(-step * step / v), 1e-12);
  // Beyond three standard deviations nothing is drawn.
  EXPECT_EQ(px(img, 2, 7, 0), 0.0);
}

TEST(Render, NearSplatOccludesFarSplat) {
  const double c = 2.5 / 4;
  // Listed far first: depth order, not input order, decides.
  Tensor img = render_splats({{c, c, 2.0, 1.0, 0.9, 0, 0, 1}, {c, c, 1.0, 1.0, 1.0, 1, 0, 0}}, 4);
  EXPECT_NEAR(px(img, 2, 2, 0), df::kMaxAlpha, 1e-12);
  EXPECT_NEAR(px(img, 2, 2, 2), (1 - df::kMaxAlpha) * 0.9, 1e-12);
}

TEST(Render, WhiteSplatsNeverExceedOne) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> uni(0, 1);
  std::vector<Splat> s;
  for (int i = 0; i < 30; ++i) s.push_back({uni(rng), uni(rng), uni(rng), 0.01 + 0.02 * uni(rng), uni(rng), 1, 1, 1});
  Tensor img = render_splats(s, 16);
  for (std::size_t i = 0; i < 16; ++i) {
    for (std::size_t j = 0; j < 16; ++j) {
      // Closed form: 1 - prod(1 - a_k) over every splat covering the pixel.
      double t = 1.0;
      const double x = (j + 0.5) / 16, y = (i + 0.5) / 16;
      for (const auto& p : s) {
        const double m2 = ((x - p.x) * (x - p.x) + (y - p.y) * (y - p.y)) / p.v;
        if (m2 <= 9) t *= 1 - std::min(df::kMaxAlpha, p.op * std::exp(-0.5 * m2));
      }
      EXPECT_NEAR(px(img, i, j, 0), 1 - t, 1e-12);
      EXPECT_LE(px(img, i, j, 0), 1.0);
    }
  }
}

TEST(Render, DeterministicAcrossCalls) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> uni(0, 1);
  std::vector<Splat> s;
  for (int i = 0; i < 40; ++i) s.push_back({uni(rng), uni(rng), 0.5, 0.005, 0.7, uni(rng), uni(rng), uni(rng)});
  auto a = df::to_image(render_splats(s, 12));
  auto b = df::to_image(render_splats(s, 12));
  EXPECT_EQ(a, b);
}

TEST(Render, CameraWindowShiftsImage) {
  df::Camera cam;
  cam.cx = 10.5;
  cam.cy = -3.5;
  Tensor a = render_splats({{0.5 + 0.5 / 8, 0.5 + 0.5 / 8, 0, 0.003, 0.5, 1, 1, 1}}, 8);
  Tensor b = render_splats({{10.5 + 0.5 / 8, -3.5 + 0.5 / 8, 0, 0.003, 0.5, 1, 1, 1}}, 8, cam);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

TEST(Render, PpmRoundsHalfUp) {
  df::Image img{1, 2, {0.0f, 1.0f, 127.5f / 255.0f, 0.2f, 2.0f, -1.0f}};
  const std::string path = ::testing::TempDir() + "render_test.ppm";
  df::write_ppm(path, img);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = "P6\n2 1\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  const unsigned char want[] = {0, 255, 128, 51, 255, 0};
  for (int i = 0; i < 6; ++i) EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + static_cast<std::size_t>(i)]), want[i]);
  std::remove(path.c_str());
}

TEST(RenderGradients, QuatRotate) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    auto r = hpc::testing::gradcheck([](const std::vector<Tensor>& in) { return df::quat_rotate(in[0], in[1]); },
                                     {random_tensor({2, 4}, rng, -1, 1), random_tensor({2, 6}, rng, -1, 1)}, seed);
    ASSERT_LT(r.max_rel_error, 1e-6) << "seed " << seed;
  }
}

TEST(RenderGradients, ProjectedCovariance) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    auto r = hpc::testing::gradcheck(
        [](const std::vector<Tensor>& in) { return df::projected_cov2d(in[0], in[1], 0.01); },
        {random_tensor({2, 4}, rng, -1, 1), random_tensor({2, 3}, rng, 0.01, 1)}, seed);
    ASSERT_LT(r.max_rel_error, 1e-6) << "seed " << seed;
  }
}

// The 3-sigma cutoff makes the image discontinuous where a pixel centre sits
// on a footprint's edge; finite differences are meaningless there, so draws
// with any pixel that close to the edge are redrawn.
bool near_cutoff(const std::vector<double>& mean, const std::vector<double>& cov, std::size_t size) {
  for (std::size_t g = 0; g < cov.size() / 3; ++g) {
    const double a = cov[3 * g], b = cov[3 * g + 1], c = cov[3 * g + 2], det = a * c - b * b;
    for (std::size_t i = 0; i < size; ++i) {
      for (std::size_t j = 0; j < size; ++j) {
        const double dx = (j + 0.5) / size - mean[3 * g], dy = (i + 0.5) / size - mean[3 * g + 1];
        const double m2 = (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det;
        if (std::abs(m2 - 9.0) < 0.05) return true;
      }
    }
  }
  return false;
}

TEST(RenderGradients, Rasterize) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> uni(0, 1);
  int checked = 0;
  for (std::uint64_t draw = 0; checked < 100; ++draw) {
    const std::size_t g = 4;
    std::vector<double> cov, mean;
    for (std::size_t i = 0; i < g; ++i) {
      const double a = 0.005 + 0.03 * uni(rng), c = 0.005 + 0.03 * uni(rng);
      cov.insert(cov.end(), {a, (uni(rng) - 0.5) * std::sqrt(a * c), c});
    }
    for (std::size_t i = 0; i < 3 * g; ++i) mean.push_back(0.1 + 0.8 * uni(rng));
    Tensor colors = random_tensor({g, 3}, rng, 0, 1);
    Tensor opacity = random_tensor({g, 1}, rng, 0.1, 0.9);
    if (near_cutoff(mean, cov, 6)) continue;
    auto r = hpc::testing::gradcheck(
        [](const std::vector<Tensor>& in) { return df::rasterize(in[0], in[1], in[2], in[3], {}, 6, 6); },
        {Tensor::constant({g, 3}, mean), Tensor::constant({g, 3}, cov), colors, opacity}, draw);
    ASSERT_LT(r.max_rel_error, 1e-3) << "draw " << draw;
    ++checked;
  }
}

TEST(RenderGradients, FeaturesThroughDecoderAndRenderer) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor x = random_tensor({3, 3}, rng, 0.3, 0.7);
    Tensor o = random_tensor({3, 6}, rng, -1, 1);
    Tensor dec0 = random_tensor({3, 4}, rng, -1, 1);
    Tensor dec1 = random_tensor({5, 22}, rng, -1, 1);
    std::vector<double> lv(9, 0.08);
    auto r = hpc::testing::gradcheck(
        [&](const std::vector<Tensor>& in) {
          df::FrameTensors t{in[1], o, in[0]};
          return df::render_ortho(df::decode_attributes(t, lv, 2, dec0, dec1), {}, 6, 6);
        },
        {random_tensor({3, 2}, rng, -1, 1), x}, seed);
    ASSERT_LT(r.max_rel_error, 1e-3) << "seed " << seed;
  }
}
