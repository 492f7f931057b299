#include "hpc/deformation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>
#include <stdexcept>

#include "hpc/ops.hpp"

namespace hpc::deform {

using diff::DimensionError;

std::vector<hierarchy::Point3> Frame::anchors() const {
  std::vector<hierarchy::Point3> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = {x[3 * i], x[3 * i + 1], x[3 * i + 2]};
  return p;
}

void Frame::round_to_float() {
  for (auto* v : {&x, &o, &f, &l}) {
    for (double& e : *v) e = static_cast<double>(static_cast<float>(e));
  }
}

FrameTensors frame_tensors(const Frame& frame) {
  return {Tensor::constant({frame.n, 3}, frame.x), Tensor::constant({frame.n, frame.m * 3}, frame.o),
          Tensor::constant({frame.n, frame.d}, frame.f)};
}

Frame materialize(const Frame& prev, const FrameTensors& t, std::uint32_t index) {
  Frame out = prev;
  out.x.assign(t.x.values().begin(), t.x.values().end());
  out.o.assign(t.o.values().begin(), t.o.values().end());
  out.f.assign(t.f.values().begin(), t.f.values().end());
  out.t = index;
  out.round_to_float();
  out.l = prev.l;
  return out;
}

namespace {

// Rotation matrix of a quaternion (w, x, y, z) as a polynomial, and its
// Jacobian J[i][k] = dR_i / dq_k with R flattened row-major.
void rotation_of(const double* q, double* r, double (*jac)[4]) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  r[0] = 1 - 2 * (y * y + z * z);
  r[1] = 2 * (x * y - w * z);
  r[2] = 2 * (x * z + w * y);
  r[3] = 2 * (x * y + w * z);
  r[4] = 1 - 2 * (x * x + z * z);
  r[5] = 2 * (y * z - w * x);
  r[6] = 2 * (x * z - w * y);
  r[7] = 2 * (y * z + w * x);
  r[8] = 1 - 2 * (x * x + y * y);
  if (jac == nullptr) return;
  const double j[9][4] = {
      {0, 0, -4 * y, -4 * z},        {-2 * z, 2 * y, 2 * x, -2 * w}, {2 * y, 2 * z, 2 * w, 2 * x},
      {2 * z, 2 * y, 2 * x, 2 * w},  {0, -4 * x, 0, -4 * z},         {-2 * x, -2 * w, 2 * z, 2 * y},
      {-2 * y, 2 * z, -2 * w, 2 * x}, {2 * x, 2 * w, 2 * z, 2 * y},  {0, -4 * x, -4 * y, 0},
  };
  for (int i = 0; i < 9; ++i)
    for (int k = 0; k < 4; ++k) jac[i][k] = j[i][k];
}

}  // namespace

Tensor quat_rotate(const Tensor& q, const Tensor& v) {
  if (q.rank() != 2 || q.dim(1) != 4 || v.rank() != 2 || v.dim(0) != q.dim(0) || v.dim(1) % 3 != 0) {
    throw DimensionError("quat_rotate expects q [n, 4] and v [n, 3m]");
  }
  const std::size_t n = q.dim(0), m = v.dim(1) / 3;
  std::vector<double> y(v.size());
  auto qv = q.values();
  auto vv = v.values();
  for (std::size_t i = 0; i < n; ++i) {
    double r[9];
    rotation_of(qv.data() + 4 * i, r, nullptr);
    for (std::size_t k = 0; k < m; ++k) {
      const double* src = vv.data() + (i * m + k) * 3;
      double* dst = y.data() + (i * m + k) * 3;
      for (int a = 0; a < 3; ++a) dst[a] = r[3 * a] * src[0] + r[3 * a + 1] * src[1] + r[3 * a + 2] * src[2];
    }
  }
  return diff::make_result({n, 3 * m}, std::move(y), {q, v}, [q, v, n, m](std::span<const double> g) {
    auto qv = q.values();
    auto vv = v.values();
    for (std::size_t i = 0; i < n; ++i) {
      double r[9], jac[9][4];
      rotation_of(qv.data() + 4 * i, r, jac);
      double gq[4] = {0, 0, 0, 0};
      for (std::size_t k = 0; k < m; ++k) {
        const double* src = vv.data() + (i * m + k) * 3;
        const double* gy = g.data() + (i * m + k) * 3;
        if (v.requires_grad()) {
          auto gv = v.grad_buffer();
          for (int b = 0; b < 3; ++b) gv[(i * m + k) * 3 + static_cast<std::size_t>(b)] += r[b] * gy[0] + r[3 + b] * gy[1] + r[6 + b] * gy[2];
        }
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b)
            for (int c = 0; c < 4; ++c) gq[c] += gy[a] * src[b] * jac[3 * a + b][c];
      }
      if (q.requires_grad()) {
        auto gqb = q.grad_buffer();
        for (int c = 0; c < 4; ++c) gqb[4 * i + static_cast<std::size_t>(c)] += gq[c];
      }
    }
  });
}

FrameTensors apply_deformation(const Frame& prev, const latent::DeformationField& d) {
  FrameTensors base = frame_tensors(prev);
  FrameTensors out;
  out.x = diff::add(base.x, d.translation);
  out.f = diff::add(base.f, d.feature_residual);
  out.o = quat_rotate(d.rotation, diff::add(base.o, d.offset_residual));
  return out;
}

Gaussians decode_attributes(const FrameTensors& frame, const std::vector<double>& l, std::size_t m,
                            const Tensor& decoder0, const Tensor& decoder1) {
  const std::size_t n = frame.x.dim(0), count = n * m;
  Tensor raw = diff::reshape(latent::mlp2(frame.f, decoder0, decoder1), {count, latent::kAttributesPerOffset});
  std::vector<std::uint32_t> owner(count);
  std::vector<double> lg(count * 3);
  for (std::size_t g = 0; g < count; ++g) {
    owner[g] = static_cast<std::uint32_t>(g / m);
    for (int a = 0; a < 3; ++a) lg[3 * g + static_cast<std::size_t>(a)] = l[3 * (g / m) + static_cast<std::size_t>(a)];
  }
  Tensor l_per = Tensor::constant({count, 3}, std::move(lg));
  Gaussians out;
  out.color = diff::sigmoid(diff::slice_cols(raw, 0, 3));
  out.opacity = diff::sigmoid(diff::slice_cols(raw, 3, 1));
  out.scale = diff::mul(l_per, diff::exp(diff::scale(diff::tanh(diff::slice_cols(raw, 4, 3)), 2.0)));
  std::vector<double> identity(count * 4, 0.0);
  for (std::size_t g = 0; g < count; ++g) identity[4 * g] = 1.0;
  out.rotation = latent::quat_normalize(diff::add_constant(diff::slice_cols(raw, 7, 4), identity));
  Tensor offsets = diff::reshape(frame.o, {count, 3});
  out.mean = diff::add(diff::gather_rows(frame.x, owner), diff::mul(offsets, l_per));
  return out;
}

Tensor projected_cov2d(const Tensor& rotation, const Tensor& scale, double dilation) {
  if (rotation.rank() != 2 || rotation.dim(1) != 4 || scale.rank() != 2 || scale.dim(1) != 3 ||
      scale.dim(0) != rotation.dim(0)) {
    throw DimensionError("projected_cov2d expects rotation [G, 4] and scale [G, 3]");
  }
  const std::size_t count = rotation.dim(0);
  auto qv = rotation.values();
  auto sv = scale.values();
  std::vector<double> y(count * 3);
  for (std::size_t g = 0; g < count; ++g) {
    double r[9];
    rotation_of(qv.data() + 4 * g, r, nullptr);
    double xx = dilation, xy = 0, yy = dilation;
    for (int k = 0; k < 3; ++k) {
      const double s = std::max(sv[3 * g + static_cast<std::size_t>(k)], kMinScale);
      const double s2 = s * s;
      xx += r[k] * r[k] * s2;
      xy += r[k] * r[3 + k] * s2;
      yy += r[3 + k] * r[3 + k] * s2;
    }
    y[3 * g] = xx;
    y[3 * g + 1] = xy;
    y[3 * g + 2] = yy;
  }
  return diff::make_result({count, 3}, std::move(y), {rotation, scale}, [rotation, scale, count](std::span<const double> gr) {
    auto qv = rotation.values();
    auto sv = scale.values();
    for (std::size_t g = 0; g < count; ++g) {
      double r[9], jac[9][4];
      rotation_of(qv.data() + 4 * g, r, jac);
      const double gxx = gr[3 * g], gxy = gr[3 * g + 1], gyy = gr[3 * g + 2];
      double gR[6] = {0, 0, 0, 0, 0, 0};  // rows 0 and 1 of R
      for (int k = 0; k < 3; ++k) {
        const double raw_s = sv[3 * g + static_cast<std::size_t>(k)];
        const bool clamped = raw_s < kMinScale;
        const double s = clamped ? kMinScale : raw_s;
        const double s2 = s * s;
        const double r0 = r[k], r1 = r[3 + k];
        gR[k] += (2 * gxx * r0 + gxy * r1) * s2;
        gR[3 + k] += (2 * gyy * r1 + gxy * r0) * s2;
        if (!clamped && scale.requires_grad()) {
          scale.grad_buffer()[3 * g + static_cast<std::size_t>(k)] += 2 * s * (gxx * r0 * r0 + gxy * r0 * r1 + gyy * r1 * r1);
        }
      }
      if (rotation.requires_grad()) {
        auto gq = rotation.grad_buffer();
        for (int i = 0; i < 6; ++i)
          for (int c = 0; c < 4; ++c) gq[4 * g + static_cast<std::size_t>(c)] += gR[i] * jac[i][c];
      }
    }
  });
}

namespace {

struct Splat {
  double mx, my;        // projected mean
  double ca, cb, cc;    // conic (inverse covariance)
  double det;
  bool valid;
};

struct RasterPlan {
  std::size_t height, width;
  double x0, y0, pixel;
  std::vector<Splat> splats;
  std::vector<std::uint32_t> order;       // front to back
  std::vector<std::uint32_t> pixel_start;  // CSR over pixels
  std::vector<std::uint32_t> pixel_items;
};

double pixel_x(const RasterPlan& p, std::size_t j) { return p.x0 + (static_cast<double>(j) + 0.5) * p.pixel; }
double pixel_y(const RasterPlan& p, std::size_t i) { return p.y0 + (static_cast<double>(i) + 0.5) * p.pixel; }

std::shared_ptr<RasterPlan> plan_raster(std::span<const double> mean, std::span<const double> cov, std::size_t count,
                                        const Camera& camera, std::size_t height, std::size_t width) {
  auto plan = std::make_shared<RasterPlan>();
  plan->height = height;
  plan->width = width;
  plan->pixel = camera.pixel_size(width);
  plan->x0 = camera.cx - 0.5 * camera.extent;
  plan->y0 = camera.cy - 0.5 * plan->pixel * static_cast<double>(height);
  plan->splats.resize(count);
  plan->order.resize(count);
  std::iota(plan->order.begin(), plan->order.end(), 0u);
  std::stable_sort(plan->order.begin(), plan->order.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return mean[3 * a + 2] < mean[3 * b + 2]; });
  std::vector<std::array<std::size_t, 4>> box(count);  // j0, j1, i0, i1 inclusive-exclusive
  for (std::size_t g = 0; g < count; ++g) {
    Splat& s = plan->splats[g];
    const double a = cov[3 * g], b = cov[3 * g + 1], c = cov[3 * g + 2];
    s.mx = mean[3 * g];
    s.my = mean[3 * g + 1];
    s.det = a * c - b * b;
    s.valid = s.det > 0 && std::isfinite(s.det);
    box[g] = {0, 0, 0, 0};
    if (!s.valid) continue;
    s.ca = c / s.det;
    s.cb = -b / s.det;
    s.cc = a / s.det;
    const double mid = 0.5 * (a + c);
    const double lmax = mid + std::sqrt(std::max(0.0, mid * mid - s.det));
    const double radius = kCutoffSigma * std::sqrt(lmax);
    auto span_of = [&](double lo, double hi, double origin, std::size_t limit) -> std::pair<std::size_t, std::size_t> {
      const double f0 = std::ceil((lo - origin) / plan->pixel - 0.5);
      const double f1 = std::floor((hi - origin) / plan->pixel - 0.5);
      if (f1 < 0 || f0 > static_cast<double>(limit) - 1 || f0 > f1) return {0, 0};
      return {static_cast<std::size_t>(std::max(0.0, f0)),
              static_cast<std::size_t>(std::min(static_cast<double>(limit) - 1, f1)) + 1};
    };
    auto [j0, j1] = span_of(s.mx - radius, s.mx + radius, plan->x0, width);
    auto [i0, i1] = span_of(s.my - radius, s.my + radius, plan->y0, height);
    box[g] = {j0, j1, i0, i1};
  }
  std::vector<std::uint32_t> counts(height * width + 1, 0);
  for (auto g : plan->order) {
    for (std::size_t i = box[g][2]; i < box[g][3]; ++i)
      for (std::size_t j = box[g][0]; j < box[g][1]; ++j) ++counts[i * width + j + 1];
  }
  for (std::size_t p = 1; p < counts.size(); ++p) counts[p] += counts[p - 1];
  plan->pixel_start = counts;
  plan->pixel_items.resize(counts.back());
  std::vector<std::uint32_t> fill(counts.begin(), counts.end() - 1);
  for (auto g : plan->order) {
    for (std::size_t i = box[g][2]; i < box[g][3]; ++i)
      for (std::size_t j = box[g][0]; j < box[g][1]; ++j) plan->pixel_items[fill[i * width + j]++] = g;
  }
  return plan;
}

// Mahalanobis distance squared of a pixel centre to a splat; negative when the
// pixel lies outside the cutoff ellipse.
double footprint(const Splat& s, double px, double py, double& dx, double& dy) {
  dx = px - s.mx;
  dy = py - s.my;
  return s.ca * dx * dx + 2 * s.cb * dx * dy + s.cc * dy * dy;
}

}  // namespace

Tensor rasterize(const Tensor& mean, const Tensor& cov2d, const Tensor& color, const Tensor& opacity,
                 const Camera& camera, std::size_t height, std::size_t width) {
  const std::size_t count = mean.defined() ? mean.dim(0) : 0;
  if (count == 0) return Tensor::zeros({height, width, 3});
  if (mean.dim(1) != 3 || cov2d.dim(0) != count || cov2d.dim(1) != 3 || color.dim(0) != count ||
      color.dim(1) != 3 || opacity.size() != count) {
    throw DimensionError("rasterize: inconsistent Gaussian attribute shapes");
  }
  auto plan = plan_raster(mean.values(), cov2d.values(), count, camera, height, width);
  auto cv = color.values();
  auto ov = opacity.values();
  const double cutoff = kCutoffSigma * kCutoffSigma;
  std::vector<double> img(height * width * 3, 0.0);
  for (std::size_t i = 0; i < height; ++i) {
    const double py = pixel_y(*plan, i);
    for (std::size_t j = 0; j < width; ++j) {
      const double px = pixel_x(*plan, j);
      const std::size_t p = i * width + j;
      double trans = 1.0;
      double acc[3] = {0, 0, 0};
      for (std::uint32_t e = plan->pixel_start[p]; e < plan->pixel_start[p + 1]; ++e) {
        const std::uint32_t g = plan->pixel_items[e];
        double dx, dy;
        const double m2 = footprint(plan->splats[g], px, py, dx, dy);
        if (m2 > cutoff) continue;
        const double a = std::min(kMaxAlpha, ov[g] * std::exp(-0.5 * m2));
        for (int c = 0; c < 3; ++c) acc[c] += trans * a * cv[3 * g + static_cast<std::size_t>(c)];
        trans *= 1.0 - a;
      }
      for (int c = 0; c < 3; ++c) img[3 * p + static_cast<std::size_t>(c)] = std::clamp(acc[c], 0.0, 1.0);
    }
  }
  return diff::make_result_y(
      {height, width, 3}, std::move(img), {mean, cov2d, color, opacity},
      [mean, cov2d, color, opacity, plan, cutoff](std::span<const double> g, std::span<const double> out) {
        auto cv = color.values();
        auto ov = opacity.values();
        const std::size_t count = plan->splats.size();
        std::vector<double> gmean(count * 2, 0.0), gconic(count * 3, 0.0), gcolor(count * 3, 0.0), gop(count, 0.0);
        struct Hit {
          std::uint32_t g;
          double a, trans, gauss, dx, dy;
          bool clamped;
        };
        std::vector<Hit> hits;
        for (std::size_t i = 0; i < plan->height; ++i) {
          const double py = pixel_y(*plan, i);
          for (std::size_t j = 0; j < plan->width; ++j) {
            const std::size_t p = i * plan->width + j;
            double gp[3];
            bool any = false;
            for (int c = 0; c < 3; ++c) {
              const double v = out[3 * p + static_cast<std::size_t>(c)];
              // Colours in [0, 1] never reach the upper clamp; treat it as binding only there.
              gp[c] = v >= 1.0 ? 0.0 : g[3 * p + static_cast<std::size_t>(c)];
              any = any || gp[c] != 0.0;
            }
            if (!any) continue;
            const double px = pixel_x(*plan, j);
            hits.clear();
            double trans = 1.0;
            for (std::uint32_t e = plan->pixel_start[p]; e < plan->pixel_start[p + 1]; ++e) {
              const std::uint32_t gi = plan->pixel_items[e];
              double dx, dy;
              const double m2 = footprint(plan->splats[gi], px, py, dx, dy);
              if (m2 > cutoff) continue;
              const double gauss = std::exp(-0.5 * m2);
              const double raw = ov[gi] * gauss;
              const double a = std::min(kMaxAlpha, raw);
              hits.push_back({gi, a, trans, gauss, dx, dy, raw > kMaxAlpha});
              trans *= 1.0 - a;
            }
            // Walk back to front; `behind` is the colour contributed by
            // everything after the current splat.
            double behind[3] = {0, 0, 0};
            for (auto it = hits.rbegin(); it != hits.rend(); ++it) {
              const Hit& h = *it;
              double ga = 0;
              for (int c = 0; c < 3; ++c) {
                const double col = cv[3 * h.g + static_cast<std::size_t>(c)];
                gcolor[3 * h.g + static_cast<std::size_t>(c)] += gp[c] * h.a * h.trans;
                ga += gp[c] * (col * h.trans - behind[c] / (1.0 - h.a));
                behind[c] += col * h.a * h.trans;
              }
              if (h.clamped) continue;
              gop[h.g] += ga * h.gauss;
              const double gm2 = ga * ov[h.g] * h.gauss * -0.5;
              const Splat& s = plan->splats[h.g];
              // m2 = ca dx^2 + 2 cb dx dy + cc dy^2, dx = px - mx
              gmean[2 * h.g] -= gm2 * 2 * (s.ca * h.dx + s.cb * h.dy);
              gmean[2 * h.g + 1] -= gm2 * 2 * (s.cb * h.dx + s.cc * h.dy);
              gconic[3 * h.g] += gm2 * h.dx * h.dx;
              gconic[3 * h.g + 1] += gm2 * 2 * h.dx * h.dy;
              gconic[3 * h.g + 2] += gm2 * h.dy * h.dy;
            }
          }
        }
        if (mean.requires_grad()) {
          auto gm = mean.grad_buffer();
          for (std::size_t k = 0; k < count; ++k) {
            gm[3 * k] += gmean[2 * k];
            gm[3 * k + 1] += gmean[2 * k + 1];
          }
        }
        if (color.requires_grad()) {
          auto gc = color.grad_buffer();
          for (std::size_t k = 0; k < gcolor.size(); ++k) gc[k] += gcolor[k];
        }
        if (opacity.requires_grad()) {
          auto go = opacity.grad_buffer();
          for (std::size_t k = 0; k < count; ++k) go[k] += gop[k];
        }
        if (cov2d.requires_grad()) {
          auto gcov = cov2d.grad_buffer();
          for (std::size_t k = 0; k < count; ++k) {
            const Splat& s = plan->splats[k];
            if (!s.valid) continue;
            // Conic K = S^-1; dL/dS = -K (dL/dK) K with dL/dK symmetric.
            const double kA = s.ca, kB = s.cb, kC = s.cc;
            const double gA = gconic[3 * k], gB = 0.5 * gconic[3 * k + 1], gC = gconic[3 * k + 2];
            // M = dL/dK * K
            const double m00 = gA * kA + gB * kB, m01 = gA * kB + gB * kC;
            const double m10 = gB * kA + gC * kB, m11 = gB * kB + gC * kC;
            const double s00 = -(kA * m00 + kB * m10);
            const double s01 = -(kA * m01 + kB * m11);
            const double s11 = -(kB * m01 + kC * m11);
            gcov[3 * k] += s00;
            gcov[3 * k + 1] += 2 * s01;
            gcov[3 * k + 2] += s11;
          }
        }
      });
}

Tensor render_ortho(const Gaussians& g, const Camera& camera, std::size_t height, std::size_t width) {
  if (g.count() == 0) return Tensor::zeros({height, width, 3});
  const double px = camera.pixel_size(width);
  Tensor cov = projected_cov2d(g.rotation, g.scale, kDilationPixels * px * px);
  return rasterize(g.mean, cov, g.color, g.opacity, camera, height, width);
}

Image to_image(const Tensor& rendered) {
  Image img;
  img.height = rendered.dim(0);
  img.width = rendered.dim(1);
  img.rgb.resize(rendered.size());
  for (std::size_t i = 0; i < rendered.size(); ++i) img.rgb[i] = static_cast<float>(rendered[i]);
  return img;
}

Tensor image_tensor(const Image& img) {
  return Tensor::constant({img.height, img.width, 3}, std::vector<double>(img.rgb.begin(), img.rgb.end()));
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  for (float v : img.rgb) {
    const double q = std::floor(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0 + 0.5);
    out.put(static_cast<char>(static_cast<unsigned char>(q)));
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

}  // namespace hpc::deform
