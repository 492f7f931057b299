#include "hpc/metrics.hpp"

#include <array>
#include <cmath>

#include "hpc/ops.hpp"

namespace hpc::metrics {

namespace {

std::array<double, kSsimWindow> gaussian_window() {
  std::array<double, kSsimWindow> g{};
  const double c = (kSsimWindow - 1) / 2.0;
  double total = 0;
  for (std::size_t k = 0; k < kSsimWindow; ++k) {
    g[k] = std::exp(-(k - c) * (k - c) / (2 * kSsimSigma * kSsimSigma));
    total += g[k];
  }
  for (double& v : g) v /= total;
  return g;
}

// Separable "valid" Gaussian filtering of an h x w plane and its transpose.
struct Blur {
  std::size_t h, w, oh, ow;
  std::array<double, kSsimWindow> g = gaussian_window();

  Blur(std::size_t height, std::size_t width)
      : h(height), w(width), oh(height - kSsimWindow + 1), ow(width - kSsimWindow + 1) {}

  std::vector<double> forward(const std::vector<double>& in) const {
    std::vector<double> tmp(h * ow, 0.0), out(oh * ow, 0.0);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < kSsimWindow; ++k) acc += g[k] * in[i * w + j + k];
        tmp[i * ow + j] = acc;
      }
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < kSsimWindow; ++k) acc += g[k] * tmp[(i + k) * ow + j];
        out[i * ow + j] = acc;
      }
    return out;
  }

  std::vector<double> transpose(const std::vector<double>& in) const {
    std::vector<double> tmp(h * ow, 0.0), out(h * w, 0.0);
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        for (std::size_t k = 0; k < kSsimWindow; ++k) tmp[(i + k) * ow + j] += g[k] * in[i * ow + j];
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        for (std::size_t k = 0; k < kSsimWindow; ++k) out[i * w + j + k] += g[k] * tmp[i * ow + j];
    return out;
  }
};

std::vector<double> plane(std::span<const double> img, std::size_t channels, std::size_t c) {
  std::vector<double> p(img.size() / channels);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = img[i * channels + c];
  return p;
}

std::vector<double> product(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> p(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) p[i] = a[i] * b[i];
  return p;
}

struct Moments {
  std::vector<double> mx, my, exx, eyy, exy;
};

Moments moments(const Blur& blur, const std::vector<double>& x, const std::vector<double>& y) {
  return {blur.forward(x), blur.forward(y), blur.forward(product(x, x)), blur.forward(product(y, y)),
          blur.forward(product(x, y))};
}

constexpr double kC1 = (kSsimK1 * 1.0) * (kSsimK1 * 1.0);
constexpr double kC2 = (kSsimK2 * 1.0) * (kSsimK2 * 1.0);

}  // namespace

Tensor l1(const Tensor& a, const Tensor& b) { return diff::mean(diff::abs(diff::sub(a, b))); }

Tensor ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 3) throw ParameterError("ssim expects two [h, w, c] images of one shape");
  const std::size_t h = a.dim(0), w = a.dim(1), channels = a.dim(2);
  if (h < kSsimWindow || w < kSsimWindow) {
    throw ParameterError("image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than the " +
                         std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) + " window");
  }
  const Blur blur(h, w);
  const double count = static_cast<double>(blur.oh * blur.ow * channels);
  double total = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    auto m = moments(blur, plane(a.values(), channels, c), plane(b.values(), channels, c));
    for (std::size_t p = 0; p < m.mx.size(); ++p) {
      const double mx = m.mx[p], my = m.my[p];
      const double sxx = m.exx[p] - mx * mx, syy = m.eyy[p] - my * my, sxy = m.exy[p] - mx * my;
      total += (2 * mx * my + kC1) * (2 * sxy + kC2) / ((mx * mx + my * my + kC1) * (sxx + syy + kC2));
    }
  }
  return diff::make_result({}, {total / count}, {a, b}, [a, b, blur, count, channels](std::span<const double> g) {
    const double coef = g[0] / count;
    for (std::size_t c = 0; c < channels; ++c) {
      auto x = plane(a.values(), channels, c), y = plane(b.values(), channels, c);
      auto m = moments(blur, x, y);
      const std::size_t n = m.mx.size();
      std::vector<double> ga(n), gb(n), gxx(n), gyy(n), gxy(n);
      for (std::size_t p = 0; p < n; ++p) {
        const double mx = m.mx[p], my = m.my[p];
        const double sxx = m.exx[p] - mx * mx, syy = m.eyy[p] - my * my, sxy = m.exy[p] - mx * my;
        const double a1 = 2 * mx * my + kC1, a2 = 2 * sxy + kC2;
        const double b1 = mx * mx + my * my + kC1, b2 = sxx + syy + kC2;
        const double s = a1 * a2 / (b1 * b2);
        const double d_a1 = a2 / (b1 * b2), d_a2 = a1 / (b1 * b2), d_b1 = -s / b1, d_b2 = -s / b2;
        // Partials with respect to the window statistics (mx, my, E[xx], E[yy], E[xy]).
        ga[p] = coef * (2 * my * d_a1 - 2 * my * d_a2 + 2 * mx * d_b1 - 2 * mx * d_b2);
        gb[p] = coef * (2 * mx * d_a1 - 2 * mx * d_a2 + 2 * my * d_b1 - 2 * my * d_b2);
        gxx[p] = coef * d_b2;
        gyy[p] = coef * d_b2;
        gxy[p] = coef * 2 * d_a2;
      }
      auto ta = blur.transpose(ga), tb = blur.transpose(gb), txx = blur.transpose(gxx), tyy = blur.transpose(gyy),
           txy = blur.transpose(gxy);
      if (a.requires_grad()) {
        auto gr = a.grad_buffer();
        for (std::size_t i = 0; i < x.size(); ++i) gr[i * channels + c] += ta[i] + 2 * x[i] * txx[i] + y[i] * txy[i];
      }
      if (b.requires_grad()) {
        auto gr = b.grad_buffer();
        for (std::size_t i = 0; i < y.size(); ++i) gr[i * channels + c] += tb[i] + 2 * y[i] * tyy[i] + x[i] * txy[i];
      }
    }
  });
}

double psnr(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw ParameterError("psnr expects two non-empty images of one size");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  if (se == 0) return kPsnrIdentical;
  return 10.0 * std::log10(static_cast<double>(a.size()) / se);
}

double psnr(const Tensor& a, const Tensor& b) { return psnr(a.values(), b.values()); }

}  // namespace hpc::metrics
