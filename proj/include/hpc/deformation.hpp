#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hpc/hierarchy.hpp"
#include "hpc/latent_model.hpp"
#include "hpc/tensor.hpp"

namespace hpc::deform {

using diff::Tensor;

/// Anchor state {X, o, F, l} of one frame. Values are held in doubles but
/// always carry float32-representable numbers once a frame is materialized.
struct Frame {
  std::size_t n = 0;  // anchors
  std::size_t m = 0;  // offsets per anchor
  std::size_t d = 0;  // feature width
  std::vector<double> x;  // [n, 3]
  std::vector<double> o;  // [n, m, 3]
  std::vector<double> f;  // [n, d]
  std::vector<double> l;  // [n, 3], fixed for the whole stream
  std::uint32_t t = 0;

  std::vector<hierarchy::Point3> anchors() const;
  /// Rounds every array to float32 precision.
  void round_to_float();
  bool operator==(const Frame&) const = default;
};

/// Differentiable view of a frame's X, o, F.
struct FrameTensors {
  Tensor x;  // [n, 3]
  Tensor o;  // [n, m * 3]
  Tensor f;  // [n, d]
};

FrameTensors frame_tensors(const Frame& frame);
/// Materializes tensors into a float32 frame sharing `prev`'s scaling factors.
Frame materialize(const Frame& prev, const FrameTensors& t, std::uint32_t index);

/// Rotates each row's m 3-vectors by that row's unit quaternion (w, x, y, z).
Tensor quat_rotate(const Tensor& q, const Tensor& v);

/// X + T, R(o + dO), F + dF. l is untouched.
FrameTensors apply_deformation(const Frame& prev, const latent::DeformationField& d);

struct Gaussians {
  Tensor mean;      // [G, 3]
  Tensor color;     // [G, 3] in (0, 1)
  Tensor opacity;   // [G, 1] in (0, 1)
  Tensor scale;     // [G, 3] > 0
  Tensor rotation;  // [G, 4] unit quaternions
  std::size_t count() const { return mean.defined() ? mean.dim(0) : 0; }
};

/// Attribute decoder: a two-layer MLP maps each anchor's feature to m sets of
/// (colour, opacity, scale, rotation). Scales are l * exp(2 tanh(raw)), and
/// means are X + o * l with l broadcast over the offsets.
Gaussians decode_attributes(const FrameTensors& frame, const std::vector<double>& l, std::size_t m,
                            const Tensor& decoder0, const Tensor& decoder1);

inline constexpr double kMinScale = 1e-4;
inline constexpr double kMaxAlpha = 0.99;
inline constexpr double kDilationPixels = 0.3;  // added to the projected variance, in pixel^2
inline constexpr double kCutoffSigma = 3.0;

/// Upper-left 2x2 block of R diag(s^2) R^T as (xx, xy, yy), plus `dilation`
/// on the diagonal. Scales below kMinScale are clamped.
Tensor projected_cov2d(const Tensor& rotation, const Tensor& scale, double dilation);

/// Orthographic camera looking along +z; the image covers a square of side
/// `extent` centred at (cx, cy). Smaller z is nearer.
struct Camera {
  double cx = 0.5;
  double cy = 0.5;
  double extent = 1.0;
  double pixel_size(std::size_t width) const { return extent / static_cast<double>(width); }
};

/// Front-to-back alpha blending of 2-D Gaussian footprints over a black
/// background. Returns [h, w, 3].
Tensor rasterize(const Tensor& mean, const Tensor& cov2d, const Tensor& color, const Tensor& opacity,
                 const Camera& camera, std::size_t height, std::size_t width);

/// decode-free convenience: projects and rasterizes a Gaussian set.
Tensor render_ortho(const Gaussians& g, const Camera& camera, std::size_t height, std::size_t width);

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> rgb;  // [h, w, 3]
  bool operator==(const Image&) const = default;
};

Image to_image(const Tensor& rendered);
Tensor image_tensor(const Image& img);

/// Binary PPM (P6), 8 bits per channel, round half up.
void write_ppm(const std::string& path, const Image& img);

}  // namespace hpc::deform
