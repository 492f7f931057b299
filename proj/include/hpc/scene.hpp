#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hpc/bitstream.hpp"
#include "hpc/deformation.hpp"

namespace hpc::scene {

/// Generator settings. Everything else follows from the seed.
struct SceneParams {
  std::uint64_t seed = 1;
  std::uint32_t anchors = 200;
  std::uint32_t frames = 5;
  std::uint32_t clusters = 4;
  std::uint32_t offsets = 4;         // M
  std::uint32_t feature_dim = 16;    // D
  std::uint32_t decoder_hidden = 32;
  std::uint32_t height = 64;
  std::uint32_t width = 64;
  double anchor_scale = 0.05;        // l, isotropic per anchor
  double max_angle_deg = 5.0;        // per-frame cluster rotation bound
  double max_translation = 0.02;     // per-frame cluster translation bound, fraction of the extent
  double feature_drift = 0.01;       // std of the per-frame feature noise
  bool operator==(const SceneParams&) const = default;
};

/// Rigid motion of one cluster, applied every frame about its current centroid.
struct ClusterMotion {
  double axis[3];
  double angle;  // radians per frame
  double translation[3];
};

struct SyntheticScene {
  SceneParams params;
  deform::Camera camera;
  std::vector<deform::Frame> frames;  // ground truth; only frame 0 is stored in scene files
  std::vector<std::uint32_t> cluster_of;
  std::vector<ClusterMotion> motion;
  std::vector<double> decoder0;  // [D + 1, hidden]
  std::vector<double> decoder1;  // [hidden + 1, M * 11]
  std::vector<deform::Image> images;
};

SyntheticScene generate_scene(const SceneParams& params);

/// Renders frame t of a scene with its ground-truth decoder.
deform::Image render_ground_truth(const SyntheticScene& s, std::size_t t);

/// Scene file layout, little-endian:
///   "HPSC", u16 version,
///   u64 seed, u32 anchors, u32 frames, u32 clusters, u32 M, u32 D, u32 decoder hidden, u32 height, u32 width,
///   f64 anchor scale, f64 max angle (deg), f64 max translation, f64 feature drift,
///   f32 camera cx, cy, extent,
///   u64 length + initial frame (bitstream initial-frame layout),
///   f32 decoder.0, f32 decoder.1 (row-major, weights then bias row),
///   `frames` images of f32 [height, width, 3].
bitstream::Bytes write_scene(const SyntheticScene& s);
SyntheticScene read_scene(std::span<const std::uint8_t> bytes);
void save_scene(const std::string& path, const SyntheticScene& s);
SyntheticScene load_scene(const std::string& path);

}  // namespace hpc::scene
