#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hpc::hierarchy {

using Point3 = std::array<double, 3>;

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// One level of the latent point hierarchy. Level 0 holds the anchor positions
/// verbatim; coarser levels hold unique lattice points.
struct ScaleLevel {
  int index = 0;
  std::vector<Point3> positions;
  double grid_size = 0.0;  // 0 for level 0
  /// For each point of the next finer level, its representative here. Empty at level 0.
  std::vector<std::uint32_t> parent_of_finer;

  std::size_t size() const { return positions.size(); }
};

/// Snaps `points` to the lattice floor(p / epsilon + 0.5) * epsilon and deduplicates.
/// Output order is order of first occurrence.
ScaleLevel grid_downsample(std::span<const Point3> points, double epsilon);

struct Hierarchy {
  std::vector<ScaleLevel> levels;     // finest first
  std::vector<std::string> warnings;  // degenerate-hierarchy notes
  std::vector<double> epsilons() const;
};

struct HierarchyOptions {
  int levels = 3;
  double target_ratio = 0.2;
  double ratio_tolerance = 0.2;  // accepted band is target * (1 +- tolerance)
  int max_bisection_steps = 40;
};

/// Chooses each level's grid size by bisection on the point-count ratio. Grid
/// sizes are rounded to float32 so a decoder holding only the transmitted
/// values rebuilds exactly the same structure via rebuild_hierarchy().
Hierarchy build_hierarchy(std::span<const Point3> positions, const HierarchyOptions& options);

/// Rebuilds from explicit grid sizes (one per coarse level).
Hierarchy rebuild_hierarchy(std::span<const Point3> positions, std::span<const double> epsilons);

/// Exact k nearest neighbours within one scale. Ties broken by lower index.
struct KnnIndex {
  std::size_t k = 0;
  std::vector<std::uint32_t> neighbors;  // row-major [n, k]
  std::vector<double> distances;         // [n, k], non-decreasing per row
  std::vector<Point3> offsets;           // [n, k], neighbor - query

  std::size_t rows() const { return k == 0 ? 0 : neighbors.size() / k; }
};

KnnIndex knn(const ScaleLevel& scale, std::size_t k, bool include_self);

/// Largest neighbour count usable on a scale of `n` points (at least 1; a lone
/// point falls back to being its own neighbour).
std::size_t effective_k(std::size_t n, std::size_t k, bool include_self);

}  // namespace hpc::hierarchy
