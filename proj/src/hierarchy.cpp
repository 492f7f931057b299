#include "hpc/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

namespace hpc::hierarchy {

namespace {

struct CellKey {
  std::int64_t x, y, z;
  bool operator==(const CellKey&) const = default;
};

struct CellHash {
  std::size_t operator()(const CellKey& k) const {
    std::uint64_t h = 1469598103934665603ull;
    for (std::int64_t v : {k.x, k.y, k.z}) {
      h ^= static_cast<std::uint64_t>(v);
      h *= 1099511628211ull;
      h ^= h >> 29;
    }
    return static_cast<std::size_t>(h);
  }
};

double snap(double v, double eps) { return std::floor(v / eps + 0.5); }

std::size_t count_cells(std::span<const Point3> points, double eps) {
  std::unordered_map<CellKey, char, CellHash> cells;
  cells.reserve(points.size());
  for (const auto& p : points) {
    cells.emplace(CellKey{static_cast<std::int64_t>(snap(p[0], eps)), static_cast<std::int64_t>(snap(p[1], eps)),
                          static_cast<std::int64_t>(snap(p[2], eps))},
                  0);
  }
  return cells.size();
}

double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

ScaleLevel grid_downsample(std::span<const Point3> points, double epsilon) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw ParameterError("grid size must be positive, got " + std::to_string(epsilon));
  }
  if (points.empty()) throw ParameterError("grid_downsample needs at least one point");
  ScaleLevel level;
  level.grid_size = epsilon;
  level.parent_of_finer.resize(points.size());
  std::unordered_map<CellKey, std::uint32_t, CellHash> cells;
  cells.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double sx = snap(points[i][0], epsilon), sy = snap(points[i][1], epsilon), sz = snap(points[i][2], epsilon);
    CellKey key{static_cast<std::int64_t>(sx), static_cast<std::int64_t>(sy), static_cast<std::int64_t>(sz)};
    auto [it, inserted] = cells.emplace(key, static_cast<std::uint32_t>(level.positions.size()));
    if (inserted) level.positions.push_back({sx * epsilon, sy * epsilon, sz * epsilon});
    level.parent_of_finer[i] = it->second;
  }
  return level;
}

std::vector<double> Hierarchy::epsilons() const {
  std::vector<double> eps;
  for (std::size_t r = 1; r < levels.size(); ++r) eps.push_back(levels[r].grid_size);
  return eps;
}

Hierarchy build_hierarchy(std::span<const Point3> positions, const HierarchyOptions& options) {
  if (options.levels < 1) throw ParameterError("hierarchy needs at least one level");
  if (!(options.target_ratio > 0.0 && options.target_ratio < 1.0)) {
    throw ParameterError("target ratio must lie in (0, 1)");
  }
  if (positions.empty()) throw ParameterError("hierarchy needs at least one point");

  Hierarchy h;
  ScaleLevel base;
  base.positions.assign(positions.begin(), positions.end());
  h.levels.push_back(std::move(base));

  for (int r = 1; r < options.levels; ++r) {
    const auto& finer = h.levels.back().positions;
    const std::size_t n_prev = finer.size();
    const double target = options.target_ratio * static_cast<double>(n_prev);
    const double lo_band = target * (1.0 - options.ratio_tolerance);
    const double hi_band = target * (1.0 + options.ratio_tolerance);

    // Bracket: lo keeps (nearly) every point, hi collapses everything.
    double extent = 0.0;
    Point3 mn = finer[0], mx = finer[0];
    for (const auto& p : finer) {
      for (int d = 0; d < 3; ++d) {
        mn[d] = std::min(mn[d], p[d]);
        mx[d] = std::max(mx[d], p[d]);
      }
    }
    for (int d = 0; d < 3; ++d) extent = std::max(extent, mx[d] - mn[d]);
    double lo = std::max(extent, 1e-6) * 1e-6;
    double hi = std::max(extent, 1e-6) * 4.0 + 1.0;

    double best_eps = hi;
    double best_gap = std::numeric_limits<double>::infinity();
    bool found = false;
    for (int step = 0; step < options.max_bisection_steps; ++step) {
      const double mid = round_to_float(std::sqrt(lo * hi));
      const auto count = static_cast<double>(count_cells(finer, mid));
      const double gap = std::abs(count - target);
      if (gap < best_gap) {
        best_gap = gap;
        best_eps = mid;
      }
      if (count >= lo_band && count <= hi_band) {
        found = true;
        break;
      }
      if (count > target) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    ScaleLevel level = grid_downsample(finer, best_eps);
    level.index = r;
    if (!found) {
      h.warnings.push_back("level " + std::to_string(r) + ": ratio " +
                           std::to_string(static_cast<double>(level.size()) / static_cast<double>(n_prev)) +
                           " outside target band; using closest grid size");
    }
    h.levels.push_back(std::move(level));
  }
  return h;
}

Hierarchy rebuild_hierarchy(std::span<const Point3> positions, std::span<const double> epsilons) {
  if (positions.empty()) throw ParameterError("hierarchy needs at least one point");
  Hierarchy h;
  ScaleLevel base;
  base.positions.assign(positions.begin(), positions.end());
  h.levels.push_back(std::move(base));
  for (std::size_t r = 0; r < epsilons.size(); ++r) {
    ScaleLevel level = grid_downsample(h.levels.back().positions, epsilons[r]);
    level.index = static_cast<int>(r + 1);
    h.levels.push_back(std::move(level));
  }
  return h;
}

std::size_t effective_k(std::size_t n, std::size_t k, bool include_self) {
  const std::size_t available = include_self ? n : (n > 0 ? n - 1 : 0);
  return std::max<std::size_t>(1, std::min(k, available));
}

KnnIndex knn(const ScaleLevel& scale, std::size_t k, bool include_self) {
  if (k == 0) throw ParameterError("k must be at least 1");
  const std::size_t n = scale.size();
  const std::size_t available = include_self ? n : (n > 0 ? n - 1 : 0);
  const bool lone_point = n == 1 && !include_self;
  if (k > available && !lone_point) {
    throw ParameterError("k = " + std::to_string(k) + " exceeds the " + std::to_string(available) +
                         " candidate neighbours");
  }
  const std::size_t kk = lone_point ? 1 : k;
  KnnIndex idx;
  idx.k = kk;
  idx.neighbors.resize(n * kk);
  idx.distances.resize(n * kk);
  idx.offsets.resize(n * kk);

  // (squared distance, index) ordered lexicographically gives the tie rule.
  std::vector<std::pair<double, std::uint32_t>> best;
  for (std::size_t q = 0; q < n; ++q) {
    const Point3& pq = scale.positions[q];
    best.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == q && !include_self && !lone_point) continue;
      const Point3& pj = scale.positions[j];
      const double dx = pj[0] - pq[0], dy = pj[1] - pq[1], dz = pj[2] - pq[2];
      const std::pair<double, std::uint32_t> cand{dx * dx + dy * dy + dz * dz, static_cast<std::uint32_t>(j)};
      if (best.size() < kk) {
        best.push_back(cand);
        std::push_heap(best.begin(), best.end());
      } else if (cand < best.front()) {
        std::pop_heap(best.begin(), best.end());
        best.back() = cand;
        std::push_heap(best.begin(), best.end());
      }
    }
    std::sort_heap(best.begin(), best.end());
    for (std::size_t s = 0; s < kk; ++s) {
      const auto j = best[s].second;
      idx.neighbors[q * kk + s] = j;
      idx.distances[q * kk + s] = std::sqrt(best[s].first);
      const Point3& pj = scale.positions[j];
      idx.offsets[q * kk + s] = {pj[0] - pq[0], pj[1] - pq[1], pj[2] - pq[2]};
    }
  }
  return idx;
}

}  // namespace hpc::hierarchy
