#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "hpc/hierarchy.hpp"
#include "hpc/netcodec.hpp"
#include "hpc/tensor.hpp"

namespace hpc::latent {

using diff::Tensor;

class StructuralError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  std::size_t channels = 16;       // C, per scale
  std::size_t cla_channels = 32;   // C_out after cross-scale fusion
  std::size_t fusion_hidden = 32;
  std::size_t ila_hidden = 16;     // width of the weight MLP 3 -> h -> 1
  std::size_t head_hidden = 16;
  std::size_t decoder_hidden = 32;
  std::size_t feature_dim = 16;    // D
  std::size_t offsets = 4;         // M
  int levels = 3;                  // L
  std::size_t k = 4;
  bool use_ila = true;
  bool use_cla = true;   // false collapses the hierarchy to the finest scale
  bool include_self = false;
  bool shared_entropy = false;  // one factorized chain for all channels

  int active_levels() const { return use_cla ? levels : 1; }
  /// Channel count entering the heads.
  std::size_t aggregate_channels() const { return active_levels() > 1 ? cla_channels : channels; }
};

/// Per-local-Gaussian decoder outputs: colour 3, opacity 1, log-scale 3, rotation 4.
inline constexpr std::size_t kAttributesPerOffset = 11;

/// Every transmitted network in a fixed order. Each linear layer is one entry
/// of shape [in + 1, out] (weights then a bias row).
netcodec::NetworkLayout build_layout(const ModelConfig& cfg);

/// Deterministic initial parameters: He-style uniform for hidden layers, zero
/// final layers on the four heads, conventional factorized-model init.
/// The attribute decoder layers are left for the caller to fill.
netcodec::NetworkParams init_params(const ModelConfig& cfg, std::mt19937_64& rng);

/// Layer tensors addressed by name through the layout.
struct Weights {
  const netcodec::NetworkLayout* layout = nullptr;
  std::vector<Tensor> layers;
  const Tensor& operator[](const std::string& name) const { return layers[layout->index_of(name)]; }
};

/// Wraps each layer of `params` in a tensor; parameters when `trainable`.
Weights make_weights(const netcodec::NetworkParams& params, bool trainable);

/// Two linear layers with a ReLU between them.
Tensor mlp2(const Tensor& x, const Tensor& first, const Tensor& second);

/// Inner-scale aggregation. For every point, softmax weights over its
/// neighbours come from the weight MLP applied to each offset dX; the weighted
/// neighbour embeddings go through the output MLP.
Tensor ila(const hierarchy::KnnIndex& knn, const Tensor& embeddings, const Weights& w);
/// Identity stand-in used when aggregation is switched off.
Tensor ila_or_identity(const ModelConfig& cfg, const hierarchy::KnnIndex& knn, const Tensor& embeddings,
                       const Weights& w);

/// Cross-scale aggregation. `per_scale` holds ILA outputs finest first; fusion
/// runs coarse to fine, copying each coarse row to its children.
Tensor cla(const std::vector<Tensor>& per_scale, const hierarchy::Hierarchy& h, const Weights& w);

struct DeformationField {
  Tensor feature_residual;  // [n, D]
  Tensor translation;       // [n, 3]
  Tensor rotation;          // [n, 4], unit quaternions (w, x, y, z)
  Tensor offset_residual;   // [n, M * 3]
};

DeformationField predict_deformation(const ModelConfig& cfg, const Tensor& aggregated, const Weights& w);

/// Normalizes rows of a [n, 4] tensor; an all-zero row maps to (1, 0, 0, 0).
Tensor quat_normalize(const Tensor& raw);

/// The structures a frame's aggregation runs on, rebuilt from decoded anchors.
struct FrameStructure {
  hierarchy::Hierarchy hierarchy;
  std::vector<hierarchy::KnnIndex> knn;
};

FrameStructure build_structure(const ModelConfig& cfg, std::span<const hierarchy::Point3> anchors);
FrameStructure rebuild_structure(const ModelConfig& cfg, std::span<const hierarchy::Point3> anchors,
                                 std::span<const double> epsilons);

/// Latent embeddings -> deformation field, through ILA, CLA and the heads.
DeformationField run_model(const ModelConfig& cfg, const FrameStructure& s, const std::vector<Tensor>& embeddings,
                           const Weights& w);

}  // namespace hpc::latent
