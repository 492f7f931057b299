#include "hpc/latent_model.hpp"

#include <cmath>
#include <string>

#include "hpc/entropy.hpp"
#include "hpc/ops.hpp"

namespace hpc::latent {

namespace {

const char* const kHeads[] = {"feature", "translation", "rotation", "offset"};

std::size_t head_width(const ModelConfig& cfg, std::size_t head) {
  switch (head) {
    case 0: return cfg.feature_dim;
    case 1: return 3;
    case 2: return 4;
    default: return cfg.offsets * 3;
  }
}

std::string cla_name(int step, int layer) { return "cla." + std::to_string(step) + "." + std::to_string(layer); }

}  // namespace

netcodec::NetworkLayout build_layout(const ModelConfig& cfg) {
  netcodec::NetworkLayout layout;
  const std::size_t c = cfg.channels;
  if (cfg.use_ila) {
    layout.add("ila.weight.0", {4, cfg.ila_hidden});
    layout.add("ila.weight.1", {cfg.ila_hidden + 1, 1});
    layout.add("ila.out.0", {c + 1, c});
    layout.add("ila.out.1", {c + 1, c});
  }
  for (int step = 0; step + 1 < cfg.active_levels(); ++step) {
    const std::size_t in = (step == 0 ? c : cfg.cla_channels) + c;
    layout.add(cla_name(step, 0), {in + 1, cfg.fusion_hidden});
    layout.add(cla_name(step, 1), {cfg.fusion_hidden + 1, cfg.cla_channels});
  }
  const std::size_t a = cfg.aggregate_channels();
  for (std::size_t h = 0; h < 4; ++h) {
    layout.add(std::string("head.") + kHeads[h] + ".0", {a + 1, cfg.head_hidden});
    layout.add(std::string("head.") + kHeads[h] + ".1", {cfg.head_hidden + 1, head_width(cfg, h)});
  }
  layout.add("decoder.0", {cfg.feature_dim + 1, cfg.decoder_hidden});
  layout.add("decoder.1", {cfg.decoder_hidden + 1, cfg.offsets * kAttributesPerOffset});
  const std::size_t ec = cfg.shared_entropy ? 1 : c;
  layout.add("entropy.matrices", {ec, entropy::FactorizedModel::kMatrixCount});
  layout.add("entropy.biases", {ec, entropy::FactorizedModel::kBiasCount});
  layout.add("entropy.factors", {ec, entropy::FactorizedModel::kFactorCount});
  return layout;
}

netcodec::NetworkParams init_params(const ModelConfig& cfg, std::mt19937_64& rng) {
  netcodec::NetworkParams params(build_layout(cfg));
  const auto& layers = params.layout.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& spec = layers[l];
    if (spec.name.rfind("entropy.", 0) == 0) continue;
    const bool final_head = spec.name.rfind("head.", 0) == 0 && spec.name.back() == '1';
    if (final_head) continue;  // zero: identity deformation before training
    const std::size_t fan_in = spec.shape[0] - 1;
    const std::size_t out = spec.shape[1];
    // ReLU follows every first layer; second layers feed a linear output.
    const bool relu_next = spec.name.back() == '0';
    const double bound = std::sqrt((relu_next ? 6.0 : 3.0) / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> uni(-bound, bound);
    auto dst = params.layer(l);
    for (std::size_t i = 0; i < fan_in * out; ++i) dst[i] = uni(rng);
  }
  const std::size_t ec = cfg.shared_entropy ? 1 : cfg.channels;
  auto model = entropy::FactorizedModel::init(ec, rng);
  auto copy = [&](const char* name, const Tensor& t) {
    auto dst = params.layer(params.layout.index_of(name));
    std::copy(t.values().begin(), t.values().end(), dst.begin());
  };
  copy("entropy.matrices", model.matrices);
  copy("entropy.biases", model.biases);
  copy("entropy.factors", model.factors);
  return params;
}

Weights make_weights(const netcodec::NetworkParams& params, bool trainable) {
  Weights w;
  w.layout = &params.layout;
  for (std::size_t l = 0; l < params.layout.layer_count(); ++l) {
    auto v = params.layer(l);
    std::vector<double> vals(v.begin(), v.end());
    const auto& shape = params.layout.layers()[l].shape;
    w.layers.push_back(trainable ? Tensor::parameter(shape, std::move(vals)) : Tensor::constant(shape, std::move(vals)));
  }
  return w;
}

Tensor mlp2(const Tensor& x, const Tensor& first, const Tensor& second) {
  return diff::linear(diff::relu(diff::linear(x, first)), second);
}

Tensor ila(const hierarchy::KnnIndex& knn, const Tensor& embeddings, const Weights& w) {
  if (embeddings.rank() != 2) throw StructuralError("embeddings must be [n, C]");
  const std::size_t n = embeddings.dim(0), c = embeddings.dim(1), k = knn.k;
  if (k == 0 || knn.rows() != n) {
    throw StructuralError("kNN index has " + std::to_string(knn.rows()) + " rows for " + std::to_string(n) +
                          " embeddings");
  }
  std::vector<double> dx(n * k * 3);
  for (std::size_t i = 0; i < n * k; ++i) {
    for (std::size_t a = 0; a < 3; ++a) dx[i * 3 + a] = knn.offsets[i][a];
  }
  Tensor logits = mlp2(Tensor::constant({n * k, 3}, std::move(dx)), w["ila.weight.0"], w["ila.weight.1"]);
  Tensor weights = diff::softmax(diff::reshape(logits, {n, k}), 1);
  Tensor neighbors = diff::gather_rows(embeddings, knn.neighbors);
  Tensor weighted = diff::mul(neighbors, diff::reshape(weights, {n * k, 1}));
  Tensor fused = diff::sum_axis(diff::reshape(weighted, {n, k, c}), 1);
  return mlp2(fused, w["ila.out.0"], w["ila.out.1"]);
}

Tensor ila_or_identity(const ModelConfig& cfg, const hierarchy::KnnIndex& knn, const Tensor& embeddings,
                       const Weights& w) {
  return cfg.use_ila ? ila(knn, embeddings, w) : embeddings;
}

Tensor cla(const std::vector<Tensor>& per_scale, const hierarchy::Hierarchy& h, const Weights& w) {
  if (per_scale.empty() || per_scale.size() != h.levels.size()) {
    throw StructuralError("CLA needs one input per hierarchy level");
  }
  const int levels = static_cast<int>(per_scale.size());
  Tensor cur = per_scale.back();
  for (int r = levels - 2; r >= 0; --r) {
    const auto& parents = h.levels[static_cast<std::size_t>(r + 1)].parent_of_finer;
    if (parents.size() != per_scale[static_cast<std::size_t>(r)].dim(0)) {
      throw StructuralError("missing parent mapping for level " + std::to_string(r));
    }
    const int step = levels - 2 - r;
    Tensor up = diff::gather_concat(cur, parents, per_scale[static_cast<std::size_t>(r)]);
    cur = mlp2(up, w[cla_name(step, 0)], w[cla_name(step, 1)]);
  }
  return cur;
}

Tensor quat_normalize(const Tensor& raw) {
  if (raw.rank() != 2 || raw.dim(1) != 4) throw diff::DimensionError("quaternions must be [n, 4]");
  const std::size_t n = raw.dim(0);
  auto rv = raw.values();
  std::vector<double> y(n * 4);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* r = rv.data() + 4 * i;
    const double len = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + r[3] * r[3]);
    norms[i] = len;
    if (len == 0.0) {
      y[4 * i] = 1.0;
      continue;
    }
    for (int a = 0; a < 4; ++a) y[4 * i + a] = r[a] / len;
  }
  return diff::make_result_y({n, 4}, std::move(y), {raw},
                             [raw, norms](std::span<const double> g, std::span<const double> y) {
                               auto gr = raw.grad_buffer();
                               for (std::size_t i = 0; i < norms.size(); ++i) {
                                 if (norms[i] == 0.0) continue;
                                 double dot = 0;
                                 for (int a = 0; a < 4; ++a) dot += g[4 * i + a] * y[4 * i + a];
                                 for (int a = 0; a < 4; ++a) gr[4 * i + a] += (g[4 * i + a] - dot * y[4 * i + a]) / norms[i];
                               }
                             });
}

DeformationField predict_deformation(const ModelConfig& cfg, const Tensor& aggregated, const Weights& w) {
  auto head = [&](std::size_t h) {
    return mlp2(aggregated, w[std::string("head.") + kHeads[h] + ".0"], w[std::string("head.") + kHeads[h] + ".1"]);
  };
  DeformationField d;
  d.feature_residual = head(0);
  d.translation = head(1);
  Tensor raw = head(2);
  std::vector<double> identity(raw.size(), 0.0);
  for (std::size_t i = 0; i < raw.dim(0); ++i) identity[4 * i] = 1.0;
  d.rotation = quat_normalize(diff::add_constant(raw, identity));
  d.offset_residual = head(3);
  if (d.offset_residual.dim(1) != cfg.offsets * 3) throw StructuralError("offset head width mismatch");
  return d;
}

namespace {

FrameStructure with_knn(const ModelConfig& cfg, hierarchy::Hierarchy h) {
  FrameStructure s;
  s.hierarchy = std::move(h);
  if (cfg.use_ila) {
    for (const auto& level : s.hierarchy.levels) {
      s.knn.push_back(hierarchy::knn(level, hierarchy::effective_k(level.size(), cfg.k, cfg.include_self),
                                     cfg.include_self));
    }
  } else {
    s.knn.resize(s.hierarchy.levels.size());
  }
  return s;
}

}  // namespace

FrameStructure build_structure(const ModelConfig& cfg, std::span<const hierarchy::Point3> anchors) {
  hierarchy::HierarchyOptions opts;
  opts.levels = cfg.active_levels();
  return with_knn(cfg, hierarchy::build_hierarchy(anchors, opts));
}

FrameStructure rebuild_structure(const ModelConfig& cfg, std::span<const hierarchy::Point3> anchors,
                                 std::span<const double> epsilons) {
  if (static_cast<int>(epsilons.size()) + 1 != cfg.active_levels()) {
    throw StructuralError("expected " + std::to_string(cfg.active_levels() - 1) + " grid sizes");
  }
  return with_knn(cfg, hierarchy::rebuild_hierarchy(anchors, epsilons));
}

DeformationField run_model(const ModelConfig& cfg, const FrameStructure& s, const std::vector<Tensor>& embeddings,
                           const Weights& w) {
  if (embeddings.size() != s.hierarchy.levels.size()) throw StructuralError("one embedding tensor per level");
  std::vector<Tensor> per_scale;
  for (std::size_t r = 0; r < embeddings.size(); ++r) {
    if (embeddings[r].dim(0) != s.hierarchy.levels[r].size()) {
      throw StructuralError("level " + std::to_string(r) + " embedding rows do not match its points");
    }
    per_scale.push_back(ila_or_identity(cfg, s.knn[r], embeddings[r], w));
  }
  Tensor aggregated = cla(per_scale, s.hierarchy, w);
  return predict_deformation(cfg, aggregated, w);
}

}  // namespace hpc::latent
