#include "hpc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace hpc::diff {

namespace {

struct BroadcastPlan {
  Shape out;
  bool same = false;              // a, b, out all share a shape
  std::vector<std::size_t> a_idx;  // per output element, empty when same
  std::vector<std::size_t> b_idx;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  plan.out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] == pb[d] || pb[d] == 1) {
      plan.out[d] = pa[d];
    } else if (pa[d] == 1) {
      plan.out[d] = pb[d];
    } else {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
  }
  // Strides with zeros on broadcast dims.
  std::vector<std::size_t> sa(rank), sb(rank);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t d = rank; d-- > 0;) {
    sa[d] = pa[d] == 1 ? 0 : acc_a;
    sb[d] = pb[d] == 1 ? 0 : acc_b;
    acc_a *= pa[d];
    acc_b *= pb[d];
  }
  const std::size_t n = shape_size(plan.out);
  plan.a_idx.resize(n);
  plan.b_idx.resize(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    plan.a_idx[i] = ia;
    plan.b_idx[i] = ib;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      ia += sa[d];
      ib += sb[d];
      if (counter[d] < plan.out[d]) break;
      ia -= sa[d] * counter[d];
      ib -= sb[d] * counter[d];
      counter[d] = 0;
    }
  }
  return plan;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) throw NumericError(std::string(op) + " produced a non-finite value", i);
  }
}

double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  const std::size_t n = shape_size(plan->out);
  std::vector<double> out(n);
  auto av = a.values();
  auto bv = b.values();
  auto ai = [&](std::size_t i) { return plan->same ? i : plan->a_idx[i]; };
  auto bi = [&](std::size_t i) { return plan->same ? i : plan->b_idx[i]; };
  switch (op) {
    case ElementwiseOp::kAdd:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] + bv[bi(i)];
      break;
    case ElementwiseOp::kSub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] - bv[bi(i)];
      break;
    case ElementwiseOp::kMul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] * bv[bi(i)];
      break;
    case ElementwiseOp::kDiv:
      for (std::size_t i = 0; i < n; ++i) {
        const double d = bv[bi(i)];
        if (d == 0.0) throw NumericError("division by zero", i);
        out[i] = av[ai(i)] / d;
      }
      break;
    default:
      throw std::invalid_argument("elementwise: op is not binary");
  }
  return make_result(plan->out, std::move(out), {a, b}, [a, b, plan, op](std::span<const double> g) {
    const std::size_t n = g.size();
    auto ai = [&](std::size_t i) { return plan->same ? i : plan->a_idx[i]; };
    auto bi = [&](std::size_t i) { return plan->same ? i : plan->b_idx[i]; };
    auto av = a.values();
    auto bv = b.values();
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        switch (op) {
          case ElementwiseOp::kAdd:
          case ElementwiseOp::kSub: ga[ai(i)] += g[i]; break;
          case ElementwiseOp::kMul: ga[ai(i)] += g[i] * bv[bi(i)]; break;
          case ElementwiseOp::kDiv: ga[ai(i)] += g[i] / bv[bi(i)]; break;
          default: break;
        }
      }
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        switch (op) {
          case ElementwiseOp::kAdd: gb[bi(i)] += g[i]; break;
          case ElementwiseOp::kSub: gb[bi(i)] -= g[i]; break;
          case ElementwiseOp::kMul: gb[bi(i)] += g[i] * av[ai(i)]; break;
          case ElementwiseOp::kDiv: {
            const double d = bv[bi(i)];
            gb[bi(i)] -= g[i] * av[ai(i)] / (d * d);
            break;
          }
          default: break;
        }
      }
    }
  });
}

Tensor elementwise(ElementwiseOp op, const Tensor& x) {
  const auto xv = x.values();
  const std::size_t n = xv.size();
  std::vector<double> y(n);
  switch (op) {
    case ElementwiseOp::kRelu:
      for (std::size_t i = 0; i < n; ++i) y[i] = xv[i] > 0 ? xv[i] : 0.0;
      break;
    case ElementwiseOp::kExp:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(xv[i]);
      check_finite(y, "exp");
      break;
    case ElementwiseOp::kLog:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(xv[i] > 0)) throw NumericError("log of non-positive value", i);
        y[i] = std::log(xv[i]);
      }
      break;
    case ElementwiseOp::kSigmoid:
      for (std::size_t i = 0; i < n; ++i) y[i] = stable_sigmoid(xv[i]);
      break;
    case ElementwiseOp::kSoftplus:
      for (std::size_t i = 0; i < n; ++i) y[i] = stable_softplus(xv[i]);
      break;
    case ElementwiseOp::kTanh:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(xv[i]);
      break;
    case ElementwiseOp::kAbs:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::abs(xv[i]);
      break;
    case ElementwiseOp::kSquare:
      for (std::size_t i = 0; i < n; ++i) y[i] = xv[i] * xv[i];
      break;
    case ElementwiseOp::kSqrt:
      for (std::size_t i = 0; i < n; ++i) {
        if (xv[i] < 0) throw NumericError("sqrt of negative value", i);
        y[i] = std::sqrt(xv[i]);
      }
      break;
    default:
      throw std::invalid_argument("elementwise: op is not unary");
  }
  return make_result_y(x.shape(), std::move(y), {x}, [x, op](std::span<const double> g, std::span<const double> y) {
    auto gx = x.grad_buffer();
    auto xv = x.values();
    const std::size_t n = g.size();
    switch (op) {
      case ElementwiseOp::kRelu:
        for (std::size_t i = 0; i < n; ++i) gx[i] += xv[i] > 0 ? g[i] : 0.0;
        break;
      case ElementwiseOp::kExp:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i];
        break;
      case ElementwiseOp::kLog:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] / xv[i];
        break;
      case ElementwiseOp::kSigmoid:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
        break;
      case ElementwiseOp::kSoftplus:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * stable_sigmoid(xv[i]);
        break;
      case ElementwiseOp::kTanh:
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
        break;
      case ElementwiseOp::kAbs:
        for (std::size_t i = 0; i < n; ++i) gx[i] += xv[i] > 0 ? g[i] : (xv[i] < 0 ? -g[i] : 0.0);
        break;
      case ElementwiseOp::kSquare:
        for (std::size_t i = 0; i < n; ++i) gx[i] += 2.0 * xv[i] * g[i];
        break;
      case ElementwiseOp::kSqrt:
        for (std::size_t i = 0; i < n; ++i) gx[i] += y[i] > 0 ? g[i] / (2.0 * y[i]) : 0.0;
        break;
      default:
        break;
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::kDiv, a, b); }
Tensor relu(const Tensor& x) { return elementwise(ElementwiseOp::kRelu, x); }
Tensor exp(const Tensor& x) { return elementwise(ElementwiseOp::kExp, x); }
Tensor log(const Tensor& x) { return elementwise(ElementwiseOp::kLog, x); }
Tensor sigmoid(const Tensor& x) { return elementwise(ElementwiseOp::kSigmoid, x); }
Tensor softplus(const Tensor& x) { return elementwise(ElementwiseOp::kSoftplus, x); }
Tensor tanh(const Tensor& x) { return elementwise(ElementwiseOp::kTanh, x); }
Tensor abs(const Tensor& x) { return elementwise(ElementwiseOp::kAbs, x); }
Tensor square(const Tensor& x) { return elementwise(ElementwiseOp::kSquare, x); }
Tensor sqrt(const Tensor& x) { return elementwise(ElementwiseOp::kSqrt, x); }

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> y(x.values().begin(), x.values().end());
  for (double& v : y) v *= factor;
  return make_result(x.shape(), std::move(y), {x}, [x, factor](std::span<const double> g) {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
}

Tensor add_scalar(const Tensor& x, double offset) {
  std::vector<double> y(x.values().begin(), x.values().end());
  for (double& v : y) v += offset;
  return make_result(x.shape(), std::move(y), {x}, [x](std::span<const double> g) {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor clamp_min(const Tensor& x, double floor) {
  std::vector<double> y(x.values().begin(), x.values().end());
  for (double& v : y) v = std::max(v, floor);
  return make_result(x.shape(), std::move(y), {x}, [x, floor](std::span<const double> g) {
    auto gx = x.grad_buffer();
    auto xv = x.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] >= floor) gx[i] += g[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects 2-D operands");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> c(m * n, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return make_result({m, n}, std::move(c), {a, b}, [a, b, m, k, n](std::span<const double> g) {
    auto av = a.values();
    auto bv = b.values();
    if (a.requires_grad()) {
      // dA = dC * B^T
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (b.requires_grad()) {
      // dB = A^T * dC
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& wb) {
  if (x.rank() != 2 || wb.rank() != 2) throw DimensionError("linear expects 2-D operands");
  const std::size_t m = x.dim(0), k = x.dim(1), n = wb.dim(1);
  if (wb.dim(0) != k + 1) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not fit weights " + shape_str(wb.shape()));
  }
  std::vector<double> y(m * n);
  auto xv = x.values();
  auto wv = wb.values();
  const double* bias = wv.data() + k * n;
  for (std::size_t i = 0; i < m; ++i) {
    double* yi = y.data() + i * n;
    std::copy_n(bias, n, yi);
    for (std::size_t p = 0; p < k; ++p) {
      const double xip = xv[i * k + p];
      if (xip == 0.0) continue;
      const double* wp = wv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) yi[j] += xip * wp[j];
    }
  }
  return make_result({m, n}, std::move(y), {x, wb}, [x, wb, m, k, n](std::span<const double> g) {
    auto xv = x.values();
    auto wv = wb.values();
    if (x.requires_grad()) {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * wv[p * n + j];
          gx[i * k + p] += acc;
        }
      }
    }
    if (wb.requires_grad()) {
      auto gw = wb.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double xip = xv[i * k + p];
          if (xip == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gw[p * n + j] += xip * g[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) gw[k * n + j] += g[i * n + j];
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return make_result({1}, {acc}, {x}, [x](std::span<const double> g) {
    auto gx = x.grad_buffer();
    for (double& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

namespace {
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};
AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.len = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}
}  // namespace

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> y(s.outer * s.inner, 0.0);
  auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) y[o * s.inner + i] += xv[(o * s.len + l) * s.inner + i];
  return make_result(out_shape, std::move(y), {x}, [x, s](std::span<const double> g) {
    auto gx = x.grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.len + l) * s.inner + i] += g[o * s.inner + i];
  });
}

namespace {
Tensor extremum(const Tensor& x, bool want_max) {
  if (x.size() == 0) throw DimensionError("min/max of empty tensor");
  auto xv = x.values();
  std::size_t arg = 0;
  for (std::size_t i = 1; i < xv.size(); ++i) {
    if (want_max ? xv[i] > xv[arg] : xv[i] < xv[arg]) arg = i;
  }
  return make_result({1}, {xv[arg]}, {x}, [x, arg](std::span<const double> g) { x.grad_buffer()[arg] += g[0]; });
}
}  // namespace

Tensor min_all(const Tensor& x) { return extremum(x, false); }
Tensor max_all(const Tensor& x) { return extremum(x, true); }

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (s.len == 0) throw DimensionError("softmax over empty axis");
  std::vector<double> y(x.size());
  auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
      double mx = xv[at(0)];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xv[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        y[at(l)] = std::exp(xv[at(l)] - mx);
        z += y[at(l)];
      }
      for (std::size_t l = 0; l < s.len; ++l) y[at(l)] /= z;
    }
  }
  return make_result_y(x.shape(), std::move(y), {x}, [x, s](std::span<const double> g, std::span<const double> y) {
    auto gx = x.grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) dot += g[at(l)] * y[at(l)];
        for (std::size_t l = 0; l < s.len; ++l) gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> y(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(y), {x}, [x](std::span<const double> g) {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor view(const Tensor& x, std::size_t offset, Shape shape) {
  const std::size_t n = shape_size(shape);
  if (offset + n > x.size()) {
    throw DimensionError("view [" + std::to_string(offset) + ", " + std::to_string(offset + n) +
                         ") exceeds tensor of size " + std::to_string(x.size()));
  }
  auto xv = x.values();
  std::vector<double> y(xv.begin() + static_cast<std::ptrdiff_t>(offset),
                        xv.begin() + static_cast<std::ptrdiff_t>(offset + n));
  return make_result(std::move(shape), std::move(y), {x}, [x, offset](std::span<const double> g) {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() != 2) throw DimensionError("slice_cols expects a 2-D tensor");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (start + count > cols) throw DimensionError("slice_cols range exceeds " + shape_str(x.shape()));
  std::vector<double> y(rows * count);
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) y[r * count + c] = xv[r * cols + start + c];
  return make_result({rows, count}, std::move(y), {x}, [x, rows, cols, start, count](std::span<const double> g) {
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) gx[r * cols + start + c] += g[r * count + c];
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_cols: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t rows = a.dim(0), ca = a.dim(1), cb = b.dim(1), cols = ca + cb;
  std::vector<double> y(rows * cols);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * ca, ca, y.data() + r * cols);
    std::copy_n(bv.data() + r * cb, cb, y.data() + r * cols + ca);
  }
  return make_result({rows, cols}, std::move(y), {a, b}, [a, b, rows, ca, cb, cols](std::span<const double> g) {
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += g[r * cols + c];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += g[r * cols + ca + c];
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> y;
  for (const Tensor& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw DimensionError("concat_rows: trailing dims differ (" + shape_str(p.shape()) + ")");
    }
    rows += p.dim(0);
    y.insert(y.end(), p.values().begin(), p.values().end());
  }
  Shape out{rows};
  out.insert(out.end(), tail.begin(), tail.end());
  std::vector<Tensor> keep(parts.begin(), parts.end());
  return make_result(std::move(out), std::move(y), parts, [keep](std::span<const double> g) {
    std::size_t off = 0;
    for (const Tensor& p : keep) {
      if (p.requires_grad()) {
        auto gp = p.grad_buffer();
        for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[off + i];
      }
      off += p.size();
    }
  });
}

Tensor gather_concat(const Tensor& rows, std::span<const std::uint32_t> index, const Tensor& extra) {
  if (rows.rank() != 2) throw DimensionError("gather_concat: rows must be 2-D");
  const std::size_t n = rows.dim(0), c = rows.dim(1), m = index.size();
  std::size_t c2 = 0;
  if (extra.defined()) {
    if (extra.rank() != 2 || extra.dim(0) != m) {
      throw DimensionError("gather_concat: extra must be [" + std::to_string(m) + ", c2], got " +
                           shape_str(extra.shape()));
    }
    c2 = extra.dim(1);
  }
  const std::size_t cols = c + c2;
  std::vector<double> y(m * cols);
  auto rv = rows.values();
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] >= n) {
      throw IndexError("gather index " + std::to_string(index[i]) + " out of range [0, " + std::to_string(n) + ")");
    }
    std::copy_n(rv.data() + index[i] * c, c, y.data() + i * cols);
    if (c2) std::copy_n(extra.values().data() + i * c2, c2, y.data() + i * cols + c);
  }
  auto idx = std::make_shared<std::vector<std::uint32_t>>(index.begin(), index.end());
  return make_result({m, cols}, std::move(y), {rows, extra}, [rows, extra, idx, c, c2, cols](std::span<const double> g) {
    const std::size_t m = idx->size();
    if (rows.requires_grad()) {
      auto gr = rows.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t r = (*idx)[i];
        for (std::size_t j = 0; j < c; ++j) gr[r * c + j] += g[i * cols + j];
      }
    }
    if (c2 && extra.requires_grad()) {
      auto ge = extra.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c2; ++j) ge[i * c2 + j] += g[i * cols + c + j];
    }
  });
}

Tensor gather_rows(const Tensor& rows, std::span<const std::uint32_t> index) {
  return gather_concat(rows, index, Tensor());
}

Tensor round_ste(const Tensor& x) {
  std::vector<double> y(x.values().begin(), x.values().end());
  for (double& v : y) v = std::nearbyint(v);
  return make_result(x.shape(), std::move(y), {x}, [x](std::span<const double> g) {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor add_constant(const Tensor& x, std::span<const double> offsets) {
  if (offsets.size() != x.size()) throw DimensionError("add_constant: offset count mismatch");
  std::vector<double> y(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += offsets[i];
  return make_result(x.shape(), std::move(y), {x}, [x](std::span<const double> g) {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

}  // namespace hpc::diff
