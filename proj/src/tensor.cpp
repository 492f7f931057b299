#include "hpc/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace hpc::diff {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(shape_size(shape), 0.0);
  Tensor t = constant(std::move(shape), std::move(v));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  Tensor t = constant({1}, {v});
  t.node_->requires_grad = requires_grad;
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

std::span<double> Tensor::grad_buffer() const {
  if (node_->grad.size() != node_->value.size()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

Tensor Tensor::detach() const { return constant(node_->shape, node_->value); }

void Tape::record(std::shared_ptr<Node> output, Backward fn) {
  if (consumed_) throw TapeError("recording onto a tape that was already back-propagated");
  entries_.push_back({std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw TapeError("tape processed twice without reset");
  if (loss.size() != 1) throw DimensionError("backward() needs a single-element loss");
  consumed_ = true;
  auto seed = loss.grad_buffer();
  seed[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->fn(it->output->grad, it->output->value);
  }
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

Tensor make_result(Shape shape, std::vector<double> values, std::span<const Tensor> inputs,
                   std::function<void(std::span<const double>)> backward) {
  Tensor out = Tensor::constant(std::move(shape), std::move(values));
  Tape* tape = g_active_tape;
  if (tape == nullptr) return out;
  const bool needs_grad =
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!needs_grad) return out;
  out.node()->requires_grad = true;
  tape->record(out.node(), [fn = std::move(backward)](std::span<const double> g, std::span<const double>) { fn(g); });
  return out;
}

Tensor make_result_y(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                     Tape::Backward backward) {
  Tensor out = Tensor::constant(std::move(shape), std::move(values));
  Tape* tape = g_active_tape;
  if (tape == nullptr) return out;
  const bool needs_grad =
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!needs_grad) return out;
  out.node()->requires_grad = true;
  tape->record(out.node(), std::move(backward));
  return out;
}

Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   std::function<void(std::span<const double>)> backward) {
  return make_result(std::move(shape), std::move(values), std::span<const Tensor>(inputs.begin(), inputs.size()),
                     std::move(backward));
}

}  // namespace hpc::diff
