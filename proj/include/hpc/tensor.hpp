#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hpc::diff {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Raised when an op leaves its numeric domain; carries the flat element index.
class NumericError : public std::domain_error {
 public:
  NumericError(const std::string& what, std::size_t index)
      : std::domain_error(what + " at index " + std::to_string(index)), index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // lazily sized to value.size()
  bool requires_grad = false;
};

/// Shared handle to a dense row-major float64 array. Values are immutable once
/// an op has produced them; only the gradient buffer accumulates.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->value; }
  /// Direct write access for optimizers; never call on a tensor recorded on a live tape.
  std::span<double> mutable_values() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const;

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  /// Grad buffer, allocated on first access.
  std::span<double> grad_buffer() const;
  void zero_grad() { node_->grad.clear(); }

  /// Same storage detached from any graph (requires_grad = false).
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node> node) { return Tensor(std::move(node)); }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

/// Ordered record of differentiable operations. Entries are appended in
/// creation order, which is a topological order, so reverse iteration visits
/// every node after all of its consumers.
class Tape {
 public:
  /// Receives d(loss)/d(output) and the output values.
  using Backward = std::function<void(std::span<const double>, std::span<const double>)>;

  void record(std::shared_ptr<Node> output, Backward fn);
  /// Seeds d(loss)/d(loss) = 1 and propagates. Loss must be a single element.
  void backward(const Tensor& loss);
  void reset();
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    std::shared_ptr<Node> output;
    Backward fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// Installs a tape as the thread's recording target for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Builds an op output. When a tape is active and any input requires grad the
/// output requires grad and `backward` is recorded; it receives d(loss)/d(output).
Tensor make_result(Shape shape, std::vector<double> values, std::span<const Tensor> inputs,
                   std::function<void(std::span<const double>)> backward);
Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   std::function<void(std::span<const double>)> backward);
/// As make_result, but the backward also sees the output values.
Tensor make_result_y(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                     Tape::Backward backward);

}  // namespace hpc::diff
