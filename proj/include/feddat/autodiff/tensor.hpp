// Copyright 2026 The FedDAT Simulator Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace feddat::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes are incompatible with an op.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when the tape is used out of contract (non-scalar loss, double backward, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a forward op produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  // Empty until the first gradient accumulation; never allocated for frozen nodes.
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;

  std::span<double> grad_buffer();
  void accumulate_grad(std::span<const double> g);
};

}  // namespace detail

/// Dense row-major f64 tensor handle. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double at(std::size_t flat_index) const { return node_->value.at(flat_index); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return node_->leaf; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  /// Drops the gradient buffer entirely (it is reallocated on next accumulation).
  void clear_grad() { node_->grad.clear(); node_->grad.shrink_to_fit(); }

  /// New leaf holding a copy of the values, never tracked.
  Tensor detach() const;
  /// New leaf holding a copy of the values with the same requires_grad flag.
  Tensor clone() const;
  /// Overwrites values in place; shapes must match.
  void assign(const Tensor& other);

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Define-by-run recording of differentiable ops.
///
/// Ops executed while a tape is active on the current thread, and whose inputs
/// require gradients, append an entry here. backward() replays the entries in
/// reverse order, which is a valid topological order because entries are
/// appended in execution order. A tape is consumed by backward(); calling it
/// again without a fresh forward pass is an error.
class Tape {
 public:
  using BackwardFn = std::function<void(const detail::Node& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes a tape the active recorder for this thread; passing nullptr disables recording.
  class Scope {
   public:
    explicit Scope(Tape* tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();

  void record(std::shared_ptr<detail::Node> output,
              std::vector<std::shared_ptr<detail::Node>> inputs, BackwardFn fn);

  void backward(const Tensor& loss);

  /// Frees every saved activation.
  void clear();

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    std::shared_ptr<detail::Node> output;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// Disables recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : scope_(nullptr) {}

 private:
  Tape::Scope scope_;
};

/// Runs backward on the tape active for this thread.
void backward(const Tensor& loss);

}  // namespace feddat::ad
