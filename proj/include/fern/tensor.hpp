#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fern/common.hpp"

namespace fern {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

// Cheap shared handle to an n-dimensional double array. Values are written
// once by the producing operation; the optimizer mutates parameter values in
// place between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor create(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar_tensor(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(d_->value.size()); }

  double* data() { return d_->value.data(); }
  const double* data() const { return d_->value.data(); }
  std::vector<double>& values() { return d_->value; }
  const std::vector<double>& values() const { return d_->value; }
  double scalar() const;

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }

  bool has_grad() const { return !d_->grad.empty(); }
  // Allocates (zero-filled) on first use.
  std::vector<double>& grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0);
    return d_->grad;
  }
  const std::vector<double>& grad_view() const { return d_->grad; }
  void zero_grad() { d_->grad.clear(); }

  bool same_data(const Tensor& other) const { return d_ == other.d_; }
  TensorData* unwrap() const { return d_.get(); }

 private:
  std::shared_ptr<TensorData> d_;
};

// Records the forward pass so gradients can be pushed back through it.
// Construction makes the tape active (ops with grad-requiring inputs then
// record themselves); destruction restores the previously active tape.
// Nodes are appended in execution order, which is a topological order.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(Tensor output, std::function<void()> backward);
  size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and walks the tape in reverse, accumulating
  // gradients additively into every grad-requiring tensor. Each node's output
  // gradient is released as soon as the node has consumed it.
  void backward(const Tensor& loss);

 private:
  struct Node {
    Tensor output;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
};

// True when a tape is active and any input requires grad: the op must record.
inline bool grad_needed(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  return false;
}

}  // namespace fern
