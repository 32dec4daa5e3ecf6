#include "fern/tensor.hpp"

#include <sstream>

namespace fern {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) contract_fail("tensor shape has negative dimension " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::create(Shape shape, std::vector<double> values, bool requires_grad) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size()))
    contract_fail("tensor_create: shape " + shape_str(shape) + " wants " + std::to_string(n) +
                  " values, got " + std::to_string(values.size()));
  Tensor t;
  t.d_ = std::make_shared<TensorData>();
  t.d_->shape = std::move(shape);
  t.d_->value = std::move(values);
  t.d_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  int64_t n = shape_numel(shape);
  Tensor t;
  t.d_ = std::make_shared<TensorData>();
  t.d_->shape = std::move(shape);
  t.d_->value.assign(static_cast<size_t>(n), 0.0);
  t.d_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& x : t.values()) x = v;
  return t;
}

Tensor Tensor::scalar_tensor(double v, bool requires_grad) {
  return create({1}, {v}, requires_grad);
}

double Tensor::scalar() const {
  if (numel() != 1) contract_fail("scalar() on tensor of shape " + shape_str(shape()));
  return d_->value[0];
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(Tensor output, std::function<void()> backward) {
  nodes_.push_back(Node{std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    contract_fail("backward: loss must be a defined scalar tensor");
  if (nodes_.empty() || !nodes_.back().output.same_data(loss)) {
    // The loss must live on this tape; the common case is the last node, but
    // accept any recorded output.
    bool found = false;
    for (const Node& n : nodes_)
      if (n.output.same_data(loss)) {
        found = true;
        break;
      }
    if (!found) contract_fail("backward: loss was not produced on the active tape");
  }
  Tensor seed = loss;
  seed.grad()[0] = 1.0;
  for (size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    if (node.output.has_grad()) node.backward();
    // The output gradient has been fully consumed; free it to bound memory.
    node.output.zero_grad();
    node.backward = nullptr;
  }
  nodes_.clear();
}

}  // namespace fern
