#pragma once

#include <optional>
#include <vector>

#include "fern/tensor.hpp"

namespace fern {

// epsilon inside sqrt_eps; keeps d/dv sqrt(v) finite at v = 0
constexpr double kSqrtEps = 1e-12;
constexpr double kBatchNormEps = 1e-5;
constexpr double kBatchNormMomentum = 0.1;

// --- elementwise ---
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sqrt_eps(const Tensor& x);  // sqrt(x + kSqrtEps); requires x >= 0
Tensor negate(const Tensor& x);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

// --- binary (same shape) ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// --- shape ---
Tensor reshape(const Tensor& x, Shape shape);
// Same rank; source dims must equal the target or be 1.
Tensor broadcast_to(const Tensor& x, Shape shape);
Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor upsample_nearest(const Tensor& x, int factor);
Tensor gather_rows(const Tensor& x, std::vector<int> rows);

// --- reduction ---
// Mean over the named axes; reduced axes are removed from the shape. An empty
// axis set is the identity (copy).
Tensor reduce_mean(const Tensor& x, std::vector<int> axes);

// --- neural-net primitives ---
// x [B,Cin,H,W], w [Cout,Cin/groups,kh,kw], optional bias [Cout].
// Cross-correlation with zero padding; H' = (H + 2p - kh)/stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding,
              int groups = 1);

enum class PoolKind { max, avg };
// No padding. Max-pool gradient goes to the first maximal element in scan
// order.
Tensor pool2d(const Tensor& x, PoolKind kind, int kernel, int stride);

// x [B,F], w [O,F], bias [O] -> [B,O]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = kBatchNormMomentum;
  double eps = kBatchNormEps;

  explicit BatchNormState(int channels = 0)
      : running_mean(static_cast<size_t>(channels), 0.0),
        running_var(static_cast<size_t>(channels), 1.0) {}
};

// Training mode normalizes with per-channel batch statistics (population
// variance) and updates the running stats; eval mode uses the running stats.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, bool training);

// Mean over the batch of -log softmax(logits)[label], log-sum-exp shifted.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Backward through the active tape; loss must be scalar.
void backward(const Tensor& loss);

}  // namespace fern
