#include "fern/losses.hpp"

#include "fern/ops.hpp"

namespace fern {

namespace {

void check_features(const Tensor& features, const char* who) {
  if (!features.defined() || features.ndim() != 4)
    contract_fail(std::string(who) + ": expects feature tensor [B,C,H,W]");
}

}  // namespace

Tensor channel_means(const Tensor& features) {
  check_features(features, "channel_means");
  if (features.dim(2) < 1 || features.dim(3) < 1)
    contract_fail("channel_means: empty spatial extent");
  return reduce_mean(features, {2, 3});
}

Tensor loss_std(const Tensor& features) {
  check_features(features, "loss_std");
  const int B = features.dim(0), C = features.dim(1);
  if (C < 2) contract_fail("loss_std: needs at least 2 channels, got " + std::to_string(C));
  Tensor y = channel_means(features);                           // [B,C]
  Tensor mu = reshape(reduce_mean(y, {1}), {B, 1});             // per-sample channel mean
  Tensor centered = sub(y, broadcast_to(mu, {B, C}));
  Tensor var = reduce_mean(mul(centered, centered), {1});       // population: divide by C
  Tensor per_sample = fern::exp(negate(sqrt_eps(var)));         // [B]
  return reduce_mean(per_sample, {0});
}

Tensor loss_mean(const Tensor& features) {
  check_features(features, "loss_mean");
  Tensor m = reduce_mean(features, {1, 2, 3});  // [B]
  return reduce_mean(fern::exp(negate(m)), {0});
}

Tensor loss_feature(const Tensor& features, double mix) {
  return add(mul_scalar(loss_std(features), mix), mul_scalar(loss_mean(features), 1.0 - mix));
}

LossBreakdown total_loss(const Tensor& class_logits, const std::vector<int>& class_labels,
                         const Tensor* perm_logits, const std::vector<int>& perm_labels,
                         const Tensor* features, const LossConfig& config,
                         const std::vector<int>* identity_rows) {
  if (config.permutation_weight < 0.0 || config.feature_weight < 0.0)
    contract_fail("total_loss: loss weights must be >= 0");
  LossBreakdown out;

  Tensor cls;
  if (!config.classify_permuted && identity_rows != nullptr) {
    // restrict the classification loss to unpermuted rows; an all-permuted
    // batch contributes zero
    if (identity_rows->empty()) {
      cls = Tensor::scalar_tensor(0.0);
    } else {
      std::vector<int> sub_labels;
      sub_labels.reserve(identity_rows->size());
      for (int r : *identity_rows) sub_labels.push_back(class_labels[static_cast<size_t>(r)]);
      cls = softmax_cross_entropy(gather_rows(class_logits, *identity_rows), sub_labels);
    }
  } else {
    cls = softmax_cross_entropy(class_logits, class_labels);
  }
  out.l_classification = cls.scalar();
  Tensor total = cls;

  if (config.use_permutation_loss) {
    if (perm_logits == nullptr || !perm_logits->defined())
      contract_fail("total_loss: permutation loss enabled but no permutation logits");
    Tensor perm = softmax_cross_entropy(*perm_logits, perm_labels);
    out.l_permutation = perm.scalar();
    total = add(total, mul_scalar(perm, config.permutation_weight));
  }

  if (config.use_feature_loss) {
    if (features == nullptr || !features->defined())
      contract_fail("total_loss: feature loss enabled but no tapped features");
    Tensor lstd = loss_std(*features);
    Tensor lmean = loss_mean(*features);
    out.l_std = lstd.scalar();
    out.l_mean = lmean.scalar();
    Tensor feat =
        add(mul_scalar(lstd, config.std_mean_mix), mul_scalar(lmean, 1.0 - config.std_mean_mix));
    out.l_feature = feat.scalar();
    total = add(total, mul_scalar(feat, config.feature_weight));
  }

  out.total = total;
  out.l_total = total.scalar();
  return out;
}

}  // namespace fern
