#pragma once

#include <optional>
#include <vector>

#include "fern/tensor.hpp"

namespace fern {

struct LossConfig {
  bool use_permutation_loss = false;
  bool use_feature_loss = false;
  double permutation_weight = 0.5;
  double feature_weight = 1.0;
  double std_mean_mix = 0.5;  // feature = mix*std_term + (1-mix)*mean_term
  // permuted samples also train the classification head with the original
  // class label; off restricts the classification loss to identity samples
  bool classify_permuted = true;
};

struct LossBreakdown {
  double l_classification = 0.0;
  std::optional<double> l_permutation;
  std::optional<double> l_std;
  std::optional<double> l_mean;
  std::optional<double> l_feature;
  double l_total = 0.0;
  Tensor total;  // scalar, on the tape; backward through this
};

// per-sample spatial averages: Y[b,c] = mean over H,W of X[b,c,:,:]
Tensor channel_means(const Tensor& features);

// batch mean of exp(-population std over channels of Y[b,:]); requires C >= 2
Tensor loss_std(const Tensor& features);

// batch mean of exp(-mean over C,H,W of X[b,:,:,:])
Tensor loss_mean(const Tensor& features);

// mix*loss_std + (1-mix)*loss_mean; 0.5 recovers the plain average
Tensor loss_feature(const Tensor& features, double mix = 0.5);

// Composite training objective. perm_logits/perm_labels are consulted only
// when use_permutation_loss; features only when use_feature_loss.
// identity_rows lists batch rows carrying unpermuted images and is used when
// classify_permuted is off.
LossBreakdown total_loss(const Tensor& class_logits, const std::vector<int>& class_labels,
                         const Tensor* perm_logits, const std::vector<int>& perm_labels,
                         const Tensor* features, const LossConfig& config,
                         const std::vector<int>* identity_rows = nullptr);

}  // namespace fern
