#pragma once

#include <vector>

#include "tardis/tensor.hpp"

namespace tardis {

// Hard-mask Dice 2|P∩T| / (|P| + |T|) for one class id. Both masks empty of
// the class -> 1 by convention.
double dice_score(const std::vector<int>& pred, const std::vector<int>& truth, int cls);

// Mann-Whitney AUC with midrank tie handling. Demands both label classes.
double auc_score(const std::vector<double>& scores, const std::vector<int>& labels);

// Spearman rank correlation via midranks. A constant list has no ordering
// evidence and yields 0.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Mean silhouette over all points for a binary cluster assignment, Euclidean
// distance. Singleton clusters score 0 for their point.
double silhouette(const std::vector<std::vector<double>>& points, const std::vector<int>& labels);

struct RidgeProbe {
  std::vector<double> w;
  double b = 0;
};

// Least squares with an L2 penalty on w (bias unpenalized), solved exactly by
// Gaussian elimination on the normal equations.
RidgeProbe ridge_fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                     double lambda);
double ridge_predict(const RidgeProbe& probe, const std::vector<double>& x);

// Coefficient of determination; constant truth -> 0.
double r_squared(const std::vector<double>& pred, const std::vector<double>& truth);

// Class-id mask from [classes, H, W] logits by per-pixel argmax, ties to the
// lowest class id.
std::vector<int> argmax_mask(const Tensor& logits);

// Class ids from a [H, W] float mask, validating integer values in [0, n).
std::vector<int> mask_ids(const Tensor& mask, int num_classes);

}  // namespace tardis
