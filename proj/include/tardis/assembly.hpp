#pragma once

#include <vector>

#include "tardis/layers.hpp"
#include "tardis/rng.hpp"
#include "tardis/tensor.hpp"

namespace tardis {

// Position-wise competition between the static grid and the N dynamic grids.
// One scorer serves every representation, so the softmax is permutation
// consistent across the dynamic slots.
class Assembly {
 public:
  Assembly(int channels, Rng& rng);

  // reps: N+1 grids of [K, C], static first. Returns [K, N+1]; every row is
  // a probability vector.
  Tensor compute_weights(const std::vector<Tensor>& reps) const;

  void params(ParamList& out) const;

 private:
  int c_ = 0;
  Linear s1_;  // C -> C/2
  Linear s2_;  // C/2 -> 1
};

// Weighted sum over representations, column m of weights scaling reps[m].
// Output keeps the [K, C] grid shape for any representation count.
Tensor fuse(const std::vector<Tensor>& reps, const Tensor& weights);

}  // namespace tardis
