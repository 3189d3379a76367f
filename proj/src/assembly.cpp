#include "tardis/assembly.hpp"

#include <stdexcept>
#include <string>

namespace tardis {

Assembly::Assembly(int channels, Rng& rng)
    : c_(channels),
      s1_(make_linear(channels, channels / 2, rng)),
      s2_(make_linear(channels / 2, 1, rng)) {
  if (channels < 2 || channels % 2 != 0)
    throw std::invalid_argument("assembly channels must be even and at least 2");
}

Tensor Assembly::compute_weights(const std::vector<Tensor>& reps) const {
  if (reps.empty()) throw std::invalid_argument("compute_weights: no representations");
  std::vector<Tensor> scores;
  scores.reserve(reps.size());
  for (const Tensor& r : reps) {
    if (r.rank() != 2 || r.dim(1) != c_ || r.dim(0) != reps[0].dim(0))
      throw std::invalid_argument("compute_weights: grids must share [K, " +
                                  std::to_string(c_) + "]");
    scores.push_back(s2_(relu(s1_(r))));  // [K, 1]
  }
  return softmax(concat(scores, 1), 1);
}

void Assembly::params(ParamList& out) const {
  collect(out, "assembly.s1", s1_);
  collect(out, "assembly.s2", s2_);
}

Tensor fuse(const std::vector<Tensor>& reps, const Tensor& weights) {
  if (reps.empty()) throw std::invalid_argument("fuse: no representations");
  if (weights.rank() != 2 || weights.dim(1) != int(reps.size()) ||
      weights.dim(0) != reps[0].dim(0))
    throw std::invalid_argument("fuse: weights must be [K, " + std::to_string(reps.size()) + "]");
  Tensor acc;
  for (size_t m = 0; m < reps.size(); ++m) {
    if (reps[m].shape() != reps[0].shape())
      throw std::invalid_argument("fuse: grids must share one shape");
    Tensor part = mul_colvec(reps[m], slice_cols(weights, int(m), int(m) + 1));
    acc = m == 0 ? part : add(acc, part);
  }
  return acc;
}

}  // namespace tardis
