#pragma once

#include <deque>
#include <map>
#include <utility>
#include <vector>

#include "tardis/layers.hpp"
#include "tardis/optim.hpp"
#include "tardis/rng.hpp"
#include "tardis/tensor.hpp"

namespace tardis {

// Variational net for one representation pair: predicts a diagonal Gaussian
// over y given x. Fitting maximizes likelihood on detached samples; loss
// evaluation freezes the net so representation gradients never touch it.
class ClubEstimator {
 public:
  ClubEstimator(int x_dim, int y_dim, int hidden, Rng& rng);

  struct Heads {
    Tensor mu;
    Tensor log_var;
  };
  // Predicted diagonal Gaussian, one row per input row.
  Heads predict(const Tensor& xs, bool live) const;

  // Mean over rows of sum over dims of log N(y; mu(x), sigma^2(x)).
  // live=false routes the forward through frozen weights.
  Tensor loglik(const Tensor& xs, const Tensor& ys, bool live) const;

  // One likelihood-ascent step on a paired batch. Returns the mean
  // log-likelihood the step was taken against.
  float fit_step(const Tensor& xs, const Tensor& ys);

  // Closed-form batch estimate: mean_i log q(y_i|x_i) minus the mean over all
  // ordered (i, j) pairs of log q(y_j|x_i). No gradients.
  double estimate(const Tensor& xs, const Tensor& ys) const;

  void params(ParamList& out) const;

 private:
  int xd_ = 0;
  int yd_ = 0;
  Linear l1_, l2_, mu_head_, lv_head_;
  AdamW opt_;
};

// Representation kinds double as estimator keys: 0 is static, 1..4 the
// protocol phases in acquisition order.
using RepKind = int;
using PooledRep = std::pair<RepKind, Tensor>;  // [1, D] pooled grid

// All pairwise CLUB machinery for one training run: estimators keyed by the
// unordered kind pair (x = lower kind, y = higher), FIFO marginal buffers,
// and per-epoch MI trace samples.
class DisentangleBank {
 public:
  DisentangleBank(int rep_dim, int hidden, int buffer_cap, uint64_t seed);

  // One auxiliary step per estimator on the batch's detached pairs; also
  // records MI trace samples. Call before subject_loss each batch.
  void fit_batch(const std::vector<std::vector<PooledRep>>& batch);

  // Mean over unordered pairs of CLUB-style contrast: positive likelihood
  // minus mean likelihood against buffered marginal samples, aux frozen.
  // Fewer than two reps -> zero scalar.
  Tensor subject_loss(const std::vector<PooledRep>& reps);

  // Append detached y rows to the marginal buffers. Call after subject_loss.
  void push_batch(const std::vector<std::vector<PooledRep>>& batch);

  // (static-vs-dynamic, dynamic-vs-dynamic) mean CLUB estimates over this
  // epoch's recorded samples; clears the records. Pairs without samples are
  // skipped; empty groups report 0.
  std::pair<double, double> epoch_mi();

  int estimator_count() const { return int(slots_.size()); }

 private:
  struct Slot {
    ClubEstimator est;
    std::deque<std::vector<float>> buffer;          // y rows
    std::vector<std::vector<float>> sample_x;       // epoch trace
    std::vector<std::vector<float>> sample_y;
  };
  Slot& slot(RepKind a, RepKind b);  // a < b

  int dim_;
  int hidden_;
  int cap_;
  Rng rng_;
  std::map<std::pair<RepKind, RepKind>, Slot> slots_;
};

}  // namespace tardis
