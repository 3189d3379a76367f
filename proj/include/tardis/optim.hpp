#pragma once

#include "tardis/layers.hpp"

namespace tardis {

// Adam with decoupled weight decay. Moment buffers key off the parameter list
// order, which stays fixed for the life of the optimizer.
class AdamW {
 public:
  explicit AdamW(ParamList params, float lr, float beta1 = 0.9f, float beta2 = 0.999f,
                 float eps = 1e-8f, float weight_decay = 0.01f);

  void set_lr(float lr) { lr_ = lr; }
  float lr() const { return lr_; }

  void zero_grad();
  void step();

 private:
  ParamList params_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  float lr_;
  float beta1_, beta2_, eps_, wd_;
  long long t_ = 0;
};

// Cosine decay from lr0 at step 0 to lr_min at step total-1.
float cosine_lr(float lr0, float lr_min, int step, int total);

// Scales all gradients so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(ParamList& params, double max_norm);

}  // namespace tardis
