#include "tardis/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace tardis {

AdamW::AdamW(ParamList params, float lr, float beta1, float beta2, float eps, float weight_decay)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
      wd_(weight_decay) {
  if (lr <= 0.0f) throw std::invalid_argument("AdamW: learning rate must be positive");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& [name, t] : params_) {
    m_.emplace_back(t.data().size(), 0.0f);
    v_.emplace_back(t.data().size(), 0.0f);
  }
}

void AdamW::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void AdamW::step() {
  ++t_;
  const float bc1 = 1.0f - std::pow(beta1_, float(t_));
  const float bc2 = 1.0f - std::pow(beta2_, float(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second.data();
    const auto& g = params_[i].second.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0f - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0f - beta2_) * g[j] * g[j];
      const float mhat = m[j] / bc1;
      const float vhat = v[j] / bc2;
      p[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p[j]);
    }
  }
}

float cosine_lr(float lr0, float lr_min, int step, int total) {
  if (total <= 1 || step <= 0) return lr0;
  if (step >= total - 1) return lr_min;
  const double f = double(step) / double(total - 1);
  return float(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(f * 3.14159265358979323846)));
}

double clip_global_norm(ParamList& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params)
    for (float g : t.grad()) sq += double(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const float scale = float(max_norm / norm);
    for (auto& [name, t] : params)
      for (float& g : t.grad()) g *= scale;
  }
  return norm;
}

}  // namespace tardis
