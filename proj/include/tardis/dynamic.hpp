#pragma once

#include <vector>

#include "tardis/layers.hpp"
#include "tardis/rng.hpp"
#include "tardis/tensor.hpp"

namespace tardis {

// Posterior over the latent grid of one modality. log_var arrives clamped to
// [-10, 10]; z was drawn with caller-supplied noise so runs replay exactly.
struct Posterior {
  Tensor mu;       // [K, Cz]
  Tensor log_var;  // [K, Cz]
  Tensor z;        // [K, Cz]
};

// Decoder conditioning: the averaged anatomy grid plus one relative time per
// modality. tau stays a graph node so the time regressor trains through it.
struct Condition {
  Tensor anatomy;  // [K, C]
  Tensor tau;      // [1], value in [0, 1]
};

Tensor reparameterize(const Tensor& mu, const Tensor& log_var, const Tensor& eps);

// Mean over elements of (mu^2 + sigma^2 - 1 - log sigma^2) / 2 against N(0, I).
Tensor kl_standard_normal(const Tensor& mu, const Tensor& log_var);

// taus ordered by ground-truth acquisition; mean hinge over ordered pairs,
// max(0, tau_i - tau_j + margin) for j > i. Fewer than two entries -> 0.
Tensor ranking_loss(const std::vector<Tensor>& taus, float margin);

class DynamicHead {
 public:
  DynamicHead(int channels, int z_dim, int hidden, Rng& rng);

  int z_dim() const { return zc_; }

  // Pooled dynamic tokens through a sigmoid bottleneck. Output [1] in (0, 1).
  Tensor regress_tau(const Tensor& x_d) const;

  // Shared posterior net over concat(token, anatomy token, tau) per position.
  // eps must be [K, Cz]; pass zeros for the deterministic mean path.
  Posterior encode(const Tensor& x_d, const Condition& cond, const Tensor& eps) const;

  // Reconstructs a [K, C] dynamic grid from latents under the condition.
  Tensor decode(const Tensor& z, const Condition& cond) const;

  // Prior draw for an absent phase: z ~ N(0, I) when rng is given, z = 0 in
  // deterministic mode (rng == nullptr).
  Tensor sample_prior(const Condition& cond, Rng* rng) const;

  void params(ParamList& out) const;

 private:
  int c_ = 0;
  int zc_ = 0;
  Linear tau_head_;
  Linear enc_in_;
  Linear mu_head_;
  Linear lv_head_;
  Linear dec_in_;
  Linear dec_out_;
};

struct SpecificTerms {
  Tensor ranking;
  Tensor recon;
  Tensor kl;
  Tensor total;  // ranking + recon + kl_weight * kl
};

// Per-modality lists must align; taus are the regressed values in
// ground-truth acquisition order.
SpecificTerms specific_loss(const std::vector<Tensor>& x_d, const std::vector<Tensor>& recon,
                            const std::vector<Posterior>& posts, const std::vector<Tensor>& taus,
                            float kl_weight, float margin);

}  // namespace tardis
