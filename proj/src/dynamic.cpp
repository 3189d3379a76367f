#include "tardis/dynamic.hpp"

#include <stdexcept>
#include <string>

namespace tardis {

Tensor reparameterize(const Tensor& mu, const Tensor& log_var, const Tensor& eps) {
  if (mu.shape() != log_var.shape() || mu.shape() != eps.shape())
    throw std::invalid_argument("reparameterize: mu, log_var, eps must share one shape");
  return add(mu, mul(exp(affine(log_var, 0.5f, 0.0f)), eps));
}

Tensor kl_standard_normal(const Tensor& mu, const Tensor& log_var) {
  if (mu.shape() != log_var.shape())
    throw std::invalid_argument("kl_standard_normal: shape mismatch");
  Tensor term = sub(add(mul(mu, mu), exp(log_var)), affine(log_var, 1.0f, 1.0f));
  return affine(mean(term), 0.5f, 0.0f);
}

Tensor ranking_loss(const std::vector<Tensor>& taus, float margin) {
  if (margin <= 0.0f) throw std::invalid_argument("ranking_loss: margin must be positive");
  const size_t n = taus.size();
  if (n < 2) return Tensor::from({1}, {0.0f});
  Tensor acc = Tensor::from({1}, {0.0f});
  int pairs = 0;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      acc = add(acc, relu(affine(sub(taus[i], taus[j]), 1.0f, margin)));
      ++pairs;
    }
  return affine(acc, 1.0f / float(pairs), 0.0f);
}

DynamicHead::DynamicHead(int channels, int z_dim, int hidden, Rng& rng)
    : c_(channels),
      zc_(z_dim),
      tau_head_(make_linear(channels, 1, rng)),
      enc_in_(make_linear(2 * channels + 1, hidden, rng)),
      mu_head_(make_linear(hidden, z_dim, rng)),
      lv_head_(make_linear(hidden, z_dim, rng)),
      dec_in_(make_linear(channels + z_dim + 1, hidden, rng)),
      dec_out_(make_linear(hidden, channels, rng)) {
  if (channels < 1 || z_dim < 1 || hidden < 1)
    throw std::invalid_argument("dynamic head dims must be positive");
}

Tensor DynamicHead::regress_tau(const Tensor& x_d) const {
  if (x_d.rank() != 2 || x_d.dim(1) != c_)
    throw std::invalid_argument("regress_tau: tokens must be [K, " + std::to_string(c_) + "]");
  return reshape(sigmoid(tau_head_(mean_axis(x_d, 0))), {1});
}

namespace {

Tensor conditioned(const Tensor& grid, const Condition& cond, int channels) {
  if (cond.anatomy.rank() != 2 || cond.anatomy.dim(1) != channels)
    throw std::invalid_argument("condition anatomy must be [K, " + std::to_string(channels) + "]");
  if (grid.dim(0) != cond.anatomy.dim(0))
    throw std::invalid_argument("condition anatomy position count differs from the token grid");
  return concat({grid, cond.anatomy, tile_scalar(cond.tau, grid.dim(0), 1)}, 1);
}

}  // namespace

Posterior DynamicHead::encode(const Tensor& x_d, const Condition& cond, const Tensor& eps) const {
  if (x_d.rank() != 2 || x_d.dim(1) != c_)
    throw std::invalid_argument("encode: tokens must be [K, " + std::to_string(c_) + "]");
  Tensor h = relu(enc_in_(conditioned(x_d, cond, c_)));
  Posterior p;
  p.mu = mu_head_(h);
  p.log_var = clamp(lv_head_(h), -10.0f, 10.0f);
  p.z = reparameterize(p.mu, p.log_var, eps);
  return p;
}

Tensor DynamicHead::decode(const Tensor& z, const Condition& cond) const {
  if (z.rank() != 2 || z.dim(1) != zc_)
    throw std::invalid_argument("decode: latents must be [K, " + std::to_string(zc_) + "]");
  return dec_out_(relu(dec_in_(conditioned(z, cond, c_))));
}

Tensor DynamicHead::sample_prior(const Condition& cond, Rng* rng) const {
  const int k = cond.anatomy.dim(0);
  Tensor z = Tensor::zeros({k, zc_});
  if (rng)
    for (auto& v : z.data()) v = float(rng->normal());
  return decode(z, cond);
}

void DynamicHead::params(ParamList& out) const {
  collect(out, "dynamic.tau_head", tau_head_);
  collect(out, "dynamic.enc_in", enc_in_);
  collect(out, "dynamic.mu_head", mu_head_);
  collect(out, "dynamic.lv_head", lv_head_);
  collect(out, "dynamic.dec_in", dec_in_);
  collect(out, "dynamic.dec_out", dec_out_);
}

SpecificTerms specific_loss(const std::vector<Tensor>& x_d, const std::vector<Tensor>& recon,
                            const std::vector<Posterior>& posts, const std::vector<Tensor>& taus,
                            float kl_weight, float margin) {
  if (x_d.empty() || x_d.size() != recon.size() || x_d.size() != posts.size() ||
      x_d.size() != taus.size())
    throw std::invalid_argument("specific_loss: per-modality lists must align");

  Tensor rec = Tensor::from({1}, {0.0f});
  Tensor kl = Tensor::from({1}, {0.0f});
  for (size_t i = 0; i < x_d.size(); ++i) {
    rec = add(rec, mse(recon[i], x_d[i]));
    kl = add(kl, kl_standard_normal(posts[i].mu, posts[i].log_var));
  }
  const float inv_n = 1.0f / float(x_d.size());
  SpecificTerms out;
  out.ranking = ranking_loss(taus, margin);
  out.recon = affine(rec, inv_n, 0.0f);
  out.kl = affine(kl, inv_n, 0.0f);
  out.total = add(add(out.ranking, out.recon), affine(out.kl, kl_weight, 0.0f));
  return out;
}

}  // namespace tardis
