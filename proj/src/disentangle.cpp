#include "tardis/disentangle.hpp"

#include <cmath>
#include <stdexcept>

namespace tardis {

namespace {

constexpr float kHalfLog2Pi = 0.91893853320467274178f;  // log(2*pi)/2

ParamList own_params(const Linear& l1, const Linear& l2, const Linear& mu, const Linear& lv) {
  ParamList ps;
  collect(ps, "club.l1", l1);
  collect(ps, "club.l2", l2);
  collect(ps, "club.mu", mu);
  collect(ps, "club.lv", lv);
  return ps;
}

}  // namespace

ClubEstimator::ClubEstimator(int x_dim, int y_dim, int hidden, Rng& rng)
    : xd_(x_dim),
      yd_(y_dim),
      l1_(make_linear(x_dim, hidden, rng)),
      l2_(make_linear(hidden, hidden, rng)),
      mu_head_(make_linear(hidden, y_dim, rng)),
      lv_head_(make_linear(hidden, y_dim, rng)),
      opt_(own_params(l1_, l2_, mu_head_, lv_head_), 1e-3f, 0.9f, 0.999f, 1e-8f, 0.0f) {
  if (x_dim < 1 || y_dim < 1 || hidden < 1)
    throw std::invalid_argument("club estimator dims must be positive");
}

ClubEstimator::Heads ClubEstimator::predict(const Tensor& xs, bool live) const {
  if (xs.rank() != 2 || xs.dim(1) != xd_)
    throw std::invalid_argument("club: xs must be [B, " + std::to_string(xd_) + "]");
  Tensor h;
  if (live) {
    h = relu(l2_(relu(l1_(xs))));
    return {mu_head_(h), clamp(lv_head_(h), -10.0f, 10.0f)};
  }
  h = relu(l2_.frozen(relu(l1_.frozen(xs))));
  return {mu_head_.frozen(h), clamp(lv_head_.frozen(h), -10.0f, 10.0f)};
}

Tensor ClubEstimator::loglik(const Tensor& xs, const Tensor& ys, bool live) const {
  if (ys.rank() != 2 || ys.dim(1) != yd_)
    throw std::invalid_argument("club: ys must be [B, " + std::to_string(yd_) + "]");
  if (ys.dim(0) != xs.dim(0)) throw std::invalid_argument("club: batch counts differ");
  Heads h = predict(xs, live);
  Tensor diff = sub(ys, h.mu);
  Tensor quad = mul(mul(diff, diff), exp(affine(h.log_var, -1.0f, 0.0f)));
  Tensor per_elem = affine(add(quad, h.log_var), -0.5f, -kHalfLog2Pi);
  return affine(sum(per_elem), 1.0f / float(ys.dim(0)), 0.0f);
}

float ClubEstimator::fit_step(const Tensor& xs, const Tensor& ys) {
  Tensor ll = loglik(xs, ys, true);
  opt_.zero_grad();
  backward(affine(ll, -1.0f, 0.0f));
  opt_.step();
  return ll.data()[0];
}

double ClubEstimator::estimate(const Tensor& xs, const Tensor& ys) const {
  Heads h = predict(xs, false);
  const int b = xs.dim(0);
  const float* mu = h.mu.data().data();
  const float* lv = h.log_var.data().data();
  const float* y = ys.data().data();

  std::vector<double> sy(size_t(yd_), 0.0), sy2(size_t(yd_), 0.0);
  for (int j = 0; j < b; ++j)
    for (int d = 0; d < yd_; ++d) {
      const double v = y[size_t(j) * yd_ + d];
      sy[size_t(d)] += v;
      sy2[size_t(d)] += v * v;
    }

  double positive = 0.0, negative = 0.0;
  for (int i = 0; i < b; ++i)
    for (int d = 0; d < yd_; ++d) {
      const double m = mu[size_t(i) * yd_ + d];
      const double inv_var = std::exp(-double(lv[size_t(i) * yd_ + d]));
      const double dp = double(y[size_t(i) * yd_ + d]) - m;
      positive += dp * dp * inv_var;
      // Mean over j of (y_j - m)^2 from the batch moments.
      negative += (sy2[size_t(d)] - 2.0 * m * sy[size_t(d)] + b * m * m) / b * inv_var;
    }
  // Log-variance and constant terms cancel between the two sides.
  return -0.5 * (positive - negative) / b;
}

void ClubEstimator::params(ParamList& out) const {
  for (auto& [name, t] : own_params(l1_, l2_, mu_head_, lv_head_)) out.emplace_back(name, t);
}

DisentangleBank::DisentangleBank(int rep_dim, int hidden, int buffer_cap, uint64_t seed)
    : dim_(rep_dim), hidden_(hidden), cap_(buffer_cap), rng_(seed) {
  if (rep_dim < 1 || buffer_cap < 1)
    throw std::invalid_argument("disentangle bank needs positive dims and buffer capacity");
}

DisentangleBank::Slot& DisentangleBank::slot(RepKind a, RepKind b) {
  auto it = slots_.find({a, b});
  if (it == slots_.end())
    it = slots_.emplace(std::make_pair(a, b), Slot{ClubEstimator(dim_, dim_, hidden_, rng_), {}, {}, {}})
             .first;
  return it->second;
}

namespace {

std::vector<float> detached_row(const Tensor& rep, int dim) {
  if (rep.rank() != 2 || rep.dim(0) != 1 || rep.dim(1) != dim)
    throw std::invalid_argument("disentangle: pooled reps must be [1, " + std::to_string(dim) +
                                "]");
  return rep.data();
}

Tensor stack_rows(const std::vector<std::vector<float>>& rows, int dim) {
  Tensor out = Tensor::zeros({int(rows.size()), dim});
  for (size_t i = 0; i < rows.size(); ++i)
    for (int d = 0; d < dim; ++d) out.data()[i * size_t(dim) + d] = rows[i][size_t(d)];
  return out;
}

}  // namespace

void DisentangleBank::fit_batch(const std::vector<std::vector<PooledRep>>& batch) {
  std::map<std::pair<RepKind, RepKind>, std::pair<std::vector<std::vector<float>>,
                                                  std::vector<std::vector<float>>>>
      grouped;
  for (const auto& reps : batch)
    for (size_t i = 0; i < reps.size(); ++i)
      for (size_t j = i + 1; j < reps.size(); ++j) {
        const auto& lo = reps[i].first < reps[j].first ? reps[i] : reps[j];
        const auto& hi = reps[i].first < reps[j].first ? reps[j] : reps[i];
        if (lo.first == hi.first)
          throw std::invalid_argument("disentangle: duplicate representation kind in one study");
        auto& g = grouped[{lo.first, hi.first}];
        g.first.push_back(detached_row(lo.second, dim_));
        g.second.push_back(detached_row(hi.second, dim_));
      }

  for (auto& [key, g] : grouped) {
    Slot& s = slot(key.first, key.second);
    s.est.fit_step(stack_rows(g.first, dim_), stack_rows(g.second, dim_));
    for (size_t r = 0; r < g.first.size(); ++r) {
      if (int(s.sample_x.size()) >= 256) break;
      s.sample_x.push_back(g.first[r]);
      s.sample_y.push_back(g.second[r]);
    }
  }
}

Tensor DisentangleBank::subject_loss(const std::vector<PooledRep>& reps) {
  if (reps.size() < 2) return Tensor::from({1}, {0.0f});
  Tensor acc = Tensor::from({1}, {0.0f});
  int pairs = 0;
  for (size_t i = 0; i < reps.size(); ++i)
    for (size_t j = i + 1; j < reps.size(); ++j) {
      const auto& lo = reps[i].first < reps[j].first ? reps[i] : reps[j];
      const auto& hi = reps[i].first < reps[j].first ? reps[j] : reps[i];
      Slot& s = slot(lo.first, hi.first);

      Tensor positive = s.est.loglik(lo.second, hi.second, false);
      Tensor marginal;
      if (s.buffer.empty()) {
        // Self-reference keeps the term at zero while the graph stays alive.
        marginal = s.est.loglik(lo.second, stop_gradient(hi.second), false);
      } else {
        Tensor acc_m;
        for (const auto& row : s.buffer) {
          Tensor yb = stack_rows({row}, dim_);
          Tensor ll = s.est.loglik(lo.second, yb, false);
          acc_m = acc_m.defined() ? add(acc_m, ll) : ll;
        }
        marginal = affine(acc_m, 1.0f / float(s.buffer.size()), 0.0f);
      }
      acc = add(acc, sub(positive, marginal));
      ++pairs;
    }
  return affine(acc, 1.0f / float(pairs), 0.0f);
}

void DisentangleBank::push_batch(const std::vector<std::vector<PooledRep>>& batch) {
  for (const auto& reps : batch)
    for (size_t i = 0; i < reps.size(); ++i)
      for (size_t j = i + 1; j < reps.size(); ++j) {
        const auto& lo = reps[i].first < reps[j].first ? reps[i] : reps[j];
        const auto& hi = reps[i].first < reps[j].first ? reps[j] : reps[i];
        Slot& s = slot(lo.first, hi.first);
        s.buffer.push_back(detached_row(hi.second, dim_));
        while (int(s.buffer.size()) > cap_) s.buffer.pop_front();
      }
}

std::pair<double, double> DisentangleBank::epoch_mi() {
  double sd_acc = 0.0, dd_acc = 0.0;
  int sd_n = 0, dd_n = 0;
  for (auto& [key, s] : slots_) {
    if (s.sample_x.size() >= 8) {
      const double mi = s.est.estimate(stack_rows(s.sample_x, dim_), stack_rows(s.sample_y, dim_));
      if (key.first == 0) {
        sd_acc += mi;
        ++sd_n;
      } else {
        dd_acc += mi;
        ++dd_n;
      }
    }
    s.sample_x.clear();
    s.sample_y.clear();
  }
  return {sd_n ? sd_acc / sd_n : 0.0, dd_n ? dd_acc / dd_n : 0.0};
}

}  // namespace tardis
