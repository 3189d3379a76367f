#include "tardis/model.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>

namespace tardis {

using phantom::Phase;
using phantom::PhaseImage;
using phantom::Study;

namespace {

Tensor mean_stack(const std::vector<Tensor>& parts) {
  Tensor acc = parts.front();
  for (size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return affine(acc, 1.0f / float(parts.size()), 0.0f);
}

}  // namespace

TardisModel::TardisModel(const ModelConfig& cfg, int hw, uint64_t seed)
    : cfg_(cfg),
      rng_(seed),
      backbone_(hw, cfg.channels, rng_),
      dict_(cfg.dict_size, cfg.channels, rng_),
      dyn_(cfg.channels, cfg.z_dim, cfg.hidden, rng_),
      assembly_(cfg.channels, rng_) {}

ParamList TardisModel::params() const {
  ParamList out;
  backbone_.params(out);
  dict_.params(out);
  dyn_.params(out);
  assembly_.params(out);
  return out;
}

void TardisModel::load_state(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::map<std::string, const Tensor*> src;
  for (const auto& [name, t] : tensors) {
    if (!src.emplace(name, &t).second)
      throw std::invalid_argument("load_state: duplicate tensor " + name);
  }
  for (auto& [name, dst] : params()) {
    auto it = src.find(name);
    if (it == src.end()) throw std::invalid_argument("load_state: missing tensor " + name);
    if (it->second->shape() != dst.shape())
      throw std::invalid_argument("load_state: shape mismatch for " + name);
    dst.data() = it->second->data();
    src.erase(it);
  }
  if (!src.empty())
    throw std::invalid_argument("load_state: unknown tensor " + src.begin()->first);
}

TrainForward TardisModel::forward_train(const Study& study, Rng& rng) {
  if (study.phases.empty()) throw std::invalid_argument("forward_train: study has no phases");

  std::vector<size_t> order(study.phases.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return study.phases[a].tau_actual < study.phases[b].tau_actual;
  });

  std::vector<Tensor> images;
  images.reserve(order.size());
  for (size_t idx : order) images.push_back(phantom::normalize_volume(study.phases[idx].image));
  const Backbone::Features feats = backbone_.encode(images);

  TrainForward out;
  std::vector<Tensor> st_grids;
  for (size_t i = 0; i < order.size(); ++i) {
    const PhaseImage& src = study.phases[order[i]];
    PhaseTrace tr;
    tr.phase = src.phase;
    tr.tau_actual = src.tau_actual;
    const Tensor toks = backbone_.tokens(feats.deep[i]);
    tr.tokens_s = backbone_.project_static(toks);
    tr.tokens_d = backbone_.project_dynamic(toks);
    tr.quant = dict_.quantize(tr.tokens_s);
    st_grids.push_back(tr.quant.st);
    out.phases.push_back(std::move(tr));
  }
  out.anatomy = mean_anatomy(st_grids);

  const int k = positions();
  const int zc = dyn_.z_dim();
  for (PhaseTrace& tr : out.phases) {
    tr.tau_hat = dyn_.regress_tau(tr.tokens_d);
    const Condition cond{out.anatomy, tr.tau_hat};
    Tensor eps = Tensor::zeros({k, zc});
    for (float& v : eps.data()) v = float(rng.normal());
    tr.post = dyn_.encode(tr.tokens_d, cond, eps);
    tr.recon = dyn_.decode(tr.post.z, cond);
  }

  std::vector<Tensor> reps;
  reps.push_back(out.anatomy);
  for (const PhaseTrace& tr : out.phases) reps.push_back(tr.recon);
  out.weights = assembly_.compute_weights(reps);
  out.fused = fuse(reps, out.weights);
  out.logits = backbone_.decode(out.fused, mean_stack(feats.skip));

  out.pooled.emplace_back(0, mean_axis(out.anatomy, 0));
  for (const PhaseTrace& tr : out.phases)
    out.pooled.emplace_back(1 + int(tr.phase), mean_axis(tr.recon, 0));
  return out;
}

InferResult TardisModel::infer(const Study& study, const std::vector<Phase>& subset,
                               MissingFill fill, Rng* rng, int mc_samples) {
  if (mc_samples < 1) throw std::invalid_argument("infer: mc_samples must be positive");

  std::vector<const PhaseImage*> present;
  for (const PhaseImage& ph : study.phases) {
    if (std::find(subset.begin(), subset.end(), ph.phase) != subset.end()) present.push_back(&ph);
  }
  if (present.empty()) throw std::invalid_argument("infer: no acquired phase in subset");

  std::vector<Tensor> images;
  images.reserve(present.size());
  for (const PhaseImage* ph : present) images.push_back(phantom::normalize_volume(ph->image));
  const Backbone::Features feats = backbone_.encode(images);

  std::vector<Tensor> st_grids, x_ds;
  for (size_t i = 0; i < present.size(); ++i) {
    const Tensor toks = backbone_.tokens(feats.deep[i]);
    st_grids.push_back(dict_.quantize(backbone_.project_static(toks)).st);
    x_ds.push_back(backbone_.project_dynamic(toks));
  }

  InferResult out;
  out.anatomy = mean_anatomy(st_grids);

  const int k = positions();
  const Tensor eps0 = Tensor::zeros({k, dyn_.z_dim()});
  for (int p = 0; p < phantom::kNumPhases; ++p) {
    const Phase ph = Phase(p);
    size_t at = present.size();
    for (size_t i = 0; i < present.size(); ++i) {
      if (present[i]->phase == ph) at = i;
    }
    if (at < present.size()) {
      const Tensor tau_hat = dyn_.regress_tau(x_ds[at]);
      const Condition cond{out.anatomy, tau_hat};
      const Posterior post = dyn_.encode(x_ds[at], cond, eps0);
      out.slots.push_back({ph, true, tau_hat.item(), dyn_.decode(post.mu, cond)});
    } else if (fill != MissingFill::kNone) {
      const float tau = phantom::nominal_tau(ph);
      const Condition cond{out.anatomy, Tensor::scalar(tau)};
      Tensor rep;
      if (fill == MissingFill::kZeros) {
        rep = Tensor::zeros({k, channels()});
      } else if (rng == nullptr) {
        rep = dyn_.sample_prior(cond, nullptr);
      } else {
        std::vector<Tensor> draws;
        draws.reserve(size_t(mc_samples));
        for (int s = 0; s < mc_samples; ++s) draws.push_back(dyn_.sample_prior(cond, rng));
        rep = mean_stack(draws);
      }
      out.slots.push_back({ph, false, tau, std::move(rep)});
    }
  }

  std::vector<Tensor> reps;
  reps.push_back(out.anatomy);
  for (const SlotInfo& s : out.slots) reps.push_back(s.rep);
  out.weights = assembly_.compute_weights(reps);
  out.logits = backbone_.decode(fuse(reps, out.weights), mean_stack(feats.skip));
  return out;
}

}  // namespace tardis
