#include "tardis/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "tardis/io.hpp"
#include "tardis/metrics.hpp"

namespace tardis {

using phantom::Study;

const std::array<const char*, LossBreakdown::kFields>& LossBreakdown::field_names() {
  static const std::array<const char*, kFields> names = {
      "agn",      "agn_consistency", "agn_codebook", "agn_commitment", "spe",
      "spe_ranking", "spe_recon",    "spe_kl",       "de",             "seg",
      "seg_dice", "seg_ce",          "total"};
  return names;
}

std::array<float, LossBreakdown::kFields> LossBreakdown::fields() const {
  return {agn, agn_consistency, agn_codebook, agn_commitment, spe, spe_ranking, spe_recon,
          spe_kl, de, seg, seg_dice, seg_ce, total};
}

SegTerms seg_loss(const Tensor& logits, const Tensor& mask) {
  if (logits.rank() != 3 || logits.dim(0) != phantom::kSegClasses)
    throw std::invalid_argument("seg_loss: logits must be [classes, H, W]");
  const int h = logits.dim(1);
  const int w = logits.dim(2);
  if (mask.rank() != 2 || mask.dim(0) != h || mask.dim(1) != w)
    throw std::invalid_argument("seg_loss: mask shape mismatch");
  const std::vector<int> ids = mask_ids(mask, phantom::kSegClasses);

  const int hw = h * w;
  const Tensor logp = log_softmax(reshape(logits, {phantom::kSegClasses, hw}), 0);
  const Tensor probs = exp(logp);

  Tensor onehot = Tensor::zeros({phantom::kSegClasses, hw});
  std::array<int, phantom::kSegClasses> gt_count{};
  for (int p = 0; p < hw; ++p) {
    onehot.data()[size_t(ids[size_t(p)] * hw + p)] = 1.0f;
    gt_count[size_t(ids[size_t(p)])] += 1;
  }

  const Tensor ce = affine(sum(mul(onehot, logp)), -1.0f / float(hw), 0.0f);

  const Tensor probs_t = transpose(probs);
  const Tensor onehot_t = transpose(onehot);
  Tensor dice_sum;
  int present = 0;
  for (int c = 0; c < phantom::kSegClasses; ++c) {
    if (gt_count[size_t(c)] == 0) continue;
    const Tensor pc = slice_cols(probs_t, c, c + 1);
    const Tensor gc = slice_cols(onehot_t, c, c + 1);
    const Tensor dice = div(affine(sum(mul(pc, gc)), 2.0f, 0.0f), add(sum(pc), sum(gc)));
    dice_sum = present ? add(dice_sum, dice) : dice;
    ++present;
  }
  SegTerms out;
  out.dice = affine(dice_sum, -1.0f / float(present), 1.0f);
  out.ce = ce;
  out.total = add(out.dice, out.ce);
  return out;
}

namespace {

float term_value(const Tensor& t, const char* name) {
  const float v = t.item();
  if (!std::isfinite(v))
    throw std::runtime_error(std::string("training fault: non-finite ") + name);
  return v;
}

}  // namespace

SubjectLoss composite_loss(const AgnosticTerms& agn, const SpecificTerms& spe, const Tensor& de,
                           const SegTerms& seg) {
  SubjectLoss out;
  out.agn = agn.total;
  out.spe = spe.total;
  out.de = de;
  out.seg = seg.total;
  out.total = add(add(agn.total, spe.total), add(de, seg.total));

  LossBreakdown& v = out.values;
  v.agn_consistency = term_value(agn.consistency, "agn_consistency");
  v.agn_codebook = term_value(agn.codebook, "agn_codebook");
  v.agn_commitment = term_value(agn.commitment, "agn_commitment");
  v.agn = term_value(agn.total, "agn");
  v.spe_ranking = term_value(spe.ranking, "spe_ranking");
  v.spe_recon = term_value(spe.recon, "spe_recon");
  v.spe_kl = term_value(spe.kl, "spe_kl");
  v.spe = term_value(spe.total, "spe");
  v.de = term_value(de, "de");
  v.seg_dice = term_value(seg.dice, "seg_dice");
  v.seg_ce = term_value(seg.ce, "seg_ce");
  v.seg = term_value(seg.total, "seg");
  v.total = term_value(out.total, "total");

  // Audited on the double shadows: the reported f32 fields round each term
  // independently, so their sum can sit several ulps off a large total.
  const double drift = std::abs(out.agn.item_hi() + out.spe.item_hi() + out.de.item_hi() +
                                out.seg.item_hi() - out.total.item_hi());
  if (drift > 1e-6)
    throw std::runtime_error("training fault: loss total drifted from its components");
  return out;
}

Study modality_dropout(const Study& study, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("modality_dropout: rate must be in [0, 1)");
  Study out = study;
  if (study.phases.empty()) return out;
  std::vector<size_t> kept;
  for (size_t i = 0; i < study.phases.size(); ++i) {
    if (rng.uniform() >= rate) kept.push_back(i);
  }
  if (kept.empty()) kept.push_back(size_t(rng.uniform_int(int(study.phases.size()))));
  out.phases.clear();
  for (size_t i : kept) out.phases.push_back(study.phases[i]);
  return out;
}

SubjectLoss assemble_loss(const TrainForward& fwd, const Study& study, DisentangleBank* bank,
                          const ModelConfig& cfg) {
  std::vector<Tensor> xs, xd, recon, taus;
  std::vector<Quantized> qs;
  std::vector<Posterior> posts;
  for (const PhaseTrace& tr : fwd.phases) {
    xs.push_back(tr.tokens_s);
    qs.push_back(tr.quant);
    xd.push_back(tr.tokens_d);
    recon.push_back(tr.recon);
    posts.push_back(tr.post);
    taus.push_back(tr.tau_hat);
  }
  const AgnosticTerms agn = agnostic_loss(xs, qs, float(cfg.beta));
  const SpecificTerms spe =
      specific_loss(xd, recon, posts, taus, float(cfg.kl_weight), float(cfg.rank_margin));
  const Tensor de = bank ? bank->subject_loss(fwd.pooled) : Tensor::zeros({1});
  const SegTerms seg = seg_loss(fwd.logits, study.seg);
  return composite_loss(agn, spe, de, seg);
}

StepResult batch_step(TardisModel& model, DisentangleBank& bank, AdamW& opt,
                      const std::vector<const Study*>& batch, const ModelConfig& cfg,
                      double clip_norm, Rng& noise) {
  if (batch.empty()) throw std::invalid_argument("batch_step: empty batch");

  std::vector<TrainForward> fwds;
  fwds.reserve(batch.size());
  std::vector<std::vector<PooledRep>> pooled;
  pooled.reserve(batch.size());
  for (const Study* s : batch) {
    fwds.push_back(model.forward_train(*s, noise));
    pooled.push_back(fwds.back().pooled);
  }

  // Auxiliary estimators learn from the detached batch first; the subject
  // losses below then see a frozen snapshot.
  bank.fit_batch(pooled);

  StepResult out;
  Tensor acc;
  std::array<double, LossBreakdown::kFields> sums{};
  for (size_t i = 0; i < fwds.size(); ++i) {
    const SubjectLoss loss = assemble_loss(fwds[i], *batch[i], &bank, cfg);
    acc = i ? add(acc, loss.total) : loss.total;
    const auto fields = loss.values.fields();
    for (int f = 0; f < LossBreakdown::kFields; ++f) sums[size_t(f)] += double(fields[size_t(f)]);
  }
  const Tensor batch_loss = affine(acc, 1.0f / float(batch.size()), 0.0f);

  opt.zero_grad();
  backward(batch_loss);
  ParamList params = model.params();
  out.grad_norm = clip_global_norm(params, clip_norm);
  opt.step();

  bank.push_batch(pooled);

  std::array<float, LossBreakdown::kFields> mean{};
  for (int f = 0; f < LossBreakdown::kFields; ++f)
    mean[size_t(f)] = float(sums[size_t(f)] / double(batch.size()));
  out.mean = {mean[0], mean[1], mean[2],  mean[3],  mean[4],  mean[5], mean[6],
              mean[7], mean[8], mean[9],  mean[10], mean[11], mean[12]};
  return out;
}

double foreground_dice(const std::vector<int>& pred, const std::vector<int>& truth) {
  return 0.5 * (dice_score(pred, truth, phantom::kSegOrgan) +
                dice_score(pred, truth, phantom::kSegTumor));
}

double evaluate_dice(TardisModel& model, const std::vector<Study>& studies) {
  if (studies.empty()) throw std::invalid_argument("evaluate_dice: no studies");
  const std::vector<phantom::Phase> all = {phantom::Phase::N, phantom::Phase::A,
                                           phantom::Phase::V, phantom::Phase::D};
  double acc = 0;
  for (const Study& s : studies) {
    const InferResult r = model.infer(s, all, MissingFill::kPrior);
    acc += foreground_dice(argmax_mask(r.logits), mask_ids(s.seg, phantom::kSegClasses));
  }
  return acc / double(studies.size());
}

namespace {

std::string csv_header() {
  std::string h = "epoch";
  for (const char* name : LossBreakdown::field_names()) {
    h += ',';
    h += name;
  }
  h += ",mi_static_dyn,mi_dyn_dyn,val_dice,lr";
  return h;
}

std::string csv_row(int epoch, const LossBreakdown& b, double mi_sd, double mi_dd,
                    double val_dice, float lr) {
  char buf[96];
  std::string row = std::to_string(epoch);
  for (float v : b.fields()) {
    std::snprintf(buf, sizeof(buf), ",%.9g", double(v));
    row += buf;
  }
  std::snprintf(buf, sizeof(buf), ",%.9g,%.9g,%.9g,%.9g", mi_sd, mi_dd, val_dice, double(lr));
  row += buf;
  return row;
}

// Static-projection token grids of one study; feeds dead-code reseeding
// without touching any noise stream.
std::vector<Tensor> static_token_pool(TardisModel& model, const Study& study) {
  std::vector<Tensor> images;
  for (const auto& ph : study.phases) images.push_back(phantom::normalize_volume(ph.image));
  const Backbone::Features feats = model.backbone().encode(images);
  std::vector<Tensor> pool;
  for (const Tensor& deep : feats.deep)
    pool.push_back(model.backbone().project_static(model.backbone().tokens(deep)));
  return pool;
}

}  // namespace

TrainResult train(const Config& cfg, uint64_t seed, const std::string& data_dir,
                  const std::string& out_dir) {
  namespace fs = std::filesystem;
  const phantom::DatasetManifest manifest =
      phantom::read_manifest(data_dir + "/manifest.jsonl");

  std::vector<Study> train_set, val_set;
  for (const auto& entry : manifest.studies) {
    if (entry.split == "train") train_set.push_back(phantom::load_study(entry, data_dir));
    if (entry.split == "val") val_set.push_back(phantom::load_study(entry, data_dir));
  }
  if (train_set.empty()) throw std::runtime_error("train: dataset has no training split");

  TardisModel model(cfg.model, cfg.phantom.image_hw, Rng::derive(seed, 1));
  DisentangleBank bank(cfg.model.channels, cfg.model.hidden, cfg.train.club_buffer,
                       Rng::derive(seed, 2));
  AdamW opt(model.params(), float(cfg.train.lr), 0.9f, 0.999f, 1e-8f,
            float(cfg.train.weight_decay));
  Rng shuffle_rng = Rng::fork(seed, 3);
  Rng drop_rng = Rng::fork(seed, 4);
  Rng noise_rng = Rng::fork(seed, 5);
  Rng reseed_rng = Rng::fork(seed, 6);

  fs::create_directories(out_dir);
  TrainResult result;
  result.checkpoint_file = out_dir + "/model.tard";
  result.log_file = out_dir + "/train_log.csv";
  result.usage_file = out_dir + "/dict_usage.json";

  std::string log = csv_header() + "\n";
  const int n_train = int(train_set.size());

  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    const float lr = cosine_lr(float(cfg.train.lr), float(cfg.train.lr_min), epoch,
                               cfg.train.epochs);
    opt.set_lr(lr);
    model.dict().reset_usage();

    std::vector<int> order(static_cast<size_t>(n_train));
    std::iota(order.begin(), order.end(), 0);
    for (int i = n_train - 1; i > 0; --i)
      std::swap(order[size_t(i)], order[size_t(shuffle_rng.uniform_int(i + 1))]);

    std::array<double, LossBreakdown::kFields> sums{};
    double weight = 0;
    for (int start = 0; start < n_train; start += cfg.train.batch) {
      const int stop = std::min(start + cfg.train.batch, n_train);
      std::vector<Study> dropped;
      dropped.reserve(size_t(stop - start));
      for (int i = start; i < stop; ++i)
        dropped.push_back(
            modality_dropout(train_set[size_t(order[size_t(i)])], cfg.train.dropout_p, drop_rng));
      std::vector<const Study*> batch;
      for (const Study& s : dropped) batch.push_back(&s);

      StepResult r;
      try {
        r = batch_step(model, bank, opt, batch, cfg.model, cfg.train.clip_norm, noise_rng);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                 ", step " + std::to_string(start / cfg.train.batch) + ")");
      }
      const auto fields = r.mean.fields();
      const double b = double(stop - start);
      for (int f = 0; f < LossBreakdown::kFields; ++f)
        sums[size_t(f)] += double(fields[size_t(f)]) * b;
      weight += b;
    }

    LossBreakdown epoch_mean;
    {
      std::array<float, LossBreakdown::kFields> m{};
      for (int f = 0; f < LossBreakdown::kFields; ++f)
        m[size_t(f)] = float(sums[size_t(f)] / weight);
      epoch_mean = {m[0], m[1], m[2], m[3], m[4],  m[5],  m[6],
                    m[7], m[8], m[9], m[10], m[11], m[12]};
    }

    if (cfg.train.reseed_dead_codes) {
      const std::vector<Tensor> pool =
          static_token_pool(model, train_set[size_t(order[0])]);
      model.dict().reseed_dead(pool, reseed_rng);
    }

    const auto [mi_sd, mi_dd] = bank.epoch_mi();
    const double val_dice = val_set.empty() ? 0.0 : evaluate_dice(model, val_set);

    log += csv_row(epoch, epoch_mean, mi_sd, mi_dd, val_dice, lr) + "\n";
    result.last_epoch = epoch_mean;
    result.last_val_dice = float(val_dice);
  }

  nlohmann::json header;
  header["format"] = "tardis-checkpoint";
  header["version"] = 1;
  header["seed"] = seed;
  header["epochs"] = cfg.train.epochs;
  header["config"] = to_json(cfg);
  header["config_hash"] = config_hash(cfg);
  header["dataset_hash"] = manifest.dataset_hash;
  write_checkpoint(result.checkpoint_file, header, model.params());
  write_text_file(result.log_file, log);
  write_text_file(result.usage_file, model.dict().usage_json());
  return result;
}

}  // namespace tardis
