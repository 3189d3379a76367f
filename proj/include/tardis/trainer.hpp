#pragma once

#include <array>
#include <string>
#include <vector>

#include "tardis/config.hpp"
#include "tardis/disentangle.hpp"
#include "tardis/model.hpp"
#include "tardis/optim.hpp"

namespace tardis {

// Every logged scalar of one training step or epoch. total stays equal to
// agn + spe + de + seg within 1e-6; the sub-terms are informational.
struct LossBreakdown {
  float agn = 0;
  float agn_consistency = 0;
  float agn_codebook = 0;
  float agn_commitment = 0;
  float spe = 0;
  float spe_ranking = 0;
  float spe_recon = 0;
  float spe_kl = 0;
  float de = 0;
  float seg = 0;
  float seg_dice = 0;
  float seg_ce = 0;
  float total = 0;

  static constexpr int kFields = 13;
  static const std::array<const char*, kFields>& field_names();
  std::array<float, kFields> fields() const;
};

struct SegTerms {
  Tensor dice;   // 1 - mean Dice over classes present in the ground truth
  Tensor ce;     // mean cross-entropy over pixels
  Tensor total;  // dice + ce
};

// logits [classes, H, W]; mask [H, W] of integer class ids.
SegTerms seg_loss(const Tensor& logits, const Tensor& mask);

// Graph scalars for one subject plus their extracted values. Components stay
// separate so gradient flow can be audited per term.
struct SubjectLoss {
  Tensor agn;
  Tensor spe;
  Tensor de;
  Tensor seg;
  Tensor total;
  LossBreakdown values;
};

// Sums the four components with unit weights. Throws a training fault naming
// the first non-finite sub-term.
SubjectLoss composite_loss(const AgnosticTerms& agn, const SpecificTerms& spe, const Tensor& de,
                           const SegTerms& seg);

// Independent per-phase coin flips at `rate`; when everything drops, one
// uniformly chosen phase is retained. Order is preserved.
phantom::Study modality_dropout(const phantom::Study& study, double rate, Rng& rng);

// Loss fragments for one already-computed forward pass. bank may be null
// (the disentanglement term is then a constant zero).
SubjectLoss assemble_loss(const TrainForward& fwd, const phantom::Study& study,
                          DisentangleBank* bank, const ModelConfig& cfg);

struct StepResult {
  LossBreakdown mean;    // subject mean, values only
  double grad_norm = 0;  // pre-clip global norm
};

// One optimizer step on a batch: forwards, one auxiliary CLUB step, subject
// losses with frozen estimators, mean backward, clip, step, buffer push.
StepResult batch_step(TardisModel& model, DisentangleBank& bank, AdamW& opt,
                      const std::vector<const phantom::Study*>& batch, const ModelConfig& cfg,
                      double clip_norm, Rng& noise);

struct TrainResult {
  std::string checkpoint_file;
  std::string log_file;
  std::string usage_file;
  LossBreakdown last_epoch;
  float last_val_dice = 0;
};

// Full run: loads the dataset under data_dir (manifest.jsonl), trains for
// cfg.train.epochs, writes model.tard, train_log.csv, and dict_usage.json
// under out_dir. Deterministic in (cfg, seed, dataset).
TrainResult train(const Config& cfg, uint64_t seed, const std::string& data_dir,
                  const std::string& out_dir);

// Foreground quality of one prediction: mean Dice over organ and tumor.
double foreground_dice(const std::vector<int>& pred, const std::vector<int>& truth);

// Mean foreground Dice of deterministic prior-fill inference over studies.
double evaluate_dice(TardisModel& model, const std::vector<phantom::Study>& studies);

}  // namespace tardis
