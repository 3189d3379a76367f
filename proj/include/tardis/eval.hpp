#pragma once

#include <array>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "tardis/config.hpp"
#include "tardis/model.hpp"
#include "tardis/phantom.hpp"

namespace tardis {

// Patient-level tumor evidence: max over pixels of the 3x3 mean-filtered
// tumor-class probability. Filter windows are clipped at the border, so a
// corner pixel averages 4 cells.
double screening_score(const Tensor& logits);

// Pooled dynamic evidence for subtype probing: per slot, the mean grid row
// over token positions whose pixel block intersects the predicted tumor
// mask, concatenated in slot order. Falls back to the mean over all
// positions when nothing is predicted tumor, so the dimension is fixed at
// slots * channels.
std::vector<double> region_features(const InferResult& res, const std::vector<int>& pred_mask,
                                    int hw);

// The 15 nonempty phase subsets, ordered by size then protocol position.
std::vector<std::vector<phantom::Phase>> all_phase_subsets();
std::string subset_label(const std::vector<phantom::Phase>& subset);

struct SweepRow {
  std::string subset;
  bool na = false;  // some phase of the subset is absent from every study
  int studies = 0;  // evaluated study count
  double dice = 0;  // mean foreground Dice (organ and tumor)
  double auc_screen = 0;
  double auc_subtype = 0;
  std::array<double, phantom::kSegClasses> dice_class{};
};

struct SweepReport {
  std::vector<SweepRow> rows;
  SweepRow average;  // arithmetic mean over the non-n/a rows
  std::vector<std::string> notes;
};

struct SweepOptions {
  EvalConfig eval;
  uint64_t seed = 0;  // consumed only when eval.mc_samples > 1
};

// One row per subset over eval_studies, each study restricted to the phases
// it acquired within the subset; studies with no surviving phase are skipped
// for that row. Missing slots are decoded from the prior, deterministically
// at mc_samples = 1. The subtype probe is refit per subset on the
// lesion-positive part of probe_studies under the same restriction.
SweepReport sweep_eval(TardisModel& model, const std::vector<phantom::Study>& eval_studies,
                       const std::vector<phantom::Study>& probe_studies,
                       const std::vector<std::vector<phantom::Phase>>& subsets,
                       const SweepOptions& opt);

// Leading "# "-prefixed version and note lines, a fixed header row, one row
// per subset, Average last. n/a rows carry "n/a" in every metric column.
std::string sweep_csv(const SweepReport& report);
// Human-readable aligned rendering of the same rows.
std::string sweep_table(const SweepReport& report);

struct LatentRow {
  std::string study;
  int kind = 0;       // 0 static, 1 + phase index dynamic
  float tau_hat = 0;  // regressed time, dynamic rows only
  float tau = 0;      // acquisition time, dynamic rows only
  std::vector<float> features;  // pooled grid, [channels]
};

struct LatentExport {
  std::vector<LatentRow> rows;  // per study: one static row, one per acquired phase
  double silhouette = 0;        // static rows vs dynamic rows
};

// Posterior-mean pass per study, no prior fill, each grid mean-pooled over
// positions. Deterministic for a fixed checkpoint and dataset.
LatentExport export_latents(TardisModel& model, const std::vector<phantom::Study>& studies);

// Version line, header row, data rows, then a trailing "# silhouette,<v>".
std::string latent_csv(const LatentExport& e);

// Studies of one split under data_dir ("" loads every split), manifest order.
std::vector<phantom::Study> load_split(const std::string& data_dir, const std::string& split);

struct LoadedModel {
  Config cfg;
  uint64_t seed = 0;
  std::unique_ptr<TardisModel> model;
};

// Rebuilds the architecture from the checkpoint's config echo and restores
// every parameter. Rejects unknown formats and versions.
LoadedModel load_model(const std::string& checkpoint_path);

// Headless invariant sweep over the numeric core, metrics, and the model
// forward path. Prints one line per check; returns the failure count.
int selftest(std::ostream& out);

}  // namespace tardis
