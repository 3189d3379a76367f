#include "tardis/eval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <iterator>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "tardis/io.hpp"
#include "tardis/metrics.hpp"
#include "tardis/trainer.hpp"

namespace tardis {

using phantom::Phase;
using phantom::Study;

namespace {

std::string fmtg(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

double screening_score(const Tensor& logits) {
  if (logits.shape().size() != 3 || logits.dim(0) != phantom::kSegClasses)
    throw std::invalid_argument("screening_score: logits must be [classes, H, W]");
  const int h = logits.dim(1), w = logits.dim(2);
  const int plane = h * w;
  const auto& d = logits.data();

  std::vector<double> prob(static_cast<size_t>(plane));
  for (int p = 0; p < plane; ++p) {
    double peak = double(d[size_t(p)]);
    for (int c = 1; c < phantom::kSegClasses; ++c)
      peak = std::max(peak, double(d[size_t(c * plane + p)]));
    double z = 0;
    for (int c = 0; c < phantom::kSegClasses; ++c)
      z += std::exp(double(d[size_t(c * plane + p)]) - peak);
    prob[size_t(p)] = std::exp(double(d[size_t(phantom::kSegTumor * plane + p)]) - peak) / z;
  }

  double best = 0;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double acc = 0;
      int n = 0;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          acc += prob[size_t(rr * w + cc)];
          ++n;
        }
      }
      best = std::max(best, acc / n);
    }
  }
  return best;
}

std::vector<double> region_features(const InferResult& res, const std::vector<int>& pred_mask,
                                    int hw) {
  if (res.slots.empty()) throw std::invalid_argument("region_features: no dynamic slots");
  if (int(pred_mask.size()) != hw * hw)
    throw std::invalid_argument("region_features: mask size mismatch");
  const int k = res.slots[0].rep.dim(0);
  const int c = res.slots[0].rep.dim(1);
  int g = 1;
  while (g * g < k) ++g;
  if (g * g != k || hw % g != 0)
    throw std::invalid_argument("region_features: grid does not tile the image");
  const int block = hw / g;

  std::vector<char> sel(size_t(k), 0);
  int nsel = 0;
  for (int r = 0; r < hw; ++r) {
    for (int col = 0; col < hw; ++col) {
      if (pred_mask[size_t(r * hw + col)] != phantom::kSegTumor) continue;
      char& s = sel[size_t((r / block) * g + col / block)];
      if (!s) {
        s = 1;
        ++nsel;
      }
    }
  }
  if (nsel == 0) {
    std::fill(sel.begin(), sel.end(), char(1));
    nsel = k;
  }

  std::vector<double> out;
  out.reserve(res.slots.size() * size_t(c));
  for (const SlotInfo& slot : res.slots) {
    const auto& d = slot.rep.data();
    for (int ch = 0; ch < c; ++ch) {
      double acc = 0;
      for (int pos = 0; pos < k; ++pos)
        if (sel[size_t(pos)]) acc += double(d[size_t(pos * c + ch)]);
      out.push_back(acc / nsel);
    }
  }
  return out;
}

std::vector<std::vector<Phase>> all_phase_subsets() {
  std::vector<int> masks;
  for (int m = 1; m < (1 << phantom::kNumPhases); ++m) masks.push_back(m);
  std::stable_sort(masks.begin(), masks.end(),
                   [](int a, int b) { return std::popcount(unsigned(a)) < std::popcount(unsigned(b)); });
  std::vector<std::vector<Phase>> out;
  for (const int m : masks) {
    std::vector<Phase> sub;
    for (int p = 0; p < phantom::kNumPhases; ++p)
      if (m & (1 << p)) sub.push_back(Phase(p));
    out.push_back(std::move(sub));
  }
  return out;
}

std::string subset_label(const std::vector<Phase>& subset) {
  std::string label;
  for (int p = 0; p < phantom::kNumPhases; ++p) {
    if (std::find(subset.begin(), subset.end(), Phase(p)) != subset.end())
      label += phantom::phase_label(Phase(p));
  }
  return label;
}

namespace {

bool intersects(const Study& s, const std::vector<Phase>& subset) {
  for (const auto& ph : s.phases)
    if (std::find(subset.begin(), subset.end(), ph.phase) != subset.end()) return true;
  return false;
}

struct CaseEval {
  double screening = 0;
  double fg = 0;
  std::array<double, phantom::kSegClasses> dcls{};
  std::vector<double> feats;
};

CaseEval eval_case(TardisModel& model, const Study& s, const std::vector<Phase>& subset,
                   const SweepOptions& opt, Rng* rng) {
  const InferResult res = model.infer(s, subset, MissingFill::kPrior, rng, opt.eval.mc_samples);
  const std::vector<int> pred = argmax_mask(res.logits);
  const std::vector<int> truth = mask_ids(s.seg, phantom::kSegClasses);
  CaseEval ce;
  for (int c = 0; c < phantom::kSegClasses; ++c) ce.dcls[size_t(c)] = dice_score(pred, truth, c);
  ce.fg = 0.5 * (ce.dcls[phantom::kSegOrgan] + ce.dcls[phantom::kSegTumor]);
  ce.screening = screening_score(res.logits);
  ce.feats = region_features(res, pred, model.hw());
  return ce;
}

}  // namespace

SweepReport sweep_eval(TardisModel& model, const std::vector<Study>& eval_studies,
                       const std::vector<Study>& probe_studies,
                       const std::vector<std::vector<Phase>>& subsets, const SweepOptions& opt) {
  std::optional<Rng> rng_store;
  Rng* rng = nullptr;
  if (opt.eval.mc_samples > 1) {
    rng_store.emplace(Rng::fork(opt.seed, 7));
    rng = &*rng_store;
  }

  std::array<bool, phantom::kNumPhases> seen{};
  for (const Study& s : eval_studies)
    for (const auto& ph : s.phases) seen[size_t(int(ph.phase))] = true;

  SweepReport report;
  report.notes.push_back("dice: a class empty in both prediction and truth scores 1");
  if (opt.eval.mc_samples > 1) {
    report.notes.push_back("fill: absent phases average " + std::to_string(opt.eval.mc_samples) +
                           " prior draws, seed " + std::to_string(opt.seed) +
                           "; acquired phases use the posterior mean");
  } else {
    report.notes.push_back(
        "fill: absent phases decoded from the prior at z = 0; acquired phases use the posterior "
        "mean");
  }
  report.notes.push_back(
      "subtype: ridge probe on pooled dynamic features in the predicted tumor region, refit per "
      "subset on the probe split");

  for (const auto& sub : subsets) {
    SweepRow row;
    row.subset = subset_label(sub);
    row.na = std::any_of(sub.begin(), sub.end(),
                         [&](Phase p) { return !seen[size_t(int(p))]; });
    if (row.na) {
      report.rows.push_back(std::move(row));
      continue;
    }

    std::vector<std::vector<double>> probe_x;
    std::vector<double> probe_y;
    for (const Study& s : probe_studies) {
      if (s.lesion == phantom::Lesion::None || !intersects(s, sub)) continue;
      probe_x.push_back(eval_case(model, s, sub, opt, rng).feats);
      probe_y.push_back(s.lesion == phantom::Lesion::Hyper ? 1.0 : 0.0);
    }
    const RidgeProbe probe = ridge_fit(probe_x, probe_y, opt.eval.ridge_lambda);

    std::vector<double> screen_scores, subtype_scores;
    std::vector<int> screen_labels, subtype_labels;
    double dice_acc = 0;
    std::array<double, phantom::kSegClasses> dcls_acc{};
    for (const Study& s : eval_studies) {
      if (!intersects(s, sub)) continue;
      const CaseEval ce = eval_case(model, s, sub, opt, rng);
      ++row.studies;
      dice_acc += ce.fg;
      for (int c = 0; c < phantom::kSegClasses; ++c) dcls_acc[size_t(c)] += ce.dcls[size_t(c)];
      screen_scores.push_back(ce.screening);
      screen_labels.push_back(s.lesion == phantom::Lesion::None ? 0 : 1);
      if (s.lesion != phantom::Lesion::None) {
        subtype_scores.push_back(ridge_predict(probe, ce.feats));
        subtype_labels.push_back(s.lesion == phantom::Lesion::Hyper ? 1 : 0);
      }
    }
    row.dice = dice_acc / row.studies;
    for (int c = 0; c < phantom::kSegClasses; ++c)
      row.dice_class[size_t(c)] = dcls_acc[size_t(c)] / row.studies;
    row.auc_screen = auc_score(screen_scores, screen_labels);
    row.auc_subtype = auc_score(subtype_scores, subtype_labels);
    report.rows.push_back(std::move(row));
  }

  report.average.subset = "Average";
  int valid = 0;
  for (const SweepRow& row : report.rows) {
    if (row.na) continue;
    ++valid;
    report.average.dice += row.dice;
    report.average.auc_screen += row.auc_screen;
    report.average.auc_subtype += row.auc_subtype;
    for (int c = 0; c < phantom::kSegClasses; ++c)
      report.average.dice_class[size_t(c)] += row.dice_class[size_t(c)];
  }
  if (valid == 0) {
    report.average.na = true;
  } else {
    report.average.dice /= valid;
    report.average.auc_screen /= valid;
    report.average.auc_subtype /= valid;
    for (int c = 0; c < phantom::kSegClasses; ++c) report.average.dice_class[size_t(c)] /= valid;
  }
  return report;
}

namespace {

std::string sweep_row_csv(const SweepRow& row, bool average) {
  std::string line = row.subset;
  line += average ? "," : "," + std::to_string(row.studies);
  if (row.na) {
    for (int i = 0; i < 6; ++i) line += ",n/a";
    return line;
  }
  line += "," + fmtg(row.dice);
  line += "," + fmtg(row.auc_screen);
  line += "," + fmtg(row.auc_subtype);
  for (int c = 0; c < phantom::kSegClasses; ++c) line += "," + fmtg(row.dice_class[size_t(c)]);
  return line;
}

}  // namespace

std::string sweep_csv(const SweepReport& report) {
  std::string out = "# sweep v1\n";
  for (const std::string& note : report.notes) out += "# note: " + note + "\n";
  out += "subset,studies,dice,auc_screen,auc_subtype,dice_background,dice_organ,dice_tumor\n";
  for (const SweepRow& row : report.rows) out += sweep_row_csv(row, false) + "\n";
  out += sweep_row_csv(report.average, true) + "\n";
  return out;
}

namespace {

std::string sweep_row_table(const SweepRow& row, bool average) {
  char buf[160];
  const auto cell = [&](double v) {
    char c[16];
    std::snprintf(c, sizeof c, "%10.4f", v);
    return std::string(c);
  };
  std::string studies = average ? std::string("-") : std::to_string(row.studies);
  if (row.na) {
    std::snprintf(buf, sizeof buf, "%-8s %8s %10s %10s %10s %10s %10s %10s", row.subset.c_str(),
                  studies.c_str(), "n/a", "n/a", "n/a", "n/a", "n/a", "n/a");
    return buf;
  }
  std::snprintf(buf, sizeof buf, "%-8s %8s %s %s %s %s %s %s", row.subset.c_str(), studies.c_str(),
                cell(row.dice).c_str(), cell(row.auc_screen).c_str(),
                cell(row.auc_subtype).c_str(), cell(row.dice_class[0]).c_str(),
                cell(row.dice_class[1]).c_str(), cell(row.dice_class[2]).c_str());
  return buf;
}

}  // namespace

std::string sweep_table(const SweepReport& report) {
  std::string out = "sweep report v1\n";
  for (const std::string& note : report.notes) out += "note: " + note + "\n";
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-8s %8s %10s %10s %10s %10s %10s %10s", "subset", "studies",
                "dice", "screen", "subtype", "dice_bg", "dice_org", "dice_tum");
  out += std::string(buf) + "\n";
  for (const SweepRow& row : report.rows) out += sweep_row_table(row, false) + "\n";
  out += sweep_row_table(report.average, true) + "\n";
  return out;
}

namespace {

std::vector<float> pool_grid(const Tensor& grid) {
  const int k = grid.dim(0), c = grid.dim(1);
  const auto& d = grid.data();
  std::vector<float> out(size_t(c), 0.0f);
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0;
    for (int pos = 0; pos < k; ++pos) acc += double(d[size_t(pos * c + ch)]);
    out[size_t(ch)] = float(acc / k);
  }
  return out;
}

}  // namespace

LatentExport export_latents(TardisModel& model, const std::vector<Study>& studies) {
  const auto all = std::vector<Phase>{Phase::N, Phase::A, Phase::V, Phase::D};
  LatentExport e;
  for (const Study& s : studies) {
    const InferResult res = model.infer(s, all, MissingFill::kNone);
    LatentRow stat;
    stat.study = s.id;
    stat.kind = 0;
    stat.features = pool_grid(res.anatomy);
    e.rows.push_back(std::move(stat));
    for (const SlotInfo& slot : res.slots) {
      LatentRow row;
      row.study = s.id;
      row.kind = 1 + int(slot.phase);
      row.tau_hat = slot.tau;
      for (const auto& ph : s.phases)
        if (ph.phase == slot.phase) row.tau = ph.tau_actual;
      row.features = pool_grid(slot.rep);
      e.rows.push_back(std::move(row));
    }
  }

  std::vector<std::vector<double>> points;
  std::vector<int> labels;
  for (const LatentRow& row : e.rows) {
    points.emplace_back(row.features.begin(), row.features.end());
    labels.push_back(row.kind == 0 ? 0 : 1);
  }
  e.silhouette = silhouette(points, labels);
  return e;
}

std::string latent_csv(const LatentExport& e) {
  std::string out = "# latents v1\n";
  out += "study,kind,tau_hat,tau";
  const size_t dims = e.rows.empty() ? 0 : e.rows.front().features.size();
  for (size_t i = 0; i < dims; ++i) out += ",f" + std::to_string(i);
  out += "\n";
  for (const LatentRow& row : e.rows) {
    out += row.study + "," + std::to_string(row.kind);
    if (row.kind == 0)
      out += ",,";
    else
      out += "," + fmtg(double(row.tau_hat)) + "," + fmtg(double(row.tau));
    for (const float f : row.features) out += "," + fmtg(double(f));
    out += "\n";
  }
  out += "# silhouette," + fmtg(e.silhouette) + "\n";
  return out;
}

std::vector<Study> load_split(const std::string& data_dir, const std::string& split) {
  const phantom::DatasetManifest manifest = phantom::read_manifest(data_dir + "/manifest.jsonl");
  std::vector<Study> out;
  for (const auto& entry : manifest.studies) {
    if (split.empty() || entry.split == split) out.push_back(phantom::load_study(entry, data_dir));
  }
  return out;
}

LoadedModel load_model(const std::string& checkpoint_path) {
  const Checkpoint ck = read_checkpoint(checkpoint_path);
  if (ck.header.value("format", "") != "tardis-checkpoint")
    throw std::runtime_error("load_model: not a model checkpoint: " + checkpoint_path);
  if (ck.header.value("version", 0) != 1)
    throw std::runtime_error("load_model: unsupported checkpoint version");
  LoadedModel lm;
  lm.cfg = config_from_json(ck.header.at("config"));
  lm.seed = ck.header.at("seed").get<uint64_t>();
  lm.model = std::make_unique<TardisModel>(lm.cfg.model, lm.cfg.phantom.image_hw,
                                           Rng::derive(lm.seed, 1));
  lm.model->load_state(ck.tensors);
  return lm;
}

namespace {

Study synth_study(int hw, uint64_t seed) {
  Rng rng(seed);
  Study s;
  s.id = "selftest";
  s.seg = Tensor::zeros({hw, hw});
  for (int r = 0; r < hw; ++r)
    for (int c = 0; c < hw / 2; ++c) s.seg.data()[size_t(r * hw + c)] = float(phantom::kSegOrgan);
  for (int r = hw / 4; r < hw / 2; ++r)
    for (int c = hw / 4; c < hw / 2; ++c) s.seg.data()[size_t(r * hw + c)] = float(phantom::kSegTumor);
  for (const Phase ph : {Phase::N, Phase::A, Phase::V}) {
    phantom::PhaseImage img;
    img.phase = ph;
    img.tau_nominal = phantom::nominal_tau(ph);
    img.tau_actual = img.tau_nominal;
    img.image = Tensor::zeros({1, hw, hw});
    for (float& v : img.image.data()) v = float(rng.uniform(-100.0, 200.0));
    s.phases.push_back(std::move(img));
  }
  return s;
}

ModelConfig selftest_model_config() {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.dict_size = 32;
  cfg.z_dim = 4;
  cfg.hidden = 8;
  return cfg;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.data().size() == b.data().size() &&
         std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0;
}

}  // namespace

int selftest(std::ostream& out) {
  struct Check {
    const char* name;
    bool (*run)();
  };
  const Check checks[] = {
      {"dice oracle",
       [] {
         // |P| = 4, |T| = 6, overlap 3 -> 2 * 3 / 10; class 2 empty in both -> 1.
         const std::vector<int> p = {1, 1, 1, 1, 0, 0, 0, 0}, t = {1, 1, 1, 0, 1, 1, 1, 0};
         return std::abs(dice_score(p, t, 1) - 0.6) < 1e-12 && dice_score(p, t, 2) == 1.0;
       }},
      {"auc oracle",
       [] {
         const double a = auc_score({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1});
         const double b = auc_score({0.5, 0.5, 0.5, 0.5}, {0, 0, 1, 1});
         return std::abs(a - 0.75) < 1e-12 && std::abs(b - 0.5) < 1e-12;
       }},
      {"kl closed form",
       [] {
         Tensor mu = Tensor::zeros({2, 3});
         const Tensor lv = Tensor::zeros({2, 3});
         if (std::abs(double(kl_standard_normal(mu, lv).item())) > 1e-7) return false;
         for (float& v : mu.data()) v = 1.0f;
         return std::abs(double(kl_standard_normal(mu, lv).item()) - 0.5) < 1e-6;
       }},
      {"quantization straight through",
       [] {
         Rng rng(4);
         Dictionary dict(4, 3, rng);
         Tensor toks = Tensor::zeros({2, 3}, true);
         for (float& v : toks.data()) v = float(rng.uniform(-1.0, 1.0));
         const Quantized q = dict.quantize(toks);
         return bitwise_equal(q.st, q.codes);
       }},
      {"model forward determinism",
       [] {
         const Study s = synth_study(16, 21);
         TardisModel a(selftest_model_config(), 16, 11), b(selftest_model_config(), 16, 11);
         const std::vector<Phase> all = {Phase::N, Phase::A, Phase::V, Phase::D};
         return bitwise_equal(a.infer(s, all, MissingFill::kPrior).logits,
                              b.infer(s, all, MissingFill::kPrior).logits);
       }},
      {"loss breakdown audit",
       [] {
         const Study s = synth_study(16, 22);
         TardisModel m(selftest_model_config(), 16, 12);
         Rng noise(5);
         const TrainForward fwd = m.forward_train(s, noise);
         const SubjectLoss loss = assemble_loss(fwd, s, nullptr, selftest_model_config());
         const double sum = loss.agn.item_hi() + loss.spe.item_hi() + loss.de.item_hi() +
                            loss.seg.item_hi();
         return std::isfinite(loss.values.total) && std::abs(sum - loss.total.item_hi()) <= 1e-6;
       }},
      {"segmentation loss gradients",
       [] {
         Rng rng(6);
         Tensor mask = Tensor::zeros({2, 2});
         mask.data() = {0.0f, 1.0f, 2.0f, 1.0f};
         Tensor logits = Tensor::zeros({3, 2, 2}, true);
         for (float& v : logits.data()) v = float(rng.uniform(-1.0, 1.0));
         const auto f = [&](const Tensor& x) { return seg_loss(x, mask).total; };
         return check_gradients(f, logits, 1e-3f, 2e-2f).pass;
       }},
      {"rng reproducibility",
       [] {
         Rng a(9), b(9);
         for (int i = 0; i < 100; ++i)
           if (a.uniform() != b.uniform()) return false;
         return Rng::fork(9, 1).uniform() != Rng::fork(9, 2).uniform();
       }},
      {"phantom layout determinism",
       [] {
         const PhantomConfig cfg;
         const auto a = phantom::rasterize_layout(cfg, 5);
         const auto b = phantom::rasterize_layout(cfg, 5);
         return a.region == b.region && a.lesion == b.lesion;
       }},
      {"silhouette separation",
       [] {
         const std::vector<std::vector<double>> sep = {{0}, {1}, {10}, {11}};
         const std::vector<std::vector<double>> mix = {{0}, {1}, {0.1}, {1.1}};
         return silhouette(sep, {0, 0, 1, 1}) > 0.8 && silhouette(mix, {0, 0, 1, 1}) < 0;
       }},
  };

  int fails = 0;
  for (const Check& check : checks) {
    bool pass = false;
    std::string err;
    try {
      pass = check.run();
    } catch (const std::exception& ex) {
      err = ex.what();
    }
    if (pass) {
      out << "ok   " << check.name << "\n";
    } else {
      ++fails;
      out << "FAIL " << check.name;
      if (!err.empty()) out << " (" << err << ")";
      out << "\n";
    }
  }
  out << (fails == 0 ? "selftest passed" : "selftest FAILED") << " (" << std::size(checks) - fails
      << "/" << std::size(checks) << ")\n";
  return fails;
}

}  // namespace tardis
