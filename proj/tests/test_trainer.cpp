#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tardis/io.hpp"
#include "tardis/metrics.hpp"
#include "tardis/trainer.hpp"

using namespace tardis;
using phantom::Phase;
using phantom::Study;
namespace fs = std::filesystem;

namespace {

constexpr int kHw = 16;

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.dict_size = 32;
  cfg.z_dim = 4;
  cfg.hidden = 8;
  return cfg;
}

Study make_study(const std::vector<std::pair<Phase, float>>& acquisitions, uint64_t seed,
                 int tumor_from = -1) {
  Rng rng(seed);
  Study s;
  s.id = "t";
  s.seg = Tensor::zeros({kHw, kHw});
  // Left half organ; optionally a tumor block on the right.
  for (int r = 0; r < kHw; ++r)
    for (int c = 0; c < kHw / 2; ++c) s.seg.data()[size_t(r * kHw + c)] = 1.0f;
  if (tumor_from >= 0) {
    for (int r = 4; r < 8; ++r)
      for (int c = tumor_from; c < tumor_from + 4; ++c)
        s.seg.data()[size_t(r * kHw + c)] = 2.0f;
  }
  for (const auto& [phase, tau] : acquisitions) {
    phantom::PhaseImage ph;
    ph.phase = phase;
    ph.tau_nominal = phantom::nominal_tau(phase);
    ph.tau_actual = tau;
    ph.image = Tensor::zeros({1, kHw, kHw});
    for (float& v : ph.image.data()) v = float(rng.uniform(-100.0, 200.0));
    s.phases.push_back(std::move(ph));
  }
  return s;
}

Tensor saturated_logits(const Tensor& mask, float strength) {
  const int h = mask.dim(0), w = mask.dim(1);
  Tensor logits = Tensor::zeros({3, h, w}, true);
  for (int p = 0; p < h * w; ++p) {
    const int cls = int(mask.data()[size_t(p)]);
    logits.data()[size_t(cls * h * w + p)] = strength;
  }
  return logits;
}

AgnosticTerms const_agn(float c, float cb, float cm) {
  AgnosticTerms t;
  t.consistency = Tensor::scalar(c);
  t.codebook = Tensor::scalar(cb);
  t.commitment = Tensor::scalar(cm);
  t.total = Tensor::scalar(c + cb + 0.25f * cm);
  return t;
}

SpecificTerms const_spe(float rank, float rec, float kl) {
  SpecificTerms t;
  t.ranking = Tensor::scalar(rank);
  t.recon = Tensor::scalar(rec);
  t.kl = Tensor::scalar(kl);
  t.total = Tensor::scalar(rank + rec + kl);
  return t;
}

SegTerms const_seg(float dice, float ce) {
  SegTerms t;
  t.dice = Tensor::scalar(dice);
  t.ce = Tensor::scalar(ce);
  t.total = Tensor::scalar(dice + ce);
  return t;
}

std::string temp_dir(const std::string& tag) {
  static int counter = 0;
  fs::path p = fs::temp_directory_path() / ("tardis_trainer_" + tag + std::to_string(counter++));
  fs::create_directories(p);
  return p.string();
}

std::vector<float> grad_snapshot(const ParamList& params) {
  std::vector<float> out;
  for (auto [name, t] : params) {  // copies share the underlying node
    const auto& g = t.grad();
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

}  // namespace

TEST_CASE("seg_loss cross-entropy equals ln 3 on uniform logits") {
  Tensor mask = Tensor::zeros({4, 4});
  for (int p = 8; p < 16; ++p) mask.data()[size_t(p)] = 1.0f;
  const SegTerms terms = seg_loss(Tensor::zeros({3, 4, 4}), mask);
  CHECK(terms.ce.item() == doctest::Approx(std::log(3.0)).epsilon(1e-6));

  // Uniform probabilities give per-class soft Dice (2/3)|G| / (hw/3 + |G|).
  const double hw = 16.0, g = 8.0;
  const double dice_c = (2.0 / 3.0) * g / (hw / 3.0 + g);
  CHECK(terms.dice.item() == doctest::Approx(1.0 - dice_c).epsilon(1e-6));
  CHECK(terms.total.item() == doctest::Approx(terms.ce.item() + terms.dice.item()));
}

TEST_CASE("seg_loss vanishes for saturated correct predictions") {
  Tensor mask = Tensor::zeros({4, 4});
  for (int p = 0; p < 5; ++p) mask.data()[size_t(p)] = 2.0f;
  for (int p = 5; p < 10; ++p) mask.data()[size_t(p)] = 1.0f;
  const SegTerms terms = seg_loss(saturated_logits(mask, 40.0f), mask);
  CHECK(terms.ce.item() < 1e-6f);
  CHECK(terms.dice.item() < 1e-4f);
}

TEST_CASE("seg_loss disjoint tumor prediction costs the full Dice term") {
  // Ground truth is all tumor; the prediction saturates to organ everywhere.
  Tensor mask = Tensor::full({4, 4}, 2.0f);
  Tensor organ_mask = Tensor::full({4, 4}, 1.0f);
  const SegTerms terms = seg_loss(saturated_logits(organ_mask, 40.0f), mask);
  // Tumor is the only class present, so the Dice loss saturates at 1.
  CHECK(terms.dice.item() == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("seg_loss validates inputs") {
  CHECK_THROWS_AS((void)seg_loss(Tensor::zeros({3, 4, 4}), Tensor::zeros({4, 5})),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)seg_loss(Tensor::zeros({2, 4, 4}), Tensor::zeros({4, 4})),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)seg_loss(Tensor::zeros({3, 4, 4}), Tensor::full({4, 4}, 3.0f)),
                  std::invalid_argument);
}

TEST_CASE("seg_loss gradient matches finite differences") {
  Rng rng(31);
  Tensor mask = Tensor::zeros({3, 3});
  mask.data() = {0, 1, 2, 1, 1, 0, 2, 0, 1};
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = Tensor::zeros({3, 3, 3}, true);
    for (float& v : logits.data()) v = float(rng.uniform(-1.0, 1.0));
    const auto res = check_gradients(
        [&](const Tensor& x) { return seg_loss(x, mask).total; }, logits, 1e-3f, 1e-3f);
    CHECK(res.pass);
  }
}

TEST_CASE("composite_loss sums components and reports them") {
  const SubjectLoss loss =
      composite_loss(const_agn(0.5f, 0.3f, 0.8f), const_spe(0.2f, 0.7f, 0.1f),
                     Tensor::scalar(3.0f), const_seg(0.6f, 0.4f));
  CHECK(loss.values.agn == doctest::Approx(1.0f));
  CHECK(loss.values.spe == doctest::Approx(1.0f));
  CHECK(loss.values.de == doctest::Approx(3.0f));
  CHECK(loss.values.seg == doctest::Approx(1.0f));
  CHECK(loss.values.total == doctest::Approx(6.0f));
  CHECK(loss.values.agn_commitment == doctest::Approx(0.8f));
  CHECK(loss.values.spe_kl == doctest::Approx(0.1f));

  const double sum = double(loss.values.agn) + loss.values.spe + loss.values.de + loss.values.seg;
  CHECK(std::abs(sum - loss.values.total) <= 1e-6);

  const SubjectLoss zero = composite_loss(const_agn(0, 0, 0), const_spe(0, 0, 0),
                                          Tensor::scalar(0.0f), const_seg(0, 0));
  CHECK(zero.values.total == 0.0f);
}

TEST_CASE("composite_loss tolerates f32 rounding of large components") {
  // Early-training totals run well past the f32 spacing at which independently
  // rounded component fields can no longer sum to the total within 1e-6. The
  // audit must not mistake that rounding for a genuine drift.
  const SubjectLoss loss =
      composite_loss(const_agn(10.3f, 7.9f, 5.1f), const_spe(0.2f, 41.7f, 13.3f),
                     Tensor::scalar(2.6f), const_seg(0.97f, 20.11f));
  const double sum = double(loss.values.agn) + loss.values.spe + loss.values.de + loss.values.seg;
  CHECK(loss.values.total == doctest::Approx(sum).epsilon(1e-5));
  CHECK(loss.total.item_hi() ==
        doctest::Approx(loss.agn.item_hi() + loss.spe.item_hi() + loss.de.item_hi() +
                        loss.seg.item_hi())
            .epsilon(1e-12));
}

TEST_CASE("composite_loss faults on the first non-finite term, naming it") {
  const float bad = std::nanf("");
  CHECK_THROWS_WITH_AS(
      (void)composite_loss(const_agn(0, 0, 0), const_spe(0, bad, 0), Tensor::scalar(0.0f),
                           const_seg(0, 0)),
      doctest::Contains("spe_recon"), std::runtime_error);
  CHECK_THROWS_WITH_AS(
      (void)composite_loss(const_agn(0, 0, 0), const_spe(0, 0, 0),
                           Tensor::scalar(std::numeric_limits<float>::infinity()),
                           const_seg(0, 0)),
      doctest::Contains("de"), std::runtime_error);
}

TEST_CASE("modality_dropout keeps order, floors at one phase, and hits its rate") {
  const Study base = make_study(
      {{Phase::N, 0.0f}, {Phase::A, 0.3f}, {Phase::V, 0.55f}, {Phase::D, 0.85f}}, 9);

  Rng rng(1);
  const Study same = modality_dropout(base, 0.0, rng);
  REQUIRE(same.phases.size() == 4);
  for (size_t i = 0; i < 4; ++i) CHECK(same.phases[i].phase == base.phases[i].phase);

  for (int trial = 0; trial < 200; ++trial) {
    const Study floored = modality_dropout(base, 0.99, rng);
    CHECK(floored.phases.size() >= 1);
  }

  // Keep-one correction: E[kept] = 4 * 0.8 + P(all dropped) * 1 = 3.2016.
  double total = 0;
  const int trials = 100000;
  for (int t = 0; t < trials; ++t) total += double(modality_dropout(base, 0.2, rng).phases.size());
  CHECK(total / trials == doctest::Approx(3.2016).epsilon(0.005));

  // Order is preserved for whatever survives.
  for (int t = 0; t < 50; ++t) {
    const Study d = modality_dropout(base, 0.5, rng);
    for (size_t i = 1; i < d.phases.size(); ++i)
      CHECK(int(d.phases[i - 1].phase) < int(d.phases[i].phase));
  }

  CHECK_THROWS_AS((void)modality_dropout(base, 1.0, rng), std::invalid_argument);
  CHECK_THROWS_AS((void)modality_dropout(base, -0.1, rng), std::invalid_argument);
}

TEST_CASE("batch gradient is the mean of per-subject gradients") {
  const Study sa = make_study({{Phase::N, 0.0f}, {Phase::V, 0.55f}}, 71, 10);
  const Study sb = make_study({{Phase::A, 0.3f}}, 72, 9);
  const ModelConfig cfg = small_model();

  auto run = [&](bool batched) {
    TardisModel model(cfg, kHw, 5);
    Rng noise(33);
    TrainForward fa = model.forward_train(sa, noise);
    TrainForward fb = model.forward_train(sb, noise);
    const SubjectLoss la = assemble_loss(fa, sa, nullptr, cfg);
    const SubjectLoss lb = assemble_loss(fb, sb, nullptr, cfg);
    ParamList params = model.params();
    for (auto& [name, t] : params) t.zero_grad();
    if (batched) {
      backward(affine(add(la.total, lb.total), 0.5f, 0.0f));
      return grad_snapshot(params);
    }
    backward(la.total);
    const std::vector<float> ga = grad_snapshot(params);
    for (auto& [name, t] : params) t.zero_grad();
    backward(lb.total);
    const std::vector<float> gb = grad_snapshot(params);
    std::vector<float> mean(ga.size());
    for (size_t i = 0; i < ga.size(); ++i) mean[i] = 0.5f * (ga[i] + gb[i]);
    return mean;
  };

  const std::vector<float> batched = run(true);
  const std::vector<float> summed = run(false);
  REQUIRE(batched.size() == summed.size());
  double max_abs = 0;
  for (float v : batched) max_abs = std::max(max_abs, double(std::abs(v)));
  REQUIRE(max_abs > 0);
  for (size_t i = 0; i < batched.size(); ++i)
    CHECK(double(batched[i]) ==
          doctest::Approx(double(summed[i])).epsilon(1e-4).scale(max_abs));
}

TEST_CASE("batch_step moves parameters and reports a positive gradient norm") {
  const ModelConfig cfg = small_model();
  TardisModel model(cfg, kHw, 6);
  DisentangleBank bank(cfg.channels, cfg.hidden, 16, 99);
  AdamW opt(model.params(), 0.01f);
  Rng noise(3);

  const Study sa = make_study({{Phase::N, 0.0f}, {Phase::A, 0.3f}}, 80, 8);
  const Study sb = make_study({{Phase::V, 0.5f}}, 81);

  std::vector<float> before;
  for (const auto& [name, t] : model.params())
    before.insert(before.end(), t.data().begin(), t.data().end());

  const StepResult r = batch_step(model, bank, opt, {&sa, &sb}, cfg, 5.0, noise);
  CHECK(r.grad_norm > 0.0);
  CHECK(std::isfinite(r.mean.total));
  CHECK(r.mean.total ==
        doctest::Approx(r.mean.agn + r.mean.spe + r.mean.de + r.mean.seg).epsilon(1e-5));

  std::vector<float> after;
  for (const auto& [name, t] : model.params())
    after.insert(after.end(), t.data().begin(), t.data().end());
  CHECK(before.size() == after.size());
  CHECK(std::memcmp(before.data(), after.data(), before.size() * sizeof(float)) != 0);

  CHECK_THROWS_AS((void)batch_step(model, bank, opt, {}, cfg, 5.0, noise),
                  std::invalid_argument);
}

TEST_CASE("training end to end is reproducible and writes its artifacts") {
  // Tiny but real dataset so the loop runs every code path.
  Config cfg;
  cfg.phantom.count = 6;
  cfg.phantom.split_train = 0.5;
  cfg.phantom.split_val = 0.34;
  cfg.model = small_model();
  cfg.model.channels = 8;
  cfg.train.epochs = 2;
  cfg.train.batch = 2;
  cfg.train.club_buffer = 8;

  const std::string data_dir = temp_dir("data");
  phantom::gen_dataset(cfg.phantom, 7, data_dir);

  const std::string out_a = temp_dir("runA");
  const std::string out_b = temp_dir("runB");
  const TrainResult ra = train(cfg, 42, data_dir, out_a);
  const TrainResult rb = train(cfg, 42, data_dir, out_b);

  CHECK(fs::exists(ra.checkpoint_file));
  CHECK(fs::exists(ra.log_file));
  CHECK(fs::exists(ra.usage_file));

  CHECK(read_text_file(ra.checkpoint_file) == read_text_file(rb.checkpoint_file));
  CHECK(read_text_file(ra.log_file) == read_text_file(rb.log_file));

  const std::string log = read_text_file(ra.log_file);
  CHECK(log.rfind("epoch,agn,agn_consistency,agn_codebook,agn_commitment,spe,spe_ranking,"
                  "spe_recon,spe_kl,de,seg,seg_dice,seg_ce,total,mi_static_dyn,mi_dyn_dyn,"
                  "val_dice,lr\n",
                  0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 3);  // header + one row per epoch

  const std::string out_c = temp_dir("runC");
  const TrainResult rc = train(cfg, 43, data_dir, out_c);
  CHECK(read_text_file(ra.checkpoint_file) != read_text_file(rc.checkpoint_file));
  CHECK(rc.last_val_dice >= 0.0f);
  CHECK(rc.last_val_dice <= 1.0f);
}

TEST_CASE("zero-epoch training checkpoints the raw initialization") {
  Config cfg;
  cfg.phantom.count = 4;
  cfg.phantom.split_train = 0.5;
  cfg.phantom.split_val = 0.25;
  cfg.model = small_model();
  cfg.train.epochs = 0;

  const std::string data_dir = temp_dir("data0");
  phantom::gen_dataset(cfg.phantom, 8, data_dir);
  const std::string out = temp_dir("run0");
  const TrainResult r = train(cfg, 77, data_dir, out);

  TardisModel fresh(cfg.model, cfg.phantom.image_hw, Rng::derive(77, 1));
  const Checkpoint ck = read_checkpoint(r.checkpoint_file);
  const ParamList expect = fresh.params();
  REQUIRE(ck.tensors.size() == expect.size());
  for (size_t i = 0; i < expect.size(); ++i) {
    CHECK(ck.tensors[i].first == expect[i].first);
    CHECK(ck.tensors[i].second.data() == expect[i].second.data());
  }
  CHECK(ck.header.at("dataset_hash").get<std::string>() != "");
  CHECK(ck.header.at("seed").get<uint64_t>() == 77);
}
