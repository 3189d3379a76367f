#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "tardis/io.hpp"
#include "tardis/model.hpp"

using namespace tardis;
using phantom::Phase;
using phantom::PhaseImage;
using phantom::Study;
namespace fs = std::filesystem;

namespace {

constexpr int kHw = 16;

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.dict_size = 64;
  cfg.z_dim = 4;
  cfg.hidden = 8;
  return cfg;
}

Tensor random_image(Rng& rng) {
  Tensor img = Tensor::zeros({1, kHw, kHw});
  for (float& v : img.data()) v = float(rng.uniform(-100.0, 200.0));
  return img;
}

Study make_study(const std::vector<std::pair<Phase, float>>& acquisitions, uint64_t seed) {
  Rng rng(seed);
  Study s;
  s.id = "study-test";
  s.seg = Tensor::zeros({kHw, kHw});
  for (const auto& [phase, tau] : acquisitions) {
    PhaseImage ph;
    ph.phase = phase;
    ph.tau_nominal = phantom::nominal_tau(phase);
    ph.tau_actual = tau;
    ph.image = random_image(rng);
    s.phases.push_back(std::move(ph));
  }
  return s;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](float v) { return std::isfinite(v); });
}

std::string temp_path(const std::string& leaf) {
  static int counter = 0;
  fs::path dir = fs::temp_directory_path() / ("tardis_model_test_" + std::to_string(counter++));
  fs::create_directories(dir);
  return (dir / leaf).string();
}

}  // namespace

TEST_CASE("parameter set is seeded, named, and reproducible") {
  TardisModel a(small_config(), kHw, 11);
  TardisModel b(small_config(), kHw, 11);
  TardisModel c(small_config(), kHw, 12);

  const ParamList pa = a.params();
  const ParamList pb = b.params();
  const ParamList pc = c.params();
  CHECK(pa.size() == 37);

  std::set<std::string> names;
  bool any_differs = false;
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(names.insert(pa[i].first).second);
    CHECK(pa[i].second.requires_grad());
    CHECK(pa[i].first == pb[i].first);
    CHECK(same_bits(pa[i].second, pb[i].second));
    if (!same_bits(pa[i].second, pc[i].second)) any_differs = true;
  }
  CHECK(any_differs);
}

TEST_CASE("forward_train orders phases by acquisition time and shapes every product") {
  TardisModel model(small_config(), kHw, 3);
  // Deliberately scrambled tau order; the forward pass must re-sort.
  const Study study = make_study({{Phase::N, 0.52f}, {Phase::A, 0.04f}, {Phase::V, 0.88f}}, 21);

  Rng noise(7);
  TrainForward fwd = model.forward_train(study, noise);

  REQUIRE(fwd.phases.size() == 3);
  CHECK(fwd.phases[0].phase == Phase::A);
  CHECK(fwd.phases[1].phase == Phase::N);
  CHECK(fwd.phases[2].phase == Phase::V);
  CHECK(fwd.phases[0].tau_actual == doctest::Approx(0.04f));

  const int k = model.positions();
  const int c = model.channels();
  CHECK(fwd.anatomy.shape() == Shape{k, c});
  CHECK(fwd.weights.shape() == Shape{k, 4});
  CHECK(fwd.fused.shape() == Shape{k, c});
  CHECK(fwd.logits.shape() == Shape{3, kHw, kHw});
  CHECK(all_finite(fwd.logits));

  for (const PhaseTrace& tr : fwd.phases) {
    CHECK(tr.tokens_s.shape() == Shape{k, c});
    CHECK(tr.tokens_d.shape() == Shape{k, c});
    CHECK(tr.recon.shape() == Shape{k, c});
    CHECK(tr.post.mu.shape() == Shape{k, 4});
    CHECK(tr.tau_hat.shape() == Shape{1});
    const float tau = tr.tau_hat.item();
    CHECK(tau > 0.0f);
    CHECK(tau < 1.0f);
    CHECK(int(tr.quant.indices.size()) == k);
  }

  REQUIRE(fwd.pooled.size() == 4);
  CHECK(fwd.pooled[0].first == 0);
  CHECK(fwd.pooled[1].first == 1 + int(Phase::A));
  CHECK(fwd.pooled[2].first == 1 + int(Phase::N));
  CHECK(fwd.pooled[3].first == 1 + int(Phase::V));
  for (const PooledRep& rep : fwd.pooled) CHECK(rep.second.shape() == Shape{1, c});

  CHECK(model.dict().usage()[0] + 0 >= 0);
  long long used = 0;
  for (long long n : model.dict().usage()) used += n;
  CHECK(used == 3 * k);

  CHECK_THROWS_AS((void)model.forward_train(Study{}, noise), std::invalid_argument);
}

TEST_CASE("forward_train is deterministic in the noise stream and uses it") {
  const Study study = make_study({{Phase::N, 0.0f}, {Phase::V, 0.55f}}, 40);

  TardisModel m1(small_config(), kHw, 5);
  TardisModel m2(small_config(), kHw, 5);
  Rng n1(9), n2(9), n3(10);

  TrainForward f1 = m1.forward_train(study, n1);
  TrainForward f2 = m2.forward_train(study, n2);
  CHECK(same_bits(f1.logits, f2.logits));
  CHECK(same_bits(f1.weights, f2.weights));
  CHECK(same_bits(f1.phases[0].post.z, f2.phases[0].post.z));

  TrainForward f3 = m2.forward_train(study, n3);
  CHECK(same_bits(f1.phases[0].post.mu, f3.phases[0].post.mu));
  CHECK_FALSE(same_bits(f1.phases[0].post.z, f3.phases[0].post.z));
  CHECK_FALSE(same_bits(f1.logits, f3.logits));
}

TEST_CASE("checkpoint round-trip restores parameters bit for bit") {
  TardisModel src(small_config(), kHw, 100);
  TardisModel dst(small_config(), kHw, 200);

  const std::string path = temp_path("model.tard");
  write_checkpoint(path, nlohmann::json{{"purpose", "test"}}, src.params());

  const Checkpoint ck = read_checkpoint(path);
  dst.load_state(ck.tensors);

  const ParamList ps = src.params();
  const ParamList pd = dst.params();
  for (size_t i = 0; i < ps.size(); ++i) CHECK(same_bits(ps[i].second, pd[i].second));

  const Study study = make_study({{Phase::A, 0.3f}, {Phase::D, 0.85f}}, 60);
  Rng na(1), nb(1);
  TrainForward fa = src.forward_train(study, na);
  TrainForward fb = dst.forward_train(study, nb);
  CHECK(same_bits(fa.logits, fb.logits));
}

TEST_CASE("load_state rejects missing, unknown, misshapen, and duplicate tensors") {
  TardisModel model(small_config(), kHw, 1);

  auto tensors = model.params();
  std::vector<std::pair<std::string, Tensor>> copy(tensors.begin(), tensors.end());

  SUBCASE("missing") {
    copy.pop_back();
    CHECK_THROWS_WITH_AS(model.load_state(copy), doctest::Contains("missing"),
                         std::invalid_argument);
  }
  SUBCASE("unknown") {
    copy.emplace_back("rogue.w", Tensor::zeros({1}));
    CHECK_THROWS_WITH_AS(model.load_state(copy), doctest::Contains("unknown"),
                         std::invalid_argument);
  }
  SUBCASE("shape mismatch") {
    copy[0].second = Tensor::zeros({1, 2, 3});
    CHECK_THROWS_WITH_AS(model.load_state(copy), doctest::Contains("shape"),
                         std::invalid_argument);
  }
  SUBCASE("duplicate") {
    copy.push_back(copy.front());
    CHECK_THROWS_WITH_AS(model.load_state(copy), doctest::Contains("duplicate"),
                         std::invalid_argument);
  }
}

TEST_CASE("infer fills absent protocol slots according to the fill mode") {
  TardisModel model(small_config(), kHw, 17);
  const Study study = make_study({{Phase::N, 0.02f}, {Phase::V, 0.5f}}, 33);
  const std::vector<Phase> all = {Phase::N, Phase::A, Phase::V, Phase::D};
  const int k = model.positions();
  const int c = model.channels();

  InferResult prior = model.infer(study, all, MissingFill::kPrior);
  REQUIRE(prior.slots.size() == 4);
  CHECK(prior.weights.shape() == Shape{k, 5});
  CHECK(prior.logits.shape() == Shape{3, kHw, kHw});
  CHECK(all_finite(prior.logits));
  for (int p = 0; p < 4; ++p) CHECK(prior.slots[p].phase == Phase(p));
  CHECK(prior.slots[0].acquired);
  CHECK_FALSE(prior.slots[1].acquired);
  CHECK(prior.slots[2].acquired);
  CHECK_FALSE(prior.slots[3].acquired);
  CHECK(prior.slots[1].tau == doctest::Approx(0.30f));
  CHECK(prior.slots[3].tau == doctest::Approx(0.85f));
  CHECK(prior.slots[0].tau > 0.0f);
  CHECK(prior.slots[0].tau < 1.0f);

  // Deterministic prior fill equals a zero-latent decode under the same condition.
  const Condition cond{prior.anatomy, Tensor::scalar(0.30f)};
  CHECK(same_bits(prior.slots[1].rep, model.dynamic_head().sample_prior(cond, nullptr)));

  InferResult zeros = model.infer(study, all, MissingFill::kZeros);
  CHECK(zeros.slots[1].rep.shape() == Shape{k, c});
  for (float v : zeros.slots[1].rep.data()) CHECK(v == 0.0f);
  for (float v : zeros.slots[3].rep.data()) CHECK(v == 0.0f);
  CHECK(same_bits(zeros.slots[0].rep, prior.slots[0].rep));
  CHECK_FALSE(same_bits(zeros.logits, prior.logits));

  InferResult none = model.infer(study, all, MissingFill::kNone);
  REQUIRE(none.slots.size() == 2);
  CHECK(none.slots[0].phase == Phase::N);
  CHECK(none.slots[1].phase == Phase::V);
  CHECK(none.weights.shape() == Shape{k, 3});
}

TEST_CASE("infer restricts to the requested subset and validates it") {
  TardisModel model(small_config(), kHw, 18);
  const Study study = make_study({{Phase::N, 0.0f}, {Phase::A, 0.3f}, {Phase::V, 0.55f}}, 44);

  InferResult one = model.infer(study, {Phase::V}, MissingFill::kPrior);
  REQUIRE(one.slots.size() == 4);
  int acquired = 0;
  for (const SlotInfo& s : one.slots) acquired += s.acquired ? 1 : 0;
  CHECK(acquired == 1);
  CHECK(one.slots[2].acquired);

  // Restriction honors acquisition: asking for a never-acquired phase fails.
  CHECK_THROWS_AS((void)model.infer(study, {Phase::D}, MissingFill::kPrior),
                  std::invalid_argument);
  CHECK_THROWS_AS((void)model.infer(study, {}, MissingFill::kPrior), std::invalid_argument);
  CHECK_THROWS_AS(
      (void)model.infer(study, {Phase::N}, MissingFill::kPrior, nullptr, 0),
      std::invalid_argument);
}

TEST_CASE("infer is deterministic without an rng and stochastic with one") {
  TardisModel model(small_config(), kHw, 19);
  const Study study = make_study({{Phase::A, 0.28f}}, 55);
  const std::vector<Phase> all = {Phase::N, Phase::A, Phase::V, Phase::D};

  InferResult det1 = model.infer(study, all, MissingFill::kPrior);
  InferResult det2 = model.infer(study, all, MissingFill::kPrior);
  CHECK(same_bits(det1.logits, det2.logits));

  Rng r1(77), r2(78), r3(77);
  InferResult s1 = model.infer(study, all, MissingFill::kPrior, &r1);
  InferResult s2 = model.infer(study, all, MissingFill::kPrior, &r2);
  Rng r3b(77);
  InferResult s3 = model.infer(study, all, MissingFill::kPrior, &r3b, 1);
  CHECK_FALSE(same_bits(s1.slots[0].rep, det1.slots[0].rep));
  CHECK_FALSE(same_bits(s1.slots[0].rep, s2.slots[0].rep));
  CHECK(same_bits(s1.slots[0].rep, s3.slots[0].rep));
  CHECK(same_bits(s1.slots[1].rep, det1.slots[1].rep));  // acquired slot ignores rng

  // Independent 64-draw averages agree far better than independent single
  // draws: both estimate the same mean decode, draws only add variance.
  Rng ra(5), rb(6);
  InferResult avg_a = model.infer(study, all, MissingFill::kPrior, &ra, 64);
  InferResult avg_b = model.infer(study, all, MissingFill::kPrior, &rb, 64);
  CHECK_FALSE(same_bits(avg_a.slots[0].rep, det1.slots[0].rep));
  double d_avg = 0, d_one = 0;
  const size_t n = det1.slots[0].rep.data().size();
  for (size_t i = 0; i < n; ++i) {
    d_avg += std::abs(double(avg_a.slots[0].rep.data()[i]) - double(avg_b.slots[0].rep.data()[i]));
    d_one += std::abs(double(s1.slots[0].rep.data()[i]) - double(s2.slots[0].rep.data()[i]));
  }
  CHECK(d_avg < d_one);
}
