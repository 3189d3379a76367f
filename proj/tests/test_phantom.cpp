#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>
#include <string>

#include "tardis/config.hpp"
#include "tardis/io.hpp"
#include "tardis/phantom.hpp"
#include "tardis/rng.hpp"

using namespace tardis;
using namespace tardis::phantom;
namespace fs = std::filesystem;

namespace {

std::string temp_dir() {
  static int counter = 0;
  fs::path p = fs::temp_directory_path() / ("tardis_phantom_test_" + std::to_string(counter++));
  fs::create_directories(p);
  return p.string();
}

PhantomConfig small_cfg() {
  PhantomConfig cfg;
  cfg.count = 12;
  cfg.split_train = 0.5;
  cfg.split_val = 0.25;
  return cfg;
}

}  // namespace

TEST_CASE("eval_tac: baseline only") {
  TacParams p;
  p.static_hu = 10.0f;
  CHECK(eval_tac(p, 0.0f) == doctest::Approx(10.0));
  CHECK(eval_tac(p, 0.5f) == doctest::Approx(10.0));
  CHECK(eval_tac(p, 1.0f) == doctest::Approx(10.0));
}

TEST_CASE("eval_tac: single peak evaluates the gaussian") {
  TacParams p;
  p.static_hu = -50.0f;
  p.peaks.push_back({100.0f, 0.3f, 0.1f});
  // At the center the peak contributes its full amplitude.
  CHECK(eval_tac(p, 0.3f) == doctest::Approx(-50.0 + 100.0).epsilon(1e-6));
  // Three widths out: 100 * exp(-4.5).
  CHECK(eval_tac(p, 0.0f) == doctest::Approx(-50.0 + 100.0 * std::exp(-4.5)).epsilon(1e-5));
  CHECK(eval_tac(p, 0.6f) == doctest::Approx(-50.0 + 100.0 * std::exp(-4.5)).epsilon(1e-5));
}

TEST_CASE("eval_tac: peaks superpose") {
  TacParams p;
  p.static_hu = 0.0f;
  p.peaks.push_back({40.0f, 0.2f, 0.1f});
  p.peaks.push_back({60.0f, 0.8f, 0.1f});
  const double want = 40.0 * std::exp(-0.5 * 9.0) + 60.0 * std::exp(-0.5 * 9.0);
  CHECK(eval_tac(p, 0.5f) == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("eval_tac rejects times outside the protocol window") {
  TacParams p;
  CHECK_THROWS_AS(eval_tac(p, -0.1f), std::invalid_argument);
  CHECK_THROWS_AS(eval_tac(p, 1.1f), std::invalid_argument);
  CHECK_THROWS_AS(eval_tac(p, std::nanf("")), std::invalid_argument);
}

TEST_CASE("phase labels and nominal times") {
  CHECK(phase_label(Phase::N) == 'N');
  CHECK(phase_label(Phase::D) == 'D');
  CHECK(phase_from_label('V') == Phase::V);
  CHECK_THROWS_AS(phase_from_label('X'), std::invalid_argument);
  CHECK(nominal_tau(Phase::N) == doctest::Approx(0.00));
  CHECK(nominal_tau(Phase::A) == doctest::Approx(0.30));
  CHECK(nominal_tau(Phase::V) == doctest::Approx(0.55));
  CHECK(nominal_tau(Phase::D) == doctest::Approx(0.85));
}

TEST_CASE("layout geometry invariants hold across seeds") {
  PhantomConfig cfg;
  int with_lesion = 0;
  for (uint64_t seed = 0; seed < 300; ++seed) {
    const TissueLayout L = rasterize_layout(cfg, Rng::derive(42, seed));
    REQUIRE(L.hw == 48);
    int counts[3] = {0, 0, 0};
    for (uint8_t r : L.region) {
      REQUIRE(r <= 2);
      ++counts[r];
    }
    CHECK(counts[kSegBackground] > 1000);  // organ occupies well under half the frame
    CHECK(counts[kSegOrgan] > 100);
    if (L.lesion == Lesion::None) {
      CHECK(counts[kSegTumor] == 0);
    } else {
      ++with_lesion;
      CHECK(counts[kSegTumor] >= 13);  // disc of radius >= 3, minus rasterization slack
      // Tumor is strictly interior: no tumor pixel touches background.
      for (int y = 0; y < L.hw; ++y)
        for (int x = 0; x < L.hw; ++x) {
          if (L.region[size_t(y) * L.hw + x] != kSegTumor) continue;
          const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
          for (int k = 0; k < 4; ++k) {
            const int nx = x + dx[k], ny = y + dy[k];
            REQUIRE(nx >= 0);
            REQUIRE(ny >= 0);
            REQUIRE(nx < L.hw);
            REQUIRE(ny < L.hw);
            REQUIRE(L.region[size_t(ny) * L.hw + nx] != kSegBackground);
          }
        }
    }
  }
  CHECK(with_lesion > 150);  // two of three classes carry a lesion
}

TEST_CASE("layout regeneration is exact in (config, seed)") {
  PhantomConfig cfg;
  const uint64_t seed = Rng::derive(9, 4);
  const TissueLayout a = rasterize_layout(cfg, seed);
  const TissueLayout b = rasterize_layout(cfg, seed);
  CHECK(a.region == b.region);
  CHECK(a.lesion == b.lesion);
  for (int c = 0; c < kSegClasses; ++c) {
    CHECK(a.params[c].static_hu == b.params[c].static_hu);
    REQUIRE(a.params[c].peaks.size() == b.params[c].peaks.size());
    for (size_t i = 0; i < a.params[c].peaks.size(); ++i) {
      CHECK(a.params[c].peaks[i].amp == b.params[c].peaks[i].amp);
      CHECK(a.params[c].peaks[i].center == b.params[c].peaks[i].center);
      CHECK(a.params[c].peaks[i].width == b.params[c].peaks[i].width);
    }
  }
  bool any_differ = false;
  for (uint64_t s = 0; s < 5; ++s)
    any_differ |= rasterize_layout(cfg, Rng::derive(9, 100 + s)).region != a.region;
  CHECK(any_differ);
}

TEST_CASE("noiseless rendering equals the tissue curve per pixel") {
  PhantomConfig cfg;
  cfg.noise_sigma = 0.0;
  const TissueLayout L = rasterize_layout(cfg, Rng::derive(3, 0));
  Rng rng(77);
  const auto phases = sample_phases(cfg, L, rng);
  REQUIRE(!phases.empty());
  for (const PhaseImage& pi : phases) {
    const float* img = pi.image.data().data();
    for (int y = 0; y < L.hw; ++y)
      for (int x = 0; x < L.hw; ++x) {
        const uint8_t cls = L.region[size_t(y) * L.hw + x];
        REQUIRE(img[size_t(y) * L.hw + x] ==
                doctest::Approx(eval_tac(L.params[cls], pi.tau_actual)).epsilon(1e-6));
      }
  }
}

TEST_CASE("noise has the configured scale and zero mean") {
  PhantomConfig cfg;  // sigma 5
  const TissueLayout L = rasterize_layout(cfg, Rng::derive(3, 1));
  Rng rng(78);
  double sum = 0, sum2 = 0;
  size_t n = 0;
  for (int rep = 0; rep < 20; ++rep) {
    const auto phases = sample_phases(cfg, L, rng);
    for (const PhaseImage& pi : phases) {
      const float* img = pi.image.data().data();
      for (int y = 0; y < L.hw; ++y)
        for (int x = 0; x < L.hw; ++x) {
          const uint8_t cls = L.region[size_t(y) * L.hw + x];
          const double d = img[size_t(y) * L.hw + x] - eval_tac(L.params[cls], pi.tau_actual);
          sum += d;
          sum2 += d * d;
          ++n;
        }
    }
  }
  const double mean = sum / double(n);
  const double sd = std::sqrt(sum2 / double(n) - mean * mean);
  CHECK(std::abs(mean) < 3.0 * 5.0 / std::sqrt(double(n)));
  CHECK(sd == doctest::Approx(5.0).epsilon(0.02));
}

TEST_CASE("acquired phases keep protocol order in actual time") {
  PhantomConfig cfg;
  const TissueLayout L = rasterize_layout(cfg, Rng::derive(3, 2));
  Rng rng(79);
  for (int rep = 0; rep < 200; ++rep) {
    const auto phases = sample_phases(cfg, L, rng);
    for (size_t i = 1; i < phases.size(); ++i) {
      REQUIRE(int(phases[i].phase) > int(phases[i - 1].phase));
      REQUIRE(phases[i].tau_actual > phases[i - 1].tau_actual);
    }
    for (const PhaseImage& pi : phases) {
      REQUIRE(pi.tau_actual >= 0.0f);
      REQUIRE(pi.tau_actual <= 1.0f);
      REQUIRE(std::abs(pi.tau_actual - pi.tau_nominal) <= cfg.tau_jitter + 1e-6);
    }
  }
}

TEST_CASE("pattern draw frequencies match the table") {
  PhantomConfig cfg;
  TissueLayout tiny;  // rendering cost does not matter for the draw statistics
  tiny.hw = 4;
  tiny.region.assign(16, kSegBackground);

  std::map<std::string, int> hits;
  const int n = 10000;
  Rng rng(5);
  for (int i = 0; i < n; ++i) {
    const auto phases = sample_phases(cfg, tiny, rng);
    std::string key;
    for (const auto& pi : phases) key += phase_label(pi.phase);
    ++hits[key];
  }
  for (const auto& [label, prob] : cfg.patterns) {
    const double freq = hits[label] / double(n);
    INFO("pattern ", label, " freq ", freq, " expected ", prob);
    CHECK(std::abs(freq - prob) < 0.02);
  }
  int total = 0;
  for (const auto& [k, v] : hits) total += v;
  CHECK(total == n);  // no draw produced a pattern outside the table
}

TEST_CASE("lesion classes are drawn in equal proportion") {
  PhantomConfig cfg;
  int counts[3] = {0, 0, 0};
  const int n = 10000;
  for (int i = 0; i < n; ++i)
    ++counts[int(rasterize_layout(cfg, Rng::derive(1234, uint64_t(i))).lesion)];
  for (int c = 0; c < 3; ++c) {
    const double freq = counts[c] / double(n);
    INFO("class ", c, " freq ", freq);
    CHECK(std::abs(freq - 1.0 / 3.0) < 0.02);
  }
}

TEST_CASE("class signal lives in the enhancement curve, not the baseline") {
  PhantomConfig cfg;
  int hypo_seen = 0, hyper_seen = 0;
  for (uint64_t s = 0; s < 400 && (hypo_seen < 50 || hyper_seen < 50); ++s) {
    const TissueLayout L = rasterize_layout(cfg, Rng::derive(21, s));
    if (L.lesion == Lesion::None) continue;
    const TacParams& t = L.params[kSegTumor];
    // Baseline stays near the organ range for both classes.
    CHECK(std::abs(t.static_hu - L.params[kSegOrgan].static_hu) <= cfg.tumor_hu_offset_hi + 1e-4);
    const double enh_arterial = eval_tac(t, 0.30f) - t.static_hu;
    if (L.lesion == Lesion::Hyper) {
      ++hyper_seen;
      CHECK(enh_arterial > 50.0);  // arterial washes in hard
    } else {
      ++hypo_seen;
      CHECK(enh_arterial < 10.0);  // barely enhances this early
    }
  }
  CHECK(hypo_seen >= 50);
  CHECK(hyper_seen >= 50);
}

TEST_CASE("normalize_volume maps the working range onto [0,1]") {
  Tensor raw = Tensor::from({5}, {-100.0f, 200.0f, 50.0f, -160.0f, 230.0f});
  Tensor n = normalize_volume(raw);
  CHECK(n.data()[0] == doctest::Approx(0.0));
  CHECK(n.data()[1] == doctest::Approx(1.0));
  CHECK(n.data()[2] == doctest::Approx(0.5));
  CHECK(n.data()[3] == doctest::Approx(0.0));  // clipped
  CHECK(n.data()[4] == doctest::Approx(1.0));  // clipped
}

TEST_CASE("gen_dataset writes a loadable, split-consistent corpus") {
  const std::string dir = temp_dir();
  const PhantomConfig cfg = small_cfg();
  const DatasetManifest m = gen_dataset(cfg, 2024, dir);

  REQUIRE(m.studies.size() == 12);
  int n_train = 0, n_val = 0, n_test = 0;
  for (const auto& e : m.studies) {
    if (e.split == "train") ++n_train;
    else if (e.split == "val") ++n_val;
    else if (e.split == "test") ++n_test;
  }
  CHECK(n_train == 6);
  CHECK(n_val == 3);
  CHECK(n_test == 3);

  for (const auto& e : m.studies) {
    Study s = load_study(e, dir);
    CHECK(s.seg.shape() == Shape{48, 48});
    REQUIRE(!s.phases.empty());
    for (const auto& pi : s.phases) {
      CHECK(pi.image.shape() == Shape{1, 48, 48});
      CHECK(pi.tau_actual >= 0.0f);
      CHECK(pi.tau_actual <= 1.0f);
    }
    // Stored segmentation equals the regenerated layout: the manifest seed is
    // sufficient to rebuild ground truth.
    const TissueLayout L = rasterize_layout(cfg, e.layout_seed);
    CHECK(std::memcmp(s.seg.data().data(), render_segmentation(L).data().data(),
                      s.seg.numel() * sizeof(float)) == 0);
    CHECK(L.lesion == e.lesion);
  }
}

TEST_CASE("manifest text round-trips exactly") {
  const std::string dir = temp_dir();
  const DatasetManifest m = gen_dataset(small_cfg(), 7, dir);
  const std::string original = read_text_file(dir + "/manifest.jsonl");

  const DatasetManifest back = read_manifest(dir + "/manifest.jsonl");
  CHECK(back.seed == 7);
  CHECK(back.config_hash == m.config_hash);
  CHECK(back.dataset_hash == m.dataset_hash);
  REQUIRE(back.studies.size() == m.studies.size());

  write_manifest(back, dir + "/manifest2.jsonl");
  CHECK(read_text_file(dir + "/manifest2.jsonl") == original);
}

TEST_CASE("generation is byte-identical per seed and diverges across seeds") {
  const std::string d1 = temp_dir();
  const std::string d2 = temp_dir();
  const std::string d3 = temp_dir();
  const PhantomConfig cfg = small_cfg();
  const DatasetManifest a = gen_dataset(cfg, 99, d1);
  const DatasetManifest b = gen_dataset(cfg, 99, d2);
  const DatasetManifest c = gen_dataset(cfg, 100, d3);
  CHECK(a.dataset_hash == b.dataset_hash);
  CHECK(a.dataset_hash != c.dataset_hash);
  CHECK(read_text_file(d1 + "/manifest.jsonl") == read_text_file(d2 + "/manifest.jsonl"));
  for (const auto& e : a.studies)
    for (const auto& pe : e.phases)
      CHECK(read_text_file(d1 + "/" + pe.file) == read_text_file(d2 + "/" + pe.file));
}

TEST_CASE("load_study validates byte counts") {
  const std::string dir = temp_dir();
  const DatasetManifest m = gen_dataset(small_cfg(), 31, dir);
  StudyEntry e = m.studies[0];
  const std::string victim = dir + "/" + e.phases[0].file;
  const std::string bytes = read_text_file(victim);
  write_text_file(victim, bytes.substr(0, bytes.size() - 4));
  CHECK_THROWS_WITH_AS(load_study(e, dir), doctest::Contains("byte count"), std::runtime_error);

  fs::remove(victim);
  CHECK_THROWS_WITH_AS(load_study(e, dir), doctest::Contains("missing volume"),
                       std::runtime_error);
}

TEST_CASE("split arithmetic rounds to the configured shares") {
  // 20 studies at 0.7/0.15 give 14/3/3.
  const std::string dir = temp_dir();
  PhantomConfig cfg;
  cfg.count = 20;
  const DatasetManifest m = gen_dataset(cfg, 5, dir);
  int n_train = 0, n_val = 0, n_test = 0;
  for (const auto& e : m.studies) {
    if (e.split == "train") ++n_train;
    else if (e.split == "val") ++n_val;
    else ++n_test;
  }
  CHECK(n_train == 14);
  CHECK(n_val == 3);
  CHECK(n_test == 3);
}
