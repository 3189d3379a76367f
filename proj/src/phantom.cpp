#include "tardis/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tardis/io.hpp"

namespace tardis::phantom {

namespace {

constexpr const char* kManifestFormat = "tardis-dataset";
constexpr int kManifestVersion = 1;

struct Ellipse {
  double cx, cy, a, b, cos_t, sin_t;

  // Squared normalized radius; inside when <= 1.
  double norm2(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double u = (dx * cos_t + dy * sin_t) / a;
    const double v = (-dx * sin_t + dy * cos_t) / b;
    return u * u + v * v;
  }
};

bool disc_inside(const Ellipse& e, double tx, double ty, double r) {
  // 16 boundary probes; the disc is convex so this is tight enough at pixel scale.
  for (int k = 0; k < 16; ++k) {
    const double ang = 2.0 * M_PI * k / 16.0;
    if (e.norm2(tx + r * std::cos(ang), ty + r * std::sin(ang)) > 1.0) return false;
  }
  return true;
}

std::string phase_file(const std::string& id, Phase p) {
  return id + "_" + phase_label(p) + ".vol";
}

}  // namespace

char phase_label(Phase p) {
  static constexpr char kLabels[kNumPhases] = {'N', 'A', 'V', 'D'};
  return kLabels[static_cast<int>(p)];
}

Phase phase_from_label(char c) {
  switch (c) {
    case 'N': return Phase::N;
    case 'A': return Phase::A;
    case 'V': return Phase::V;
    case 'D': return Phase::D;
  }
  throw std::invalid_argument(std::string("unknown phase label: ") + c);
}

float nominal_tau(Phase p) { return kNominalTau[static_cast<int>(p)]; }

float eval_tac(const TacParams& params, float tau) {
  if (!(tau >= 0.0f && tau <= 1.0f))
    throw std::invalid_argument("tau outside [0,1]: " + std::to_string(tau));
  double v = params.static_hu;
  for (const TacPeak& pk : params.peaks) {
    const double d = (double(tau) - pk.center) / pk.width;
    v += pk.amp * std::exp(-0.5 * d * d);
  }
  return float(v);
}

TissueLayout rasterize_layout(const PhantomConfig& cfg, uint64_t layout_seed) {
  Rng rng(layout_seed);
  TissueLayout out;
  out.hw = cfg.image_hw;

  const double half = cfg.image_hw / 2.0;
  Ellipse organ;
  organ.cx = half + rng.uniform(-cfg.organ_center_jitter, cfg.organ_center_jitter);
  organ.cy = half + rng.uniform(-cfg.organ_center_jitter, cfg.organ_center_jitter);
  organ.a = rng.uniform(cfg.organ_a_lo, cfg.organ_a_hi);
  organ.b = rng.uniform(cfg.organ_b_lo, cfg.organ_b_hi);
  const double theta = rng.uniform(0.0, M_PI);
  organ.cos_t = std::cos(theta);
  organ.sin_t = std::sin(theta);

  const double bg_hu = rng.uniform(cfg.bg_hu_lo, cfg.bg_hu_hi);
  const double organ_hu = rng.uniform(cfg.organ_hu_lo, cfg.organ_hu_hi);

  out.lesion = static_cast<Lesion>(rng.uniform_int(3));

  double tx = 0, ty = 0, tr = 0;
  if (out.lesion != Lesion::None) {
    // 1.5px margin keeps a rasterized organ rim around the lesion, so tumor
    // pixels never border background.
    constexpr double kMargin = 1.5;
    tr = rng.uniform(cfg.tumor_r_lo, cfg.tumor_r_hi);
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      // Propose inside the shrunken ellipse, then verify the padded disc fits.
      const double ang = rng.uniform(0.0, 2.0 * M_PI);
      const double rad = std::sqrt(rng.uniform());
      const double ex = rad * std::cos(ang) * std::max(organ.a - tr - kMargin, 0.1);
      const double ey = rad * std::sin(ang) * std::max(organ.b - tr - kMargin, 0.1);
      tx = organ.cx + ex * organ.cos_t - ey * organ.sin_t;
      ty = organ.cy + ex * organ.sin_t + ey * organ.cos_t;
      placed = disc_inside(organ, tx, ty, tr + kMargin);
    }
    if (!placed) throw std::runtime_error("lesion placement failed; radius too close to organ axis");
  }

  out.params[kSegBackground].static_hu = float(bg_hu);
  out.params[kSegOrgan].static_hu = float(organ_hu);

  TacPeak organ_peak;
  organ_peak.amp = float(rng.uniform(cfg.organ_amp_lo, cfg.organ_amp_hi));
  organ_peak.center =
      float(cfg.organ_peak_center + rng.uniform(-cfg.peak_center_jitter, cfg.peak_center_jitter));
  organ_peak.width = float(rng.uniform(cfg.peak_width_lo, cfg.peak_width_hi));
  out.params[kSegOrgan].peaks.push_back(organ_peak);

  // Lesion baseline overlaps the organ range by construction: a signed offset
  // keeps the boundary visible in every phase while the class signal stays in
  // the enhancement curve alone.
  out.params[kSegTumor] = out.params[kSegOrgan];
  if (out.lesion != Lesion::None) {
    const double off = rng.uniform(cfg.tumor_hu_offset_lo, cfg.tumor_hu_offset_hi);
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    out.params[kSegTumor].static_hu = float(organ_hu + sign * off);
    TacPeak lesion_peak;
    if (out.lesion == Lesion::Hypo) {
      lesion_peak.amp = float(rng.uniform(cfg.hypo_amp_lo, cfg.hypo_amp_hi));
      lesion_peak.center = float(cfg.hypo_peak_center +
                                 rng.uniform(-cfg.peak_center_jitter, cfg.peak_center_jitter));
    } else {
      lesion_peak.amp = float(rng.uniform(cfg.hyper_amp_lo, cfg.hyper_amp_hi));
      lesion_peak.center = float(cfg.hyper_peak_center +
                                 rng.uniform(-cfg.peak_center_jitter, cfg.peak_center_jitter));
    }
    lesion_peak.width = float(rng.uniform(cfg.peak_width_lo, cfg.peak_width_hi));
    out.params[kSegTumor].peaks = {lesion_peak};
  }

  out.region.assign(size_t(cfg.image_hw) * cfg.image_hw, kSegBackground);
  for (int y = 0; y < cfg.image_hw; ++y) {
    for (int x = 0; x < cfg.image_hw; ++x) {
      uint8_t cls = kSegBackground;
      if (organ.norm2(x, y) <= 1.0) {
        cls = kSegOrgan;
        if (out.lesion != Lesion::None) {
          const double dx = x - tx, dy = y - ty;
          if (dx * dx + dy * dy <= tr * tr) cls = kSegTumor;
        }
      }
      out.region[size_t(y) * cfg.image_hw + x] = cls;
    }
  }
  return out;
}

std::vector<PhaseImage> sample_phases(const PhantomConfig& cfg, const TissueLayout& layout,
                                      Rng& rng) {
  const double u = rng.uniform();
  double cum = 0;
  std::string pattern = cfg.patterns.back().first;
  for (const auto& [label, prob] : cfg.patterns) {
    cum += prob;
    if (u < cum) {
      pattern = label;
      break;
    }
  }

  std::vector<PhaseImage> out;
  out.reserve(pattern.size());
  for (char c : pattern) {
    PhaseImage pi;
    pi.phase = phase_from_label(c);
    pi.tau_nominal = nominal_tau(pi.phase);
    pi.tau_actual = float(std::clamp(
        double(pi.tau_nominal) + rng.uniform(-cfg.tau_jitter, cfg.tau_jitter), 0.0, 1.0));
    pi.image = Tensor::zeros({1, layout.hw, layout.hw});
    float* dst = pi.image.data().data();
    for (int y = 0; y < layout.hw; ++y) {
      for (int x = 0; x < layout.hw; ++x) {
        const uint8_t cls = layout.region[size_t(y) * layout.hw + x];
        const float clean = eval_tac(layout.params[cls], pi.tau_actual);
        dst[size_t(y) * layout.hw + x] = clean + float(cfg.noise_sigma * rng.normal());
      }
    }
    out.push_back(std::move(pi));
  }
  return out;
}

Tensor render_segmentation(const TissueLayout& layout) {
  Tensor seg = Tensor::zeros({layout.hw, layout.hw});
  float* dst = seg.data().data();
  for (size_t i = 0; i < layout.region.size(); ++i) dst[i] = float(layout.region[i]);
  return seg;
}

DatasetManifest gen_dataset(const PhantomConfig& cfg, uint64_t seed, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  const int n_train = int(std::llround(cfg.count * cfg.split_train));
  const int n_val = int(std::llround(cfg.count * cfg.split_val));
  const int n_test = cfg.count - n_train - n_val;
  if (n_train <= 0 || n_val <= 0 || n_test <= 0)
    throw std::runtime_error("split sizes collapse to zero at count " + std::to_string(cfg.count));

  DatasetManifest m;
  m.seed = seed;
  Config full;
  full.phantom = cfg;
  m.config_hash = config_hash(full);

  uint64_t data_hash = 0xcbf29ce484222325ULL;
  for (int i = 0; i < cfg.count; ++i) {
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "study_%04d", i);

    StudyEntry e;
    e.id = idbuf;
    e.layout_seed = Rng::derive(seed, uint64_t(2 * i));
    e.split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");

    const TissueLayout layout = rasterize_layout(cfg, e.layout_seed);
    e.lesion = layout.lesion;

    Rng phase_rng = Rng::fork(seed, uint64_t(2 * i + 1));
    const std::vector<PhaseImage> phases = sample_phases(cfg, layout, phase_rng);
    for (const PhaseImage& pi : phases) {
      PhaseEntry pe;
      pe.phase = pi.phase;
      pe.tau_nominal = pi.tau_nominal;
      pe.tau_actual = pi.tau_actual;
      pe.file = phase_file(e.id, pi.phase);
      const std::string path = out_dir + "/" + pe.file;
      write_volume(path, pi.image);
      pe.bytes = fs::file_size(path);
      data_hash = hash_file(path, data_hash);
      e.phases.push_back(std::move(pe));
    }

    e.seg_file = e.id + "_seg.vol";
    const std::string seg_path = out_dir + "/" + e.seg_file;
    write_volume(seg_path, render_segmentation(layout));
    e.seg_bytes = fs::file_size(seg_path);
    data_hash = hash_file(seg_path, data_hash);

    m.studies.push_back(std::move(e));
  }
  m.dataset_hash = hex_u64(data_hash);
  write_manifest(m, out_dir + "/manifest.jsonl");
  return m;
}

void write_manifest(const DatasetManifest& m, const std::string& path) {
  std::ostringstream os;
  nlohmann::json meta = {
      {"format", kManifestFormat},   {"version", kManifestVersion},
      {"seed", m.seed},              {"config_hash", m.config_hash},
      {"count", m.studies.size()},   {"dataset_hash", m.dataset_hash},
  };
  os << meta.dump() << "\n";
  for (const StudyEntry& e : m.studies) {
    nlohmann::json phases = nlohmann::json::array();
    for (const PhaseEntry& pe : e.phases) {
      phases.push_back({{"label", std::string(1, phase_label(pe.phase))},
                        {"tau_nominal", pe.tau_nominal},
                        {"tau_actual", pe.tau_actual},
                        {"file", pe.file},
                        {"bytes", pe.bytes}});
    }
    nlohmann::json rec = {
        {"id", e.id},
        {"layout_seed", e.layout_seed},
        {"lesion_class", static_cast<int>(e.lesion)},
        {"split", e.split},
        {"phases", phases},
        {"seg_file", e.seg_file},
        {"seg_bytes", e.seg_bytes},
    };
    os << rec.dump() << "\n";
  }
  write_text_file(path, os.str());
}

DatasetManifest read_manifest(const std::string& path) {
  std::istringstream is(read_text_file(path));
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error(path + ": empty manifest");

  nlohmann::json meta = nlohmann::json::parse(line);
  if (meta.value("format", "") != kManifestFormat)
    throw std::runtime_error(path + ": unrecognized manifest format");
  if (meta.value("version", -1) != kManifestVersion)
    throw std::runtime_error(path + ": unsupported manifest version");

  DatasetManifest m;
  m.seed = meta.at("seed").get<uint64_t>();
  m.config_hash = meta.at("config_hash").get<std::string>();
  m.dataset_hash = meta.value("dataset_hash", "");
  const size_t count = meta.at("count").get<size_t>();

  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    StudyEntry e;
    e.id = rec.at("id").get<std::string>();
    e.layout_seed = rec.at("layout_seed").get<uint64_t>();
    e.lesion = static_cast<Lesion>(rec.at("lesion_class").get<int>());
    e.split = rec.at("split").get<std::string>();
    e.seg_file = rec.at("seg_file").get<std::string>();
    e.seg_bytes = rec.at("seg_bytes").get<uint64_t>();
    int last_phase = -1;
    for (const auto& pj : rec.at("phases")) {
      PhaseEntry pe;
      const std::string label = pj.at("label").get<std::string>();
      if (label.size() != 1)
        throw std::runtime_error(path + ": bad phase label in " + e.id);
      pe.phase = phase_from_label(label[0]);
      if (static_cast<int>(pe.phase) <= last_phase)
        throw std::runtime_error(path + ": phases out of protocol order in " + e.id);
      last_phase = static_cast<int>(pe.phase);
      pe.tau_nominal = pj.at("tau_nominal").get<float>();
      pe.tau_actual = pj.at("tau_actual").get<float>();
      pe.file = pj.at("file").get<std::string>();
      pe.bytes = pj.at("bytes").get<uint64_t>();
      e.phases.push_back(std::move(pe));
    }
    if (e.phases.empty()) throw std::runtime_error(path + ": study without phases: " + e.id);
    m.studies.push_back(std::move(e));
  }
  if (m.studies.size() != count)
    throw std::runtime_error(path + ": study count mismatch, meta says " + std::to_string(count) +
                             " but found " + std::to_string(m.studies.size()));
  return m;
}

Study load_study(const StudyEntry& entry, const std::string& dir) {
  namespace fs = std::filesystem;
  Study s;
  s.id = entry.id;
  s.layout_seed = entry.layout_seed;
  s.lesion = entry.lesion;
  s.split = entry.split;

  const std::string seg_path = dir + "/" + entry.seg_file;
  if (!fs::exists(seg_path)) throw std::runtime_error("missing volume: " + seg_path);
  if (fs::file_size(seg_path) != entry.seg_bytes)
    throw std::runtime_error("byte count mismatch for " + seg_path);
  s.seg = read_volume(seg_path);

  for (const PhaseEntry& pe : entry.phases) {
    const std::string path = dir + "/" + pe.file;
    if (!fs::exists(path)) throw std::runtime_error("missing volume: " + path);
    if (fs::file_size(path) != pe.bytes)
      throw std::runtime_error("byte count mismatch for " + path);
    PhaseImage pi;
    pi.phase = pe.phase;
    pi.tau_nominal = pe.tau_nominal;
    pi.tau_actual = pe.tau_actual;
    pi.image = read_volume(path);
    s.phases.push_back(std::move(pi));
  }
  return s;
}

Tensor normalize_volume(const Tensor& raw) {
  Tensor out = Tensor::zeros(raw.shape());
  const float* src = raw.data().data();
  float* dst = out.data().data();
  for (int i = 0; i < raw.numel(); ++i)
    dst[i] = std::clamp((src[i] + 100.0f) / 300.0f, 0.0f, 1.0f);
  return out;
}

}  // namespace tardis::phantom
