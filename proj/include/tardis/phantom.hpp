#ifndef TARDIS_PHANTOM_HPP
#define TARDIS_PHANTOM_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tardis/config.hpp"
#include "tardis/rng.hpp"
#include "tardis/tensor.hpp"

namespace tardis::phantom {

// Four-phase acquisition protocol. Indices double as the canonical ordering
// everywhere a per-phase array appears.
enum class Phase : int { N = 0, A = 1, V = 2, D = 3 };
constexpr int kNumPhases = 4;
constexpr std::array<float, kNumPhases> kNominalTau = {0.00f, 0.30f, 0.55f, 0.85f};

char phase_label(Phase p);
Phase phase_from_label(char c);
float nominal_tau(Phase p);

enum class Lesion : int { None = 0, Hypo = 1, Hyper = 2 };

// Segmentation class ids, also the channel order of predicted logits.
constexpr int kSegBackground = 0;
constexpr int kSegOrgan = 1;
constexpr int kSegTumor = 2;
constexpr int kSegClasses = 3;

struct TacPeak {
  float amp = 0;
  float center = 0;
  float width = 1;
};

// Per-tissue signal model: constant baseline plus gaussian enhancement peaks.
struct TacParams {
  float static_hu = 0;
  std::vector<TacPeak> peaks;
};

// Signal at normalized acquisition time tau in [0,1].
float eval_tac(const TacParams& params, float tau);

struct TissueLayout {
  int hw = 0;
  std::vector<uint8_t> region;  // hw*hw entries of seg class ids
  std::array<TacParams, kSegClasses> params;
  Lesion lesion = Lesion::None;
};

struct PhaseImage {
  Phase phase = Phase::N;
  float tau_nominal = 0;
  float tau_actual = 0;
  Tensor image;  // [1, hw, hw] raw values
};

struct Study {
  std::string id;
  uint64_t layout_seed = 0;
  Lesion lesion = Lesion::None;
  std::string split;
  Tensor seg;  // [hw, hw] class ids as floats
  std::vector<PhaseImage> phases;  // subset of the protocol, in protocol order
};

// Geometry and tissue curves for one subject. Deterministic in (cfg, seed).
TissueLayout rasterize_layout(const PhantomConfig& cfg, uint64_t layout_seed);

// Draws an acquisition pattern, jitters the time stamps, and renders one
// noisy image per acquired phase. Consumes rng; layout stays fixed.
std::vector<PhaseImage> sample_phases(const PhantomConfig& cfg, const TissueLayout& layout,
                                      Rng& rng);

Tensor render_segmentation(const TissueLayout& layout);

struct PhaseEntry {
  Phase phase = Phase::N;
  float tau_nominal = 0;
  float tau_actual = 0;
  std::string file;
  uint64_t bytes = 0;
};

struct StudyEntry {
  std::string id;
  uint64_t layout_seed = 0;
  Lesion lesion = Lesion::None;
  std::string split;
  std::string seg_file;
  uint64_t seg_bytes = 0;
  std::vector<PhaseEntry> phases;
};

struct DatasetManifest {
  uint64_t seed = 0;
  std::string config_hash;
  std::vector<StudyEntry> studies;
  std::string dataset_hash;  // over volume payloads in manifest order
};

// Generates the full dataset under out_dir and writes manifest.jsonl there.
DatasetManifest gen_dataset(const PhantomConfig& cfg, uint64_t seed, const std::string& out_dir);

DatasetManifest read_manifest(const std::string& path);
void write_manifest(const DatasetManifest& m, const std::string& path);

// Loads volumes referenced by one manifest entry; validates byte sizes.
Study load_study(const StudyEntry& entry, const std::string& dir);

// Maps raw values into [0,1] for network input; files keep raw values.
Tensor normalize_volume(const Tensor& raw);

}  // namespace tardis::phantom

#endif  // TARDIS_PHANTOM_HPP
