#ifndef TARDIS_CONFIG_HPP
#define TARDIS_CONFIG_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace tardis {

// All knobs live here with their defaults; a config file only needs the keys
// it overrides. Hashing goes through the canonical full dump so two configs
// that resolve to the same values share a hash.

struct PhantomConfig {
  int image_hw = 48;
  int count = 200;
  double split_train = 0.70;
  double split_val = 0.15;
  double noise_sigma = 5.0;

  double bg_hu_lo = -60.0, bg_hu_hi = -40.0;
  double organ_hu_lo = 30.0, organ_hu_hi = 50.0;
  double tumor_hu_offset_lo = 8.0, tumor_hu_offset_hi = 18.0;

  int organ_a_lo = 12, organ_a_hi = 17;  // semi-axes, pixels
  int organ_b_lo = 10, organ_b_hi = 15;
  double organ_center_jitter = 4.0;
  int tumor_r_lo = 3, tumor_r_hi = 7;

  double organ_amp_lo = 40.0, organ_amp_hi = 60.0;
  double organ_peak_center = 0.55;
  double hypo_amp_lo = 10.0, hypo_amp_hi = 30.0;
  double hypo_peak_center = 0.55;
  double hyper_amp_lo = 80.0, hyper_amp_hi = 120.0;
  double hyper_peak_center = 0.30;
  double peak_center_jitter = 0.03;
  double peak_width_lo = 0.08, peak_width_hi = 0.10;

  double tau_jitter = 0.05;

  // Acquisition patterns and their draw probabilities; labels are subsets of
  // "NAVD" in protocol order.
  std::vector<std::pair<std::string, double>> patterns = {
      {"NAVD", 0.35}, {"NAV", 0.15}, {"NA", 0.10}, {"AV", 0.10}, {"N", 0.05},
      {"A", 0.05},    {"V", 0.05},   {"NAD", 0.05}, {"AVD", 0.05}, {"NV", 0.05},
  };
};

struct ModelConfig {
  int channels = 32;     // per-position embedding width
  int dict_size = 512;   // anatomy dictionary entries
  int z_dim = 16;        // variational latent width
  int hidden = 64;       // hidden width for the variational heads, scorer aux nets
  double beta = 0.25;    // commitment weight
  double rank_margin = 0.05;
  double kl_weight = 1.0;
};

struct TrainConfig {
  int epochs = 60;
  int batch = 4;
  double lr = 0.01;
  double lr_min = 1e-4;
  double weight_decay = 0.01;
  double clip_norm = 5.0;
  double dropout_p = 0.2;
  double club_lr = 1e-3;
  int club_buffer = 64;
  bool reseed_dead_codes = true;
};

struct EvalConfig {
  int mc_samples = 1;       // posterior-mean fill when 1, averaged draws when >1
  double ridge_lambda = 1e-2;
};

struct Config {
  PhantomConfig phantom;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
};

nlohmann::json to_json(const Config& c);
Config config_from_json(const nlohmann::json& j);  // unknown keys rejected
Config load_config(const std::string& path);       // empty path gives defaults
std::string config_hash(const Config& c);

}  // namespace tardis

#endif  // TARDIS_CONFIG_HPP
