#include "tardis/config.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "tardis/io.hpp"

namespace tardis {

namespace {

// Pulls known keys out of one config section and rejects leftovers, so a
// typo in an override file fails loudly instead of silently using defaults.
class Section {
 public:
  Section(const nlohmann::json& root, std::string name) : name_(std::move(name)) {
    if (root.contains(name_)) {
      j_ = &root.at(name_);
      if (!j_->is_object()) throw std::runtime_error("config section is not an object: " + name_);
    }
  }

  template <class T>
  void get(const char* key, T& v) {
    seen_.insert(key);
    if (j_ && j_->contains(key)) {
      try {
        v = j_->at(key).get<T>();
      } catch (const nlohmann::json::exception&) {
        throw std::runtime_error("bad value type for config key: " + name_ + "." + key);
      }
    }
  }

  void finish() const {
    if (!j_) return;
    for (const auto& item : j_->items())
      if (!seen_.count(item.key()))
        throw std::runtime_error("unknown config key: " + name_ + "." + item.key());
  }

 private:
  const nlohmann::json* j_ = nullptr;
  std::string name_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error("invalid config: " + msg);
}

void validate(const Config& c) {
  const auto& p = c.phantom;
  require(p.image_hw > 0 && p.image_hw % 8 == 0, "phantom.image_hw must be a positive multiple of 8");
  require(p.count > 0, "phantom.count must be positive");
  require(p.split_train > 0 && p.split_val > 0 && p.split_train + p.split_val < 1.0,
          "phantom.split_train/split_val must leave a positive test share");
  require(p.noise_sigma >= 0, "phantom.noise_sigma must be non-negative");
  require(p.organ_a_lo <= p.organ_a_hi && p.organ_b_lo <= p.organ_b_hi,
          "phantom.organ semi-axis ranges are inverted");
  require(p.tumor_r_lo <= p.tumor_r_hi, "phantom.tumor_r range is inverted");
  require(p.tumor_r_hi + 2 <= p.organ_b_lo,
          "phantom.tumor_r_hi must sit at least two pixels inside phantom.organ_b_lo");
  require(p.organ_b_hi + p.organ_center_jitter < p.image_hw / 2.0,
          "phantom.organ_b_hi plus center jitter must fit inside the image");
  require(p.organ_a_hi + p.organ_center_jitter < p.image_hw / 2.0,
          "phantom.organ_a_hi plus center jitter must fit inside the image");
  require(p.peak_width_lo > 0 && p.peak_width_lo <= p.peak_width_hi,
          "phantom.peak_width range must be positive");
  require(p.tau_jitter >= 0 && p.tau_jitter < 0.125,
          "phantom.tau_jitter must be below half the smallest phase gap");
  require(!p.patterns.empty(), "phantom.patterns must not be empty");
  double psum = 0;
  std::set<std::string> labels;
  for (const auto& [label, prob] : p.patterns) {
    require(!label.empty(), "phantom.patterns has an empty label");
    require(labels.insert(label).second, "phantom.patterns repeats label " + label);
    int last = -1;
    for (char ch : label) {
      const int idx = std::string("NAVD").find(ch) != std::string::npos
                          ? int(std::string("NAVD").find(ch))
                          : -1;
      require(idx >= 0, "phantom.patterns label " + label + " has a character outside NAVD");
      require(idx > last, "phantom.patterns label " + label + " is not in protocol order");
      last = idx;
    }
    require(prob > 0, "phantom.patterns probability for " + label + " must be positive");
    psum += prob;
  }
  require(std::abs(psum - 1.0) < 1e-6, "phantom.patterns probabilities must sum to 1");

  const auto& m = c.model;
  require(m.channels > 0 && m.channels % 2 == 0, "model.channels must be positive and even");
  require(m.dict_size > 0, "model.dict_size must be positive");
  require(m.z_dim > 0, "model.z_dim must be positive");
  require(m.hidden > 0, "model.hidden must be positive");
  require(m.beta >= 0, "model.beta must be non-negative");
  require(m.rank_margin >= 0, "model.rank_margin must be non-negative");
  require(m.kl_weight >= 0, "model.kl_weight must be non-negative");

  const auto& t = c.train;
  require(t.epochs > 0, "train.epochs must be positive");
  require(t.batch > 0, "train.batch must be positive");
  require(t.lr > 0 && t.lr_min > 0 && t.lr_min <= t.lr, "train.lr must dominate train.lr_min");
  require(t.weight_decay >= 0, "train.weight_decay must be non-negative");
  require(t.clip_norm > 0, "train.clip_norm must be positive");
  require(t.dropout_p >= 0 && t.dropout_p < 1, "train.dropout_p must lie in [0,1)");
  require(t.club_lr > 0, "train.club_lr must be positive");
  require(t.club_buffer > 1, "train.club_buffer must exceed one sample");

  const auto& e = c.eval;
  require(e.mc_samples > 0, "eval.mc_samples must be positive");
  require(e.ridge_lambda > 0, "eval.ridge_lambda must be positive");
}

}  // namespace

nlohmann::json to_json(const Config& c) {
  const auto& p = c.phantom;
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& e = c.eval;
  nlohmann::json j;
  j["phantom"] = {
      {"image_hw", p.image_hw},
      {"count", p.count},
      {"split_train", p.split_train},
      {"split_val", p.split_val},
      {"noise_sigma", p.noise_sigma},
      {"bg_hu_lo", p.bg_hu_lo},
      {"bg_hu_hi", p.bg_hu_hi},
      {"organ_hu_lo", p.organ_hu_lo},
      {"organ_hu_hi", p.organ_hu_hi},
      {"tumor_hu_offset_lo", p.tumor_hu_offset_lo},
      {"tumor_hu_offset_hi", p.tumor_hu_offset_hi},
      {"organ_a_lo", p.organ_a_lo},
      {"organ_a_hi", p.organ_a_hi},
      {"organ_b_lo", p.organ_b_lo},
      {"organ_b_hi", p.organ_b_hi},
      {"organ_center_jitter", p.organ_center_jitter},
      {"tumor_r_lo", p.tumor_r_lo},
      {"tumor_r_hi", p.tumor_r_hi},
      {"organ_amp_lo", p.organ_amp_lo},
      {"organ_amp_hi", p.organ_amp_hi},
      {"organ_peak_center", p.organ_peak_center},
      {"hypo_amp_lo", p.hypo_amp_lo},
      {"hypo_amp_hi", p.hypo_amp_hi},
      {"hypo_peak_center", p.hypo_peak_center},
      {"hyper_amp_lo", p.hyper_amp_lo},
      {"hyper_amp_hi", p.hyper_amp_hi},
      {"hyper_peak_center", p.hyper_peak_center},
      {"peak_center_jitter", p.peak_center_jitter},
      {"peak_width_lo", p.peak_width_lo},
      {"peak_width_hi", p.peak_width_hi},
      {"tau_jitter", p.tau_jitter},
      {"patterns", p.patterns},
  };
  j["model"] = {
      {"channels", m.channels},   {"dict_size", m.dict_size},
      {"z_dim", m.z_dim},         {"hidden", m.hidden},
      {"beta", m.beta},           {"rank_margin", m.rank_margin},
      {"kl_weight", m.kl_weight},
  };
  j["train"] = {
      {"epochs", t.epochs},
      {"batch", t.batch},
      {"lr", t.lr},
      {"lr_min", t.lr_min},
      {"weight_decay", t.weight_decay},
      {"clip_norm", t.clip_norm},
      {"dropout_p", t.dropout_p},
      {"club_lr", t.club_lr},
      {"club_buffer", t.club_buffer},
      {"reseed_dead_codes", t.reseed_dead_codes},
  };
  j["eval"] = {
      {"mc_samples", e.mc_samples},
      {"ridge_lambda", e.ridge_lambda},
  };
  return j;
}

Config config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::runtime_error("config root must be a JSON object");
  static const std::set<std::string> kSections = {"phantom", "model", "train", "eval"};
  for (const auto& item : j.items())
    if (!kSections.count(item.key()))
      throw std::runtime_error("unknown config section: " + item.key());

  Config c;
  Section p(j, "phantom");
  p.get("image_hw", c.phantom.image_hw);
  p.get("count", c.phantom.count);
  p.get("split_train", c.phantom.split_train);
  p.get("split_val", c.phantom.split_val);
  p.get("noise_sigma", c.phantom.noise_sigma);
  p.get("bg_hu_lo", c.phantom.bg_hu_lo);
  p.get("bg_hu_hi", c.phantom.bg_hu_hi);
  p.get("organ_hu_lo", c.phantom.organ_hu_lo);
  p.get("organ_hu_hi", c.phantom.organ_hu_hi);
  p.get("tumor_hu_offset_lo", c.phantom.tumor_hu_offset_lo);
  p.get("tumor_hu_offset_hi", c.phantom.tumor_hu_offset_hi);
  p.get("organ_a_lo", c.phantom.organ_a_lo);
  p.get("organ_a_hi", c.phantom.organ_a_hi);
  p.get("organ_b_lo", c.phantom.organ_b_lo);
  p.get("organ_b_hi", c.phantom.organ_b_hi);
  p.get("organ_center_jitter", c.phantom.organ_center_jitter);
  p.get("tumor_r_lo", c.phantom.tumor_r_lo);
  p.get("tumor_r_hi", c.phantom.tumor_r_hi);
  p.get("organ_amp_lo", c.phantom.organ_amp_lo);
  p.get("organ_amp_hi", c.phantom.organ_amp_hi);
  p.get("organ_peak_center", c.phantom.organ_peak_center);
  p.get("hypo_amp_lo", c.phantom.hypo_amp_lo);
  p.get("hypo_amp_hi", c.phantom.hypo_amp_hi);
  p.get("hypo_peak_center", c.phantom.hypo_peak_center);
  p.get("hyper_amp_lo", c.phantom.hyper_amp_lo);
  p.get("hyper_amp_hi", c.phantom.hyper_amp_hi);
  p.get("hyper_peak_center", c.phantom.hyper_peak_center);
  p.get("peak_center_jitter", c.phantom.peak_center_jitter);
  p.get("peak_width_lo", c.phantom.peak_width_lo);
  p.get("peak_width_hi", c.phantom.peak_width_hi);
  p.get("tau_jitter", c.phantom.tau_jitter);
  p.get("patterns", c.phantom.patterns);
  p.finish();

  Section m(j, "model");
  m.get("channels", c.model.channels);
  m.get("dict_size", c.model.dict_size);
  m.get("z_dim", c.model.z_dim);
  m.get("hidden", c.model.hidden);
  m.get("beta", c.model.beta);
  m.get("rank_margin", c.model.rank_margin);
  m.get("kl_weight", c.model.kl_weight);
  m.finish();

  Section t(j, "train");
  t.get("epochs", c.train.epochs);
  t.get("batch", c.train.batch);
  t.get("lr", c.train.lr);
  t.get("lr_min", c.train.lr_min);
  t.get("weight_decay", c.train.weight_decay);
  t.get("clip_norm", c.train.clip_norm);
  t.get("dropout_p", c.train.dropout_p);
  t.get("club_lr", c.train.club_lr);
  t.get("club_buffer", c.train.club_buffer);
  t.get("reseed_dead_codes", c.train.reseed_dead_codes);
  t.finish();

  Section e(j, "eval");
  e.get("mc_samples", c.eval.mc_samples);
  e.get("ridge_lambda", c.eval.ridge_lambda);
  e.finish();

  validate(c);
  return c;
}

Config load_config(const std::string& path) {
  if (path.empty()) {
    Config c;
    validate(c);
    return c;
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const Config& c) {
  const std::string dump = to_json(c).dump();
  return hex_u64(fnv1a64(dump.data(), dump.size()));
}

}  // namespace tardis
