#pragma once

#include <string>
#include <vector>

#include "tardis/layers.hpp"
#include "tardis/rng.hpp"
#include "tardis/tensor.hpp"

namespace tardis {

// One quantized token grid. `st` carries straight-through gradients back to
// the encoder tokens; `codes` carries gradients into the dictionary entries.
// Both hold the same values.
struct Quantized {
  Tensor st;
  Tensor codes;
  std::vector<int> indices;
};

class Dictionary {
 public:
  Dictionary(int entries, int channels, Rng& rng);

  // tokens: [K, C]. Nearest entry per row by Euclidean distance, ties to the
  // lowest index. Increments usage counts.
  Quantized quantize(const Tensor& tokens);

  Tensor& entries() { return entries_; }
  const Tensor& entries() const { return entries_; }
  int size() const { return m_; }
  int channels() const { return c_; }

  const std::vector<long long>& usage() const { return usage_; }
  void reset_usage();
  // Re-seeds every zero-usage entry to a random row of a random pool grid.
  // Returns the number of entries replaced. No-op on an empty pool.
  int reseed_dead(const std::vector<Tensor>& token_pool, Rng& rng);
  std::string usage_json() const;

  void params(ParamList& out) const;

 private:
  int m_ = 0;
  int c_ = 0;
  Tensor entries_;  // [M, C]
  std::vector<long long> usage_;
};

// Mean over unordered grid pairs of the mean squared difference. One grid -> 0.
Tensor consistency_loss(const std::vector<Tensor>& grids);

// Arithmetic mean over the modality axis; grids must share [K, C].
Tensor mean_anatomy(const std::vector<Tensor>& grids);

struct AgnosticTerms {
  Tensor consistency;
  Tensor codebook;    // pulls encoder tokens toward their codes
  Tensor commitment;  // pulls dictionary entries toward the tokens
  Tensor total;
};

// x: encoder token grids, q: their quantizations, one per modality.
// total = consistency + codebook + beta * commitment, each mean-reduced.
AgnosticTerms agnostic_loss(const std::vector<Tensor>& x, const std::vector<Quantized>& q,
                            float beta);

}  // namespace tardis
