#pragma once

#include <utility>
#include <vector>

#include "tardis/agnostic.hpp"
#include "tardis/assembly.hpp"
#include "tardis/backbone.hpp"
#include "tardis/config.hpp"
#include "tardis/disentangle.hpp"
#include "tardis/dynamic.hpp"
#include "tardis/phantom.hpp"

namespace tardis {

// Stand-in policy for dynamic representations of phases that were not
// acquired: decode the prior, use an all-zero grid, or drop the slot.
enum class MissingFill { kPrior, kZeros, kNone };

// Per-phase intermediates of a training pass, kept alive so every loss term
// can be assembled outside the model.
struct PhaseTrace {
  phantom::Phase phase = phantom::Phase::N;
  float tau_actual = 0;
  Tensor tokens_s;  // [K, C] static projection, pre-quantization
  Quantized quant;
  Tensor tokens_d;  // [K, C] dynamic projection
  Tensor tau_hat;   // [1]
  Posterior post;
  Tensor recon;     // [K, C] decoded dynamic representation
};

struct TrainForward {
  std::vector<PhaseTrace> phases;  // ground-truth acquisition order
  Tensor anatomy;                  // [K, C] averaged quantized grid
  Tensor weights;                  // [K, N+1]
  Tensor fused;                    // [K, C]
  Tensor logits;                   // [kSegClasses, hw, hw]
  std::vector<PooledRep> pooled;   // kind 0 static, 1 + phase index dynamic
};

// One dynamic slot entering inference-time assembly.
struct SlotInfo {
  phantom::Phase phase = phantom::Phase::N;
  bool acquired = false;
  float tau = 0;  // regressed when acquired, nominal when filled
  Tensor rep;     // [K, C]
};

struct InferResult {
  Tensor logits;   // [kSegClasses, hw, hw]
  Tensor weights;  // [K, slots + 1]
  Tensor anatomy;  // [K, C]
  std::vector<SlotInfo> slots;
};

// The full network: shared backbone, anatomy dictionary, variational dynamic
// head, and the assembly scorer. Parameter creation order is fixed by the
// member order, so one seed reproduces one parameter set byte for byte.
class TardisModel {
 public:
  TardisModel(const ModelConfig& cfg, int hw, uint64_t seed);

  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  Dictionary& dict() { return dict_; }
  const Dictionary& dict() const { return dict_; }
  DynamicHead& dynamic_head() { return dyn_; }
  const DynamicHead& dynamic_head() const { return dyn_; }
  Assembly& assembly() { return assembly_; }
  const Assembly& assembly() const { return assembly_; }

  int hw() const { return backbone_.hw(); }
  int channels() const { return backbone_.channels(); }
  int positions() const { return backbone_.positions(); }

  // Every trainable tensor, names stable across runs.
  ParamList params() const;

  // Copies checkpoint tensors into the live parameters. Names and shapes
  // must match the current architecture exactly.
  void load_state(const std::vector<std::pair<std::string, Tensor>>& tensors);

  // Full training pass over every phase the study carries, posterior noise
  // drawn from rng in acquisition order. Throws on a phase-less study.
  TrainForward forward_train(const phantom::Study& study, Rng& rng);

  // Segmentation pass restricted to `subset` (intersected with what the
  // study acquired; at least one phase must survive). Present phases use the
  // posterior mean; absent slots follow `fill`. With kPrior and a non-null
  // rng, mc_samples stochastic prior draws are averaged per slot.
  InferResult infer(const phantom::Study& study, const std::vector<phantom::Phase>& subset,
                    MissingFill fill, Rng* rng = nullptr, int mc_samples = 1);

 private:
  ModelConfig cfg_;
  Rng rng_;  // consumed by member construction only
  Backbone backbone_;
  Dictionary dict_;
  DynamicHead dyn_;
  Assembly assembly_;
};

}  // namespace tardis
