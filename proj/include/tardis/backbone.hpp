#ifndef TARDIS_BACKBONE_HPP
#define TARDIS_BACKBONE_HPP

#include <vector>

#include "tardis/layers.hpp"

namespace tardis {

// Shared per-modality encoder, the static/dynamic projector pair, and the
// segmentation decoder. Token grids are position-major [K, C] so downstream
// per-position maps are plain row-wise linear layers.
class Backbone {
 public:
  // hw must be a positive multiple of 8 (three stride-2 stages); channels even.
  Backbone(int hw, int channels, Rng& rng);

  struct Features {
    std::vector<Tensor> deep;  // per modality [C, hw/8, hw/8]
    std::vector<Tensor> skip;  // per modality [C/2, hw/2, hw/2]
  };

  // Every image runs through the same weights; order in equals order out.
  Features encode(const std::vector<Tensor>& images) const;  // each [1, hw, hw]

  Tensor tokens(const Tensor& deep) const;       // [C, g, g] -> [K, C]
  Tensor untokens(const Tensor& tokens) const;   // [K, C] -> [C, g, g]

  Tensor project_static(const Tensor& tokens) const;   // [K, C] -> [K, C]
  Tensor project_dynamic(const Tensor& tokens) const;  // [K, C] -> [K, C]

  // fused [K, C] and a skip feature map -> class logits [3, hw, hw].
  Tensor decode(const Tensor& fused, const Tensor& skip) const;

  int hw() const { return hw_; }
  int grid() const { return g_; }
  int positions() const { return g_ * g_; }
  int channels() const { return c_; }

  void params(ParamList& out) const;

 private:
  int hw_, c_, g_;
  Conv enc1_, enc2_, enc3_;
  Linear proj_s_, proj_d_;
  ConvT up1_, up2_;
  Conv mix_;
  ConvT up3_;
  Conv head_;
};

}  // namespace tardis

#endif  // TARDIS_BACKBONE_HPP
