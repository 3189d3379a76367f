#include "tardis/backbone.hpp"

#include <stdexcept>

namespace tardis {

namespace {

int check_hw(int hw) {
  if (hw <= 0 || hw % 8 != 0) throw std::invalid_argument("backbone: hw must be a multiple of 8");
  return hw;
}

int check_channels(int c) {
  if (c <= 0 || c % 2 != 0) throw std::invalid_argument("backbone: channels must be even");
  return c;
}

}  // namespace

Backbone::Backbone(int hw, int channels, Rng& rng)
    : hw_(check_hw(hw)),
      c_(check_channels(channels)),
      g_(hw / 8),
      enc1_(make_conv(1, channels / 2, 3, 2, 1, rng)),
      enc2_(make_conv(channels / 2, channels, 3, 2, 1, rng)),
      enc3_(make_conv(channels, channels, 3, 2, 1, rng)),
      proj_s_(make_linear(channels, channels, rng)),
      proj_d_(make_linear(channels, channels, rng)),
      up1_(make_convt(channels, channels, 2, 2, rng)),
      up2_(make_convt(channels, channels / 2, 2, 2, rng)),
      mix_(make_conv(channels, channels / 2, 3, 1, 1, rng)),
      up3_(make_convt(channels / 2, channels / 2, 2, 2, rng)),
      head_(make_conv(channels / 2, 3, 1, 1, 0, rng)) {}

Backbone::Features Backbone::encode(const std::vector<Tensor>& images) const {
  if (images.empty()) throw std::invalid_argument("encode: no images");
  Features out;
  for (const Tensor& img : images) {
    if (img.shape() != Shape{1, hw_, hw_})
      throw std::invalid_argument("encode: expected [1," + std::to_string(hw_) + "," +
                                  std::to_string(hw_) + "], got " + shape_str(img.shape()));
    Tensor h1 = relu(enc1_(img));
    Tensor h2 = relu(enc2_(h1));
    Tensor h3 = relu(enc3_(h2));
    out.skip.push_back(h1);
    out.deep.push_back(h3);
  }
  return out;
}

Tensor Backbone::tokens(const Tensor& deep) const {
  return transpose(reshape(deep, {c_, g_ * g_}));
}

Tensor Backbone::untokens(const Tensor& tokens) const {
  return reshape(transpose(tokens), {c_, g_, g_});
}

Tensor Backbone::project_static(const Tensor& t) const { return proj_s_(t); }

Tensor Backbone::project_dynamic(const Tensor& t) const { return proj_d_(t); }

Tensor Backbone::decode(const Tensor& fused, const Tensor& skip) const {
  if (fused.shape() != Shape{g_ * g_, c_})
    throw std::invalid_argument("decode: fused tokens must be [" + std::to_string(g_ * g_) + "," +
                                std::to_string(c_) + "], got " + shape_str(fused.shape()));
  if (skip.shape() != Shape{c_ / 2, hw_ / 2, hw_ / 2})
    throw std::invalid_argument("decode: skip shape " + shape_str(skip.shape()));
  Tensor x = untokens(fused);
  x = relu(up1_(x));                    // [C, hw/4, hw/4]
  x = relu(up2_(x));                    // [C/2, hw/2, hw/2]
  x = concat({x, skip}, 0);             // [C, hw/2, hw/2]
  x = relu(mix_(x));                    // [C/2, hw/2, hw/2]
  x = relu(up3_(x));                    // [C/2, hw, hw]
  return head_(x);                      // [3, hw, hw]
}

void Backbone::params(ParamList& out) const {
  collect(out, "backbone.enc1", enc1_);
  collect(out, "backbone.enc2", enc2_);
  collect(out, "backbone.enc3", enc3_);
  collect(out, "backbone.proj_s", proj_s_);
  collect(out, "backbone.proj_d", proj_d_);
  collect(out, "backbone.up1", up1_);
  collect(out, "backbone.up2", up2_);
  collect(out, "backbone.mix", mix_);
  collect(out, "backbone.up3", up3_);
  collect(out, "backbone.head", head_);
}

}  // namespace tardis
