#ifndef TARDIS_LAYERS_HPP
#define TARDIS_LAYERS_HPP

#include <string>
#include <utility>
#include <vector>

#include "tardis/rng.hpp"
#include "tardis/tensor.hpp"

namespace tardis {

using ParamList = std::vector<std::pair<std::string, Tensor>>;

// Weights initialize uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases at
// zero; draw order is fixed so a seed pins every parameter byte.
Tensor uniform_init(const Shape& shape, int fan_in, Rng& rng);

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [1, out]
  Tensor operator()(const Tensor& x) const;  // [B, in] -> [B, out]
  // Same map with weights behind stop_gradient: output gradients reach the
  // inputs but never the layer parameters.
  Tensor frozen(const Tensor& x) const;
};
Linear make_linear(int in, int out, Rng& rng);

struct Conv {
  Tensor w;  // [cout, cin, k, k]
  Tensor b;  // [cout]
  int stride = 1;
  int pad = 0;
  Tensor operator()(const Tensor& x) const;
};
Conv make_conv(int cin, int cout, int k, int stride, int pad, Rng& rng);

struct ConvT {
  Tensor w;  // [cin, cout, k, k]
  Tensor b;  // [cout]
  int stride = 1;
  Tensor operator()(const Tensor& x) const;
};
ConvT make_convt(int cin, int cout, int k, int stride, Rng& rng);

void collect(ParamList& out, const std::string& prefix, const Linear& l);
void collect(ParamList& out, const std::string& prefix, const Conv& c);
void collect(ParamList& out, const std::string& prefix, const ConvT& c);

}  // namespace tardis

#endif  // TARDIS_LAYERS_HPP
