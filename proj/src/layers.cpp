#include "tardis/layers.hpp"

#include <cmath>

namespace tardis {

Tensor uniform_init(const Shape& shape, int fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(shape, true);
  const double bound = 1.0 / std::sqrt(double(fan_in));
  for (auto& v : t.data()) v = float(rng.uniform(-bound, bound));
  return t;
}

Tensor Linear::operator()(const Tensor& x) const { return add_rowvec(matmul(x, w), b); }

Tensor Linear::frozen(const Tensor& x) const {
  return add_rowvec(matmul(x, stop_gradient(w)), stop_gradient(b));
}

Linear make_linear(int in, int out, Rng& rng) {
  Linear l;
  l.w = uniform_init({in, out}, in, rng);
  l.b = Tensor::zeros({1, out}, true);
  return l;
}

Tensor Conv::operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }

Conv make_conv(int cin, int cout, int k, int stride, int pad, Rng& rng) {
  Conv c;
  c.w = uniform_init({cout, cin, k, k}, cin * k * k, rng);
  c.b = Tensor::zeros({cout}, true);
  c.stride = stride;
  c.pad = pad;
  return c;
}

Tensor ConvT::operator()(const Tensor& x) const { return conv_transpose2d(x, w, b, stride); }

ConvT make_convt(int cin, int cout, int k, int stride, Rng& rng) {
  ConvT c;
  c.w = uniform_init({cin, cout, k, k}, cin * k * k, rng);
  c.b = Tensor::zeros({cout}, true);
  c.stride = stride;
  return c;
}

void collect(ParamList& out, const std::string& prefix, const Linear& l) {
  out.emplace_back(prefix + ".w", l.w);
  out.emplace_back(prefix + ".b", l.b);
}

void collect(ParamList& out, const std::string& prefix, const Conv& c) {
  out.emplace_back(prefix + ".w", c.w);
  out.emplace_back(prefix + ".b", c.b);
}

void collect(ParamList& out, const std::string& prefix, const ConvT& c) {
  out.emplace_back(prefix + ".w", c.w);
  out.emplace_back(prefix + ".b", c.b);
}

}  // namespace tardis
