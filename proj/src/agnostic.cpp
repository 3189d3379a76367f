#include "tardis/agnostic.hpp"

#include <cstdio>
#include <stdexcept>

namespace tardis {

Dictionary::Dictionary(int entries, int channels, Rng& rng) : m_(entries), c_(channels) {
  if (entries < 1) throw std::invalid_argument("dictionary needs at least one entry");
  if (channels < 1) throw std::invalid_argument("dictionary channel dim must be positive");
  entries_ = uniform_init({m_, c_}, c_, rng);
  usage_.assign(size_t(m_), 0);
}

Quantized Dictionary::quantize(const Tensor& tokens) {
  if (tokens.shape().size() != 2 || tokens.shape()[1] != c_)
    throw std::invalid_argument("tokens must be [K, " + std::to_string(c_) + "]");
  const int k = tokens.shape()[0];
  const float* t = tokens.data().data();
  const float* e = entries_.data().data();

  std::vector<int> idx(static_cast<size_t>(k));
  for (int p = 0; p < k; ++p) {
    double best = 0.0;
    int arg = 0;
    for (int m = 0; m < m_; ++m) {
      double d2 = 0.0;
      for (int c = 0; c < c_; ++c) {
        const double d = double(t[size_t(p) * c_ + c]) - double(e[size_t(m) * c_ + c]);
        d2 += d * d;
      }
      if (m == 0 || d2 < best) {
        best = d2;
        arg = m;
      }
    }
    idx[size_t(p)] = arg;
    ++usage_[size_t(arg)];
  }

  Quantized out;
  out.indices = idx;
  out.codes = gather_rows(entries_, idx);
  out.st = straight_through(tokens, out.codes);
  return out;
}

void Dictionary::reset_usage() { usage_.assign(size_t(m_), 0); }

int Dictionary::reseed_dead(const std::vector<Tensor>& token_pool, Rng& rng) {
  if (token_pool.empty()) return 0;
  int replaced = 0;
  float* e = entries_.data().data();
  for (int m = 0; m < m_; ++m) {
    if (usage_[size_t(m)] != 0) continue;
    const Tensor& grid = token_pool[rng.uniform_int(int(token_pool.size()))];
    const int row = rng.uniform_int(grid.shape()[0]);
    for (int c = 0; c < c_; ++c)
      e[size_t(m) * c_ + c] = grid.data()[size_t(row) * c_ + c];
    ++replaced;
  }
  return replaced;
}

std::string Dictionary::usage_json() const {
  std::string s = "{\"entries\":" + std::to_string(m_) + ",\"counts\":[";
  for (int m = 0; m < m_; ++m) {
    if (m) s += ',';
    s += std::to_string(usage_[size_t(m)]);
  }
  s += "]}";
  return s;
}

void Dictionary::params(ParamList& out) const { out.emplace_back("dictionary.entries", entries_); }

Tensor consistency_loss(const std::vector<Tensor>& grids) {
  if (grids.empty()) throw std::invalid_argument("consistency_loss needs at least one grid");
  const size_t n = grids.size();
  if (n == 1) return Tensor::from({1}, {0.0f});
  Tensor acc = Tensor::from({1}, {0.0f});
  int pairs = 0;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      acc = add(acc, mse(grids[i], grids[j]));
      ++pairs;
    }
  return affine(acc, 1.0f / float(pairs), 0.0f);
}

Tensor mean_anatomy(const std::vector<Tensor>& grids) {
  if (grids.empty()) throw std::invalid_argument("mean_anatomy needs at least one grid");
  Tensor acc = grids[0];
  for (size_t i = 1; i < grids.size(); ++i) {
    if (grids[i].shape() != grids[0].shape())
      throw std::invalid_argument("mean_anatomy grids must share one shape");
    acc = add(acc, grids[i]);
  }
  return affine(acc, 1.0f / float(grids.size()), 0.0f);
}

AgnosticTerms agnostic_loss(const std::vector<Tensor>& x, const std::vector<Quantized>& q,
                            float beta) {
  if (x.empty() || x.size() != q.size())
    throw std::invalid_argument("agnostic_loss needs matching token and quantization lists");

  std::vector<Tensor> st;
  st.reserve(q.size());
  Tensor codebook = Tensor::from({1}, {0.0f});
  Tensor commitment = Tensor::from({1}, {0.0f});
  for (size_t i = 0; i < x.size(); ++i) {
    st.push_back(q[i].st);
    codebook = add(codebook, mse(stop_gradient(q[i].codes), x[i]));
    commitment = add(commitment, mse(q[i].codes, stop_gradient(x[i])));
  }
  const float inv_n = 1.0f / float(x.size());
  AgnosticTerms out;
  out.consistency = consistency_loss(st);
  out.codebook = affine(codebook, inv_n, 0.0f);
  out.commitment = affine(commitment, inv_n, 0.0f);
  out.total = add(add(out.consistency, out.codebook), affine(out.commitment, beta, 0.0f));
  return out;
}

}  // namespace tardis
