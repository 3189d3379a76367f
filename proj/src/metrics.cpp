#include "tardis/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace tardis {

namespace {

// Average ranks (1-based) with ties sharing their midrank.
std::vector<double> midranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double mid = 0.5 * (double(i + 1) + double(j + 1));
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const size_t n = a.size();
  double ma = 0, mb = 0;
  for (size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= double(n);
  mb /= double(n);
  double sab = 0, saa = 0, sbb = 0;
  for (size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

double dice_score(const std::vector<int>& pred, const std::vector<int>& truth, int cls) {
  if (pred.size() != truth.size())
    throw std::invalid_argument("dice_score: mask sizes differ");
  long long np = 0, nt = 0, inter = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == cls;
    const bool t = truth[i] == cls;
    np += p;
    nt += t;
    inter += p && t;
  }
  if (np + nt == 0) return 1.0;
  return 2.0 * double(inter) / double(np + nt);
}

double auc_score(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("auc_score: size mismatch");
  long long pos = 0, neg = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("auc_score: labels must be 0/1");
    (l == 1 ? pos : neg) += 1;
  }
  if (pos == 0 || neg == 0)
    throw std::invalid_argument("auc_score: both classes required");
  const std::vector<double> ranks = midranks(scores);
  double rank_pos = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) rank_pos += ranks[i];
  }
  return (rank_pos - 0.5 * double(pos) * double(pos + 1)) / (double(pos) * double(neg));
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: size mismatch");
  if (a.size() < 2) throw std::invalid_argument("spearman: need at least two points");
  return pearson(midranks(a), midranks(b));
}

double silhouette(const std::vector<std::vector<double>>& points, const std::vector<int>& labels) {
  const size_t n = points.size();
  if (labels.size() != n) throw std::invalid_argument("silhouette: size mismatch");
  if (n < 2) throw std::invalid_argument("silhouette: need at least two points");
  size_t counts[2] = {0, 0};
  for (int l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("silhouette: labels must be 0/1");
    counts[l] += 1;
  }
  if (counts[0] == 0 || counts[1] == 0)
    throw std::invalid_argument("silhouette: both clusters required");

  auto dist = [&](size_t i, size_t j) {
    double s = 0;
    for (size_t d = 0; d < points[i].size(); ++d) {
      const double diff = points[i][d] - points[j][d];
      s += diff * diff;
    }
    return std::sqrt(s);
  };

  double total = 0;
  for (size_t i = 0; i < n; ++i) {
    const int li = labels[i];
    if (counts[li] == 1) continue;  // singleton scores 0
    double intra = 0, inter = 0;
    for (size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      (labels[j] == li ? intra : inter) += dist(i, j);
    }
    const double a = intra / double(counts[li] - 1);
    const double b = inter / double(counts[1 - li]);
    const double m = std::max(a, b);
    if (m > 0) total += (b - a) / m;
  }
  return total / double(n);
}

RidgeProbe ridge_fit(const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                     double lambda) {
  const size_t n = x.size();
  if (n == 0 || y.size() != n) throw std::invalid_argument("ridge_fit: bad sample count");
  const size_t d = x[0].size();
  for (const auto& row : x) {
    if (row.size() != d) throw std::invalid_argument("ridge_fit: ragged features");
  }
  if (lambda < 0) throw std::invalid_argument("ridge_fit: negative lambda");

  // Center both sides so the bias stays unpenalized.
  std::vector<double> mean_x(d, 0.0);
  double mean_y = 0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < d; ++j) mean_x[j] += x[i][j];
    mean_y += y[i];
  }
  for (double& m : mean_x) m /= double(n);
  mean_y /= double(n);

  // Normal equations A w = c with A = Xc^T Xc + lambda I.
  std::vector<double> a(d * d, 0.0), c(d, 0.0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < d; ++j) {
      const double xj = x[i][j] - mean_x[j];
      c[j] += xj * (y[i] - mean_y);
      for (size_t k = j; k < d; ++k) a[j * d + k] += xj * (x[i][k] - mean_x[k]);
    }
  }
  for (size_t j = 0; j < d; ++j) {
    for (size_t k = 0; k < j; ++k) a[j * d + k] = a[k * d + j];
    a[j * d + j] += lambda;
  }

  // Gaussian elimination with partial pivoting.
  std::vector<double> w = c;
  for (size_t col = 0; col < d; ++col) {
    size_t piv = col;
    for (size_t r = col + 1; r < d; ++r) {
      if (std::abs(a[r * d + col]) > std::abs(a[piv * d + col])) piv = r;
    }
    if (a[piv * d + col] == 0.0) throw std::runtime_error("ridge_fit: singular system");
    if (piv != col) {
      for (size_t k = 0; k < d; ++k) std::swap(a[col * d + k], a[piv * d + k]);
      std::swap(w[col], w[piv]);
    }
    for (size_t r = col + 1; r < d; ++r) {
      const double f = a[r * d + col] / a[col * d + col];
      if (f == 0.0) continue;
      for (size_t k = col; k < d; ++k) a[r * d + k] -= f * a[col * d + k];
      w[r] -= f * w[col];
    }
  }
  for (size_t col = d; col-- > 0;) {
    for (size_t k = col + 1; k < d; ++k) w[col] -= a[col * d + k] * w[k];
    w[col] /= a[col * d + col];
  }

  RidgeProbe probe;
  probe.w = std::move(w);
  probe.b = mean_y;
  for (size_t j = 0; j < d; ++j) probe.b -= probe.w[j] * mean_x[j];
  return probe;
}

double ridge_predict(const RidgeProbe& probe, const std::vector<double>& x) {
  if (x.size() != probe.w.size()) throw std::invalid_argument("ridge_predict: dim mismatch");
  double s = probe.b;
  for (size_t j = 0; j < x.size(); ++j) s += probe.w[j] * x[j];
  return s;
}

double r_squared(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size() || pred.empty())
    throw std::invalid_argument("r_squared: size mismatch");
  double mean = 0;
  for (double t : truth) mean += t;
  mean /= double(truth.size());
  double ss_res = 0, ss_tot = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (ss_tot == 0.0) return 0.0;
  return 1.0 - ss_res / ss_tot;
}

std::vector<int> argmax_mask(const Tensor& logits) {
  if (logits.rank() != 3) throw std::invalid_argument("argmax_mask: want [classes, H, W]");
  const int cls = logits.dim(0);
  const int hw = logits.dim(1) * logits.dim(2);
  const auto& v = logits.data();
  std::vector<int> out(size_t(hw), 0);
  for (int p = 0; p < hw; ++p) {
    int best = 0;
    float best_v = v[size_t(p)];
    for (int c = 1; c < cls; ++c) {
      const float cand = v[size_t(c * hw + p)];
      if (cand > best_v) {
        best_v = cand;
        best = c;
      }
    }
    out[size_t(p)] = best;
  }
  return out;
}

std::vector<int> mask_ids(const Tensor& mask, int num_classes) {
  std::vector<int> out;
  out.reserve(mask.data().size());
  for (float v : mask.data()) {
    const int id = int(std::lround(v));
    if (float(id) != v || id < 0 || id >= num_classes)
      throw std::invalid_argument("mask_ids: invalid class value " + std::to_string(v));
    out.push_back(id);
  }
  return out;
}

}  // namespace tardis
