#include "tardis/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace tardis {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

static int numel_of(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(s));
    n *= d;
  }
  return n;
}

// ---- Tensor handle ----

Tensor Tensor::zeros(const Shape& s, bool rg) {
  auto n = std::make_shared<TensorNode>();
  n->shape = s;
  n->value.assign(numel_of(s), 0.0f);
  n->requires_grad = rg;
  return Tensor(std::move(n));
}

Tensor Tensor::full(const Shape& s, float v, bool rg) {
  Tensor t = zeros(s, rg);
  std::fill(t.data().begin(), t.data().end(), v);
  return t;
}

Tensor Tensor::from(const Shape& s, std::vector<float> v, bool rg) {
  if (int(v.size()) != numel_of(s))
    throw std::invalid_argument("value count " + std::to_string(v.size()) +
                                " does not match shape " + shape_str(s));
  auto n = std::make_shared<TensorNode>();
  n->shape = s;
  n->value = std::move(v);
  n->requires_grad = rg;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(float v, bool rg) { return from({1}, {v}, rg); }

const Shape& Tensor::shape() const { return n_->shape; }
int Tensor::rank() const { return int(n_->shape.size()); }
int Tensor::dim(int axis) const { return n_->shape.at(axis); }
int Tensor::numel() const { return int(n_->value.size()); }
std::vector<float>& Tensor::data() { return n_->value; }
const std::vector<float>& Tensor::data() const { return n_->value; }

float Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item() requires a single-element tensor, got " + shape_str(shape()));
  return n_->value[0];
}

double Tensor::item_hi() const {
  const float v = item();
  return n_->has_hi ? n_->hi : double(v);
}

bool Tensor::requires_grad() const { return n_->requires_grad; }

std::vector<float>& Tensor::grad() {
  n_->ensure_grad();
  return n_->grad;
}

void Tensor::zero_grad() {
  n_->ensure_grad();
  std::fill(n_->grad.begin(), n_->grad.end(), 0.0f);
}

// ---- graph construction ----

static Tensor make_node(Shape shape, std::vector<float> value,
                        std::vector<NodePtr> parents,
                        std::function<void(TensorNode&)> bp) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backprop = std::move(bp);
  }
  return Tensor(std::move(n));
}

static double hi_of(const TensorNode& n) { return n.has_hi ? n.hi : double(n.value[0]); }

static void set_hi(Tensor& t, double v) {
  t.node()->hi = v;
  t.node()->has_hi = true;
}

// Scalar outputs of arithmetic keep the float64 shadow alive through loss
// tails built from reductions.
static void propagate_hi_unary(Tensor& out, const Tensor& x, double (*f)(double)) {
  if (out.numel() == 1) set_hi(out, f(hi_of(*x.node())));
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward on undefined tensor");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward requires a scalar loss, got " + shape_str(loss.shape()));
  TensorNode* root = loss.node().get();
  if (!root->requires_grad) return;  // constant graph: nothing to do

  // Iterative post-order DFS; reversed, consumers run before producers.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* n;
    size_t next = 0;
  };
  std::vector<Frame> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      TensorNode* p = f.n->parents[f.next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  // Interior gradients are scratch space: clear them so each backward call
  // contributes exactly one unit of seed to the leaves. Leaf gradients are
  // never touched here; they accumulate until the caller zeroes them.
  for (TensorNode* n : order)
    if (n->backprop) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), 0.0f);
    }

  root->ensure_grad();
  root->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
}

// ---- helpers ----

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<float> v(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int i = 0; i < a.numel(); ++i) v[i] = av[i] + bv[i];
  Tensor out = make_node(a.shape(), std::move(v), {a.node(), b.node()}, [](TensorNode& self) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  });
  if (out.numel() == 1) set_hi(out, hi_of(*a.node()) + hi_of(*b.node()));
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<float> v(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int i = 0; i < a.numel(); ++i) v[i] = av[i] - bv[i];
  Tensor out = make_node(a.shape(), std::move(v), {a.node(), b.node()}, [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
  if (out.numel() == 1) set_hi(out, hi_of(*a.node()) - hi_of(*b.node()));
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<float> v(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int i = 0; i < a.numel(); ++i) v[i] = av[i] * bv[i];
  Tensor out = make_node(a.shape(), std::move(v), {a.node(), b.node()}, [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
  if (out.numel() == 1) set_hi(out, hi_of(*a.node()) * hi_of(*b.node()));
  return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  std::vector<float> v(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int i = 0; i < a.numel(); ++i) {
    if (bv[i] == 0.0f) throw std::invalid_argument("div: zero denominator");
    v[i] = av[i] / bv[i];
  }
  Tensor out = make_node(a.shape(), std::move(v), {a.node(), b.node()}, [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] / pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb.grad[i] -= self.grad[i] * self.value[i] / pb.value[i];
    }
  });
  if (out.numel() == 1) set_hi(out, hi_of(*a.node()) / hi_of(*b.node()));
  return out;
}

Tensor affine(const Tensor& x, float scale, float shift) {
  std::vector<float> v(x.numel());
  const auto& xv = x.data();
  for (int i = 0; i < x.numel(); ++i) v[i] = scale * xv[i] + shift;
  Tensor out = make_node(x.shape(), std::move(v), {x.node()}, [scale](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += scale * self.grad[i];
  });
  if (out.numel() == 1) set_hi(out, double(scale) * hi_of(*x.node()) + double(shift));
  return out;
}

Tensor relu(const Tensor& x) {
  std::vector<float> v(x.numel());
  const auto& xv = x.data();
  for (int i = 0; i < x.numel(); ++i) v[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  Tensor out = make_node(x.shape(), std::move(v), {x.node()}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > 0.0f) p.grad[i] += self.grad[i];
  });
  propagate_hi_unary(out, x, [](double v) { return v > 0.0 ? v : 0.0; });
  return out;
}

Tensor clamp(const Tensor& x, float lo, float hi) {
  if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be < hi");
  std::vector<float> v(x.numel());
  const auto& xv = x.data();
  for (int i = 0; i < x.numel(); ++i) v[i] = std::min(hi, std::max(lo, xv[i]));
  Tensor out = make_node(x.shape(), std::move(v), {x.node()}, [lo, hi](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > lo && p.value[i] < hi) p.grad[i] += self.grad[i];
  });
  if (out.numel() == 1)
    set_hi(out, std::min(double(hi), std::max(double(lo), hi_of(*x.node()))));
  return out;
}

Tensor sigmoid(const Tensor& x) {
  std::vector<float> v(x.numel());
  const auto& xv = x.data();
  for (int i = 0; i < x.numel(); ++i) {
    // split by sign to avoid exp overflow
    const float z = xv[i];
    v[i] = z >= 0.0f ? 1.0f / (1.0f + std::exp(-z)) : std::exp(z) / (1.0f + std::exp(z));
  }
  Tensor out = make_node(x.shape(), std::move(v), {x.node()}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const float y = self.value[i];
      p.grad[i] += self.grad[i] * y * (1.0f - y);
    }
  });
  propagate_hi_unary(out, x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  return out;
}

Tensor exp(const Tensor& x) {
  std::vector<float> v(x.numel());
  const auto& xv = x.data();
  for (int i = 0; i < x.numel(); ++i) v[i] = std::exp(xv[i]);
  Tensor out = make_node(x.shape(), std::move(v), {x.node()}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * self.value[i];
  });
  propagate_hi_unary(out, x, [](double v) { return std::exp(v); });
  return out;
}

Tensor log(const Tensor& x) {
  std::vector<float> v(x.numel());
  const auto& xv = x.data();
  for (int i = 0; i < x.numel(); ++i) {
    if (!(xv[i] > 0.0f)) throw std::invalid_argument("log: inputs must be positive");
    v[i] = std::log(xv[i]);
  }
  Tensor out = make_node(x.shape(), std::move(v), {x.node()}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] / p.value[i];
  });
  propagate_hi_unary(out, x, [](double v) { return std::log(v); });
  return out;
}

// ---- gemm kernels ----

// c[m,n] += a[m,k] * b[k,n]
static void gemm_nn(int m, int k, int n, const float* a, const float* b, float* c) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = a[size_t(i) * k + p];
      if (av == 0.0f) continue;
      const float* brow = b + size_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
static void gemm_nt(int m, int k, int n, const float* a, const float* b, float* c) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + size_t(i) * k;
    float* crow = c + size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + size_t(j) * k;
      float acc = 0.0f;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
static void gemm_tn(int m, int k, int n, const float* a, const float* b, float* c) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + size_t(i) * k;
    const float* brow = b + size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      if (av == 0.0f) continue;
      float* crow = c + size_t(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> v(size_t(m) * n, 0.0f);
  gemm_nn(m, k, n, a.data().data(), b.data().data(), v.data());
  return make_node({m, n}, std::move(v), {a.node(), b.node()}, [m, k, n](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      gemm_nt(m, n, k, self.grad.data(), pb.value.data(), pa.grad.data());
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      gemm_tn(m, k, n, pa.value.data(), self.grad.data(), pb.grad.data());
    }
  });
}

Tensor add_colvec(const Tensor& m, const Tensor& col) {
  if (m.rank() != 2 || col.rank() != 2 || col.dim(1) != 1 || col.dim(0) != m.dim(0))
    throw std::invalid_argument("add_colvec: shapes " + shape_str(m.shape()) + " vs " +
                                shape_str(col.shape()));
  const int rows = m.dim(0), cols = m.dim(1);
  std::vector<float> v(m.data());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) v[size_t(i) * cols + j] += col.data()[i];
  return make_node(m.shape(), std::move(v), {m.node(), col.node()},
                   [rows, cols](TensorNode& self) {
                     auto& pm = *self.parents[0];
                     auto& pc = *self.parents[1];
                     if (pm.requires_grad) {
                       pm.ensure_grad();
                       for (size_t i = 0; i < self.grad.size(); ++i) pm.grad[i] += self.grad[i];
                     }
                     if (pc.requires_grad) {
                       pc.ensure_grad();
                       for (int i = 0; i < rows; ++i) {
                         float acc = 0.0f;
                         for (int j = 0; j < cols; ++j) acc += self.grad[size_t(i) * cols + j];
                         pc.grad[i] += acc;
                       }
                     }
                   });
}

Tensor transpose(const Tensor& m) {
  if (m.rank() != 2) throw std::invalid_argument("transpose: rank-2 only, got " + shape_str(m.shape()));
  const int rows = m.dim(0), cols = m.dim(1);
  std::vector<float> v(m.numel());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) v[size_t(j) * rows + i] = m.data()[size_t(i) * cols + j];
  return make_node({cols, rows}, std::move(v), {m.node()}, [rows, cols](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        p.grad[size_t(i) * cols + j] += self.grad[size_t(j) * rows + i];
  });
}

Tensor add_rowvec(const Tensor& m, const Tensor& row) {
  if (m.rank() != 2 || row.rank() != 2 || row.dim(0) != 1 || row.dim(1) != m.dim(1))
    throw std::invalid_argument("add_rowvec: shapes " + shape_str(m.shape()) + " vs " +
                                shape_str(row.shape()));
  const int rows = m.dim(0), cols = m.dim(1);
  std::vector<float> v(m.numel());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      v[size_t(i) * cols + j] = m.data()[size_t(i) * cols + j] + row.data()[j];
  return make_node(m.shape(), std::move(v), {m.node(), row.node()},
                   [rows, cols](TensorNode& self) {
                     auto& pm = *self.parents[0];
                     auto& pr = *self.parents[1];
                     if (pm.requires_grad) {
                       pm.ensure_grad();
                       for (size_t i = 0; i < self.grad.size(); ++i) pm.grad[i] += self.grad[i];
                     }
                     if (pr.requires_grad) {
                       pr.ensure_grad();
                       for (int j = 0; j < cols; ++j) {
                         float acc = 0.0f;
                         for (int i = 0; i < rows; ++i) acc += self.grad[size_t(i) * cols + j];
                         pr.grad[j] += acc;
                       }
                     }
                   });
}

Tensor mul_colvec(const Tensor& m, const Tensor& col) {
  if (m.rank() != 2 || col.rank() != 2 || col.dim(1) != 1 || col.dim(0) != m.dim(0))
    throw std::invalid_argument("mul_colvec: shapes " + shape_str(m.shape()) + " vs " +
                                shape_str(col.shape()));
  const int rows = m.dim(0), cols = m.dim(1);
  std::vector<float> v(m.numel());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      v[size_t(i) * cols + j] = m.data()[size_t(i) * cols + j] * col.data()[i];
  return make_node(m.shape(), std::move(v), {m.node(), col.node()},
                   [rows, cols](TensorNode& self) {
                     auto& pm = *self.parents[0];
                     auto& pc = *self.parents[1];
                     if (pm.requires_grad) {
                       pm.ensure_grad();
                       for (int i = 0; i < rows; ++i)
                         for (int j = 0; j < cols; ++j)
                           pm.grad[size_t(i) * cols + j] +=
                               self.grad[size_t(i) * cols + j] * pc.value[i];
                     }
                     if (pc.requires_grad) {
                       pc.ensure_grad();
                       for (int i = 0; i < rows; ++i) {
                         float acc = 0.0f;
                         for (int j = 0; j < cols; ++j)
                           acc += self.grad[size_t(i) * cols + j] * pm.value[size_t(i) * cols + j];
                         pc.grad[i] += acc;
                       }
                     }
                   });
}

Tensor slice_cols(const Tensor& m, int j0, int j1) {
  if (m.rank() != 2) throw std::invalid_argument("slice_cols: rank-2 only");
  if (j0 < 0 || j1 > m.dim(1) || j0 >= j1)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(j0) + "," +
                                std::to_string(j1) + ") outside " + shape_str(m.shape()));
  const int rows = m.dim(0), cols = m.dim(1), w = j1 - j0;
  std::vector<float> v(size_t(rows) * w);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < w; ++j)
      v[size_t(i) * w + j] = m.data()[size_t(i) * cols + j0 + j];
  return make_node({rows, w}, std::move(v), {m.node()}, [rows, cols, j0, w](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < w; ++j)
        p.grad[size_t(i) * cols + j0 + j] += self.grad[size_t(i) * w + j];
  });
}

Tensor mul_rowvec(const Tensor& m, const Tensor& row) {
  if (m.rank() != 2 || row.rank() != 2 || row.dim(0) != 1 || row.dim(1) != m.dim(1))
    throw std::invalid_argument("mul_rowvec: shapes " + shape_str(m.shape()) + " vs " +
                                shape_str(row.shape()));
  const int rows = m.dim(0), cols = m.dim(1);
  std::vector<float> v(m.numel());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      v[size_t(i) * cols + j] = m.data()[size_t(i) * cols + j] * row.data()[j];
  return make_node(m.shape(), std::move(v), {m.node(), row.node()},
                   [rows, cols](TensorNode& self) {
                     auto& pm = *self.parents[0];
                     auto& pr = *self.parents[1];
                     if (pm.requires_grad) {
                       pm.ensure_grad();
                       for (int i = 0; i < rows; ++i)
                         for (int j = 0; j < cols; ++j)
                           pm.grad[size_t(i) * cols + j] +=
                               self.grad[size_t(i) * cols + j] * pr.value[j];
                     }
                     if (pr.requires_grad) {
                       pr.ensure_grad();
                       for (int j = 0; j < cols; ++j) {
                         float acc = 0.0f;
                         for (int i = 0; i < rows; ++i)
                           acc += self.grad[size_t(i) * cols + j] * pm.value[size_t(i) * cols + j];
                         pr.grad[j] += acc;
                       }
                     }
                   });
}

Tensor tile_scalar(const Tensor& s, int rows, int cols) {
  if (s.numel() != 1)
    throw std::invalid_argument("tile_scalar: source must be scalar, got " + shape_str(s.shape()));
  std::vector<float> v(size_t(rows) * cols, s.data()[0]);
  return make_node({rows, cols}, std::move(v), {s.node()}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    double acc = 0.0;
    for (float g : self.grad) acc += g;
    p.grad[0] += float(acc);
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) throw std::invalid_argument("concat: bad axis");
  Shape out = parts[0].shape();
  for (size_t p = 1; p < parts.size(); ++p) {
    const Shape& s = parts[p].shape();
    if (int(s.size()) != rank)
      throw std::invalid_argument("concat: rank mismatch " + shape_str(out) + " vs " + shape_str(s));
    for (int d = 0; d < rank; ++d)
      if (d != axis && s[d] != out[d])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(parts[0].shape()) +
                                    " vs " + shape_str(s));
    out[axis] += s[axis];
  }
  int outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out[d];
  for (int d = axis + 1; d < rank; ++d) inner *= out[d];

  std::vector<float> v(size_t(numel_of(out)));
  std::vector<int> axis_len(parts.size());
  std::vector<NodePtr> parents;
  for (size_t p = 0; p < parts.size(); ++p) {
    axis_len[p] = parts[p].dim(axis);
    parents.push_back(parts[p].node());
  }
  const int total_axis = out[axis];
  {
    int offset = 0;
    for (size_t p = 0; p < parts.size(); ++p) {
      const auto& src = parts[p].data();
      const int len = axis_len[p];
      for (int o = 0; o < outer; ++o)
        std::copy(src.begin() + size_t(o) * len * inner,
                  src.begin() + size_t(o + 1) * len * inner,
                  v.begin() + (size_t(o) * total_axis + offset) * inner);
      offset += len;
    }
  }
  return make_node(out, std::move(v), std::move(parents),
                   [outer, inner, total_axis, axis_len](TensorNode& self) {
                     int offset = 0;
                     for (size_t p = 0; p < self.parents.size(); ++p) {
                       auto& par = *self.parents[p];
                       const int len = axis_len[p];
                       if (par.requires_grad) {
                         par.ensure_grad();
                         for (int o = 0; o < outer; ++o) {
                           const float* g = self.grad.data() + (size_t(o) * total_axis + offset) * inner;
                           float* dst = par.grad.data() + size_t(o) * len * inner;
                           for (int i = 0; i < len * inner; ++i) dst[i] += g[i];
                         }
                       }
                       offset += len;
                     }
                   });
}

Tensor reshape(const Tensor& x, const Shape& s) {
  if (numel_of(s) != x.numel())
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(x.shape()) +
                                " -> " + shape_str(s));
  std::vector<float> v(x.data());
  return make_node(s, std::move(v), {x.node()}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor stop_gradient(const Tensor& x) {
  auto n = std::make_shared<TensorNode>();
  n->shape = x.shape();
  n->value = x.data();
  n->requires_grad = false;
  return Tensor(std::move(n));
}

Tensor straight_through(const Tensor& x, const Tensor& q) {
  check_same_shape(x, q, "straight_through");
  std::vector<float> v = q.data();
  return make_node(x.shape(), std::move(v), {x.node(), q.node()}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& idx) {
  if (table.rank() != 2)
    throw std::invalid_argument("gather_rows: table must be rank-2, got " + shape_str(table.shape()));
  const int m = table.dim(0), c = table.dim(1);
  for (int i : idx)
    if (i < 0 || i >= m)
      throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " out of range [0," +
                                  std::to_string(m) + ")");
  const int n = int(idx.size());
  std::vector<float> v(size_t(n) * c);
  for (int r = 0; r < n; ++r)
    std::copy(table.data().begin() + size_t(idx[r]) * c,
              table.data().begin() + size_t(idx[r] + 1) * c, v.begin() + size_t(r) * c);
  return make_node({n, c}, std::move(v), {table.node()}, [idx, c](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < c; ++j) p.grad[size_t(idx[r]) * c + j] += self.grad[r * c + j];
  });
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor out = make_node({1}, {float(acc)}, {x.node()}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    const float g = self.grad[0];
    for (auto& gi : p.grad) gi += g;
  });
  set_hi(out, acc);
  return out;
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const float inv = 1.0f / float(x.numel());
  Tensor out = make_node({1}, {float(acc / x.numel())}, {x.node()}, [inv](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    const float g = self.grad[0] * inv;
    for (auto& gi : p.grad) gi += g;
  });
  set_hi(out, acc / x.numel());
  return out;
}

static Tensor axis_reduce(const Tensor& m, int axis, bool take_mean) {
  if (m.rank() != 2) throw std::invalid_argument("axis reduce: rank-2 only, got " + shape_str(m.shape()));
  if (axis != 0 && axis != 1) throw std::invalid_argument("axis reduce: axis must be 0 or 1");
  const int rows = m.dim(0), cols = m.dim(1);
  const int count = axis == 0 ? rows : cols;
  const float inv = take_mean ? 1.0f / float(count) : 1.0f;
  Shape out = axis == 0 ? Shape{1, cols} : Shape{rows, 1};
  std::vector<float> v(size_t(numel_of(out)), 0.0f);
  if (axis == 0) {
    for (int j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (int i = 0; i < rows; ++i) acc += m.data()[size_t(i) * cols + j];
      v[j] = float(acc) * inv;
    }
  } else {
    for (int i = 0; i < rows; ++i) {
      double acc = 0.0;
      for (int j = 0; j < cols; ++j) acc += m.data()[size_t(i) * cols + j];
      v[i] = float(acc) * inv;
    }
  }
  return make_node(out, std::move(v), {m.node()}, [axis, rows, cols, inv](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        p.grad[size_t(i) * cols + j] += inv * self.grad[axis == 0 ? j : i];
  });
}

Tensor sum_axis(const Tensor& m, int axis) { return axis_reduce(m, axis, false); }
Tensor mean_axis(const Tensor& m, int axis) { return axis_reduce(m, axis, true); }

// ---- softmax family ----

struct AxisView {
  int outer, len, inner;
};

static AxisView axis_view(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("softmax: bad axis");
  AxisView v{1, x.dim(axis), 1};
  for (int d = 0; d < axis; ++d) v.outer *= x.dim(d);
  for (int d = axis + 1; d < x.rank(); ++d) v.inner *= x.dim(d);
  return v;
}

Tensor softmax(const Tensor& x, int axis) {
  const AxisView av = axis_view(x, axis);
  std::vector<float> v(x.numel());
  const auto& xv = x.data();
  for (int o = 0; o < av.outer; ++o)
    for (int in = 0; in < av.inner; ++in) {
      const size_t base = size_t(o) * av.len * av.inner + in;
      float mx = xv[base];
      for (int l = 1; l < av.len; ++l) mx = std::max(mx, xv[base + size_t(l) * av.inner]);
      double denom = 0.0;
      for (int l = 0; l < av.len; ++l) {
        const float e = std::exp(xv[base + size_t(l) * av.inner] - mx);
        v[base + size_t(l) * av.inner] = e;
        denom += e;
      }
      const float inv = float(1.0 / denom);
      for (int l = 0; l < av.len; ++l) v[base + size_t(l) * av.inner] *= inv;
    }
  return make_node(x.shape(), std::move(v), {x.node()}, [av](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (int o = 0; o < av.outer; ++o)
      for (int in = 0; in < av.inner; ++in) {
        const size_t base = size_t(o) * av.len * av.inner + in;
        double dot = 0.0;
        for (int l = 0; l < av.len; ++l) {
          const size_t i = base + size_t(l) * av.inner;
          dot += double(self.grad[i]) * self.value[i];
        }
        for (int l = 0; l < av.len; ++l) {
          const size_t i = base + size_t(l) * av.inner;
          p.grad[i] += self.value[i] * (self.grad[i] - float(dot));
        }
      }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const AxisView av = axis_view(x, axis);
  std::vector<float> v(x.numel());
  const auto& xv = x.data();
  for (int o = 0; o < av.outer; ++o)
    for (int in = 0; in < av.inner; ++in) {
      const size_t base = size_t(o) * av.len * av.inner + in;
      float mx = xv[base];
      for (int l = 1; l < av.len; ++l) mx = std::max(mx, xv[base + size_t(l) * av.inner]);
      double denom = 0.0;
      for (int l = 0; l < av.len; ++l) denom += std::exp(double(xv[base + size_t(l) * av.inner]) - mx);
      const float lse = mx + float(std::log(denom));
      for (int l = 0; l < av.len; ++l) {
        const size_t i = base + size_t(l) * av.inner;
        v[i] = xv[i] - lse;
      }
    }
  return make_node(x.shape(), std::move(v), {x.node()}, [av](TensorNode& self) {
    auto& p = *self.parents[0];
    p.ensure_grad();
    for (int o = 0; o < av.outer; ++o)
      for (int in = 0; in < av.inner; ++in) {
        const size_t base = size_t(o) * av.len * av.inner + in;
        double gsum = 0.0;
        for (int l = 0; l < av.len; ++l) gsum += self.grad[base + size_t(l) * av.inner];
        for (int l = 0; l < av.len; ++l) {
          const size_t i = base + size_t(l) * av.inner;
          p.grad[i] += self.grad[i] - std::exp(self.value[i]) * float(gsum);
        }
      }
  });
}

// ---- convolution ----

static void check_conv_args(const Tensor& x, const Tensor& w, const Tensor& b, int wx_axis) {
  if (x.rank() != 3) throw std::invalid_argument("conv: input must be rank-3, got " + shape_str(x.shape()));
  if (w.rank() != 4) throw std::invalid_argument("conv: weight must be rank-4, got " + shape_str(w.shape()));
  if (w.dim(wx_axis) != x.dim(0))
    throw std::invalid_argument("conv: channel mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(w.shape()));
  const int cout = wx_axis == 1 ? w.dim(0) : w.dim(1);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != cout))
    throw std::invalid_argument("conv: bias shape " + shape_str(b.shape()) + " vs " +
                                std::to_string(cout) + " channels");
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  check_conv_args(x, w, b, 1);
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
  if (pad < 0) throw std::invalid_argument("conv2d: negative padding");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0)
    throw std::invalid_argument("conv2d: kernel " + shape_str(w.shape()) + " too large for input " +
                                shape_str(x.shape()));
  const int ck = cin * kh * kw, hw = ho * wo;

  std::vector<float> col(size_t(ck) * hw, 0.0f);
  const auto& xv = x.data();
  for (int c = 0; c < cin; ++c)
    for (int di = 0; di < kh; ++di)
      for (int dj = 0; dj < kw; ++dj) {
        float* crow = col.data() + (size_t(c) * kh * kw + size_t(di) * kw + dj) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + di - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + dj - pad;
            if (ix < 0 || ix >= wd) continue;
            crow[size_t(oy) * wo + ox] = xv[(size_t(c) * h + iy) * wd + ix];
          }
        }
      }

  std::vector<float> v(size_t(cout) * hw, 0.0f);
  gemm_nn(cout, ck, hw, w.data().data(), col.data(), v.data());
  if (b.defined())
    for (int c = 0; c < cout; ++c)
      for (int i = 0; i < hw; ++i) v[size_t(c) * hw + i] += b.data()[c];

  std::vector<NodePtr> parents{x.node(), w.node()};
  if (b.defined()) parents.push_back(b.node());
  const bool has_bias = b.defined();
  return make_node(
      {cout, ho, wo}, std::move(v), std::move(parents),
      [col = std::move(col), cin, h, wd, cout, kh, kw, ho, wo, stride, pad, ck, hw,
       has_bias](TensorNode& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const float* g = self.grad.data();
        if (has_bias) {
          auto& pb = *self.parents[2];
          if (pb.requires_grad) {
            pb.ensure_grad();
            for (int c = 0; c < cout; ++c) {
              double acc = 0.0;
              for (int i = 0; i < hw; ++i) acc += g[size_t(c) * hw + i];
              pb.grad[c] += float(acc);
            }
          }
        }
        if (pw.requires_grad) {
          pw.ensure_grad();
          gemm_nt(cout, hw, ck, g, col.data(), pw.grad.data());
        }
        if (px.requires_grad) {
          px.ensure_grad();
          std::vector<float> gcol(size_t(ck) * hw, 0.0f);
          gemm_tn(cout, ck, hw, pw.value.data(), g, gcol.data());
          for (int c = 0; c < cin; ++c)
            for (int di = 0; di < kh; ++di)
              for (int dj = 0; dj < kw; ++dj) {
                const float* crow = gcol.data() + (size_t(c) * kh * kw + size_t(di) * kw + dj) * hw;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride + di - pad;
                  if (iy < 0 || iy >= h) continue;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride + dj - pad;
                    if (ix < 0 || ix >= wd) continue;
                    px.grad[(size_t(c) * h + iy) * wd + ix] += crow[size_t(oy) * wo + ox];
                  }
                }
              }
        }
      });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
  check_conv_args(x, w, b, 0);
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv_transpose2d: stride must be 1 or 2");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int ho = (h - 1) * stride + kh;
  const int wo = (wd - 1) * stride + kw;

  std::vector<float> v(size_t(cout) * ho * wo, 0.0f);
  const auto& xv = x.data();
  const auto& wv = w.data();
  for (int ci = 0; ci < cin; ++ci)
    for (int co = 0; co < cout; ++co) {
      const float* ker = wv.data() + (size_t(ci) * cout + co) * kh * kw;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < wd; ++j) {
          const float xval = xv[(size_t(ci) * h + i) * wd + j];
          if (xval == 0.0f) continue;
          float* out = v.data() + (size_t(co) * ho + size_t(i) * stride) * wo + size_t(j) * stride;
          for (int di = 0; di < kh; ++di)
            for (int dj = 0; dj < kw; ++dj) out[size_t(di) * wo + dj] += xval * ker[size_t(di) * kw + dj];
        }
    }
  if (b.defined())
    for (int co = 0; co < cout; ++co)
      for (int i = 0; i < ho * wo; ++i) v[size_t(co) * ho * wo + i] += b.data()[co];

  std::vector<NodePtr> parents{x.node(), w.node()};
  if (b.defined()) parents.push_back(b.node());
  const bool has_bias = b.defined();
  return make_node(
      {cout, ho, wo}, std::move(v), std::move(parents),
      [cin, h, wd, cout, kh, kw, ho, wo, stride, has_bias](TensorNode& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        const float* g = self.grad.data();
        if (has_bias) {
          auto& pb = *self.parents[2];
          if (pb.requires_grad) {
            pb.ensure_grad();
            for (int co = 0; co < cout; ++co) {
              double acc = 0.0;
              for (int i = 0; i < ho * wo; ++i) acc += g[size_t(co) * ho * wo + i];
              pb.grad[co] += float(acc);
            }
          }
        }
        if (px.requires_grad) {
          px.ensure_grad();
          for (int ci = 0; ci < cin; ++ci)
            for (int co = 0; co < cout; ++co) {
              const float* ker = pw.value.data() + (size_t(ci) * cout + co) * kh * kw;
              for (int i = 0; i < h; ++i)
                for (int j = 0; j < wd; ++j) {
                  const float* gout =
                      g + (size_t(co) * ho + size_t(i) * stride) * wo + size_t(j) * stride;
                  float acc = 0.0f;
                  for (int di = 0; di < kh; ++di)
                    for (int dj = 0; dj < kw; ++dj)
                      acc += gout[size_t(di) * wo + dj] * ker[size_t(di) * kw + dj];
                  px.grad[(size_t(ci) * h + i) * wd + j] += acc;
                }
            }
        }
        if (pw.requires_grad) {
          pw.ensure_grad();
          for (int ci = 0; ci < cin; ++ci)
            for (int co = 0; co < cout; ++co) {
              float* gker = pw.grad.data() + (size_t(ci) * cout + co) * kh * kw;
              for (int i = 0; i < h; ++i)
                for (int j = 0; j < wd; ++j) {
                  const float xval = px.value[(size_t(ci) * h + i) * wd + j];
                  if (xval == 0.0f) continue;
                  const float* gout =
                      g + (size_t(co) * ho + size_t(i) * stride) * wo + size_t(j) * stride;
                  for (int di = 0; di < kh; ++di)
                    for (int dj = 0; dj < kw; ++dj)
                      gker[size_t(di) * kw + dj] += xval * gout[size_t(di) * wo + dj];
                }
            }
        }
      });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  const Tensor d = sub(a, b);
  return mean(mul(d, d));
}

// ---- finite differences ----

GradCheckResult check_gradients(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                float eps, float tol) {
  if (!(eps > 1e-6f && eps < 1e-2f))
    throw std::invalid_argument("check_gradients: eps must lie in (1e-6, 1e-2)");
  if (!x.requires_grad())
    throw std::invalid_argument("check_gradients: probe tensor must require gradients");
  Tensor y = f(x);
  if (y.numel() != 1)
    throw std::invalid_argument("check_gradients: function must return a scalar, got " +
                                shape_str(y.shape()));
  x.zero_grad();
  backward(y);
  const std::vector<float> analytic = x.grad();

  // Uses the float64 shadow of the loss tail where available; the final f32
  // store would otherwise dominate the difference quotient.
  auto eval = [&f](Tensor& t) -> double {
    Tensor out = f(t);
    return hi_of(*out.node());
  };

  GradCheckResult res;
  res.max_rel_err = 0.0f;
  auto& xv = x.data();
  for (int i = 0; i < x.numel(); ++i) {
    const float keep = xv[i];
    xv[i] = keep + eps;
    const double fp = eval(x);
    xv[i] = keep - eps;
    const double fm = eval(x);
    xv[i] = keep;
    const float fd = float((fp - fm) / (2.0 * double(eps)));
    const float a = analytic[i];
    const float denom = std::max({1.0f, std::fabs(a), std::fabs(fd)});
    const float rel = std::fabs(a - fd) / denom;
    res.max_rel_err = std::max(res.max_rel_err, rel);
  }
  res.pass = std::isfinite(res.max_rel_err) && res.max_rel_err <= tol;
  return res;
}

}  // namespace tardis
