#ifndef TARDIS_TENSOR_HPP
#define TARDIS_TENSOR_HPP

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace tardis {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

namespace detail {

// One node of the reverse-mode graph. Nodes form a DAG through `parents`;
// `backprop` reads this node's grad and accumulates into the parents' grads.
// Nodes whose inputs carry no gradient requirement are pruned to plain values
// (no parents, no backprop), so constant subgraphs cost nothing at backward.
struct TensorNode {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // lazily sized; persists on leaves across steps
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  // float64 shadow for scalar loss tails: reductions and scalar arithmetic
  // keep it so finite differences are not drowned by the final f32 store.
  double hi = 0.0;
  bool has_hi = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
  }
};

}  // namespace detail

// float32 autodiff tensor handle. Graphs are built eagerly by the free
// functions below and reclaimed by reference counting once the loss handle
// goes out of scope. Gradients accumulate across backward() calls; callers
// zero leaf gradients explicitly before each step. Gradients of gradients
// are not supported.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, float v, bool requires_grad = false);
  static Tensor from(const Shape& s, std::vector<float> v, bool requires_grad = false);
  static Tensor scalar(float v, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int dim(int axis) const;
  int numel() const;

  std::vector<float>& data();
  const std::vector<float>& data() const;
  float item() const;     // single-element tensors only
  double item_hi() const;  // double shadow when tracked, widened item() otherwise

  bool requires_grad() const;
  std::vector<float>& grad();  // allocated zero-filled on first use
  void zero_grad();

  std::shared_ptr<detail::TensorNode>& node() { return n_; }
  const std::shared_ptr<detail::TensorNode>& node() const { return n_; }

  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<detail::TensorNode> n_;
};

// Runs reverse-mode accumulation from a scalar loss. Visits each reachable
// node exactly once in reverse topological order. Accumulates (+=) into leaf
// gradients; a second call without zero_grad adds again by design.
void backward(const Tensor& loss);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // denominator must be nonzero
Tensor affine(const Tensor& x, float scale, float shift);  // scale*x + shift
Tensor relu(const Tensor& x);
Tensor clamp(const Tensor& x, float lo, float hi);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // domain-checked: all inputs must be > 0

// ---- linear algebra / structure ----
Tensor matmul(const Tensor& a, const Tensor& b);            // [m,k]x[k,n]
Tensor transpose(const Tensor& m);                          // [m,n] -> [n,m]
Tensor add_colvec(const Tensor& m, const Tensor& col);      // [m,n] + [m,1]
Tensor add_rowvec(const Tensor& m, const Tensor& row);      // [m,n] + [1,n]
Tensor mul_rowvec(const Tensor& m, const Tensor& row);      // [m,n] * [1,n]
Tensor mul_colvec(const Tensor& m, const Tensor& col);      // [m,n] * [m,1]
Tensor slice_cols(const Tensor& m, int j0, int j1);         // columns [j0,j1)
Tensor tile_scalar(const Tensor& s, int rows, int cols);    // [1] -> [rows,cols]
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor reshape(const Tensor& x, const Shape& s);
Tensor stop_gradient(const Tensor& x);
// Value copied bitwise from q; gradients pass to x only. The estimator is
// biased by construction, so finite-difference checks must bypass it.
Tensor straight_through(const Tensor& x, const Tensor& q);
Tensor gather_rows(const Tensor& table, const std::vector<int>& idx);

// ---- reductions ----
Tensor sum(const Tensor& x);   // -> [1]
Tensor mean(const Tensor& x);  // -> [1]
Tensor sum_axis(const Tensor& m, int axis);   // rank-2: axis 0 -> [1,n], axis 1 -> [m,1]
Tensor mean_axis(const Tensor& m, int axis);
Tensor softmax(const Tensor& x, int axis);      // max-stabilized
Tensor log_softmax(const Tensor& x, int axis);

// ---- convolution (single image, no batch axis) ----
// x [Cin,H,W], w [Cout,Cin,kh,kw], optional bias [Cout]; stride 1 or 2.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// x [Cin,H,W], w [Cin,Cout,kh,kw], optional bias [Cout]; output (H-1)*s+kh.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);

// ---- composites ----
Tensor mse(const Tensor& a, const Tensor& b);  // mean((a-b)^2)

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(float s, const Tensor& x) { return affine(x, s, 0.0f); }

// Central finite-difference check of autodiff gradients for a scalar-valued
// function of one leaf tensor. Relative error is normalized by
// max(1, |analytic|, |numeric|): a strictly relative criterion is not
// attainable in float32 for near-zero components, and the loss surfaces
// checked here are O(1). eps must lie in (1e-6, 1e-2).
struct GradCheckResult {
  float max_rel_err = 0.0f;
  bool pass = false;
};
GradCheckResult check_gradients(const std::function<Tensor(const Tensor&)>& f,
                                Tensor x, float eps, float tol);

}  // namespace tardis

#endif  // TARDIS_TENSOR_HPP
