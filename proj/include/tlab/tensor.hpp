#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tlab/rng.hpp"

namespace tlab {

using Shape = std::vector<int>;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Distributes this->grad into the parents' grad buffers. Only set on
  // recorded (non-leaf) nodes.
  std::function<void(Node&)> backprop;

  size_t size() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

bool grad_enabled();

}  // namespace detail

// Disables gradient recording for the current thread while alive. Used by
// the finite-difference checker, which only needs values.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense multi-dimensional array of doubles with reverse-mode differentiation.
// Value semantics: copying a Tensor aliases the underlying node, which is how
// graph edges are shared. All shapes are row-major.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v);
  // i.i.d. normal(0, stddev) entries.
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  size_t size() const { return n_->data.size(); }
  int rows() const { return dim(0); }
  int cols() const { return dim(1); }

  // Scalar tensors only.
  double value() const;

  double at(int i) const { return n_->data[static_cast<size_t>(i)]; }
  double at(int i, int j) const {
    return n_->data[static_cast<size_t>(i) * cols() + j];
  }

  std::span<const double> data() const { return n_->data; }
  // Leaf mutation (parameter updates, FD perturbation). Mutating a recorded
  // intermediate invalidates gradients; callers stick to leaves.
  std::span<double> mutable_data() { return n_->data; }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }
  bool is_leaf() const { return n_ && !n_->backprop; }

  bool has_grad() const { return n_ && n_->grad.size() == n_->data.size(); }
  std::span<const double> grad() const { return n_->grad; }
  std::span<double> mutable_grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() {
    if (n_) n_->grad.assign(n_->data.size(), 0.0);
  }

  const std::shared_ptr<detail::Node>& node() const { return n_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> n_;
};

// ---- primitives -----------------------------------------------------------
// Every primitive records a backward closure when gradients are enabled and
// any input requires them. Gradients accumulate into leaves until zero_grad.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
// [m x n] + [n], the bias broadcast used by dense layers.
Tensor add_rowvec(const Tensor& a, const Tensor& row_bias);

Tensor matmul(const Tensor& a, const Tensor& b);     // [m x k] * [k x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m x k] * [n x k]^T

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-12);

// Gather of table rows; ids index dim 0. Backward scatter-adds.
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor row(const Tensor& a, int i);
// Top-left block [r x c].
Tensor crop(const Tensor& a, int r, int c);
// Entries a[rc[k].first, rc[k].second] as a vector.
Tensor pick_entries(const Tensor& a,
                    const std::vector<std::pair<int, int>>& rc);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Elementwise sum of same-shaped tensors, accumulated left to right.
Tensor sum_list(const std::vector<Tensor>& xs);

// Cosine similarity of two equally sized tensors viewed as flat vectors,
// guarded by adding `eps` to each norm so degenerate inputs stay defined.
inline constexpr double kCosineNormEps = 1e-8;
Tensor cosine(const Tensor& u, const Tensor& v);
// Shared forward math, also used by the diagnostics (keeps the two paths
// bit-for-bit consistent).
double cosine_value(std::span<const double> u, std::span<const double> v);

// Integer grid indexing an embedding table per position pair.
struct IndexGrid {
  int rows = 0;
  int cols = 0;
  std::vector<int> v;
  int at(int i, int j) const { return v[static_cast<size_t>(i) * cols + j]; }
};

// scores[i,j] = dot(x[j if use_row_j else i, :], table[idx(i,j), :]).
// The gathered-table form of relative position terms.
Tensor gathered_scores(const Tensor& x, const Tensor& table,
                       const IndexGrid& idx, bool use_row_j);
// scores[i,j] = bias[idx(i,j)].
Tensor gather_bias(const Tensor& bias, const IndexGrid& idx);

// Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad leaf.
// Leaf gradients accumulate across calls; intermediate gradients are reset
// per call.
void backward(const Tensor& loss);

// Central finite differences against the analytic gradient of f() w.r.t. x.
// f rebuilds its graph from x's current data on every call. Returns
// max over checked coordinates of |analytic - numeric| /
// (|analytic| + |numeric| + denom_floor). max_coords < 0 checks every
// coordinate; otherwise that many are sampled with `rng`. denom_floor sets
// the absolute scale below which a coordinate counts as zero; raise it when
// the probe input cannot reach every parameter, so pure rounding noise on
// dead coordinates does not register as relative error.
double grad_check_fd(const std::function<Tensor()>& f, Tensor& x,
                     double h = 1e-4, int max_coords = -1, Rng* rng = nullptr,
                     double denom_floor = 1e-10);
// Same, against a precomputed analytic gradient for x.
double grad_check_fd_against(const std::function<double()>& value_fn, Tensor& x,
                             std::span<const double> analytic, double h,
                             int max_coords = -1, Rng* rng = nullptr,
                             double denom_floor = 1e-10);

}  // namespace tlab
