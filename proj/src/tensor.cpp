#include "tlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <unordered_set>

namespace tlab {

namespace detail {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

namespace {

size_t shape_size(const Shape& s) {
  size_t n = 1;
  for (int e : s) {
    if (e < 0) throw std::invalid_argument("tensor: negative extent");
    n *= static_cast<size_t>(e);
  }
  return n;
}

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> data,
                                bool requires_grad) {
  auto n = std::make_shared<Node>();
  if (shape_size(shape) != data.size())
    throw std::invalid_argument("tensor: shape does not match data length");
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return n;
}

// Creates a recorded node. If gradients are disabled or no parent needs
// them, the edge list and closure are dropped so the graph stays small.
std::shared_ptr<Node> make_op(Shape shape, std::vector<double> data,
                              std::vector<std::shared_ptr<Node>> parents,
                              std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents)
      if (p->requires_grad) {
        needs = true;
        break;
      }
  }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

void check_2d(const Tensor& a, const char* op) {
  if (a.ndim() != 2)
    throw std::invalid_argument(std::string(op) + ": expected a 2-D tensor");
}

}  // namespace
}  // namespace detail

using detail::Node;

NoGradGuard::NoGradGuard() : prev_(detail::grad_enabled()) {
  detail::g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { detail::g_grad_enabled = prev_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  size_t n = detail::shape_size(shape);
  return Tensor(detail::make_leaf(std::move(shape),
                                  std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double v) {
  size_t n = detail::shape_size(shape);
  return Tensor(
      detail::make_leaf(std::move(shape), std::vector<double>(n, v), false));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  return Tensor(
      detail::make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  size_t n = detail::shape_size(shape);
  std::vector<double> d(n);
  for (auto& x : d) x = rng.normal() * stddev;
  return Tensor(detail::make_leaf(std::move(shape), std::move(d), requires_grad));
}

double Tensor::value() const {
  if (size() != 1)
    throw std::invalid_argument("Tensor::value: tensor is not a scalar");
  return n_->data[0];
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto& da = a.data();
  const auto& db = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return Tensor(detail::make_op(a.shape(), std::move(out), {a.node(), b.node()},
                                [](Node& n) {
                                  for (auto& p : n.parents) {
                                    if (!p->requires_grad) continue;
                                    p->ensure_grad();
                                    for (size_t i = 0; i < n.size(); ++i)
                                      p->grad[i] += n.grad[i];
                                  }
                                }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto& da = a.data();
  const auto& db = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return Tensor(detail::make_op(
      a.shape(), std::move(out), {a.node(), b.node()}, [](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (size_t i = 0; i < n.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (size_t i = 0; i < n.size(); ++i) pb->grad[i] -= n.grad[i];
        }
      }));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto& da = a.data();
  const auto& db = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return Tensor(detail::make_op(
      a.shape(), std::move(out), {a.node(), b.node()}, [](Node& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (size_t i = 0; i < n.size(); ++i)
            pa->grad[i] += n.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (size_t i = 0; i < n.size(); ++i)
            pb->grad[i] += n.grad[i] * pa->data[i];
        }
      }));
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto& da = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] * c;
  return Tensor(detail::make_op(a.shape(), std::move(out), {a.node()},
                                [c](Node& n) {
                                  auto& p = n.parents[0];
                                  if (!p->requires_grad) return;
                                  p->ensure_grad();
                                  for (size_t i = 0; i < n.size(); ++i)
                                    p->grad[i] += n.grad[i] * c;
                                }));
}

Tensor add_rowvec(const Tensor& a, const Tensor& row_bias) {
  detail::check_2d(a, "add_rowvec");
  if (row_bias.ndim() != 1 || row_bias.dim(0) != a.cols())
    throw std::invalid_argument("add_rowvec: bias length must equal columns");
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  const auto& da = a.data();
  const auto& db = row_bias.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(i) * n + j] = da[static_cast<size_t>(i) * n + j] + db[j];
  return Tensor(detail::make_op(
      a.shape(), std::move(out), {a.node(), row_bias.node()}, [m, n](Node& nd) {
        auto& pa = nd.parents[0];
        auto& pb = nd.parents[1];
        if (pa->requires_grad) {
          pa->ensure_grad();
          for (size_t i = 0; i < nd.size(); ++i) pa->grad[i] += nd.grad[i];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
              pb->grad[j] += nd.grad[static_cast<size_t>(i) * n + j];
        }
      }));
}

// ---- matrix products --------------------------------------------------------

// Accumulation runs in k order per output entry, matching the naive
// triple-loop reference bit for bit.
Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_2d(a, "matmul");
  detail::check_2d(b, "matmul");
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner extents do not match");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  const auto& da = a.data();
  const auto& db = b.data();
  // Pack b^T so the inner loop is contiguous for both operands.
  std::vector<double> bt(static_cast<size_t>(n) * k);
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < n; ++c)
      bt[static_cast<size_t>(c) * k + r] = db[static_cast<size_t>(r) * n + c];
  std::vector<double> out(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const double* arow = &da[static_cast<size_t>(i) * k];
    for (int j = 0; j < n; ++j) {
      const double* brow = &bt[static_cast<size_t>(j) * k];
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += arow[t] * brow[t];
      out[static_cast<size_t>(i) * n + j] = acc;
    }
  }
  return Tensor(detail::make_op(
      {m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& nd) {
        auto& pa = nd.parents[0];
        auto& pb = nd.parents[1];
        if (pa->requires_grad) {
          pa->ensure_grad();  // dA = G * B^T
          for (int i = 0; i < m; ++i)
            for (int t = 0; t < k; ++t) {
              double acc = 0.0;
              const double* g = &nd.grad[static_cast<size_t>(i) * n];
              const double* br = &pb->data[static_cast<size_t>(t) * n];
              for (int j = 0; j < n; ++j) acc += g[j] * br[j];
              pa->grad[static_cast<size_t>(i) * k + t] += acc;
            }
        }
        if (pb->requires_grad) {
          pb->ensure_grad();  // dB = A^T * G
          for (int i = 0; i < m; ++i) {
            const double* ar = &pa->data[static_cast<size_t>(i) * k];
            const double* g = &nd.grad[static_cast<size_t>(i) * n];
            for (int t = 0; t < k; ++t) {
              double* out_row = &pb->grad[static_cast<size_t>(t) * n];
              const double av = ar[t];
              for (int j = 0; j < n; ++j) out_row[j] += av * g[j];
            }
          }
        }
      }));
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::check_2d(a, "matmul_nt");
  detail::check_2d(b, "matmul_nt");
  if (a.cols() != b.cols())
    throw std::invalid_argument("matmul_nt: inner extents do not match");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  const auto& da = a.data();
  const auto& db = b.data();
  std::vector<double> out(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const double* arow = &da[static_cast<size_t>(i) * k];
    for (int j = 0; j < n; ++j) {
      const double* brow = &db[static_cast<size_t>(j) * k];
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += arow[t] * brow[t];
      out[static_cast<size_t>(i) * n + j] = acc;
    }
  }
  return Tensor(detail::make_op(
      {m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& nd) {
        auto& pa = nd.parents[0];
        auto& pb = nd.parents[1];
        if (pa->requires_grad) {
          pa->ensure_grad();  // dA = G * B
          for (int i = 0; i < m; ++i) {
            double* out_row = &pa->grad[static_cast<size_t>(i) * k];
            const double* g = &nd.grad[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) {
              const double gv = g[j];
              const double* br = &pb->data[static_cast<size_t>(j) * k];
              for (int t = 0; t < k; ++t) out_row[t] += gv * br[t];
            }
          }
        }
        if (pb->requires_grad) {
          pb->ensure_grad();  // dB = G^T * A
          for (int i = 0; i < m; ++i) {
            const double* ar = &pa->data[static_cast<size_t>(i) * k];
            const double* g = &nd.grad[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) {
              const double gv = g[j];
              double* out_row = &pb->grad[static_cast<size_t>(j) * k];
              for (int t = 0; t < k; ++t) out_row[t] += gv * ar[t];
            }
          }
        }
      }));
}

// ---- row-wise nonlinearities ------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  detail::check_2d(a, "softmax_rows");
  const int m = a.rows(), n = a.cols();
  const auto& da = a.data();
  std::vector<double> out(a.size());
  for (int i = 0; i < m; ++i) {
    const double* x = &da[static_cast<size_t>(i) * n];
    double* y = &out[static_cast<size_t>(i) * n];
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < n; ++j) y[j] *= inv;
  }
  return Tensor(detail::make_op(
      a.shape(), std::move(out), {a.node()}, [m, n](Node& nd) {
        auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const double* y = &nd.data[static_cast<size_t>(i) * n];
          const double* g = &nd.grad[static_cast<size_t>(i) * n];
          double dot = 0.0;
          for (int j = 0; j < n; ++j) dot += g[j] * y[j];
          double* dx = &p->grad[static_cast<size_t>(i) * n];
          for (int j = 0; j < n; ++j) dx[j] += y[j] * (g[j] - dot);
        }
      }));
}

Tensor log_softmax_rows(const Tensor& a) {
  detail::check_2d(a, "log_softmax_rows");
  const int m = a.rows(), n = a.cols();
  const auto& da = a.data();
  std::vector<double> out(a.size());
  for (int i = 0; i < m; ++i) {
    const double* x = &da[static_cast<size_t>(i) * n];
    double* y = &out[static_cast<size_t>(i) * n];
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (int j = 0; j < n; ++j) y[j] = x[j] - lse;
  }
  return Tensor(detail::make_op(
      a.shape(), std::move(out), {a.node()}, [m, n](Node& nd) {
        auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const double* y = &nd.data[static_cast<size_t>(i) * n];
          const double* g = &nd.grad[static_cast<size_t>(i) * n];
          double gs = 0.0;
          for (int j = 0; j < n; ++j) gs += g[j];
          double* dx = &p->grad[static_cast<size_t>(i) * n];
          for (int j = 0; j < n; ++j) dx[j] += g[j] - std::exp(y[j]) * gs;
        }
      }));
}

Tensor gelu(const Tensor& a) {
  const auto& da = a.data();
  std::vector<double> out(a.size());
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * da[i] * (1.0 + std::erf(da[i] * inv_sqrt2));
  return Tensor(detail::make_op(
      a.shape(), std::move(out), {a.node()}, [](Node& nd) {
        auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        for (size_t i = 0; i < nd.size(); ++i) {
          const double x = p->data[i];
          const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
          const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
          p->grad[i] += nd.grad[i] * (cdf + x * pdf);
        }
      }));
}

Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias,
                       double eps) {
  detail::check_2d(a, "layer_norm_rows");
  const int m = a.rows(), n = a.cols();
  if (gain.ndim() != 1 || gain.dim(0) != n || bias.ndim() != 1 ||
      bias.dim(0) != n)
    throw std::invalid_argument("layer_norm_rows: gain/bias must be [cols]");
  const auto& da = a.data();
  const auto& dg = gain.data();
  const auto& db = bias.data();
  std::vector<double> out(a.size());
  for (int i = 0; i < m; ++i) {
    const double* x = &da[static_cast<size_t>(i) * n];
    double* y = &out[static_cast<size_t>(i) * n];
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += x[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= n;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) y[j] = (x[j] - mu) * inv_std * dg[j] + db[j];
  }
  return Tensor(detail::make_op(
      a.shape(), std::move(out), {a.node(), gain.node(), bias.node()},
      [m, n, eps](Node& nd) {
        auto& px = nd.parents[0];
        auto& pg = nd.parents[1];
        auto& pb = nd.parents[2];
        if (px->requires_grad) px->ensure_grad();
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const double* x = &px->data[static_cast<size_t>(i) * n];
          const double* g = &nd.grad[static_cast<size_t>(i) * n];
          double mu = 0.0;
          for (int j = 0; j < n; ++j) mu += x[j];
          mu /= n;
          double var = 0.0;
          for (int j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
          var /= n;
          const double inv_std = 1.0 / std::sqrt(var + eps);
          if (pg->requires_grad || pb->requires_grad) {
            for (int j = 0; j < n; ++j) {
              const double xhat = (x[j] - mu) * inv_std;
              if (pg->requires_grad) pg->grad[j] += g[j] * xhat;
              if (pb->requires_grad) pb->grad[j] += g[j];
            }
          }
          if (px->requires_grad) {
            // dxhat = g * gain; dx via the usual two-reduction form.
            double sum_dxhat = 0.0;
            double sum_dxhat_xhat = 0.0;
            for (int j = 0; j < n; ++j) {
              const double xhat = (x[j] - mu) * inv_std;
              const double dxhat = g[j] * pg->data[j];
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat;
            }
            double* dx = &px->grad[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) {
              const double xhat = (x[j] - mu) * inv_std;
              const double dxhat = g[j] * pg->data[j];
              dx[j] += inv_std *
                       (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
            }
          }
        }
      }));
}

// ---- gathers / reshuffles ---------------------------------------------------

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
  detail::check_2d(table, "embedding_rows");
  const int v = table.rows(), d = table.cols();
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding_rows: id out of range");
  const auto& dt = table.data();
  std::vector<double> out(ids.size() * static_cast<size_t>(d));
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(&dt[static_cast<size_t>(ids[i]) * d], d,
                &out[i * static_cast<size_t>(d)]);
  return Tensor(detail::make_op(
      {static_cast<int>(ids.size()), d}, std::move(out), {table.node()},
      [ids, d](Node& nd) {
        auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
          const double* g = &nd.grad[i * static_cast<size_t>(d)];
          double* dst = &p->grad[static_cast<size_t>(ids[i]) * d];
          for (int j = 0; j < d; ++j) dst[j] += g[j];
        }
      }));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int m = parts[0].rows();
  int total = 0;
  std::vector<int> widths;
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& p : parts) {
    detail::check_2d(p, "concat_cols");
    if (p.rows() != m)
      throw std::invalid_argument("concat_cols: row counts differ");
    widths.push_back(p.cols());
    total += p.cols();
    parents.push_back(p.node());
  }
  std::vector<double> out(static_cast<size_t>(m) * total);
  int off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const auto& d = parts[k].data();
    const int w = widths[k];
    for (int i = 0; i < m; ++i)
      std::copy_n(&d[static_cast<size_t>(i) * w], w,
                  &out[static_cast<size_t>(i) * total + off]);
    off += w;
  }
  return Tensor(detail::make_op(
      {m, total}, std::move(out), std::move(parents), [m, widths, total](Node& nd) {
        int off2 = 0;
        for (size_t k = 0; k < nd.parents.size(); ++k) {
          auto& p = nd.parents[k];
          const int w = widths[k];
          if (p->requires_grad) {
            p->ensure_grad();
            for (int i = 0; i < m; ++i) {
              const double* g = &nd.grad[static_cast<size_t>(i) * total + off2];
              double* dst = &p->grad[static_cast<size_t>(i) * w];
              for (int j = 0; j < w; ++j) dst[j] += g[j];
            }
          }
          off2 += w;
        }
      }));
}

Tensor row(const Tensor& a, int i) {
  detail::check_2d(a, "row");
  if (i < 0 || i >= a.rows()) throw std::invalid_argument("row: index out of range");
  const int n = a.cols();
  auto d = a.data();
  std::vector<double> out(d.begin() + static_cast<ptrdiff_t>(i) * n,
                          d.begin() + static_cast<ptrdiff_t>(i + 1) * n);
  return Tensor(detail::make_op({n}, std::move(out), {a.node()}, [i, n](Node& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    double* dst = &p->grad[static_cast<size_t>(i) * n];
    for (int j = 0; j < n; ++j) dst[j] += nd.grad[j];
  }));
}

Tensor crop(const Tensor& a, int r, int c) {
  detail::check_2d(a, "crop");
  if (r < 0 || c < 0 || r > a.rows() || c > a.cols())
    throw std::invalid_argument("crop: block exceeds tensor extents");
  const int n = a.cols();
  std::vector<double> out(static_cast<size_t>(r) * c);
  for (int i = 0; i < r; ++i)
    std::copy_n(&a.data()[static_cast<size_t>(i) * n], c,
                &out[static_cast<size_t>(i) * c]);
  return Tensor(detail::make_op(
      {r, c}, std::move(out), {a.node()}, [r, c, n](Node& nd) {
        auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < r; ++i) {
          const double* g = &nd.grad[static_cast<size_t>(i) * c];
          double* dst = &p->grad[static_cast<size_t>(i) * n];
          for (int j = 0; j < c; ++j) dst[j] += g[j];
        }
      }));
}

Tensor pick_entries(const Tensor& a,
                    const std::vector<std::pair<int, int>>& rc) {
  detail::check_2d(a, "pick_entries");
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(rc.size());
  for (size_t k = 0; k < rc.size(); ++k) {
    const auto [i, j] = rc[k];
    if (i < 0 || i >= m || j < 0 || j >= n)
      throw std::invalid_argument("pick_entries: index out of range");
    out[k] = a.data()[static_cast<size_t>(i) * n + j];
  }
  return Tensor(detail::make_op(
      {static_cast<int>(rc.size())}, std::move(out), {a.node()},
      [rc, n](Node& nd) {
        auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (size_t k = 0; k < rc.size(); ++k)
          p->grad[static_cast<size_t>(rc[k].first) * n + rc[k].second] +=
              nd.grad[k];
      }));
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return Tensor(detail::make_op({1}, {acc}, {a.node()}, [](Node& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double g = nd.grad[0];
    for (size_t i = 0; i < p->data.size(); ++i) p->grad[i] += g;
  }));
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  return Tensor(detail::make_op({1}, {acc * inv}, {a.node()}, [inv](Node& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const double g = nd.grad[0] * inv;
    for (size_t i = 0; i < p->data.size(); ++i) p->grad[i] += g;
  }));
}

Tensor sum_list(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("sum_list: empty input");
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(xs.size());
  for (const auto& x : xs) {
    detail::check_same_shape(xs[0], x, "sum_list");
    parents.push_back(x.node());
  }
  std::vector<double> out(xs[0].size(), 0.0);
  for (const auto& x : xs) {
    const auto& d = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += d[i];
  }
  return Tensor(detail::make_op(xs[0].shape(), std::move(out),
                                std::move(parents), [](Node& nd) {
                                  for (auto& p : nd.parents) {
                                    if (!p->requires_grad) continue;
                                    p->ensure_grad();
                                    for (size_t i = 0; i < nd.size(); ++i)
                                      p->grad[i] += nd.grad[i];
                                  }
                                }));
}

// ---- cosine -----------------------------------------------------------------

double cosine_value(std::span<const double> u, std::span<const double> v) {
  double dot = 0.0, su = 0.0, sv = 0.0;
  for (size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    su += u[i] * u[i];
    sv += v[i] * v[i];
  }
  const double nu = std::sqrt(su) + kCosineNormEps;
  const double nv = std::sqrt(sv) + kCosineNormEps;
  return dot / (nu * nv);
}

Tensor cosine(const Tensor& u, const Tensor& v) {
  if (u.size() != v.size())
    throw std::invalid_argument("cosine: inputs differ in length");
  const double c = cosine_value(u.data(), v.data());
  return Tensor(detail::make_op({1}, {c}, {u.node(), v.node()}, [](Node& nd) {
    auto& pu = nd.parents[0];
    auto& pv = nd.parents[1];
    const auto& du = pu->data;
    const auto& dv = pv->data;
    double dot = 0.0, su = 0.0, sv = 0.0;
    for (size_t i = 0; i < du.size(); ++i) {
      dot += du[i] * dv[i];
      su += du[i] * du[i];
      sv += dv[i] * dv[i];
    }
    const double ru = std::sqrt(su);
    const double rv = std::sqrt(sv);
    const double nu = ru + kCosineNormEps;
    const double nv = rv + kCosineNormEps;
    const double c = dot / (nu * nv);
    const double g = nd.grad[0];
    // d c / d u = v/(nu*nv) - c * (u/ru)/nu; the norm direction term
    // vanishes at exactly zero input.
    if (pu->requires_grad) {
      pu->ensure_grad();
      const double a = 1.0 / (nu * nv);
      const double b = ru > 0.0 ? c / (ru * nu) : 0.0;
      for (size_t i = 0; i < du.size(); ++i)
        pu->grad[i] += g * (dv[i] * a - du[i] * b);
    }
    if (pv->requires_grad) {
      pv->ensure_grad();
      const double a = 1.0 / (nu * nv);
      const double b = rv > 0.0 ? c / (rv * nv) : 0.0;
      for (size_t i = 0; i < dv.size(); ++i)
        pv->grad[i] += g * (du[i] * a - dv[i] * b);
    }
  }));
}

// ---- gathered relative-position scores --------------------------------------

namespace {
void check_grid(const IndexGrid& idx, int table_rows, const char* op) {
  if (static_cast<size_t>(idx.rows) * idx.cols != idx.v.size())
    throw std::invalid_argument(std::string(op) + ": grid extents mismatch");
  for (int t : idx.v)
    if (t < 0 || t >= table_rows)
      throw std::invalid_argument(std::string(op) + ": grid index out of range");
}
}  // namespace

Tensor gathered_scores(const Tensor& x, const Tensor& table,
                       const IndexGrid& idx, bool use_row_j) {
  detail::check_2d(x, "gathered_scores");
  detail::check_2d(table, "gathered_scores");
  if (x.cols() != table.cols())
    throw std::invalid_argument("gathered_scores: feature widths differ");
  check_grid(idx, table.rows(), "gathered_scores");
  const int s = x.rows(), d = x.cols();
  if (idx.rows != s || idx.cols != s)
    throw std::invalid_argument("gathered_scores: grid must be rows(x) square");
  const auto& dx = x.data();
  const auto& dt = table.data();
  std::vector<double> out(static_cast<size_t>(s) * s);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      const int r = use_row_j ? j : i;
      const double* xr = &dx[static_cast<size_t>(r) * d];
      const double* tr = &dt[static_cast<size_t>(idx.at(i, j)) * d];
      double acc = 0.0;
      for (int t = 0; t < d; ++t) acc += xr[t] * tr[t];
      out[static_cast<size_t>(i) * s + j] = acc;
    }
  return Tensor(detail::make_op(
      {s, s}, std::move(out), {x.node(), table.node()},
      [s, d, idx, use_row_j](Node& nd) {
        auto& px = nd.parents[0];
        auto& pt = nd.parents[1];
        if (px->requires_grad) px->ensure_grad();
        if (pt->requires_grad) pt->ensure_grad();
        for (int i = 0; i < s; ++i)
          for (int j = 0; j < s; ++j) {
            const int r = use_row_j ? j : i;
            const double g = nd.grad[static_cast<size_t>(i) * s + j];
            if (g == 0.0) continue;
            const double* tr = &pt->data[static_cast<size_t>(idx.at(i, j)) * d];
            const double* xr = &px->data[static_cast<size_t>(r) * d];
            if (px->requires_grad) {
              double* dst = &px->grad[static_cast<size_t>(r) * d];
              for (int t = 0; t < d; ++t) dst[t] += g * tr[t];
            }
            if (pt->requires_grad) {
              double* dst = &pt->grad[static_cast<size_t>(idx.at(i, j)) * d];
              for (int t = 0; t < d; ++t) dst[t] += g * xr[t];
            }
          }
      }));
}

Tensor gather_bias(const Tensor& bias, const IndexGrid& idx) {
  if (bias.ndim() != 1)
    throw std::invalid_argument("gather_bias: bias must be 1-D");
  check_grid(idx, bias.dim(0), "gather_bias");
  std::vector<double> out(idx.v.size());
  for (size_t k = 0; k < idx.v.size(); ++k) out[k] = bias.data()[idx.v[k]];
  return Tensor(detail::make_op(
      {idx.rows, idx.cols}, std::move(out), {bias.node()}, [idx](Node& nd) {
        auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (size_t k = 0; k < idx.v.size(); ++k)
          p->grad[idx.v[k]] += nd.grad[k];
      }));
}

// ---- backward ---------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  Node* root = loss.node().get();
  // Iterative post-order DFS; graphs can be deep chains.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* n;
    size_t next;
  };
  std::vector<Frame> stack;
  if (root->requires_grad) {
    stack.push_back({root, 0});
    seen.insert(root);
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  // Intermediate grads are scoped to this call; leaf grads accumulate.
  for (Node* n : order) {
    if (n->backprop)
      n->grad.assign(n->data.size(), 0.0);
    else
      n->ensure_grad();
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

// ---- finite differences -----------------------------------------------------

double grad_check_fd_against(const std::function<double()>& value_fn, Tensor& x,
                             std::span<const double> analytic, double h,
                             int max_coords, Rng* rng, double denom_floor) {
  auto data = x.mutable_data();
  std::vector<size_t> coords;
  if (max_coords < 0 || static_cast<size_t>(max_coords) >= data.size()) {
    coords.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) coords[i] = i;
  } else {
    if (!rng)
      throw std::invalid_argument("grad_check_fd: sampling coords needs an rng");
    for (int k = 0; k < max_coords; ++k)
      coords.push_back(static_cast<size_t>(rng->below(data.size())));
  }
  double worst = 0.0;
  NoGradGuard ng;
  for (size_t c : coords) {
    const double keep = data[c];
    data[c] = keep + h;
    const double fp = value_fn();
    data[c] = keep - h;
    const double fm = value_fn();
    data[c] = keep;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[c];
    const double rel =
        std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + denom_floor);
    worst = std::max(worst, rel);
  }
  return worst;
}

double grad_check_fd(const std::function<Tensor()>& f, Tensor& x, double h,
                     int max_coords, Rng* rng, double denom_floor) {
  x.zero_grad();
  Tensor y = f();
  backward(y);
  std::vector<double> analytic(x.grad().begin(), x.grad().end());
  auto value_fn = [&f]() { return f().value(); };
  return grad_check_fd_against(value_fn, x, analytic, h, max_coords, rng,
                               denom_floor);
}

}  // namespace tlab
