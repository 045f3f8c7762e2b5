#include "imim/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <unordered_set>

namespace imim::ops {

namespace {

using detail::Node;

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Wraps a forward result; attaches the backward rule only when needed.
template <typename Rule>
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   Rule&& rule) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (grad_enabled() && any_requires_grad(inputs)) {
    node->requires_grad = true;
    for (const auto* t : inputs) {
      if (t->defined()) node->parents.push_back(t->node());
    }
    node->backward_rule = std::forward<Rule>(rule);
  }
  return Tensor::wrap(std::move(node));
}

Tensor make_result_n(Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                     std::function<void(Node&)> rule) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needed = false;
  for (const auto& t : inputs) needed = needed || t.requires_grad();
  if (grad_enabled() && needed) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backward_rule = std::move(rule);
  }
  return Tensor::wrap(std::move(node));
}

// Gradient buffer of an input, or nullptr if it does not want one.
std::vector<double>* grad_of(const std::shared_ptr<Node>& n) {
  return n && n->requires_grad ? &n->ensure_grad() : nullptr;
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

int blas_int(std::size_t n) {
  // One BLAS thread: results must not depend on the machine's core count.
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
  return static_cast<int>(n);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(m), blas_int(n), blas_int(k), 1.0,
              a.data().data(), blas_int(k), b.data().data(), blas_int(n), 0.0, out.data(), blas_int(n));
  auto an = a.node(), bn = b.node();
  return make_result({m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](Node& self) {
    if (auto* ga = grad_of(an)) {
      // dA += dC * B^T
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(m), blas_int(k), blas_int(n), 1.0,
                  self.grad.data(), blas_int(n), bn->data.data(), blas_int(n), 1.0, ga->data(),
                  blas_int(k));
    }
    if (auto* gb = grad_of(bn)) {
      // dB += A^T * dC
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(k), blas_int(n), blas_int(m), 1.0,
                  an->data.data(), blas_int(k), self.grad.data(), blas_int(n), 1.0, gb->data(),
                  blas_int(n));
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_matrix(x, "linear");
  require_matrix(w, "linear");
  const auto rows = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  if (w.dim(0) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not fit weight " +
                         shape_str(w.shape()));
  }
  if (bias.defined() && bias.numel() != out_dim) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not fit weight " +
                         shape_str(w.shape()));
  }
  std::vector<double> out(rows * out_dim, 0.0);
  if (bias.defined()) {
    const auto b = bias.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(b.begin(), b.end(), out.begin() + r * out_dim);
  }
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(rows), blas_int(out_dim), blas_int(in),
              1.0, x.data().data(), blas_int(in), w.data().data(), blas_int(out_dim),
              bias.defined() ? 1.0 : 0.0, out.data(), blas_int(out_dim));
  auto xn = x.node(), wn = w.node(), bn = bias.node();
  return make_result({rows, out_dim}, std::move(out), {&x, &w, &bias},
                     [xn, wn, bn, rows, in, out_dim](Node& self) {
                       if (auto* gx = grad_of(xn)) {
                         cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(rows), blas_int(in),
                                     blas_int(out_dim), 1.0, self.grad.data(), blas_int(out_dim),
                                     wn->data.data(), blas_int(out_dim), 1.0, gx->data(), blas_int(in));
                       }
                       if (auto* gw = grad_of(wn)) {
                         cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(in),
                                     blas_int(out_dim), blas_int(rows), 1.0, xn->data.data(), blas_int(in),
                                     self.grad.data(), blas_int(out_dim), 1.0, gw->data(),
                                     blas_int(out_dim));
                       }
                       if (auto* gb = grad_of(bn)) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           const double* g = self.grad.data() + r * out_dim;
                           for (std::size_t j = 0; j < out_dim; ++j) (*gb)[j] += g[j];
                         }
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const auto m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  auto an = a.node();
  return make_result({n, m}, std::move(out), {&a}, [an, m, n](Node& self) {
    auto& g = *grad_of(an);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto an = a.node();
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {&a}, [an](Node& self) {
    auto& g = *grad_of(an);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& self) {
    for (auto* g : {grad_of(an), grad_of(bn)}) {
      if (!g) continue;
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& self) {
    if (auto* g = grad_of(an))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_of(bn))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](Node& self) {
    if (auto* g = grad_of(an))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bn->data[i];
    if (auto* g = grad_of(bn))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * an->data[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {&a}, [an, factor](Node& self) {
    auto& g = *grad_of(an);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& row) {
  const auto n = x.shape().back();
  if (row.numel() != n) {
    throw DimensionError("add_rowwise: row " + shape_str(row.shape()) + " does not fit " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto r = row.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += r[i % n];
  auto xn = x.node(), rn = row.node();
  return make_result(x.shape(), std::move(out), {&x, &row}, [xn, rn, n](Node& self) {
    if (auto* g = grad_of(xn))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_of(rn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % n] += self.grad[i];
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const auto& shape = x.shape();
  const int rank = static_cast<int>(shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("softmax: axis out of range for " + shape_str(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < rank; ++i) inner *= shape[i];
  const std::size_t n = shape[axis];

  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = o * n * inner + q;
      double mx = -INFINITY;
      for (std::size_t i = 0; i < n; ++i) {
        const double v = in[base + i * inner];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, v);
      }
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(in[base + i * inner] - mx);
        out[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= total;
    }
  }
  auto xn = x.node();
  return make_result(shape, std::move(out), {&x}, [xn, outer, inner, n](Node& self) {
    auto& g = *grad_of(xn);
    const auto& s = self.data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t q = 0; q < inner; ++q) {
        const std::size_t base = o * n * inner + q;
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += self.grad[base + i * inner] * s[base + i * inner];
        for (std::size_t i = 0; i < n; ++i) {
          const auto k = base + i * inner;
          g[k] += s[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layernorm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not fit " + shape_str(x.shape()));
  }
  const auto rows = x.numel() / d;
  const auto in = x.data(), gm = gamma.data(), bt = beta.data();
  std::vector<double> out(in.size());
  // Saved for backward: normalized input and 1/sigma per row.
  auto xhat = std::make_shared<std::vector<double>>(in.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gm[j] * h + bt[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta},
                     [xn, gn, bn, xhat, inv_std, rows, d](Node& self) {
                       auto* gx = grad_of(xn);
                       auto* gg = grad_of(gn);
                       auto* gb = grad_of(bn);
                       std::vector<double> dh(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* dy = self.grad.data() + r * d;
                         const double* h = xhat->data() + r * d;
                         double mean_dh = 0.0, mean_dh_h = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           dh[j] = dy[j] * gn->data[j];
                           mean_dh += dh[j];
                           mean_dh_h += dh[j] * h[j];
                           if (gg) (*gg)[j] += dy[j] * h[j];
                           if (gb) (*gb)[j] += dy[j];
                         }
                         if (!gx) continue;
                         mean_dh /= static_cast<double>(d);
                         mean_dh_h /= static_cast<double>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           (*gx)[r * d + j] += (*inv_std)[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                         }
                       }
                     });
}

Tensor gelu(const Tensor& x) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = 0.5 * in[i] * (1.0 + std::erf(in[i] * std::numbers::sqrt2 / 2.0));
  }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {&x}, [xn](Node& self) {
    auto& g = *grad_of(xn);
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xn->data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_rows");
  const auto cols = x.dim(1);
  if (count == 0 || begin + count > x.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") outside " + shape_str(x.shape()));
  }
  const auto in = x.data();
  std::vector<double> out(in.begin() + begin * cols, in.begin() + (begin + count) * cols);
  auto xn = x.node();
  return make_result({count, cols}, std::move(out), {&x}, [xn, begin, cols](Node& self) {
    auto& g = *grad_of(xn);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * cols + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_cols");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (count == 0 || begin + count > cols) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") outside " + shape_str(x.shape()));
  }
  const auto in = x.data();
  std::vector<double> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(in.begin() + r * cols + begin, count, out.begin() + r * count);
  auto xn = x.node();
  return make_result({rows, count}, std::move(out), {&x}, [xn, rows, cols, begin, count](Node& self) {
    auto& g = *grad_of(xn);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < count; ++j) g[r * cols + begin + j] += self.grad[r * count + j];
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  const auto cols = parts.front().dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.dim(1) != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result_n({rows, cols}, std::move(out), parts, [nodes](Node& self) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      if (auto* g = grad_of(n))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offset + i];
      offset += n->data.size();
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const auto rows = parts.front().dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.dim(0) != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    cols += p.dim(1);
  }
  std::vector<double> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto w = p.dim(1);
    const auto src = p.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(src.begin() + r * w, w, out.begin() + r * cols + offset);
    offset += w;
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return make_result_n({rows, cols}, std::move(out), parts, [nodes, rows, cols](Node& self) {
    std::size_t off = 0;
    for (const auto& n : nodes) {
      const auto w = n->shape[1];
      if (auto* g = grad_of(n)) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < w; ++j) (*g)[r * w + j] += self.grad[r * cols + off + j];
      }
      off += w;
    }
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_matrix(x, "gather_rows");
  const auto rows = x.dim(0), cols = x.dim(1);
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  const auto in = x.data();
  std::vector<double> out(index.size() * cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw DimensionError("gather_rows: row " + std::to_string(index[i]) + " outside " +
                           shape_str(x.shape()));
    }
    std::copy_n(in.begin() + index[i] * cols, cols, out.begin() + i * cols);
  }
  auto xn = x.node();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result({index.size(), cols}, std::move(out), {&x}, [xn, idx, cols](Node& self) {
    auto& g = *grad_of(xn);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < cols; ++j) g[idx[i] * cols + j] += self.grad[i * cols + j];
  });
}

Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> index, std::size_t n_rows) {
  require_matrix(x, "scatter_rows");
  const auto cols = x.dim(1);
  if (index.size() != x.dim(0)) {
    throw DimensionError("scatter_rows: " + std::to_string(index.size()) + " indices for " +
                         shape_str(x.shape()));
  }
  std::unordered_set<std::size_t> seen;
  for (auto i : index) {
    if (i >= n_rows) {
      throw DimensionError("scatter_rows: row " + std::to_string(i) + " outside " + std::to_string(n_rows));
    }
    if (!seen.insert(i).second) throw ContractError("scatter_rows: duplicate row " + std::to_string(i));
  }
  const auto in = x.data();
  std::vector<double> out(n_rows * cols, 0.0);
  for (std::size_t i = 0; i < index.size(); ++i)
    std::copy_n(in.begin() + i * cols, cols, out.begin() + index[i] * cols);
  auto xn = x.node();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result({n_rows, cols}, std::move(out), {&x}, [xn, idx, cols](Node& self) {
    auto& g = *grad_of(xn);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += self.grad[idx[i] * cols + j];
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  auto xn = x.node();
  return make_result({1}, {total}, {&x}, [xn](Node& self) {
    auto& g = *grad_of(xn);
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor weighted_sse(const Tensor& pred, const Tensor& target, std::span<const double> weight) {
  require_same_shape(pred, target, "weighted_sse");
  if (weight.size() != pred.numel()) {
    throw DimensionError("weighted_sse: " + std::to_string(weight.size()) + " weights for " +
                         shape_str(pred.shape()));
  }
  const auto p = pred.data(), t = target.data();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double diff = p[i] - t[i];
    total += weight[i] * diff * diff;
  }
  auto pn = pred.node(), tn = target.node();
  std::vector<double> w(weight.begin(), weight.end());
  return make_result({1}, {total}, {&pred, &target}, [pn, tn, w](Node& self) {
    const double seed = self.grad[0];
    auto* gp = grad_of(pn);
    auto* gt = grad_of(tn);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = 2.0 * seed * w[i] * (pn->data[i] - tn->data[i]);
      if (gp) (*gp)[i] += g;
      if (gt) (*gt)[i] -= g;
    }
  });
}

}  // namespace imim::ops
