#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "hikfs/ndgrad/tensor.hpp"

namespace hikfs::nd {

namespace detail {

inline std::string mismatch(std::string_view op, const Shape& a, const Shape& b) {
  return std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b);
}

inline void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
  }
}

/// Rows/columns of a tensor viewed along its last axis (rank 1 is one row).
inline std::pair<std::size_t, std::size_t> row_view(std::string_view op, const Tensor& t) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw ShapeError(std::string(op) + ": expected rank 1 or 2, got shape " + shape_str(t.shape()));
}

inline std::vector<double>* grad_of(TensorImpl& out, std::size_t i) {
  auto& p = *out.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

inline const std::vector<double>& data_of(TensorImpl& out, std::size_t i) { return out.parents[i]->data; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and elementwise arithmetic

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) throw ShapeError(detail::mismatch("matmul", a.shape(), b.shape()));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  const auto& A = a.values();
  const auto& B = b.values();
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += av * B[p * m + j];
    }
  return make_result({n, m}, std::move(out), {a, b}, [n, k, m](TensorImpl& o) {
    const auto& A = detail::data_of(o, 0);
    const auto& B = detail::data_of(o, 1);
    const auto& G = o.grad;
    if (auto* gA = detail::grad_of(o, 0)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += G[i * m + j] * B[p * m + j];
          (*gA)[i * k + p] += s;
        }
    }
    if (auto* gB = detail::grad_of(o, 1)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          for (std::size_t j = 0; j < m; ++j) (*gB)[p * m + j] += av * G[i * m + j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t n = a.dim(0), m = a.dim(1);
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = a.values()[i * m + j];
  return make_result({m, n}, std::move(out), {a}, [n, m](TensorImpl& o) {
    auto* g = detail::grad_of(o, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) (*g)[i * m + j] += o.grad[j * n + i];
  });
}

namespace detail {
template <typename Fwd, typename DA, typename DB>
Tensor binary_same_shape(std::string_view op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  if (a.shape() != b.shape()) throw ShapeError(mismatch(op, a.shape(), b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.values()[i], b.values()[i]);
  return make_result(a.shape(), std::move(out), {a, b}, [da, db](TensorImpl& o) {
    const auto& A = data_of(o, 0);
    const auto& B = data_of(o, 1);
    if (auto* gA = grad_of(o, 0))
      for (std::size_t i = 0; i < A.size(); ++i) (*gA)[i] += o.grad[i] * da(A[i], B[i]);
    if (auto* gB = grad_of(o, 1))
      for (std::size_t i = 0; i < B.size(); ++i) (*gB)[i] += o.grad[i] * db(A[i], B[i]);
  });
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

/// x[n, m] + bias[m], broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  auto [n, m] = detail::row_view("add_bias", x);
  if (bias.rank() != 1 || bias.dim(0) != m) throw ShapeError(detail::mismatch("add_bias", x.shape(), bias.shape()));
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bias.values()[j];
  return make_result(x.shape(), std::move(out), {x, bias}, [n, m](TensorImpl& o) {
    if (auto* gx = detail::grad_of(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*gx)[i] += o.grad[i];
    if (auto* gb = detail::grad_of(o, 1))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gb)[j] += o.grad[i * m + j];
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (double& v : out) v *= c;
  return make_result(a.shape(), std::move(out), {a}, [c](TensorImpl& o) {
    auto* g = detail::grad_of(o, 0);
    for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += c * o.grad[i];
  });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(a.shape(), std::move(out), {a}, [](TensorImpl& o) {
    const auto& A = detail::data_of(o, 0);
    auto* g = detail::grad_of(o, 0);
    for (std::size_t i = 0; i < A.size(); ++i)
      if (A[i] > 0.0) (*g)[i] += o.grad[i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) throw ShapeError(detail::mismatch("reshape", a.shape(), shape));
  return make_result(std::move(shape), a.values(), {a}, [](TensorImpl& o) {
    auto* g = detail::grad_of(o, 0);
    for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions (fixed index order)

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_result({}, {s}, {a}, [](TensorImpl& o) {
    auto* g = detail::grad_of(o, 0);
    for (double& v : *g) v += o.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  const double n = static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_result({}, {s / n}, {a}, [n](TensorImpl& o) {
    auto* g = detail::grad_of(o, 0);
    for (double& v : *g) v += o.grad[0] / n;
  });
}

// ---------------------------------------------------------------------------
// Row-wise geometry

/// Normalizes each row (last axis) to unit L2 norm. A zero row has no
/// direction and is rejected.
inline Tensor l2_normalize(const Tensor& a) {
  auto [n, m] = detail::row_view("l2_normalize", a);
  std::vector<double> out(a.numel());
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += a.values()[i * m + j] * a.values()[i * m + j];
    const double norm = std::sqrt(s);
    if (!(norm > 0.0)) throw NumericError("l2_normalize: zero vector has no direction");
    norms[i] = norm;
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = a.values()[i * m + j] / norm;
  }
  return make_result(a.shape(), std::move(out), {a}, [n, m, norms = std::move(norms)](TensorImpl& o) {
    auto* g = detail::grad_of(o, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += o.grad[i * m + j] * o.data[i * m + j];
      for (std::size_t j = 0; j < m; ++j)
        (*g)[i * m + j] += (o.grad[i * m + j] - o.data[i * m + j] * dot) / norms[i];
    }
  });
}

/// Pairwise squared Euclidean distances between rows: out[i, j] = |a_i - b_j|^2.
inline Tensor sq_dist(const Tensor& a, const Tensor& b) {
  detail::require_rank("sq_dist", a, 2);
  detail::require_rank("sq_dist", b, 2);
  if (a.dim(1) != b.dim(1)) throw ShapeError(detail::mismatch("sq_dist", a.shape(), b.shape()));
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = a.values()[i * d + k] - b.values()[j * d + k];
        s += diff * diff;
      }
      out[i * m + j] = s;
    }
  return make_result({n, m}, std::move(out), {a, b}, [n, m, d](TensorImpl& o) {
    const auto& A = detail::data_of(o, 0);
    const auto& B = detail::data_of(o, 1);
    auto* gA = detail::grad_of(o, 0);
    auto* gB = detail::grad_of(o, 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double g = 2.0 * o.grad[i * m + j];
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = A[i * d + k] - B[j * d + k];
          if (gA) (*gA)[i * d + k] += g * diff;
          if (gB) (*gB)[j * d + k] -= g * diff;
        }
      }
  });
}

/// Pairwise Euclidean distances. The gradient at a zero distance is taken
/// as zero (the subgradient of the norm at the origin).
inline Tensor euclidean_dist(const Tensor& a, const Tensor& b) {
  detail::require_rank("euclidean_dist", a, 2);
  detail::require_rank("euclidean_dist", b, 2);
  if (a.dim(1) != b.dim(1)) throw ShapeError(detail::mismatch("euclidean_dist", a.shape(), b.shape()));
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = a.values()[i * d + k] - b.values()[j * d + k];
        s += diff * diff;
      }
      out[i * m + j] = std::sqrt(s);
    }
  return make_result({n, m}, std::move(out), {a, b}, [n, m, d](TensorImpl& o) {
    const auto& A = detail::data_of(o, 0);
    const auto& B = detail::data_of(o, 1);
    auto* gA = detail::grad_of(o, 0);
    auto* gB = detail::grad_of(o, 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double dist = o.data[i * m + j];
        if (dist == 0.0) continue;
        const double g = o.grad[i * m + j] / dist;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = A[i * d + k] - B[j * d + k];
          if (gA) (*gA)[i * d + k] += g * diff;
          if (gB) (*gB)[j * d + k] -= g * diff;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Softmax family. A mask entry of 1 keeps the logit; masked entries are
// excluded from both the max shift and the denominator and get exactly 0
// probability (and 0 in the log variant, where they carry no gradient).

using Mask = std::vector<std::uint8_t>;

namespace detail {

inline void check_mask(std::string_view op, const Tensor& x, const Mask& mask, std::size_t n, std::size_t m) {
  if (mask.size() != x.numel()) {
    throw ShapeError(std::string(op) + ": mask has " + std::to_string(mask.size()) + " entries for shape " +
                     shape_str(x.shape()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < m; ++j) any = any || mask[i * m + j];
    if (!any) throw ShapeError(std::string(op) + ": row " + std::to_string(i) + " is fully masked");
  }
}

// Returns per-row (max, log-sum-exp) over kept entries.
inline std::vector<double> row_lse(const std::vector<double>& x, const Mask* mask, std::size_t n, std::size_t m) {
  std::vector<double> lse(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (!mask || (*mask)[i * m + j]) mx = std::max(mx, x[i * m + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (!mask || (*mask)[i * m + j]) s += std::exp(x[i * m + j] - mx);
    lse[i] = mx + std::log(s);
  }
  return lse;
}

inline void check_finite(std::string_view op, const Tensor& x) {
  for (double v : x.values())
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
}

inline Tensor softmax_impl(std::string_view op, const Tensor& x, const Mask* mask) {
  auto [n, m] = row_view(op, x);
  check_finite(op, x);
  if (mask) check_mask(op, x, *mask, n, m);
  const auto lse = row_lse(x.values(), mask, n, m);
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      if (!mask || (*mask)[i * m + j]) out[i * m + j] = std::exp(x.values()[i * m + j] - lse[i]);
  return make_result(x.shape(), std::move(out), {x}, [n = n, m = m](TensorImpl& o) {
    auto* g = grad_of(o, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += o.grad[i * m + j] * o.data[i * m + j];
      for (std::size_t j = 0; j < m; ++j) (*g)[i * m + j] += o.data[i * m + j] * (o.grad[i * m + j] - dot);
    }
  });
}

inline Tensor log_softmax_impl(std::string_view op, const Tensor& x, const Mask* mask) {
  auto [n, m] = row_view(op, x);
  check_finite(op, x);
  if (mask) check_mask(op, x, *mask, n, m);
  const auto lse = row_lse(x.values(), mask, n, m);
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      if (!mask || (*mask)[i * m + j]) out[i * m + j] = x.values()[i * m + j] - lse[i];
  Mask kept = mask ? *mask : Mask(x.numel(), 1);
  return make_result(x.shape(), std::move(out), {x}, [n = n, m = m, kept = std::move(kept)](TensorImpl& o) {
    auto* g = grad_of(o, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < m; ++j)
        if (kept[i * m + j]) gs += o.grad[i * m + j];
      for (std::size_t j = 0; j < m; ++j)
        if (kept[i * m + j]) (*g)[i * m + j] += o.grad[i * m + j] - std::exp(o.data[i * m + j]) * gs;
    }
  });
}

}  // namespace detail

inline Tensor softmax(const Tensor& x) { return detail::softmax_impl("softmax", x, nullptr); }
inline Tensor log_softmax(const Tensor& x) { return detail::log_softmax_impl("log_softmax", x, nullptr); }
inline Tensor masked_softmax(const Tensor& x, const Mask& keep) {
  return detail::softmax_impl("masked_softmax", x, &keep);
}
inline Tensor masked_log_softmax(const Tensor& x, const Mask& keep) {
  return detail::log_softmax_impl("masked_log_softmax", x, &keep);
}

// ---------------------------------------------------------------------------
// Indexing

/// out[i] = x[i, index[i]].
inline Tensor gather(const Tensor& x, const std::vector<std::size_t>& index) {
  detail::require_rank("gather", x, 2);
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (index.size() != n) {
    throw ShapeError("gather: " + std::to_string(index.size()) + " indices for shape " + shape_str(x.shape()));
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] >= m) throw ShapeError("gather: index " + std::to_string(index[i]) + " out of range");
    out[i] = x.values()[i * m + index[i]];
  }
  return make_result({n}, std::move(out), {x}, [m, index](TensorImpl& o) {
    auto* g = detail::grad_of(o, 0);
    for (std::size_t i = 0; i < index.size(); ++i) (*g)[i * m + index[i]] += o.grad[i];
  });
}

/// Mean negative log-likelihood of `targets` under row log-probabilities.
inline Tensor nll(const Tensor& log_probs, const std::vector<std::size_t>& targets) {
  return neg(mean(gather(log_probs, targets)));
}

inline Tensor select_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  detail::require_rank("select_rows", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(rows.size() * d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) throw ShapeError("select_rows: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(rows[r] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return make_result({rows.size(), d}, std::move(out), {x}, [d, rows](TensorImpl& o) {
    auto* g = detail::grad_of(o, 0);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t k = 0; k < d; ++k) (*g)[rows[r] * d + k] += o.grad[r * d + k];
  });
}

inline Tensor select_cols(const Tensor& x, const std::vector<std::size_t>& cols) {
  detail::require_rank("select_cols", x, 2);
  const std::size_t n = x.dim(0), m = x.dim(1), k = cols.size();
  std::vector<double> out(n * k);
  for (std::size_t c = 0; c < k; ++c)
    if (cols[c] >= m) throw ShapeError("select_cols: column " + std::to_string(cols[c]) + " out of range");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) out[i * k + c] = x.values()[i * m + cols[c]];
  return make_result({n, k}, std::move(out), {x}, [n, m, cols](TensorImpl& o) {
    auto* g = detail::grad_of(o, 0);
    const std::size_t k = cols.size();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < k; ++c) (*g)[i * m + cols[c]] += o.grad[i * k + c];
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts.front().rank() == 2 ? parts.front().dim(1) : 0;
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    detail::require_rank("concat_rows", p, 2);
    if (p.dim(1) != d) throw ShapeError(detail::mismatch("concat_rows", parts.front().shape(), p.shape()));
    offsets.push_back(rows * d);
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * d);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return make_result({rows, d}, std::move(out), parts, [offsets](TensorImpl& o) {
    for (std::size_t i = 0; i < o.parents.size(); ++i) {
      auto* g = detail::grad_of(o, i);
      if (!g) continue;
      for (std::size_t k = 0; k < g->size(); ++k) (*g)[k] += o.grad[offsets[i] + k];
    }
  });
}

/// Mean of the listed rows for each group: out[s] = mean_{r in groups[s]} x[r].
inline Tensor mean_rows_grouped(const Tensor& x, const std::vector<std::vector<std::size_t>>& groups) {
  detail::require_rank("mean_rows_grouped", x, 2);
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(groups.size() * d, 0.0);
  for (std::size_t s = 0; s < groups.size(); ++s) {
    if (groups[s].empty()) throw ShapeError("mean_rows_grouped: group " + std::to_string(s) + " is empty");
    for (std::size_t r : groups[s]) {
      if (r >= n) throw ShapeError("mean_rows_grouped: row " + std::to_string(r) + " out of range");
      for (std::size_t k = 0; k < d; ++k) out[s * d + k] += x.values()[r * d + k];
    }
    for (std::size_t k = 0; k < d; ++k) out[s * d + k] /= static_cast<double>(groups[s].size());
  }
  return make_result({groups.size(), d}, std::move(out), {x}, [d, groups](TensorImpl& o) {
    auto* g = detail::grad_of(o, 0);
    for (std::size_t s = 0; s < groups.size(); ++s) {
      const double w = 1.0 / static_cast<double>(groups[s].size());
      for (std::size_t r : groups[s])
        for (std::size_t k = 0; k < d; ++k) (*g)[r * d + k] += w * o.grad[s * d + k];
    }
  });
}

/// Indices of the K largest entries of scores[row, j] over j with owner[j] ==
/// group, ordered by descending score; ties go to the lower index.
inline std::vector<std::size_t> topk_in_group(std::span<const double> row, const std::vector<std::size_t>& owner,
                                              std::size_t group, std::size_t k) {
  std::vector<std::size_t> members;
  for (std::size_t j = 0; j < owner.size(); ++j)
    if (owner[j] == group) members.push_back(j);
  const std::size_t take = std::min(k, members.size());
  std::partial_sort(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take), members.end(),
                    [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
  members.resize(take);
  return members;
}

/// For each row, sums the K highest scores among the columns owned by each
/// group: out[i, c] = sum of top-K { scores[i, j] : owner[j] == c }. Groups
/// with fewer than K members sum all of them; empty groups are an error.
inline Tensor group_topk_sum(const Tensor& scores, const std::vector<std::size_t>& owner, std::size_t groups,
                             std::size_t k) {
  detail::require_rank("group_topk_sum", scores, 2);
  const std::size_t n = scores.dim(0), s = scores.dim(1);
  if (owner.size() != s) throw ShapeError("group_topk_sum: owner list does not match score columns");
  if (k == 0) throw ShapeError("group_topk_sum: K must be at least 1");
  std::vector<std::vector<std::size_t>> members(groups);
  for (std::size_t j = 0; j < s; ++j) {
    if (owner[j] >= groups) throw ShapeError("group_topk_sum: owner id out of range");
    members[owner[j]].push_back(j);
  }
  for (std::size_t c = 0; c < groups; ++c)
    if (members[c].empty()) throw ShapeError("group_topk_sum: group " + std::to_string(c) + " has no entries");

  std::vector<double> out(n * groups, 0.0);
  std::vector<std::size_t> picked;  // flattened [n][groups] lists, each prefixed by count
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = scores.values().data() + i * s;
    for (std::size_t c = 0; c < groups; ++c) {
      order = members[c];
      const std::size_t take = std::min(k, order.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                        [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
      double total = 0.0;
      picked.push_back(take);
      for (std::size_t t = 0; t < take; ++t) {
        total += row[order[t]];
        picked.push_back(order[t]);
      }
      out[i * groups + c] = total;
    }
  }
  return make_result({n, groups}, std::move(out), {scores}, [n, s, groups, picked](TensorImpl& o) {
    auto* g = detail::grad_of(o, 0);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < groups; ++c) {
        const std::size_t take = picked[pos++];
        for (std::size_t t = 0; t < take; ++t) (*g)[i * s + picked[pos++]] += o.grad[i * groups + c];
      }
  });
}

// ---------------------------------------------------------------------------
// Convolutional building blocks (NCHW)

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opt = {}) {
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", weight, 4);
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
  if (weight.dim(1) != C) throw ShapeError(detail::mismatch("conv2d", x.shape(), weight.shape()));
  if (bias.rank() != 1 || bias.dim(0) != O) throw ShapeError(detail::mismatch("conv2d", weight.shape(), bias.shape()));
  if (opt.stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (H + 2 * opt.padding < KH || W + 2 * opt.padding < KW) {
    throw ShapeError(detail::mismatch("conv2d", x.shape(), weight.shape()));
  }
  const std::size_t HO = (H + 2 * opt.padding - KH) / opt.stride + 1;
  const std::size_t WO = (W + 2 * opt.padding - KW) / opt.stride + 1;
  const auto pad = static_cast<std::ptrdiff_t>(opt.padding);
  const auto stride = static_cast<std::ptrdiff_t>(opt.stride);

  // Visits every (output, input, weight) triple that contributes.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t oy = 0; oy < HO; ++oy)
          for (std::size_t ox = 0; ox < WO; ++ox) {
            const std::size_t out_idx = ((b * O + o) * HO + oy) * WO + ox;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t ky = 0; ky < KH; ++ky) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * stride + static_cast<std::ptrdiff_t>(ky) - pad;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t kx = 0; kx < KW; ++kx) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(ox) * stride + static_cast<std::ptrdiff_t>(kx) - pad;
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                  const std::size_t in_idx = ((b * C + c) * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix);
                  const std::size_t w_idx = ((o * C + c) * KH + ky) * KW + kx;
                  fn(out_idx, in_idx, w_idx);
                }
              }
          }
  };

  std::vector<double> out(B * O * HO * WO);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((b * O + o) * HO * WO), HO * WO, bias.values()[o]);
  const auto& X = x.values();
  const auto& Wt = weight.values();
  for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) { out[oi] += X[ii] * Wt[wi]; });

  return make_result({B, O, HO, WO}, std::move(out), {x, weight, bias},
                     [for_each_tap, B, O, HO, WO](TensorImpl& o) {
                       const auto& X = detail::data_of(o, 0);
                       const auto& Wt = detail::data_of(o, 1);
                       auto* gx = detail::grad_of(o, 0);
                       auto* gw = detail::grad_of(o, 1);
                       auto* gb = detail::grad_of(o, 2);
                       const auto& G = o.grad;
                       if (gx || gw) {
                         for_each_tap([&](std::size_t oi, std::size_t ii, std::size_t wi) {
                           if (gx) (*gx)[ii] += G[oi] * Wt[wi];
                           if (gw) (*gw)[wi] += G[oi] * X[ii];
                         });
                       }
                       if (gb) {
                         for (std::size_t b = 0; b < B; ++b)
                           for (std::size_t c = 0; c < O; ++c)
                             for (std::size_t p = 0; p < HO * WO; ++p) (*gb)[c] += G[(b * O + c) * HO * WO + p];
                       }
                     });
}

/// Max pooling with window `k` and stride `stride`, floor output size.
/// Ties select the first position in scan order.
inline Tensor max_pool2d(const Tensor& x, std::size_t k = 2, std::size_t stride = 2) {
  detail::require_rank("max_pool2d", x, 4);
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k == 0 || stride == 0 || H < k || W < k) {
    throw ShapeError("max_pool2d: window " + std::to_string(k) + " does not fit shape " + shape_str(x.shape()));
  }
  const std::size_t HO = (H - k) / stride + 1, WO = (W - k) / stride + 1;
  std::vector<double> out(B * C * HO * WO);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t oy = 0; oy < HO; ++oy)
      for (std::size_t ox = 0; ox < WO; ++ox) {
        std::size_t best = bc * H * W + (oy * stride) * W + ox * stride;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t idx = bc * H * W + (oy * stride + ky) * W + ox * stride + kx;
            if (x.values()[idx] > x.values()[best]) best = idx;
          }
        const std::size_t oi = (bc * HO + oy) * WO + ox;
        out[oi] = x.values()[best];
        argmax[oi] = best;
      }
  return make_result({B, C, HO, WO}, std::move(out), {x}, [argmax = std::move(argmax)](TensorImpl& o) {
    auto* g = detail::grad_of(o, 0);
    for (std::size_t i = 0; i < argmax.size(); ++i) (*g)[argmax[i]] += o.grad[i];
  });
}

/// Group normalization over [N, C] or [N, C, H, W]. Channel c belongs to
/// group floor(c * groups / C), so groups need not divide C evenly.
inline Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("group_norm: expected rank 2 or 4, got shape " + shape_str(x.shape()));
  }
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t S = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (groups == 0 || groups > C) throw ShapeError("group_norm: invalid group count " + std::to_string(groups));
  if (gamma.rank() != 1 || gamma.dim(0) != C) throw ShapeError(detail::mismatch("group_norm", x.shape(), gamma.shape()));
  if (beta.rank() != 1 || beta.dim(0) != C) throw ShapeError(detail::mismatch("group_norm", x.shape(), beta.shape()));

  std::vector<std::size_t> group_of(C);
  std::vector<std::size_t> group_size(groups, 0);
  for (std::size_t c = 0; c < C; ++c) {
    group_of[c] = c * groups / C;
    group_size[group_of[c]] += S;
  }

  const auto& X = x.values();
  std::vector<double> xhat(X.size());
  std::vector<double> inv_std(N * groups);
  std::vector<double> out(X.size());
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<double> mu(groups, 0.0), var(groups, 0.0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) mu[group_of[c]] += X[(n * C + c) * S + s];
    for (std::size_t g = 0; g < groups; ++g) mu[g] /= static_cast<double>(group_size[g]);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) {
        const double diff = X[(n * C + c) * S + s] - mu[group_of[c]];
        var[group_of[c]] += diff * diff;
      }
    for (std::size_t g = 0; g < groups; ++g)
      inv_std[n * groups + g] = 1.0 / std::sqrt(var[g] / static_cast<double>(group_size[g]) + eps);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = (n * C + c) * S + s;
        xhat[i] = (X[i] - mu[group_of[c]]) * inv_std[n * groups + group_of[c]];
        out[i] = gamma.values()[c] * xhat[i] + beta.values()[c];
      }
  }

  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [N, C, S, groups, group_of, group_size, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](TensorImpl& o) {
                       const auto& gam = detail::data_of(o, 1);
                       auto* gx = detail::grad_of(o, 0);
                       auto* ggamma = detail::grad_of(o, 1);
                       auto* gbeta = detail::grad_of(o, 2);
                       const auto& G = o.grad;
                       for (std::size_t n = 0; n < N; ++n) {
                         std::vector<double> sum_g(groups, 0.0), sum_gx(groups, 0.0);
                         for (std::size_t c = 0; c < C; ++c)
                           for (std::size_t s = 0; s < S; ++s) {
                             const std::size_t i = (n * C + c) * S + s;
                             const double gh = G[i] * gam[c];
                             sum_g[group_of[c]] += gh;
                             sum_gx[group_of[c]] += gh * xhat[i];
                             if (ggamma) (*ggamma)[c] += G[i] * xhat[i];
                             if (gbeta) (*gbeta)[c] += G[i];
                           }
                         if (!gx) continue;
                         for (std::size_t c = 0; c < C; ++c)
                           for (std::size_t s = 0; s < S; ++s) {
                             const std::size_t i = (n * C + c) * S + s;
                             const std::size_t g = group_of[c];
                             const double E = static_cast<double>(group_size[g]);
                             const double gh = G[i] * gam[c];
                             (*gx)[i] += inv_std[n * groups + g] / E * (E * gh - sum_g[g] - xhat[i] * sum_gx[g]);
                           }
                       }
                     });
}

}  // namespace hikfs::nd
