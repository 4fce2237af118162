#pragma once

// Differentiable operations over Tensor<Scalar>. Every op checks shapes,
// builds its result eagerly and records a backward rule when an input
// tracks gradients.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "oatr/tensor.hpp"

namespace oatr {

namespace detail {

inline void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) {
    throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " + shape_string(s));
  }
}

inline Index normalize_axis(Index axis, Index rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  }
  return axis;
}

/// Calls fn(base, stride, n) once per 1-d lane along `axis` of a row-major buffer.
template <typename Fn>
void for_each_lane(const Shape& shape, Index axis, Fn&& fn) {
  Index outer = 1;
  Index inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) {
    inner *= shape[static_cast<std::size_t>(i)];
  }
  const Index n = shape[static_cast<std::size_t>(axis)];
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) fn(o * n * inner + in, inner, n);
  }
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  using Node = detail::Node<Scalar>;
  if (a.shape() == b.shape()) {
    return Tensor<Scalar>::make(
        a.shape(), a.value() + b.value(), {a, b},
        [](Node& self) {
          detail::accumulate(*self.parents[0], self.grad);
          detail::accumulate(*self.parents[1], self.grad);
        },
        "add");
  }
  // Row-vector broadcast: b is [n] or [1, n] and a has n columns.
  const bool row_vector = (b.rank() == 1 || (b.rank() == 2 && b.extent(0) == 1));
  if (row_vector && a.rank() >= 1 && b.cols() == a.cols()) {
    typename Tensor<Scalar>::Mat out = a.value().rowwise() + b.value().row(0);
    return Tensor<Scalar>::make(
        a.shape(), std::move(out), {a, b},
        [](Node& self) {
          detail::accumulate(*self.parents[0], self.grad);
          detail::accumulate(*self.parents[1], self.grad.colwise().sum());
        },
        "add");
  }
  throw DimensionError("add: shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()) + " are not compatible");
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  using Node = detail::Node<Scalar>;
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
  return Tensor<Scalar>::make(
      a.shape(), a.value() - b.value(), {a, b},
      [](Node& self) {
        detail::accumulate(*self.parents[0], self.grad);
        detail::accumulate(*self.parents[1], -self.grad);
      },
      "sub");
}

/// Elementwise product.
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  using Node = detail::Node<Scalar>;
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
  return Tensor<Scalar>::make(
      a.shape(), a.value().cwiseProduct(b.value()), {a, b},
      [](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        detail::accumulate(pa, self.grad.cwiseProduct(pb.value));
        detail::accumulate(pb, self.grad.cwiseProduct(pa.value));
      },
      "mul");
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  using Node = detail::Node<Scalar>;
  return Tensor<Scalar>::make(
      a.shape(), a.value() * factor, {a},
      [factor](Node& self) { detail::accumulate(*self.parents[0], self.grad * factor); }, "scale");
}

/// a * s where s is a scalar tensor; gradient flows to both.
template <typename Scalar>
Tensor<Scalar> scale_by(const Tensor<Scalar>& a, const Tensor<Scalar>& s) {
  using Node = detail::Node<Scalar>;
  if (s.size() != 1) {
    throw DimensionError("scale_by: factor must be a scalar, got " + shape_string(s.shape()));
  }
  return Tensor<Scalar>::make(
      a.shape(), a.value() * s.item(), {a, s},
      [](Node& self) {
        auto& pa = *self.parents[0];
        auto& ps = *self.parents[1];
        detail::accumulate(pa, self.grad * ps.value(0, 0));
        typename Tensor<Scalar>::Mat gs(1, 1);
        gs(0, 0) = self.grad.cwiseProduct(pa.value).sum();
        detail::accumulate(ps, gs);
      },
      "scale_by");
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  using Node = detail::Node<Scalar>;
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                         shape_string(b.shape()));
  }
  typename Tensor<Scalar>::Mat out = a.value() * b.value();
  return Tensor<Scalar>::make(
      {a.extent(0), b.extent(1)}, std::move(out), {a, b},
      [](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) detail::accumulate(pa, self.grad * pb.value.transpose());
        if (pb.requires_grad) detail::accumulate(pb, pa.value.transpose() * self.grad);
      },
      "matmul");
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  using Node = detail::Node<Scalar>;
  detail::require_rank2(a.shape(), "transpose");
  typename Tensor<Scalar>::Mat out = a.value().transpose();
  return Tensor<Scalar>::make(
      {a.extent(1), a.extent(0)}, std::move(out), {a},
      [](Node& self) { detail::accumulate(*self.parents[0], self.grad.transpose()); },
      "transpose");
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape) {
  using Node = detail::Node<Scalar>;
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                         shape_string(shape));
  }
  auto [rows, cols] = storage_dims(shape);
  typename Tensor<Scalar>::Mat out =
      Eigen::Map<const typename Tensor<Scalar>::Mat>(a.data(), rows, cols);
  return Tensor<Scalar>::make(
      std::move(shape), std::move(out), {a},
      [](Node& self) {
        auto& p = *self.parents[0];
        detail::accumulate(p, Eigen::Map<const typename Tensor<Scalar>::Mat>(
                                  self.grad.data(), p.value.rows(), p.value.cols()));
      },
      "reshape");
}

/// Concatenation of rank-2 tensors along axis 0 (rows) or 1 (columns).
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis) {
  using Node = detail::Node<Scalar>;
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis != 0 && axis != 1) throw DimensionError("concat: axis must be 0 or 1");
  Index rows = 0;
  Index cols = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p.shape(), "concat");
    const Index other = axis == 0 ? p.extent(1) : p.extent(0);
    const Index ref = axis == 0 ? parts.front().extent(1) : parts.front().extent(0);
    if (other != ref) {
      throw DimensionError("concat: " + shape_string(p.shape()) + " does not line up with " +
                           shape_string(parts.front().shape()) + " along axis " +
                           std::to_string(axis));
    }
    if (axis == 0) {
      rows += p.extent(0);
      cols = p.extent(1);
    } else {
      cols += p.extent(1);
      rows = p.extent(0);
    }
  }
  typename Tensor<Scalar>::Mat out(rows, cols);
  Index offset = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      out.middleRows(offset, p.rows()) = p.value();
      offset += p.rows();
    } else {
      out.middleCols(offset, p.cols()) = p.value();
      offset += p.cols();
    }
  }
  return Tensor<Scalar>::make(
      {rows, cols}, std::move(out), parts,
      [axis](Node& self) {
        Index off = 0;
        for (auto& parent : self.parents) {
          auto& p = *parent;
          if (axis == 0) {
            if (p.requires_grad) detail::accumulate(p, self.grad.middleRows(off, p.value.rows()));
            off += p.value.rows();
          } else {
            if (p.requires_grad) detail::accumulate(p, self.grad.middleCols(off, p.value.cols()));
            off += p.value.cols();
          }
        }
      },
      "concat");
}

/// Rectangular block of a rank-2 tensor.
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& a, Index row, Index num_rows, Index col,
                     Index num_cols) {
  using Node = detail::Node<Scalar>;
  detail::require_rank2(a.shape(), "slice");
  if (row < 0 || col < 0 || num_rows < 0 || num_cols < 0 || row + num_rows > a.extent(0) ||
      col + num_cols > a.extent(1)) {
    throw DimensionError("slice: block (" + std::to_string(row) + ", " + std::to_string(col) +
                         ") + " + std::to_string(num_rows) + "x" + std::to_string(num_cols) +
                         " exceeds " + shape_string(a.shape()));
  }
  typename Tensor<Scalar>::Mat out = a.value().block(row, col, num_rows, num_cols);
  return Tensor<Scalar>::make(
      {num_rows, num_cols}, std::move(out), {a},
      [row, col](Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.size() == 0) p.grad = Tensor<Scalar>::Mat::Zero(p.value.rows(), p.value.cols());
        p.grad.block(row, col, self.grad.rows(), self.grad.cols()) += self.grad;
      },
      "slice");
}

/// Embedding lookup: rows of `table` selected by `indices`.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& table, std::span<const Index> indices) {
  using Node = detail::Node<Scalar>;
  detail::require_rank2(table.shape(), "gather_rows");
  const Index n = static_cast<Index>(indices.size());
  typename Tensor<Scalar>::Mat out(n, table.cols());
  for (Index i = 0; i < n; ++i) {
    const Index r = indices[static_cast<std::size_t>(i)];
    if (r < 0 || r >= table.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(r) + " outside table " +
                           shape_string(table.shape()));
    }
    out.row(i) = table.value().row(r);
  }
  std::vector<Index> idx(indices.begin(), indices.end());
  return Tensor<Scalar>::make(
      {n, table.cols()}, std::move(out), {table},
      [idx = std::move(idx)](Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        if (p.grad.size() == 0) p.grad = Tensor<Scalar>::Mat::Zero(p.value.rows(), p.value.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          p.grad.row(idx[i]) += self.grad.row(static_cast<Index>(i));
        }
      },
      "gather_rows");
}

/// Per-row element x[i, cols[i]] as a rank-1 tensor.
template <typename Scalar>
Tensor<Scalar> pick(const Tensor<Scalar>& a, std::span<const Index> cols) {
  using Node = detail::Node<Scalar>;
  detail::require_rank2(a.shape(), "pick");
  if (static_cast<Index>(cols.size()) != a.rows()) {
    throw DimensionError("pick: " + std::to_string(cols.size()) + " indices for " +
                         shape_string(a.shape()));
  }
  typename Tensor<Scalar>::Mat out(1, a.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    const Index c = cols[static_cast<std::size_t>(i)];
    if (c < 0 || c >= a.cols()) {
      throw DimensionError("pick: column " + std::to_string(c) + " outside " +
                           shape_string(a.shape()));
    }
    out(0, i) = a.value()(i, c);
  }
  std::vector<Index> idx(cols.begin(), cols.end());
  return Tensor<Scalar>::make(
      {a.rows()}, std::move(out), {a},
      [idx = std::move(idx)](Node& self) {
        auto& p = *self.parents[0];
        typename Tensor<Scalar>::Mat g = Tensor<Scalar>::Mat::Zero(p.value.rows(), p.value.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          g(static_cast<Index>(i), idx[i]) = self.grad(0, static_cast<Index>(i));
        }
        detail::accumulate(p, g);
      },
      "pick");
}

/// Sum of all elements; sequential accumulation in storage order.
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  using Node = detail::Node<Scalar>;
  Scalar total = 0;
  const Scalar* d = a.data();
  for (Index i = 0; i < a.size(); ++i) total += d[i];
  typename Tensor<Scalar>::Mat out(1, 1);
  out(0, 0) = total;
  return Tensor<Scalar>::make(
      {}, std::move(out), {a},
      [](Node& self) {
        auto& p = *self.parents[0];
        detail::accumulate(
            p, Tensor<Scalar>::Mat::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0)));
      },
      "sum");
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  if (a.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.size()));
}

/// Column-wise mean of a rank-2 tensor, shape [1, cols].
template <typename Scalar>
Tensor<Scalar> mean_rows(const Tensor<Scalar>& a) {
  using Node = detail::Node<Scalar>;
  detail::require_rank2(a.shape(), "mean_rows");
  if (a.rows() == 0) throw DimensionError("mean_rows: no rows");
  const Scalar inv = Scalar(1) / static_cast<Scalar>(a.rows());
  typename Tensor<Scalar>::Mat out = Tensor<Scalar>::Mat::Zero(1, a.cols());
  for (Index r = 0; r < a.rows(); ++r) out += a.value().row(r);
  out *= inv;
  return Tensor<Scalar>::make(
      {1, a.cols()}, std::move(out), {a},
      [inv](Node& self) {
        auto& p = *self.parents[0];
        typename Tensor<Scalar>::Mat g = self.grad.row(0).replicate(p.value.rows(), 1) * inv;
        detail::accumulate(p, g);
      },
      "mean_rows");
}

/// Exact (erf) GELU.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& a) {
  using Node = detail::Node<Scalar>;
  const Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  typename Tensor<Scalar>::Mat out = a.value().unaryExpr(
      [inv_sqrt2](Scalar x) { return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2)); });
  return Tensor<Scalar>::make(
      a.shape(), std::move(out), {a},
      [inv_sqrt2](Node& self) {
        auto& p = *self.parents[0];
        const Scalar inv_sqrt_2pi = Scalar(0.39894228040143267794);
        typename Tensor<Scalar>::Mat d = p.value.unaryExpr([&](Scalar x) {
          return Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2)) +
                 x * inv_sqrt_2pi * std::exp(Scalar(-0.5) * x * x);
        });
        detail::accumulate(p, self.grad.cwiseProduct(d));
      },
      "gelu");
}

/// Normalization over the last axis followed by a per-feature affine map.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  using Node = detail::Node<Scalar>;
  using Mat = typename Tensor<Scalar>::Mat;
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError("layer_norm: zero-length last axis in " + shape_string(x.shape()));
  }
  if (!(eps > 0)) throw InputError("layer_norm: eps must be positive");
  const Index n = x.cols();
  if (gain.size() != n || bias.size() != n || gain.rows() != 1 || bias.rows() != 1) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " do not match last axis of " +
                         shape_string(x.shape()));
  }
  const Index rows = x.rows();
  Mat normalized(rows, n);
  Vector<Scalar> inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const auto row = x.value().row(r);
    const Scalar mu = row.sum() / static_cast<Scalar>(n);
    const Scalar var = (row.array() - mu).square().sum() / static_cast<Scalar>(n);
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    normalized.row(r) = (row.array() - mu) * inv_std(r);
  }
  Mat out = (normalized.array().rowwise() * gain.value().row(0).array()).rowwise() +
            bias.value().row(0).array();
  return Tensor<Scalar>::make(
      x.shape(), std::move(out), {x, gain, bias},
      [normalized = std::move(normalized), inv_std = std::move(inv_std), n](Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.requires_grad) detail::accumulate(pg, self.grad.cwiseProduct(normalized).colwise().sum());
        if (pb.requires_grad) detail::accumulate(pb, self.grad.colwise().sum());
        if (px.requires_grad) {
          Mat gx(self.grad.rows(), n);
          const auto g_row = pg.value.row(0).array();
          for (Index r = 0; r < self.grad.rows(); ++r) {
            const auto gh = (self.grad.row(r).array() * g_row).eval();
            const auto xh = normalized.row(r).array();
            const Scalar mean_gh = gh.sum() / static_cast<Scalar>(n);
            const Scalar mean_ghx = (gh * xh).sum() / static_cast<Scalar>(n);
            gx.row(r) = (inv_std(r) * (gh - mean_gh - xh * mean_ghx)).matrix();
          }
          detail::accumulate(px, gx);
        }
      },
      "layer_norm");
}

/// Softmax along `axis`, stabilized by subtracting the lane maximum.
/// Entries equal to -inf receive zero weight.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis = -1) {
  using Node = detail::Node<Scalar>;
  using Mat = typename Tensor<Scalar>::Mat;
  if (x.rank() == 0) throw DimensionError("softmax: scalar input");
  axis = detail::normalize_axis(axis, x.rank(), "softmax");
  Mat out(x.rows(), x.cols());
  const Scalar* in = x.data();
  Scalar* o = out.data();
  detail::for_each_lane(x.shape(), axis, [&](Index base, Index stride, Index n) {
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (Index i = 0; i < n; ++i) m = std::max(m, in[base + i * stride]);
    Scalar total = 0;
    for (Index i = 0; i < n; ++i) {
      const Scalar e = std::exp(in[base + i * stride] - m);
      o[base + i * stride] = e;
      total += e;
    }
    for (Index i = 0; i < n; ++i) o[base + i * stride] /= total;
  });
  return Tensor<Scalar>::make(
      x.shape(), std::move(out), {x},
      [axis](Node& self) {
        auto& p = *self.parents[0];
        Mat gx(self.value.rows(), self.value.cols());
        const Scalar* y = self.value.data();
        const Scalar* g = self.grad.data();
        Scalar* d = gx.data();
        detail::for_each_lane(self.shape, axis, [&](Index base, Index stride, Index n) {
          Scalar dot = 0;
          for (Index i = 0; i < n; ++i) dot += g[base + i * stride] * y[base + i * stride];
          for (Index i = 0; i < n; ++i) {
            d[base + i * stride] = y[base + i * stride] * (g[base + i * stride] - dot);
          }
        });
        detail::accumulate(p, gx);
      },
      "softmax");
}

template <typename Scalar>
Tensor<Scalar> log_softmax(const Tensor<Scalar>& x, Index axis = -1) {
  using Node = detail::Node<Scalar>;
  using Mat = typename Tensor<Scalar>::Mat;
  if (x.rank() == 0) throw DimensionError("log_softmax: scalar input");
  axis = detail::normalize_axis(axis, x.rank(), "log_softmax");
  Mat out(x.rows(), x.cols());
  const Scalar* in = x.data();
  Scalar* o = out.data();
  detail::for_each_lane(x.shape(), axis, [&](Index base, Index stride, Index n) {
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (Index i = 0; i < n; ++i) m = std::max(m, in[base + i * stride]);
    Scalar total = 0;
    for (Index i = 0; i < n; ++i) total += std::exp(in[base + i * stride] - m);
    const Scalar lse = m + std::log(total);
    for (Index i = 0; i < n; ++i) o[base + i * stride] = in[base + i * stride] - lse;
  });
  return Tensor<Scalar>::make(
      x.shape(), std::move(out), {x},
      [axis](Node& self) {
        auto& p = *self.parents[0];
        Mat gx(self.value.rows(), self.value.cols());
        const Scalar* y = self.value.data();
        const Scalar* g = self.grad.data();
        Scalar* d = gx.data();
        detail::for_each_lane(self.shape, axis, [&](Index base, Index stride, Index n) {
          Scalar gsum = 0;
          for (Index i = 0; i < n; ++i) gsum += g[base + i * stride];
          for (Index i = 0; i < n; ++i) {
            d[base + i * stride] = g[base + i * stride] - std::exp(y[base + i * stride]) * gsum;
          }
        });
        detail::accumulate(p, gx);
      },
      "log_softmax");
}

/// Scales each row of a rank-2 tensor to unit Euclidean norm.
template <typename Scalar>
Tensor<Scalar> l2_normalize(const Tensor<Scalar>& x) {
  using Node = detail::Node<Scalar>;
  using Mat = typename Tensor<Scalar>::Mat;
  detail::require_rank2(x.shape(), "l2_normalize");
  Vector<Scalar> norms(x.rows());
  Mat out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    norms(r) = x.value().row(r).norm();
    if (!(norms(r) > 0)) throw InputError("l2_normalize: row " + std::to_string(r) + " is zero");
    out.row(r) = x.value().row(r) / norms(r);
  }
  return Tensor<Scalar>::make(
      x.shape(), std::move(out), {x},
      [norms = std::move(norms)](Node& self) {
        auto& p = *self.parents[0];
        Mat gx(self.value.rows(), self.value.cols());
        for (Index r = 0; r < gx.rows(); ++r) {
          const Scalar dot = self.grad.row(r).dot(self.value.row(r));
          gx.row(r) = (self.grad.row(r) - self.value.row(r) * dot) / norms(r);
        }
        detail::accumulate(p, gx);
      },
      "l2_normalize");
}

/// Sets entries where `allowed` is false to -inf so a following softmax
/// gives them exactly zero weight.
template <typename Scalar>
Tensor<Scalar> mask_logits(const Tensor<Scalar>& x, const BoolMatrix& allowed) {
  using Node = detail::Node<Scalar>;
  using Mat = typename Tensor<Scalar>::Mat;
  detail::require_rank2(x.shape(), "mask_logits");
  if (allowed.rows() != x.rows() || allowed.cols() != x.cols()) {
    throw DimensionError("mask_logits: mask " + std::to_string(allowed.rows()) + "x" +
                         std::to_string(allowed.cols()) + " vs logits " +
                         shape_string(x.shape()));
  }
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  Mat out = allowed.select(x.value().array(), neg_inf).matrix();
  return Tensor<Scalar>::make(
      x.shape(), std::move(out), {x},
      [allowed](Node& self) {
        Mat g = allowed.select(self.grad.array(), Scalar(0)).matrix();
        detail::accumulate(*self.parents[0], g);
      },
      "mask_logits");
}

/// softmax(q kᵀ / sqrt(d)) v for one head. `allowed`, when given, marks the
/// (query, key) pairs that may attend; every query needs at least one.
template <typename Scalar>
Tensor<Scalar> scaled_dot_product_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                            const Tensor<Scalar>& v,
                                            const BoolMatrix* allowed = nullptr) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.extent(1) != k.extent(1) ||
      k.extent(0) != v.extent(0)) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  auto scores =
      scale(matmul(q, transpose(k)), Scalar(1) / std::sqrt(static_cast<Scalar>(q.extent(1))));
  if (allowed) scores = mask_logits(scores, *allowed);
  return matmul(softmax(scores, 1), v);
}

/// Independent sequences stacked row-wise in one matrix. Group g owns rows
/// [offsets[g], offsets[g + 1]); allowed[g] is its (query, key) mask, or an
/// empty matrix when every pair may attend.
struct AttentionGroups {
  std::vector<Index> offsets{0};
  std::vector<BoolMatrix> allowed;

  void add(Index rows, BoolMatrix mask = {}) {
    offsets.push_back(offsets.back() + rows);
    allowed.push_back(std::move(mask));
  }
  Index num_groups() const { return static_cast<Index>(allowed.size()); }
  Index total_rows() const { return offsets.back(); }
};

/// Multi-head scaled dot-product attention within each group, as one graph
/// node. q, k, v are rows x d with d divisible by num_heads; head h uses
/// columns [h·d/H, (h+1)·d/H).
template <typename Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                    const Tensor<Scalar>& v, Index num_heads,
                                    const AttentionGroups& groups) {
  using Node = detail::Node<Scalar>;
  using Mat = typename Tensor<Scalar>::Mat;
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("multi_head_attention: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  if (num_heads < 1 || q.cols() % num_heads != 0) {
    throw DimensionError("multi_head_attention: width " + std::to_string(q.cols()) +
                         " not divisible by " + std::to_string(num_heads) + " heads");
  }
  if (groups.total_rows() != q.rows()) {
    throw DimensionError("multi_head_attention: groups cover " + std::to_string(groups.total_rows()) +
                         " rows, input has " + std::to_string(q.rows()));
  }
  const Index dh = q.cols() / num_heads;
  const Scalar s = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();
  Mat out(q.rows(), q.cols());
  // Attention weights per (group, head), kept for the backward pass.
  auto weights = std::make_shared<std::vector<Mat>>();
  weights->reserve(static_cast<std::size_t>(groups.num_groups() * num_heads));
  for (Index g = 0; g < groups.num_groups(); ++g) {
    const Index o = groups.offsets[static_cast<std::size_t>(g)];
    const Index n = groups.offsets[static_cast<std::size_t>(g) + 1] - o;
    const BoolMatrix& mask = groups.allowed[static_cast<std::size_t>(g)];
    if (mask.size() != 0 && (mask.rows() != n || mask.cols() != n)) {
      throw DimensionError("multi_head_attention: group " + std::to_string(g) + " mask is " +
                           std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                           " for " + std::to_string(n) + " rows");
    }
    for (Index h = 0; h < num_heads; ++h) {
      Mat p = q.value().block(o, h * dh, n, dh) * k.value().block(o, h * dh, n, dh).transpose() * s;
      if (mask.size() != 0) p = mask.select(p.array(), neg_inf).matrix();
      for (Index r = 0; r < n; ++r) {
        const Scalar m = p.row(r).maxCoeff();
        if (m == neg_inf) {
          throw InputError("multi_head_attention: query " + std::to_string(r) + " of group " +
                           std::to_string(g) + " may attend to nothing");
        }
        p.row(r) = (p.row(r).array() - m).exp().matrix();
        p.row(r) /= p.row(r).sum();
      }
      out.block(o, h * dh, n, dh) = p * v.value().block(o, h * dh, n, dh);
      weights->push_back(std::move(p));
    }
  }
  return Tensor<Scalar>::make(
      q.shape(), std::move(out), {q, k, v},
      [weights, offsets = groups.offsets, num_heads, dh, s](Node& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        Mat gq = Mat::Zero(self.value.rows(), self.value.cols());
        Mat gk = Mat::Zero(self.value.rows(), self.value.cols());
        Mat gv = Mat::Zero(self.value.rows(), self.value.cols());
        std::size_t w = 0;
        for (std::size_t g = 0; g + 1 < offsets.size(); ++g) {
          const Index o = offsets[g];
          const Index n = offsets[g + 1] - o;
          for (Index h = 0; h < num_heads; ++h, ++w) {
            const Mat& p = (*weights)[w];
            const auto go = self.grad.block(o, h * dh, n, dh);
            gv.block(o, h * dh, n, dh).noalias() += p.transpose() * go;
            Mat gp = go * pv.value.block(o, h * dh, n, dh).transpose();
            const Vector<Scalar> dot = (gp.array() * p.array()).rowwise().sum();
            Mat gs = (p.array() * (gp.array().colwise() - dot.array())).matrix() * s;
            gq.block(o, h * dh, n, dh).noalias() += gs * pk.value.block(o, h * dh, n, dh);
            gk.block(o, h * dh, n, dh).noalias() += gs.transpose() * pq.value.block(o, h * dh, n, dh);
          }
        }
        detail::accumulate(pq, gq);
        detail::accumulate(pk, gk);
        detail::accumulate(pv, gv);
      },
      "multi_head_attention");
}

}  // namespace oatr
