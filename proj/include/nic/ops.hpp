// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "nic/error.hpp"
#include "nic/tensor.hpp"

// Differentiable operations over Tensor. Every op takes the tape first; the
// result is recorded only when the tape is recording and some operand
// requires a gradient. No broadcasting: operand shapes must match exactly.

namespace nic {

namespace detail {

template <class T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMajor<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMajor<T>>;

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class T>
void require_rank2(const char* op, const Tensor<T>& a) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

template <class T>
Tensor<T> result(Shape shape, bool tracked) {
  return Tensor<T>(std::move(shape), T(0), tracked);
}

template <class T>
T sigmoid(T x) {
  // Split by sign so exp never overflows.
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

/// a[m x k] * b[k x n].
template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  const bool tracked = tape.tracks(a, b);
  Tensor<T> out = detail::result<T>({a.dim(0), b.dim(1)}, tracked);
  detail::MatMap<T>(out.data().data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.data().data(), m, k) * detail::ConstMatMap<T>(b.data().data(), k, n);
  if (tracked) {
    tape.record(out, [a, b, m, k, n](std::span<const T> g) {
      detail::ConstMatMap<T> dc(g.data(), m, n);
      if (a.requires_grad()) {
        auto ga = a.node()->grad_buffer();
        detail::MatMap<T>(ga.data(), m, k).noalias() +=
            dc * detail::ConstMatMap<T>(b.data().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        auto gb = b.node()->grad_buffer();
        detail::MatMap<T>(gb.data(), k, n).noalias() +=
            detail::ConstMatMap<T>(a.data().data(), m, k).transpose() * dc;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  const bool tracked = tape.tracks(a, b);
  Tensor<T> out = detail::result<T>(a.shape(), tracked);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  if (tracked) {
    tape.record(out, [a, b](std::span<const T> g) {
      for (const auto& t : {a, b}) {
        if (!t.requires_grad()) continue;
        auto gt = t.node()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

/// Elementwise product.
template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  const bool tracked = tape.tracks(a, b);
  Tensor<T> out = detail::result<T>(a.shape(), tracked);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  if (tracked) {
    tape.record(out, [a, b](std::span<const T> g) {
      if (a.requires_grad()) {
        auto ga = a.node()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.node()->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

/// scale * x + shift, elementwise.
template <class T>
Tensor<T> affine(Tape<T>& tape, const Tensor<T>& x, T scale, T shift = T(0)) {
  const bool tracked = tape.tracks(x);
  Tensor<T> out = detail::result<T>(x.shape(), tracked);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * x[i] + shift;
  if (tracked) {
    tape.record(out, [x, scale](std::span<const T> g) {
      auto gx = x.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  const bool tracked = tape.tracks(x);
  Tensor<T> out = detail::result<T>(x.shape(), tracked);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid(x[i]);
  if (tracked) {
    tape.record(out, [x, out](std::span<const T> g) {
      auto gx = x.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * out[i] * (T(1) - out[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& x) {
  const bool tracked = tape.tracks(x);
  Tensor<T> out = detail::result<T>(x.shape(), tracked);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  if (tracked) {
    tape.record(out, [x, out](std::span<const T> g) {
      auto gx = x.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - out[i] * out[i]);
    });
  }
  return out;
}

/// Concatenate along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, std::size_t axis = 1) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
    shape[axis] += s[axis];
    s[axis] = first[axis];
    if (s != first) {
      throw DimensionError("concat: shape mismatch " + shape_str(first) + " vs " +
                           shape_str(p.shape()) + " off axis " + std::to_string(axis));
    }
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t out_row = shape[axis] * inner;

  const bool tracked = tape.tracks_any(parts);
  Tensor<T> out = detail::result<T>(shape, tracked);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * w, w, out.data().data() + o * out_row + offset);
    }
    offsets.push_back(offset);
    offset += w;
  }
  if (tracked) {
    tape.record(out, [parts, offsets, outer, inner, out_row, axis](std::span<const T> g) {
      for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& p = parts[k];
        if (!p.requires_grad()) continue;
        auto gp = p.node()->grad_buffer();
        const std::size_t w = p.dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < w; ++j) gp[o * w + j] += g[o * out_row + offsets[k] + j];
        }
      }
    });
  }
  return out;
}

/// Half-open range [begin, end) along `axis`.
template <class T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, std::size_t begin,
                std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = end - begin;
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t in_row = x.dim(axis) * inner;
  const std::size_t w = (end - begin) * inner;
  const std::size_t off = begin * inner;

  const bool tracked = tape.tracks(x);
  Tensor<T> out = detail::result<T>(shape, tracked);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + o * in_row + off, w, out.data().data() + o * w);
  }
  if (tracked) {
    tape.record(out, [x, outer, in_row, w, off](std::span<const T> g) {
      auto gx = x.node()->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < w; ++j) gx[o * in_row + off + j] += g[o * w + j];
      }
    });
  }
  return out;
}

/// Sum of all elements, as a one-element tensor.
template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  const bool tracked = tape.tracks(x);
  Tensor<T> out = detail::result<T>({1}, tracked);
  T s = T(0);
  for (auto v : x.data()) s += v;
  out[0] = s;
  if (tracked) {
    tape.record(out, [x](std::span<const T> g) {
      auto gx = x.node()->grad_buffer();
      for (auto& v : gx) v += g[0];
    });
  }
  return out;
}

/// Same data under a new shape of equal element count.
template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const bool tracked = tape.tracks(x);
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()), tracked);
  if (tracked) {
    tape.record(out, [x](std::span<const T> g) {
      auto gx = x.node()->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

/// Tile a 1 x n row into rows x n. This is how biases reach a batch.
template <class T>
Tensor<T> repeat_rows(Tape<T>& tape, const Tensor<T>& row, std::size_t rows) {
  detail::require_rank2("repeat_rows", row);
  if (row.dim(0) != 1) throw DimensionError("repeat_rows: expected 1 x n, got " + shape_str(row.shape()));
  const std::size_t n = row.dim(1);
  const bool tracked = tape.tracks(row);
  Tensor<T> out = detail::result<T>({rows, n}, tracked);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(row.data().data(), n, out.data().data() + r * n);
  if (tracked) {
    tape.record(out, [row, rows, n](std::span<const T> g) {
      auto gr = row.node()->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) gr[j] += g[r * n + j];
      }
    });
  }
  return out;
}

/// Row-wise softmax; subtracts the row max before exponentiating.
template <class T>
Tensor<T> softmax_row(Tape<T>& tape, const Tensor<T>& x) {
  detail::require_rank2("softmax_row", x);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const bool tracked = tape.tracks(x);
  Tensor<T> out = detail::result<T>(x.shape(), tracked);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * cols;
    T* o = out.data().data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  if (tracked) {
    tape.record(out, [x, out, rows, cols](std::span<const T> g) {
      auto gx = x.node()->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = T(0);
        for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * out[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          gx[r * cols + c] += out[r * cols + c] * (g[r * cols + c] - dot);
        }
      }
    });
  }
  return out;
}

/// Row-wise log-softmax (log-sum-exp with max subtraction).
template <class T>
Tensor<T> log_softmax_row(Tape<T>& tape, const Tensor<T>& x) {
  detail::require_rank2("log_softmax_row", x);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const bool tracked = tape.tracks(x);
  Tensor<T> out = detail::result<T>(x.shape(), tracked);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * cols;
    T* o = out.data().data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    const T lz = std::log(z);
    for (std::size_t c = 0; c < cols; ++c) o[c] = (in[c] - mx) - lz;  // keeps precision near large maxima
  }
  if (tracked) {
    tape.record(out, [x, out, rows, cols](std::span<const T> g) {
      auto gx = x.node()->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        T gsum = T(0);
        for (std::size_t c = 0; c < cols; ++c) gsum += g[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          gx[r * cols + c] += g[r * cols + c] - std::exp(out[r * cols + c]) * gsum;
        }
      }
    });
  }
  return out;
}

/// Rows of `table` selected by `ids`; out-of-range ids are rejected.
template <class T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& table, std::span<const std::int64_t> ids) {
  detail::require_rank2("gather_rows", table);
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  const std::size_t n = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.dim(0)) {
      throw DimensionError("gather_rows: id " + std::to_string(id) + " outside table of " +
                           std::to_string(table.dim(0)) + " rows");
    }
  }
  const bool tracked = tape.tracks(table);
  Tensor<T> out = detail::result<T>({ids.size(), n}, tracked);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[r]) * n, n,
                out.data().data() + r * n);
  }
  if (tracked) {
    std::vector<std::int64_t> idv(ids.begin(), ids.end());
    tape.record(out, [table, idv, n](std::span<const T> g) {
      auto gt = table.node()->grad_buffer();
      for (std::size_t r = 0; r < idv.size(); ++r) {
        const std::size_t base = static_cast<std::size_t>(idv[r]) * n;
        for (std::size_t j = 0; j < n; ++j) gt[base + j] += g[r * n + j];
      }
    });
  }
  return out;
}

/// Mean over consecutive groups of `group` rows: [(B*G) x D] -> [B x D].
template <class T>
Tensor<T> mean_groups(Tape<T>& tape, const Tensor<T>& x, std::size_t group) {
  detail::require_rank2("mean_groups", x);
  if (group == 0 || x.dim(0) % group != 0) {
    throw DimensionError("mean_groups: " + std::to_string(x.dim(0)) + " rows not divisible into groups of " +
                         std::to_string(group));
  }
  const std::size_t b = x.dim(0) / group, d = x.dim(1);
  const T inv = T(1) / static_cast<T>(group);
  const bool tracked = tape.tracks(x);
  Tensor<T> out = detail::result<T>({b, d}, tracked);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t r = 0; r < group; ++r) {
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += x[(i * group + r) * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= inv;
  }
  if (tracked) {
    tape.record(out, [x, b, group, d, inv](std::span<const T> g) {
      auto gx = x.node()->grad_buffer();
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t r = 0; r < group; ++r) {
          for (std::size_t j = 0; j < d; ++j) gx[(i * group + r) * d + j] += inv * g[i * d + j];
        }
      }
    });
  }
  return out;
}

/// Sum over rows of -logprobs[b, target_b]; negative targets are masked out.
template <class T>
Tensor<T> nll_sum(Tape<T>& tape, const Tensor<T>& logprobs, std::span<const std::int64_t> targets) {
  detail::require_rank2("nll_sum", logprobs);
  const std::size_t rows = logprobs.dim(0), cols = logprobs.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("nll_sum: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  for (auto t : targets) {
    if (t >= static_cast<std::int64_t>(cols)) {
      throw DimensionError("nll_sum: target " + std::to_string(t) + " outside " + std::to_string(cols) +
                           " classes");
    }
  }
  const bool tracked = tape.tracks(logprobs);
  Tensor<T> out = detail::result<T>({1}, tracked);
  T s = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= 0) s -= logprobs[r * cols + static_cast<std::size_t>(targets[r])];
  }
  out[0] = s;
  if (tracked) {
    std::vector<std::int64_t> tv(targets.begin(), targets.end());
    tape.record(out, [logprobs, tv, cols](std::span<const T> g) {
      auto gl = logprobs.node()->grad_buffer();
      for (std::size_t r = 0; r < tv.size(); ++r) {
        if (tv[r] >= 0) gl[r * cols + static_cast<std::size_t>(tv[r])] -= g[0];
      }
    });
  }
  return out;
}

/// Mean softmax cross-entropy of raw logits against targets.
template <class T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::int64_t> targets) {
  std::size_t count = 0;
  for (auto t : targets) count += t >= 0;
  if (count == 0) throw DimensionError("cross_entropy: every target is masked");
  const Tensor<T> total = nll_sum(tape, log_softmax_row(tape, logits), targets);
  return affine(tape, total, T(1) / static_cast<T>(count));
}

/// Additive attention scores: out[b, r] = sum_a w[a] * tanh(projected[b*R + r, a] + query[b, a]).
template <class T>
Tensor<T> additive_scores(Tape<T>& tape, const Tensor<T>& projected, const Tensor<T>& query,
                          const Tensor<T>& w, std::size_t regions) {
  detail::require_rank2("additive_scores", projected);
  detail::require_rank2("additive_scores", query);
  detail::require_rank2("additive_scores", w);
  if (regions == 0) throw DimensionError("additive_scores: zero regions");
  const std::size_t b = query.dim(0), a = query.dim(1);
  if (projected.dim(0) != b * regions || projected.dim(1) != a || w.dim(0) != a || w.dim(1) != 1) {
    throw DimensionError("additive_scores: projected " + shape_str(projected.shape()) + ", query " +
                         shape_str(query.shape()) + ", score vector " + shape_str(w.shape()) +
                         " inconsistent with " + std::to_string(regions) + " regions");
  }
  const bool tracked = tape.tracks(projected, query, w);
  Tensor<T> out = detail::result<T>({b, regions}, tracked);
  std::vector<T> act(b * regions * a);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t r = 0; r < regions; ++r) {
      T s = T(0);
      for (std::size_t k = 0; k < a; ++k) {
        const T t = std::tanh(projected[(i * regions + r) * a + k] + query[i * a + k]);
        act[(i * regions + r) * a + k] = t;
        s += w[k] * t;
      }
      out[i * regions + r] = s;
    }
  }
  if (tracked) {
    tape.record(out, [projected, query, w, act = std::move(act), b, regions, a](std::span<const T> g) {
      std::span<T> gp, gq, gw;
      if (projected.requires_grad()) gp = projected.node()->grad_buffer();
      if (query.requires_grad()) gq = query.node()->grad_buffer();
      if (w.requires_grad()) gw = w.node()->grad_buffer();
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t r = 0; r < regions; ++r) {
          const T go = g[i * regions + r];
          for (std::size_t k = 0; k < a; ++k) {
            const T t = act[(i * regions + r) * a + k];
            if (!gw.empty()) gw[k] += go * t;
            const T dpre = go * w[k] * (T(1) - t * t);
            if (!gp.empty()) gp[(i * regions + r) * a + k] += dpre;
            if (!gq.empty()) gq[i * a + k] += dpre;
          }
        }
      }
    });
  }
  return out;
}

/// out[b] = sum_r weights[b, r] * values[b*R + r].
template <class T>
Tensor<T> weighted_sum(Tape<T>& tape, const Tensor<T>& weights, const Tensor<T>& values) {
  detail::require_rank2("weighted_sum", weights);
  detail::require_rank2("weighted_sum", values);
  const std::size_t b = weights.dim(0), regions = weights.dim(1), d = values.dim(1);
  if (values.dim(0) != b * regions) {
    throw DimensionError("weighted_sum: weights " + shape_str(weights.shape()) + " vs values " +
                         shape_str(values.shape()));
  }
  const bool tracked = tape.tracks(weights, values);
  Tensor<T> out = detail::result<T>({b, d}, tracked);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t r = 0; r < regions; ++r) {
      const T wt = weights[i * regions + r];
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += wt * values[(i * regions + r) * d + j];
    }
  }
  if (tracked) {
    tape.record(out, [weights, values, b, regions, d](std::span<const T> g) {
      std::span<T> gw, gv;
      if (weights.requires_grad()) gw = weights.node()->grad_buffer();
      if (values.requires_grad()) gv = values.node()->grad_buffer();
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t r = 0; r < regions; ++r) {
          T dw = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            dw += g[i * d + j] * values[(i * regions + r) * d + j];
            if (!gv.empty()) gv[(i * regions + r) * d + j] += weights[i * regions + r] * g[i * d + j];
          }
          if (!gw.empty()) gw[i * regions + r] += dw;
        }
      }
    });
  }
  return out;
}

}  // namespace nic
