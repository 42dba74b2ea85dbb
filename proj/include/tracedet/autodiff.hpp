#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "tracedet/errors.hpp"
#include "tracedet/rng.hpp"
#include "tracedet/tensor.hpp"

namespace tracedet {

namespace detail {

// Tapes allocate and free multi-megabyte tensors at high rate; glibc would
// hand each one to mmap and the kernel would zero fresh pages every time.
// Raising the thresholds keeps the blocks on the heap for reuse.
inline void tune_allocator_once() {
#ifdef __GLIBC__
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace detail

// Handle into a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

namespace detail {

// C[m,n] (+)= opA(A) * opB(B) on one dense slice. A is stored [m,k]
// ([k,m] when ta), B is stored [k,n] ([n,k] when tb).
inline void matmul_slice(const real_t* __restrict__ a, const real_t* __restrict__ b,
                         real_t* __restrict__ c, std::size_t m, std::size_t k, std::size_t n,
                         bool ta, bool tb, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const real_t* __restrict__ arow = a + i * k;
      real_t* __restrict__ crow = c + i * n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const real_t av = arow[kk];
        const real_t* __restrict__ brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const real_t* __restrict__ arow = a + i * k;
      real_t* __restrict__ crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const real_t* __restrict__ brow = b + j * k;
        real_t acc = 0.0;
        for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        crow[j] += acc;
      }
    }
  } else if (ta && !tb) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const real_t* __restrict__ arow = a + kk * m;
      const real_t* __restrict__ brow = b + kk * n;
      for (std::size_t i = 0; i < m; ++i) {
        const real_t av = arow[i];
        real_t* __restrict__ crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      real_t* __restrict__ crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const real_t* __restrict__ brow = b + j * k;
        real_t acc = 0.0;
        for (std::size_t kk = 0; kk < k; ++kk) acc += a[kk * m + i] * brow[kk];
        crow[j] += acc;
      }
    }
  }
}

}  // namespace detail

// Record of one forward computation with reverse-mode differentiation.
// Nodes are appended in topological order; backward() walks them in reverse.
// A tape and its tensors are confined to one thread.
class Tape {
 public:
  Tape() { detail::tune_allocator_once(); }

  Var leaf(Tensor value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, {});
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const { return node(v).value; }

  // Gradient of the last backward() root with respect to v; zero if v is
  // not reached by the backward sweep.
  Tensor grad(Var v) const {
    const Node& n = node(v);
    if (n.grad_ready) return n.grad;
    return Tensor::zeros(n.value.shape());
  }

  std::size_t node_count() const { return nodes_.size(); }

  // ---- primitives -------------------------------------------------------

  // Generalized matrix product. a has shape [..., m, k]; b is either rank-2
  // [k, n] (broadcast over a's leading dims) or has identical leading dims.
  // trans_a/trans_b transpose the trailing two axes of the operand.
  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.rank() < 2 || bv.rank() < 2) {
      throw shape_error("matmul: operands must have rank >= 2, got " +
                        Tensor::shape_string(av.shape()) + " x " +
                        Tensor::shape_string(bv.shape()));
    }
    const std::size_t ra = av.rank(), rb = bv.rank();
    const std::size_t a_rows = av.dim(ra - 2), a_cols = av.dim(ra - 1);
    const std::size_t b_rows = bv.dim(rb - 2), b_cols = bv.dim(rb - 1);
    const std::size_t m = trans_a ? a_cols : a_rows;
    const std::size_t ka = trans_a ? a_rows : a_cols;
    const std::size_t kb = trans_b ? b_cols : b_rows;
    const std::size_t n = trans_b ? b_rows : b_cols;
    std::vector<std::size_t> lead(av.shape().begin(), av.shape().end() - 2);
    const bool b_broadcast = (rb == 2) && (ra > 2);
    if (!b_broadcast && !std::equal(lead.begin(), lead.end(), bv.shape().begin(),
                                    bv.shape().end() - 2)) {
      throw shape_error("matmul: leading dims mismatch " + Tensor::shape_string(av.shape()) +
                        " x " + Tensor::shape_string(bv.shape()));
    }
    if (ka != kb) {
      throw shape_error("matmul: inner dims mismatch " + Tensor::shape_string(av.shape()) +
                        " x " + Tensor::shape_string(bv.shape()));
    }
    const std::size_t k = ka;
    const std::size_t batches = Tensor::count(lead);
    std::vector<std::size_t> out_shape = lead;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(out_shape);
    for (std::size_t s = 0; s < batches; ++s) {
      detail::matmul_slice(av.data() + s * a_rows * a_cols,
                           bv.data() + (b_broadcast ? 0 : s * b_rows * b_cols),
                           out.data() + s * m * n, m, k, n, trans_a, trans_b, false);
    }
    Var r = push(std::move(out), wants(a) || wants(b), {a, b});
    if (node(r).requires_grad) {
      const int ia = a.id, ib = b.id, ir = r.id;
      node(r).backprop = [this, ia, ib, ir, m, k, n, trans_a, trans_b, batches, a_rows,
                          a_cols, b_rows, b_cols, b_broadcast]() {
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        const Tensor& avv = nodes_[static_cast<std::size_t>(ia)].value;
        const Tensor& bvv = nodes_[static_cast<std::size_t>(ib)].value;
        if (wants_id(ia)) {
          Tensor& ga = acc(ia);
          for (std::size_t s = 0; s < batches; ++s) {
            const real_t* g = go.data() + s * m * n;
            const real_t* bp = bvv.data() + (b_broadcast ? 0 : s * b_rows * b_cols);
            real_t* gap = ga.data() + s * a_rows * a_cols;
            if (!trans_a) {
              // dA[m,k] += dC * opB(B)^T
              detail::matmul_slice(g, bp, gap, m, n, k, false, !trans_b, true);
            } else {
              // dA[k,m] += opB(B) * dC^T
              detail::matmul_slice(bp, g, gap, k, n, m, trans_b, true, true);
            }
          }
        }
        if (wants_id(ib)) {
          Tensor& gb = acc(ib);
          for (std::size_t s = 0; s < batches; ++s) {
            const real_t* g = go.data() + s * m * n;
            const real_t* ap = avv.data() + s * a_rows * a_cols;
            real_t* gbp = gb.data() + (b_broadcast ? 0 : s * b_rows * b_cols);
            if (!trans_b) {
              // dB[k,n] += opA(A)^T * dC
              detail::matmul_slice(ap, g, gbp, k, m, n, !trans_a, false, true);
            } else {
              // dB[n,k] += dC^T * opA(A)
              detail::matmul_slice(g, ap, gbp, n, m, k, true, trans_a, true);
            }
          }
        }
      };
    }
    return r;
  }

  // Elementwise sum; b may also have a shape that is a strict suffix of a's
  // (bias-style broadcast over a's leading dims).
  Var add(Var a, Var b) { return broadcast_binary(a, b, /*is_mul=*/false); }

  // Elementwise product with the same broadcast rule as add.
  Var mul(Var a, Var b) { return broadcast_binary(a, b, /*is_mul=*/true); }

  // out[..., d] = a[..., d] * s[...]; s has a's shape minus the last axis.
  Var scale_last(Var a, Var s) {
    const Tensor& av = value(a);
    const Tensor& sv = value(s);
    if (av.rank() < 1 || sv.rank() + 1 != av.rank() ||
        !std::equal(sv.shape().begin(), sv.shape().end(), av.shape().begin())) {
      throw shape_error("scale_last: shapes " + Tensor::shape_string(av.shape()) + " x " +
                        Tensor::shape_string(sv.shape()));
    }
    const std::size_t last = av.dim(av.rank() - 1);
    const std::size_t rows = sv.size();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < rows; ++i) {
      const real_t sc = sv[i];
      for (std::size_t d = 0; d < last; ++d) out[i * last + d] = av[i * last + d] * sc;
    }
    Var r = push(std::move(out), wants(a) || wants(s), {a, s});
    if (node(r).requires_grad) {
      const int ia = a.id, is = s.id, ir = r.id;
      node(r).backprop = [this, ia, is, ir, rows, last]() {
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        const Tensor& avv = nodes_[static_cast<std::size_t>(ia)].value;
        const Tensor& svv = nodes_[static_cast<std::size_t>(is)].value;
        if (wants_id(ia)) {
          Tensor& ga = acc(ia);
          for (std::size_t i = 0; i < rows; ++i) {
            const real_t sc = svv[i];
            for (std::size_t d = 0; d < last; ++d) ga[i * last + d] += go[i * last + d] * sc;
          }
        }
        if (wants_id(is)) {
          Tensor& gs = acc(is);
          for (std::size_t i = 0; i < rows; ++i) {
            real_t dot = 0.0;
            for (std::size_t d = 0; d < last; ++d) dot += go[i * last + d] * avv[i * last + d];
            gs[i] += dot;
          }
        }
      };
    }
    return r;
  }

  Var scalar_mul(Var a, real_t c) {
    const Tensor& av = value(a);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir, c]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        Tensor& ga = acc(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
      };
    }
    return r;
  }

  Var scalar_add(Var a, real_t c) {
    const Tensor& av = value(a);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + c;
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        Tensor& ga = acc(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      };
    }
    return r;
  }

  // Concatenation along the last axis; all other dims must match.
  Var concat_last(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.rank() != bv.rank() || av.rank() < 1 ||
        !std::equal(av.shape().begin(), av.shape().end() - 1, bv.shape().begin())) {
      throw shape_error("concat_last: shapes " + Tensor::shape_string(av.shape()) + " x " +
                        Tensor::shape_string(bv.shape()));
    }
    const std::size_t la = av.dim(av.rank() - 1);
    const std::size_t lb = bv.dim(bv.rank() - 1);
    const std::size_t rows = av.size() / la;
    std::vector<std::size_t> out_shape = av.shape();
    out_shape.back() = la + lb;
    Tensor out(out_shape);
    for (std::size_t i = 0; i < rows; ++i) {
      real_t* dst = out.data() + i * (la + lb);
      std::copy(av.data() + i * la, av.data() + (i + 1) * la, dst);
      std::copy(bv.data() + i * lb, bv.data() + (i + 1) * lb, dst + la);
    }
    Var r = push(std::move(out), wants(a) || wants(b), {a, b});
    if (node(r).requires_grad) {
      const int ia = a.id, ib = b.id, ir = r.id;
      node(r).backprop = [this, ia, ib, ir, rows, la, lb]() {
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        if (wants_id(ia)) {
          Tensor& ga = acc(ia);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t d = 0; d < la; ++d) ga[i * la + d] += go[i * (la + lb) + d];
        }
        if (wants_id(ib)) {
          Tensor& gb = acc(ib);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t d = 0; d < lb; ++d) gb[i * lb + d] += go[i * (la + lb) + la + d];
        }
      };
    }
    return r;
  }

  // Mean along one axis; the axis is removed from the shape.
  Var mean(Var a, std::size_t axis) {
    const Tensor& av = value(a);
    if (axis >= av.rank()) throw shape_error("mean: axis out of range");
    const std::size_t nred = av.dim(axis);
    auto [outer, inner] = split_at(av.shape(), axis);
    std::vector<std::size_t> out_shape = av.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor out(out_shape);
    const real_t inv = 1.0 / static_cast<real_t>(nred);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < nred; ++j) {
        const real_t* src = av.data() + (o * nred + j) * inner;
        real_t* dst = out.data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
      }
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir, outer, nred, inner, inv]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        Tensor& ga = acc(ia);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < nred; ++j) {
            real_t* dst = ga.data() + (o * nred + j) * inner;
            const real_t* src = go.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
          }
      };
    }
    return r;
  }

  // Sum of all entries, returned as a rank-0 scalar.
  Var sum_all(Var a) {
    const Tensor& av = value(a);
    real_t total = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) total += av[i];
    Var r = push(Tensor::scalar(total), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir]() {
        if (!wants_id(ia)) return;
        const real_t g = nodes_[static_cast<std::size_t>(ir)].grad[0];
        Tensor& ga = acc(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
      };
    }
    return r;
  }

  // Numerically stable softmax along an axis.
  Var softmax(Var a, std::size_t axis) {
    const Tensor& av = value(a);
    if (axis >= av.rank()) throw shape_error("softmax: axis out of range");
    const std::size_t nred = av.dim(axis);
    auto [outer, inner] = split_at(av.shape(), axis);
    Tensor out(av.shape());
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * nred * inner + i;
        real_t mx = av[base];
        for (std::size_t j = 1; j < nred; ++j) mx = std::max(mx, av[base + j * inner]);
        real_t z = 0.0;
        for (std::size_t j = 0; j < nred; ++j) {
          const real_t e = std::exp(av[base + j * inner] - mx);
          out[base + j * inner] = e;
          z += e;
        }
        const real_t invz = 1.0 / z;
        for (std::size_t j = 0; j < nred; ++j) out[base + j * inner] *= invz;
      }
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir, outer, nred, inner]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        const Tensor& y = nodes_[static_cast<std::size_t>(ir)].value;
        Tensor& ga = acc(ia);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * nred * inner + i;
            real_t dot = 0.0;
            for (std::size_t j = 0; j < nred; ++j)
              dot += go[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < nred; ++j)
              ga[base + j * inner] += y[base + j * inner] * (go[base + j * inner] - dot);
          }
      };
    }
    return r;
  }

  Var sigmoid(Var a) {
    const Tensor& av = value(a);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) {
      const real_t x = av[i];
      out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        const Tensor& y = nodes_[static_cast<std::size_t>(ir)].value;
        Tensor& ga = acc(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i] * (1.0 - y[i]);
      };
    }
    return r;
  }

  Var relu(Var a) {
    const Tensor& av = value(a);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0 ? av[i] : 0.0;
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        const Tensor& x = nodes_[static_cast<std::size_t>(ia)].value;
        Tensor& ga = acc(ia);
        for (std::size_t i = 0; i < go.size(); ++i)
          if (x[i] > 0) ga[i] += go[i];
      };
    }
    return r;
  }

  // Normalizes the last axis to zero mean / unit variance (no affine part).
  Var layer_norm(Var a, real_t eps = 1e-5) {
    const Tensor& av = value(a);
    if (av.rank() < 1) throw shape_error("layer_norm: rank-0 input");
    const std::size_t last = av.dim(av.rank() - 1);
    const std::size_t rows = av.size() / last;
    Tensor out(av.shape());
    std::vector<real_t> inv_std(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      const real_t* x = av.data() + i * last;
      real_t mu = 0.0;
      for (std::size_t d = 0; d < last; ++d) mu += x[d];
      mu /= static_cast<real_t>(last);
      real_t var = 0.0;
      for (std::size_t d = 0; d < last; ++d) var += (x[d] - mu) * (x[d] - mu);
      var /= static_cast<real_t>(last);
      const real_t inv = 1.0 / std::sqrt(var + eps);
      inv_std[i] = inv;
      real_t* y = out.data() + i * last;
      for (std::size_t d = 0; d < last; ++d) y[d] = (x[d] - mu) * inv;
    }
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir, rows, last, inv_std = std::move(inv_std)]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        const Tensor& y = nodes_[static_cast<std::size_t>(ir)].value;
        Tensor& ga = acc(ia);
        const real_t invn = 1.0 / static_cast<real_t>(last);
        for (std::size_t i = 0; i < rows; ++i) {
          const real_t* g = go.data() + i * last;
          const real_t* yy = y.data() + i * last;
          real_t gmean = 0.0, gydot = 0.0;
          for (std::size_t d = 0; d < last; ++d) {
            gmean += g[d];
            gydot += g[d] * yy[d];
          }
          gmean *= invn;
          gydot *= invn;
          real_t* dst = ga.data() + i * last;
          for (std::size_t d = 0; d < last; ++d)
            dst[d] += inv_std[i] * (g[d] - gmean - yy[d] * gydot);
        }
      };
    }
    return r;
  }

  Var log(Var a) {
    const Tensor& av = value(a);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::log(av[i]);
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        const Tensor& x = nodes_[static_cast<std::size_t>(ia)].value;
        Tensor& ga = acc(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / x[i];
      };
    }
    return r;
  }

  // Inverted dropout. Identity when training is off or rate is zero.
  Var dropout(Var a, real_t rate, bool train, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw validation_error("dropout: rate must be in [0,1)");
    if (!train || rate == 0.0) return a;
    const Tensor& av = value(a);
    std::vector<real_t> scale(av.size());
    const real_t keep = 1.0 - rate;
    for (auto& s : scale) s = rng.uniform01() < rate ? 0.0 : 1.0 / keep;
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * scale[i];
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir, scale = std::move(scale)]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        Tensor& ga = acc(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * scale[i];
      };
    }
    return r;
  }

  // Clamp to [lo, hi]; the gradient passes through strictly inside the bounds.
  Var clamp(Var a, real_t lo, real_t hi) {
    const Tensor& av = value(a);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::min(hi, std::max(lo, av[i]));
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir, lo, hi]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        const Tensor& x = nodes_[static_cast<std::size_t>(ia)].value;
        Tensor& ga = acc(ia);
        for (std::size_t i = 0; i < go.size(); ++i)
          if (x[i] > lo && x[i] < hi) ga[i] += go[i];
      };
    }
    return r;
  }

  // Straight-through threshold: forward rounds to {0,1} at 0.5, backward is
  // the identity, so gradients follow the relaxed input.
  Var round_ste(Var a) {
    const Tensor& av = value(a);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0.5 ? 1.0 : 0.0;
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        Tensor& ga = acc(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      };
    }
    return r;
  }

  Var permute(Var a, std::vector<std::size_t> axes) {
    const Tensor& av = value(a);
    if (axes.size() != av.rank()) throw shape_error("permute: axes rank mismatch");
    std::vector<std::size_t> seen(av.rank(), 0);
    for (std::size_t ax : axes) {
      if (ax >= av.rank() || seen[ax]++) throw shape_error("permute: invalid axes");
    }
    std::vector<std::size_t> out_shape(av.rank());
    for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = av.dim(axes[i]);
    Tensor out(out_shape);
    permute_copy(av, out, axes);
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      std::vector<std::size_t> inverse(axes.size());
      for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = i;
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir, inverse = std::move(inverse)]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        Tensor ginv(nodes_[static_cast<std::size_t>(ia)].value.shape());
        permute_copy(go, ginv, inverse);
        Tensor& ga = acc(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += ginv[i];
      };
    }
    return r;
  }

  Var reshape(Var a, std::vector<std::size_t> shape) {
    const Tensor& av = value(a);
    if (Tensor::count(shape) != av.size()) {
      throw shape_error("reshape: cannot view " + Tensor::shape_string(av.shape()) + " as " +
                        Tensor::shape_string(shape));
    }
    Tensor out(std::move(shape), av.values());
    Var r = push(std::move(out), wants(a), {a});
    if (node(r).requires_grad) {
      const int ia = a.id, ir = r.id;
      node(r).backprop = [this, ia, ir]() {
        if (!wants_id(ia)) return;
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        Tensor& ga = acc(ia);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      };
    }
    return r;
  }

  // ---- reverse sweep ----------------------------------------------------

  void backward(Var root) {
    if (!root.valid() || static_cast<std::size_t>(root.id) >= nodes_.size())
      throw validation_error("backward: root is not on this tape");
    if (node(root).value.size() != 1)
      throw validation_error("backward: root must be scalar, got shape " +
                             Tensor::shape_string(node(root).value.shape()));
    for (auto& n : nodes_) n.grad_ready = false;
    acc(root.id)[0] = 1.0;
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad_ready && n.backprop) n.backprop();
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::function<void()> backprop;
  };

  Var push(Tensor value, bool requires_grad, std::initializer_list<Var> inputs) {
    for (Var in : inputs) (void)node(in);  // bounds check
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  Node& node(Var v) {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw validation_error("Tape: invalid var handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  const Node& node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw validation_error("Tape: invalid var handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  bool wants(Var v) const { return node(v).requires_grad; }
  bool wants_id(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  Tensor& acc(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_ready) {
      n.grad = Tensor::zeros(n.value.shape());
      n.grad_ready = true;
    }
    return n.grad;
  }

  Var broadcast_binary(Var a, Var b, bool is_mul) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    const char* name = is_mul ? "mul" : "add";
    bool suffix = false;
    if (!av.same_shape(bv)) {
      suffix = bv.rank() < av.rank() &&
               std::equal(bv.shape().begin(), bv.shape().end(),
                          av.shape().end() - static_cast<std::ptrdiff_t>(bv.rank()));
      if (!suffix)
        throw shape_error(std::string(name) + ": shapes " + Tensor::shape_string(av.shape()) +
                          " x " + Tensor::shape_string(bv.shape()));
    }
    const std::size_t bn = bv.size();
    const std::size_t reps = av.size() / std::max<std::size_t>(bn, 1);
    Tensor out(av.shape());
    if (is_mul) {
      for (std::size_t rpt = 0; rpt < reps; ++rpt)
        for (std::size_t i = 0; i < bn; ++i) out[rpt * bn + i] = av[rpt * bn + i] * bv[i];
    } else {
      for (std::size_t rpt = 0; rpt < reps; ++rpt)
        for (std::size_t i = 0; i < bn; ++i) out[rpt * bn + i] = av[rpt * bn + i] + bv[i];
    }
    (void)suffix;
    Var r = push(std::move(out), wants(a) || wants(b), {a, b});
    if (node(r).requires_grad) {
      const int ia = a.id, ib = b.id, ir = r.id;
      node(r).backprop = [this, ia, ib, ir, reps, bn, is_mul]() {
        const Tensor& go = nodes_[static_cast<std::size_t>(ir)].grad;
        const Tensor& avv = nodes_[static_cast<std::size_t>(ia)].value;
        const Tensor& bvv = nodes_[static_cast<std::size_t>(ib)].value;
        if (wants_id(ia)) {
          Tensor& ga = acc(ia);
          if (is_mul) {
            for (std::size_t rpt = 0; rpt < reps; ++rpt)
              for (std::size_t i = 0; i < bn; ++i) ga[rpt * bn + i] += go[rpt * bn + i] * bvv[i];
          } else {
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
          }
        }
        if (wants_id(ib)) {
          Tensor& gb = acc(ib);
          if (is_mul) {
            for (std::size_t rpt = 0; rpt < reps; ++rpt)
              for (std::size_t i = 0; i < bn; ++i) gb[i] += go[rpt * bn + i] * avv[rpt * bn + i];
          } else {
            for (std::size_t rpt = 0; rpt < reps; ++rpt)
              for (std::size_t i = 0; i < bn; ++i) gb[i] += go[rpt * bn + i];
          }
        }
      };
    }
    return r;
  }

  static std::pair<std::size_t, std::size_t> split_at(const std::vector<std::size_t>& shape,
                                                      std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    return {outer, inner};
  }

  static void permute_copy(const Tensor& src, Tensor& dst, const std::vector<std::size_t>& axes) {
    const std::size_t rank = src.rank();
    std::vector<std::size_t> src_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) src_strides[i - 1] = src_strides[i] * src.dim(i);
    // Fast path: the last axis stays in place, so whole trailing runs move as
    // contiguous blocks. Every hot permute in the encoder is of this kind.
    if (rank >= 2 && axes.back() == rank - 1) {
      const std::size_t block = src.dim(rank - 1);
      const std::size_t rows = src.size() / block;
      std::vector<std::size_t> idx(rank - 1, 0);
      const real_t* __restrict__ s = src.data();
      real_t* __restrict__ d = dst.data();
      for (std::size_t row = 0; row < rows; ++row) {
        std::size_t src_off = 0;
        for (std::size_t i = 0; i + 1 < rank; ++i) src_off += idx[i] * src_strides[axes[i]];
        std::copy(s + src_off, s + src_off + block, d + row * block);
        for (std::size_t i = rank - 1; i-- > 0;) {
          if (++idx[i] < dst.dim(i)) break;
          idx[i] = 0;
        }
      }
      return;
    }
    std::vector<std::size_t> idx(rank, 0);
    const std::size_t total = src.size();
    for (std::size_t flat = 0; flat < total; ++flat) {
      std::size_t src_flat = 0;
      for (std::size_t i = 0; i < rank; ++i) src_flat += idx[i] * src_strides[axes[i]];
      dst[flat] = src[src_flat];
      for (std::size_t i = rank; i-- > 0;) {
        if (++idx[i] < dst.dim(i)) break;
        idx[i] = 0;
      }
    }
  }

  std::vector<Node> nodes_;
};

// Result of comparing an analytic gradient against central differences.
struct FdCheckResult {
  real_t max_rel_error = 0.0;
  std::size_t worst_index = 0;
  real_t analytic_at_worst = 0.0;
  real_t numeric_at_worst = 0.0;
};

// Central-difference check: max over coordinates of
// |g_analytic - g_central| / max(1, |g_central|). f must be deterministic.
template <typename F>
FdCheckResult finite_diff_check(F&& f, const std::vector<real_t>& analytic_grad,
                                std::vector<real_t> params, real_t eps) {
  if (eps <= 0.0) throw validation_error("finite_diff_check: eps must be positive");
  if (analytic_grad.size() != params.size())
    throw validation_error("finite_diff_check: gradient/parameter size mismatch");
  FdCheckResult result;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const real_t saved = params[i];
    params[i] = saved + eps;
    const real_t fp = f(params);
    params[i] = saved - eps;
    const real_t fm = f(params);
    params[i] = saved;
    const real_t central = (fp - fm) / (2.0 * eps);
    const real_t rel = std::abs(analytic_grad[i] - central) /
                       std::max<real_t>(1.0, std::abs(central));
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
      result.analytic_at_worst = analytic_grad[i];
      result.numeric_at_worst = central;
    }
  }
  return result;
}

}  // namespace tracedet
