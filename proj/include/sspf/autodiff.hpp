#pragma once

// Minimal reverse-mode differentiation over whole tensors. Each op records a
// closure that pushes its output gradient to its parents; Tape::backward
// replays them in reverse creation order.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "sspf/errors.hpp"
#include "sspf/tensor.hpp"

namespace sspf::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }
  Var variable(Tensor<T> value) { return push(std::move(value), true, nullptr); }

  /// Records an op result; it needs a gradient iff any parent does.
  Var record(Tensor<T> value, std::initializer_list<Var> parents, Backward backward) {
    bool rg = false;
    for (Var p : parents) rg = rg || node(p).requires_grad;
    return push(std::move(value), rg, rg ? std::move(backward) : nullptr);
  }
  Var record(Tensor<T> value, const std::vector<Var>& parents, Backward backward) {
    bool rg = false;
    for (Var p : parents) rg = rg || node(p).requires_grad;
    return push(std::move(value), rg, rg ? std::move(backward) : nullptr);
  }

  const Tensor<T>& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  /// Gradient of the last backward root w.r.t. v (zeros when v was unreachable).
  Tensor<T> grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return Tensor<T>(n.value.channels(), n.value.height(), n.value.width());
    return n.grad;
  }

  /// Adds g into v's gradient buffer; no-op for constants.
  void accumulate(Var v, const Tensor<T>& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      require_same_shape(n.value, g, "Tape::accumulate");
      n.grad = g;
    } else {
      n.grad += g;
    }
  }
  /// Mutable gradient buffer, zero-initialized on first use.
  Tensor<T>& grad_buffer(Var v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.channels(), n.value.height(), n.value.width());
    return n.grad;
  }
  const Tensor<T>& upstream(int self) const { return nodes_[self].grad; }

  void backward(Var root) {
    if (node(root).value.size() != 1) throw ShapeError("Tape::backward: root must be a scalar");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    if (!node(root).requires_grad) return;
    nodes_[root.id].grad = Tensor<T>(1, 1, 1, T(1));
    for (int i = root.id; i >= 0; --i) {
      if (nodes_[i].backward && !nodes_[i].grad.empty()) nodes_[i].backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Tensor<T> value, bool rg, Backward backward) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), rg, std::move(backward)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }
  Node& node(Var v) {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw Error("Tape: invalid variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw Error("Tape: invalid variable");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
};

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

namespace detail {

// Unrolls k x k zero-padded neighbourhoods: rows are (cin, ky, kx), columns pixels.
template <class T>
RowMatrix<T> im2col(const Tensor<T>& x, int k) {
  const int c = x.channels(), h = x.height(), w = x.width(), pad = k / 2;
  RowMatrix<T> col = RowMatrix<T>::Zero(static_cast<Eigen::Index>(c) * k * k, static_cast<Eigen::Index>(h) * w);
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col.row((ci * k + ky) * k + kx).data();
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const int x0 = std::max(0, pad - kx), x1 = std::min(w, w + pad - kx);
          const T* src = &x(ci, sy, 0);
          for (int xx = x0; xx < x1; ++xx) row[y * w + xx] = src[xx + kx - pad];
        }
      }
  return col;
}

template <class T>
void col2im_add(const RowMatrix<T>& col, int k, Tensor<T>& dx) {
  const int c = dx.channels(), h = dx.height(), w = dx.width(), pad = k / 2;
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col.row((ci * k + ky) * k + kx).data();
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const int x0 = std::max(0, pad - kx), x1 = std::min(w, w + pad - kx);
          T* dst = &dx(ci, sy, 0);
          for (int xx = x0; xx < x1; ++xx) dst[xx + kx - pad] += row[y * w + xx];
        }
      }
}

inline int kernel_side(int taps) {
  const int k = static_cast<int>(std::lround(std::sqrt(static_cast<double>(taps))));
  if (k * k != taps || k % 2 == 0) throw ShapeError("conv2d: kernel must be odd and square");
  return k;
}

}  // namespace detail

/// Zero-padded "same" convolution (cross-correlation). Weights are
/// (Cout, Cin, k*k), bias (Cout, 1, 1).
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const int cout = w.channels(), cin = w.height(), k = detail::kernel_side(w.width());
  if (x.channels() != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(x.channels()) + " channels, weights expect " +
                     std::to_string(cin));
  }
  if (b.size() != static_cast<std::size_t>(cout)) throw ShapeError("conv2d: bias size mismatch");
  const Eigen::Index hw = static_cast<Eigen::Index>(x.height()) * x.width();
  Tensor<T> y(cout, x.height(), x.width());
  ConstMatrixMap<T> wm(w.data(), cout, static_cast<Eigen::Index>(cin) * k * k);
  MatrixMap<T> ym(y.data(), cout, hw);
  if (k == 1) {
    ym.noalias() = wm * ConstMatrixMap<T>(x.data(), cin, hw);
  } else {
    ym.noalias() = wm * detail::im2col(x, k);
  }
  for (int co = 0; co < cout; ++co) ym.row(co).array() += b[co];
  return y;
}

template <class T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b) {
  Tensor<T> y = conv2d_forward(tape.value(x), tape.value(w), tape.value(b));
  return tape.record(std::move(y), {x, w, b}, [x, w, b](Tape<T>& t, int self) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& wv = t.value(w);
    const Tensor<T>& dy = t.upstream(self);
    const int cout = wv.channels(), cin = wv.height(), k = detail::kernel_side(wv.width());
    const Eigen::Index hw = static_cast<Eigen::Index>(xv.height()) * xv.width();
    ConstMatrixMap<T> dym(dy.data(), cout, hw);
    ConstMatrixMap<T> wm(wv.data(), cout, static_cast<Eigen::Index>(cin) * k * k);
    const bool need_x = t.requires_grad(x);
    if (k == 1) {
      ConstMatrixMap<T> xm(xv.data(), cin, hw);
      if (t.requires_grad(w)) MatrixMap<T>(t.grad_buffer(w).data(), cout, cin).noalias() += dym * xm.transpose();
      if (need_x) MatrixMap<T>(t.grad_buffer(x).data(), cin, hw).noalias() += wm.transpose() * dym;
    } else {
      if (t.requires_grad(w)) {
        const RowMatrix<T> col = detail::im2col(xv, k);
        MatrixMap<T>(t.grad_buffer(w).data(), cout, static_cast<Eigen::Index>(cin) * k * k).noalias() +=
            dym * col.transpose();
      }
      if (need_x) {
        const RowMatrix<T> dcol = wm.transpose() * dym;
        detail::col2im_add(dcol, k, t.grad_buffer(x));
      }
    }
    if (t.requires_grad(b)) {
      Tensor<T>& db = t.grad_buffer(b);
      for (int co = 0; co < cout; ++co) db[co] += dym.row(co).sum();
    }
  });
}

template <class T>
Var relu(Tape<T>& tape, Var x) {
  Tensor<T> y = tape.value(x);
  for (auto& v : y.values()) v = v > T(0) ? v : T(0);
  return tape.record(std::move(y), {x}, [x](Tape<T>& t, int self) {
    const Tensor<T>& xv = t.value(x);
    Tensor<T> g = t.upstream(self);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!(xv[i] > T(0))) g[i] = 0;
    t.accumulate(x, g);
  });
}

template <class T>
Var sigmoid(Tape<T>& tape, Var x) {
  Tensor<T> y = tape.value(x);
  for (auto& v : y.values()) v = T(1) / (T(1) + std::exp(-v));
  return tape.record(std::move(y), {x}, [x](Tape<T>& t, int self) {
    Tensor<T> g = t.upstream(self);
    const Tensor<T>& yv = t.value(Var{self});
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= yv[i] * (T(1) - yv[i]);
    t.accumulate(x, g);
  });
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  Tensor<T> y = tape.value(a);
  y += tape.value(b);
  return tape.record(std::move(y), {a, b}, [a, b](Tape<T>& t, int self) {
    t.accumulate(a, t.upstream(self));
    t.accumulate(b, t.upstream(self));
  });
}

template <class T>
Var avg_pool2(Tape<T>& tape, Var x) {
  Tensor<T> y = sspf::avg_pool2(tape.value(x));
  return tape.record(std::move(y), {x}, [x](Tape<T>& t, int self) {
    const Tensor<T>& g = t.upstream(self);
    Tensor<T>& dx = t.grad_buffer(x);
    for (int c = 0; c < g.channels(); ++c)
      for (int yy = 0; yy < g.height(); ++yy)
        for (int xx = 0; xx < g.width(); ++xx) {
          const T q = g(c, yy, xx) * T(0.25);
          dx(c, 2 * yy, 2 * xx) += q;
          dx(c, 2 * yy, 2 * xx + 1) += q;
          dx(c, 2 * yy + 1, 2 * xx) += q;
          dx(c, 2 * yy + 1, 2 * xx + 1) += q;
        }
  });
}

/// Nearest-neighbour 2x upsampling.
template <class T>
Var upsample2(Tape<T>& tape, Var x) {
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> y(xv.channels(), xv.height() * 2, xv.width() * 2);
  for (int c = 0; c < y.channels(); ++c)
    for (int yy = 0; yy < y.height(); ++yy)
      for (int xx = 0; xx < y.width(); ++xx) y(c, yy, xx) = xv(c, yy / 2, xx / 2);
  return tape.record(std::move(y), {x}, [x](Tape<T>& t, int self) {
    const Tensor<T>& g = t.upstream(self);
    Tensor<T>& dx = t.grad_buffer(x);
    for (int c = 0; c < g.channels(); ++c)
      for (int yy = 0; yy < g.height(); ++yy)
        for (int xx = 0; xx < g.width(); ++xx) dx(c, yy / 2, xx / 2) += g(c, yy, xx);
  });
}

/// Channel concatenation.
template <class T>
Var concat(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& av = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  if (!av.same_spatial(bv)) throw ShapeError("concat: spatial mismatch " + av.shape_string() + " vs " + bv.shape_string());
  Tensor<T> y(av.channels() + bv.channels(), av.height(), av.width());
  std::copy(av.values().begin(), av.values().end(), y.values().begin());
  std::copy(bv.values().begin(), bv.values().end(), y.values().begin() + static_cast<std::ptrdiff_t>(av.size()));
  const int ca = av.channels();
  return tape.record(std::move(y), {a, b}, [a, b, ca](Tape<T>& t, int self) {
    const Tensor<T>& g = t.upstream(self);
    const auto split = static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ca) * g.plane_size());
    if (t.requires_grad(a)) {
      Tensor<T>& da = t.grad_buffer(a);
      for (std::ptrdiff_t i = 0; i < split; ++i) da[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor<T>& db = t.grad_buffer(b);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[split + i];
    }
  });
}

/// x * m with a constant single-channel plane broadcast over channels.
template <class T>
Var mul_plane(Tape<T>& tape, Var x, const Tensor<T>& m) {
  const Tensor<T>& xv = tape.value(x);
  if (!xv.same_spatial(m) || m.channels() != 1) throw ShapeError("mul_plane: mask " + m.shape_string() + " vs " + xv.shape_string());
  Tensor<T> y = xv;
  for (int c = 0; c < y.channels(); ++c) {
    auto ch = y.channel(c);
    for (std::size_t i = 0; i < ch.size(); ++i) ch[i] *= m[i];
  }
  return tape.record(std::move(y), {x}, [x, m](Tape<T>& t, int self) {
    Tensor<T> g = t.upstream(self);
    for (int c = 0; c < g.channels(); ++c) {
      auto ch = g.channel(c);
      for (std::size_t i = 0; i < ch.size(); ++i) ch[i] *= m[i];
    }
    t.accumulate(x, g);
  });
}

/// x + s with a constant single-channel plane broadcast over channels.
template <class T>
Var add_plane(Tape<T>& tape, Var x, const Tensor<T>& s) {
  const Tensor<T>& xv = tape.value(x);
  if (!xv.same_spatial(s) || s.channels() != 1) throw ShapeError("add_plane: bias " + s.shape_string() + " vs " + xv.shape_string());
  Tensor<T> y = xv;
  for (int c = 0; c < y.channels(); ++c) {
    auto ch = y.channel(c);
    for (std::size_t i = 0; i < ch.size(); ++i) ch[i] += s[i];
  }
  return tape.record(std::move(y), {x}, [x](Tape<T>& t, int self) { t.accumulate(x, t.upstream(self)); });
}

/// Sum of scalar nodes with fixed weights.
template <class T>
Var weighted_sum(Tape<T>& tape, const std::vector<Var>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: size mismatch");
  T s = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * tape.value(terms[i])[0];
  return tape.record(Tensor<T>(1, 1, 1, s), terms, [terms, weights](Tape<T>& t, int self) {
    const T g = t.upstream(self)[0];
    for (std::size_t i = 0; i < terms.size(); ++i) t.accumulate(terms[i], Tensor<T>(1, 1, 1, g * weights[i]));
  });
}

/// Scalar node whose value and input gradients were computed eagerly by the
/// caller; gradients are scaled by the upstream seed during backward.
template <class T>
Var scalar_op(Tape<T>& tape, const std::vector<Var>& inputs, T value, std::vector<Tensor<T>> grads) {
  if (inputs.size() != grads.size()) throw ShapeError("scalar_op: one gradient per input required");
  return tape.record(Tensor<T>(1, 1, 1, value), inputs,
                     [inputs, grads = std::move(grads)](Tape<T>& t, int self) {
                       const T g = t.upstream(self)[0];
                       for (std::size_t i = 0; i < inputs.size(); ++i) {
                         if (!t.requires_grad(inputs[i])) continue;
                         Tensor<T> d = grads[i];
                         d *= g;
                         t.accumulate(inputs[i], d);
                       }
                     });
}

}  // namespace sspf::ad
