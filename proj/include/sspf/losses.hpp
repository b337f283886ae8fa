#pragma once

// Training objective: alpha * Charbonnier structure reconstruction plus the
// fusion terms (SSIM, intensity L1 against the element-wise max, Sobel
// gradient L1 against the element-wise max gradient). Every term is
// mean-reduced and exposes its analytic gradient.

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "sspf/autodiff.hpp"
#include "sspf/errors.hpp"
#include "sspf/structmap.hpp"
#include "sspf/tensor.hpp"

namespace sspf {

/// Scalar value together with its gradient w.r.t. the first argument.
template <class T>
struct ValueGrad {
  T value;
  Tensor<T> grad;
};

// ---------------------------------------------------------------------------
// SSIM (11x11 Gaussian window, sigma 1.5, valid region only)

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

template <class T>
std::array<T, kSsimWindow> ssim_gaussian_1d() {
  std::array<T, kSsimWindow> g{};
  double sum = 0;
  std::array<double, kSsimWindow> d{};
  for (int i = 0; i < kSsimWindow; ++i) {
    const double x = i - kSsimWindow / 2;
    d[i] = std::exp(-x * x / (2 * kSsimSigma * kSsimSigma));
    sum += d[i];
  }
  for (int i = 0; i < kSsimWindow; ++i) g[i] = static_cast<T>(d[i] / sum);
  return g;
}

namespace detail {

// Valid separable correlation with a symmetric 1-D kernel.
template <class T, std::size_t N>
Tensor<T> filter_valid(const Tensor<T>& x, const std::array<T, N>& k) {
  const int n = static_cast<int>(N);
  const int h = x.height(), w = x.width(), oh = h - n + 1, ow = w - n + 1;
  Tensor<T> tmp = Tensor<T>::plane(h, ow);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < ow; ++xx) {
      T s = 0;
      for (int i = 0; i < n; ++i) s += k[i] * x.at(y, xx + i);
      tmp.at(y, xx) = s;
    }
  Tensor<T> out = Tensor<T>::plane(oh, ow);
  for (int y = 0; y < oh; ++y)
    for (int xx = 0; xx < ow; ++xx) {
      T s = 0;
      for (int i = 0; i < n; ++i) s += k[i] * tmp.at(y + i, xx);
      out.at(y, xx) = s;
    }
  return out;
}

// Adjoint of filter_valid.
template <class T, std::size_t N>
Tensor<T> filter_valid_adjoint(const Tensor<T>& g, const std::array<T, N>& k) {
  const int n = static_cast<int>(N);
  const int oh = g.height(), ow = g.width(), h = oh + n - 1, w = ow + n - 1;
  Tensor<T> tmp = Tensor<T>::plane(h, ow);
  for (int y = 0; y < oh; ++y)
    for (int xx = 0; xx < ow; ++xx)
      for (int i = 0; i < n; ++i) tmp.at(y + i, xx) += k[i] * g.at(y, xx);
  Tensor<T> out = Tensor<T>::plane(h, w);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < ow; ++xx)
      for (int i = 0; i < n; ++i) out.at(y, xx + i) += k[i] * tmp.at(y, xx);
  return out;
}

template <class T>
Tensor<T> product(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

template <class T>
void check_ssim_inputs(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "ssim");
  if (a.channels() != 1) throw ShapeError("ssim: expected single-channel planes");
  if (a.height() < kSsimWindow || a.width() < kSsimWindow) {
    throw ShapeError("ssim: image " + a.shape_string() + " smaller than the 11x11 window");
  }
}

}  // namespace detail

/// Mean SSIM over the valid region, optionally with d/da.
template <class T>
ValueGrad<T> ssim_with_grad(const Tensor<T>& a, const Tensor<T>& b, T data_range = T(1), bool want_grad = true) {
  detail::check_ssim_inputs(a, b);
  const auto g = ssim_gaussian_1d<T>();
  const T c1 = static_cast<T>((kSsimK1 * data_range) * (kSsimK1 * data_range));
  const T c2 = static_cast<T>((kSsimK2 * data_range) * (kSsimK2 * data_range));
  const Tensor<T> mu_a = detail::filter_valid(a, g);
  const Tensor<T> mu_b = detail::filter_valid(b, g);
  const Tensor<T> e_aa = detail::filter_valid(detail::product(a, a), g);
  const Tensor<T> e_bb = detail::filter_valid(detail::product(b, b), g);
  const Tensor<T> e_ab = detail::filter_valid(detail::product(a, b), g);
  const std::size_t n = mu_a.size();
  Tensor<T> d_mu = Tensor<T>::plane(mu_a.height(), mu_a.width());
  Tensor<T> d_eaa = d_mu, d_eab = d_mu;
  long double total = 0;
  const T inv_n = T(1) / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T ma = mu_a[i], mb = mu_b[i];
    const T saa = e_aa[i] - ma * ma, sbb = e_bb[i] - mb * mb, sab = e_ab[i] - ma * mb;
    const T a1 = 2 * ma * mb + c1, a2 = 2 * sab + c2;
    const T b1 = ma * ma + mb * mb + c1, b2 = saa + sbb + c2;
    const T s = (a1 * a2) / (b1 * b2);
    total += s;
    if (want_grad) {
      const T inv = T(1) / (b1 * b2);
      d_mu[i] = inv_n * ((2 * mb * a2 - 2 * mb * a1) * inv - s * 2 * ma / b1 + s * 2 * ma / b2);
      d_eaa[i] = inv_n * (-s / b2);
      d_eab[i] = inv_n * (2 * a1 * inv);
    }
  }
  ValueGrad<T> r{static_cast<T>(total / static_cast<long double>(n)), Tensor<T>()};
  if (want_grad) {
    r.grad = detail::filter_valid_adjoint(d_mu, g);
    const Tensor<T> ga = detail::filter_valid_adjoint(d_eaa, g);
    const Tensor<T> gb = detail::filter_valid_adjoint(d_eab, g);
    for (std::size_t i = 0; i < r.grad.size(); ++i) r.grad[i] += 2 * a[i] * ga[i] + b[i] * gb[i];
  }
  return r;
}

template <class T>
T ssim(const Tensor<T>& a, const Tensor<T>& b, T data_range = T(1)) {
  return ssim_with_grad(a, b, data_range, false).value;
}

/// 1 - (SSIM(f, ir) + SSIM(f, vi)) / 2, gradient w.r.t. the fused plane.
template <class T>
ValueGrad<T> ssim_loss_with_grad(const Tensor<T>& fused, const Tensor<T>& ir, const Tensor<T>& vi) {
  ValueGrad<T> a = ssim_with_grad(fused, ir);
  ValueGrad<T> b = ssim_with_grad(fused, vi);
  ValueGrad<T> r{T(1) - (a.value + b.value) / T(2), a.grad};
  for (std::size_t i = 0; i < r.grad.size(); ++i) r.grad[i] = -(a.grad[i] + b.grad[i]) / T(2);
  return r;
}

template <class T>
T ssim_loss(const Tensor<T>& fused, const Tensor<T>& ir, const Tensor<T>& vi) {
  return T(1) - (ssim(fused, ir) + ssim(fused, vi)) / T(2);
}

// ---------------------------------------------------------------------------
// Intensity and gradient L1 terms

template <class T>
Tensor<T> elementwise_max(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "elementwise_max");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a[i], b[i]);
  return out;
}

namespace detail {

template <class T>
ValueGrad<T> mean_abs_residual(const Tensor<T>& x, const Tensor<T>& target) {
  require_same_shape(x, target, "mean_abs_residual");
  if (x.empty()) throw ShapeError("loss of empty plane");
  ValueGrad<T> r{T(0), Tensor<T>(x.channels(), x.height(), x.width())};
  const T inv_n = T(1) / static_cast<T>(x.size());
  long double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T d = x[i] - target[i];
    s += std::abs(d);
    r.grad[i] = d > 0 ? inv_n : (d < 0 ? -inv_n : T(0));
  }
  r.value = static_cast<T>(s / static_cast<long double>(x.size()));
  return r;
}

}  // namespace detail

/// mean |fused - max(ir, vi)|.
template <class T>
ValueGrad<T> smooth_loss_with_grad(const Tensor<T>& fused, const Tensor<T>& ir, const Tensor<T>& vi) {
  require_same_shape(fused, ir, "smooth_loss");
  return detail::mean_abs_residual(fused, elementwise_max(ir, vi));
}

template <class T>
T smooth_loss(const Tensor<T>& fused, const Tensor<T>& ir, const Tensor<T>& vi) {
  return smooth_loss_with_grad(fused, ir, vi).value;
}

/// mean |sobel(fused) - max(sobel(ir), sobel(vi))| with Sobel magnitudes.
template <class T>
ValueGrad<T> grad_loss_with_grad(const Tensor<T>& fused, const Tensor<T>& ir, const Tensor<T>& vi) {
  require_same_shape(fused, ir, "grad_loss");
  require_same_shape(fused, vi, "grad_loss");
  const SobelResponse<T> sf = sobel(fused);
  ValueGrad<T> r = detail::mean_abs_residual(sf.magnitude, elementwise_max(sobel_magnitude(ir), sobel_magnitude(vi)));
  r.grad = sobel_magnitude_backward(sf, r.grad);
  return r;
}

template <class T>
T grad_loss(const Tensor<T>& fused, const Tensor<T>& ir, const Tensor<T>& vi) {
  return grad_loss_with_grad(fused, ir, vi).value;
}

// ---------------------------------------------------------------------------
// Charbonnier structure reconstruction

/// Mean of sqrt((pred - gt)^2 + eps^2) pooled over every element of every
/// level and modality. Gradients are returned per prediction map.
template <class T>
struct MultiValueGrad {
  T value;
  std::vector<Tensor<T>> grads;
};

template <class T>
MultiValueGrad<T> charbonnier_rec_with_grad(std::span<const Tensor<T>> preds, std::span<const Tensor<T>> gts, T epsilon) {
  if (preds.size() != gts.size()) throw ShapeError("charbonnier_rec: prediction/target count mismatch");
  if (preds.empty()) throw ShapeError("charbonnier_rec: no levels");
  std::size_t count = 0;
  for (std::size_t l = 0; l < preds.size(); ++l) {
    require_same_shape(preds[l], gts[l], "charbonnier_rec");
    count += preds[l].size();
  }
  if (count == 0) throw ShapeError("charbonnier_rec: empty maps");
  const T inv_n = T(1) / static_cast<T>(count);
  const T eps2 = epsilon * epsilon;
  MultiValueGrad<T> r{T(0), {}};
  long double s = 0;
  for (std::size_t l = 0; l < preds.size(); ++l) {
    Tensor<T> g(preds[l].channels(), preds[l].height(), preds[l].width());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T d = preds[l][i] - gts[l][i];
      const T root = std::sqrt(d * d + eps2);
      s += root;
      g[i] = root > T(0) ? inv_n * d / root : T(0);
    }
    r.grads.push_back(std::move(g));
  }
  r.value = static_cast<T>(s / static_cast<long double>(count));
  return r;
}

template <class T>
T charbonnier_rec(std::span<const Tensor<T>> preds, std::span<const Tensor<T>> gts, T epsilon) {
  return charbonnier_rec_with_grad(preds, gts, epsilon).value;
}

// ---------------------------------------------------------------------------
// Total

struct LossBreakdown {
  double total = 0;
  double rec = 0;
  double ssim = 0;
  double smooth = 0;
  double grad = 0;
  double alpha = 0.01;
  double epsilon = 1.0;

  double fusion() const { return ssim + smooth + grad; }
};

/// total = alpha * rec + ssim + smooth + grad.
inline LossBreakdown total_loss(double rec, double ssim, double smooth, double grad, double alpha,
                                double epsilon = 1.0) {
  if (alpha < 0) throw ConfigError("alpha must be non-negative");
  return {alpha * rec + ssim + smooth + grad, rec, ssim, smooth, grad, alpha, epsilon};
}

// ---------------------------------------------------------------------------
// Tape wrappers (sources and targets are constants)

namespace ad {

template <class T>
Var ssim_loss(Tape<T>& tape, Var fused, const Tensor<T>& ir, const Tensor<T>& vi) {
  ValueGrad<T> vg = ssim_loss_with_grad(tape.value(fused), ir, vi);
  return scalar_op(tape, {fused}, vg.value, {std::move(vg.grad)});
}

template <class T>
Var smooth_loss(Tape<T>& tape, Var fused, const Tensor<T>& ir, const Tensor<T>& vi) {
  ValueGrad<T> vg = smooth_loss_with_grad(tape.value(fused), ir, vi);
  return scalar_op(tape, {fused}, vg.value, {std::move(vg.grad)});
}

template <class T>
Var grad_loss(Tape<T>& tape, Var fused, const Tensor<T>& ir, const Tensor<T>& vi) {
  ValueGrad<T> vg = grad_loss_with_grad(tape.value(fused), ir, vi);
  return scalar_op(tape, {fused}, vg.value, {std::move(vg.grad)});
}

template <class T>
Var charbonnier_rec(Tape<T>& tape, const std::vector<Var>& preds, const std::vector<Tensor<T>>& gts, T epsilon) {
  std::vector<Tensor<T>> values;
  values.reserve(preds.size());
  for (Var p : preds) values.push_back(tape.value(p));
  MultiValueGrad<T> vg = charbonnier_rec_with_grad<T>(values, gts, epsilon);
  return scalar_op(tape, preds, vg.value, std::move(vg.grads));
}

}  // namespace ad

}  // namespace sspf
