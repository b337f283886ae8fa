#pragma once

// Classical structure maps: Sobel gradient magnitude thresholded at the
// global mean of the gradient map, at several scales.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sspf/errors.hpp"
#include "sspf/tensor.hpp"

namespace sspf {

using BinaryMap = Tensor<std::uint8_t>;

/// Which side of the mean threshold is labelled 1.
enum class Polarity {
  kEdgePositive,  ///< 1 where grad >= mean(grad)
  kFlatPositive,  ///< 1 where grad - mean(grad) <= 0
};

inline std::string to_string(Polarity p) {
  return p == Polarity::kEdgePositive ? "edge" : "flat";
}

inline Polarity parse_polarity(const std::string& s) {
  if (s == "edge" || s == "edge-positive") return Polarity::kEdgePositive;
  if (s == "flat") return Polarity::kFlatPositive;
  throw ConfigError("unknown polarity '" + s + "' (expected edge|flat)");
}

struct StructurePyramid {
  std::vector<BinaryMap> levels;
  Polarity polarity = Polarity::kEdgePositive;

  int n_levels() const { return static_cast<int>(levels.size()); }
};

namespace detail {

inline int clamp_index(int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

// Correlation weights; kSobelY is the transpose of kSobelX.
inline constexpr int kSobelX[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
inline constexpr int kSobelY[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};

}  // namespace detail

/// Horizontal and vertical Sobel responses of a plane, replicate-padded.
template <class T>
struct SobelResponse {
  Tensor<T> gx;
  Tensor<T> gy;
  Tensor<T> magnitude;
};

template <class T>
SobelResponse<T> sobel(const Tensor<T>& img) {
  if (img.empty()) throw ShapeError("sobel: empty image");
  if (img.channels() != 1) throw ShapeError("sobel: expected a single-channel plane");
  const int h = img.height(), w = img.width();
  SobelResponse<T> r{Tensor<T>::plane(h, w), Tensor<T>::plane(h, w), Tensor<T>::plane(h, w)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int ym = detail::clamp_index(y - 1, h), yp = detail::clamp_index(y + 1, h);
      const int xm = detail::clamp_index(x - 1, w), xp = detail::clamp_index(x + 1, w);
      // Positive and negative taps are summed separately so flat regions give exactly 0.
      const T sx = (img.at(ym, xp) + T(2) * img.at(y, xp) + img.at(yp, xp)) -
                   (img.at(ym, xm) + T(2) * img.at(y, xm) + img.at(yp, xm));
      const T sy = (img.at(yp, xm) + T(2) * img.at(yp, x) + img.at(yp, xp)) -
                   (img.at(ym, xm) + T(2) * img.at(ym, x) + img.at(ym, xp));
      r.gx.at(y, x) = sx;
      r.gy.at(y, x) = sy;
      r.magnitude.at(y, x) = std::sqrt(sx * sx + sy * sy);
    }
  }
  return r;
}

/// sqrt(Gx^2 + Gy^2) with the unnormalized 3x3 Sobel kernels.
template <class T>
Tensor<T> sobel_magnitude(const Tensor<T>& img) {
  return sobel(img).magnitude;
}

/// Adjoint of sobel_magnitude: maps dL/dmagnitude to dL/dimg. Pixels with
/// zero magnitude pass no gradient (subgradient 0).
template <class T>
Tensor<T> sobel_magnitude_backward(const SobelResponse<T>& fwd, const Tensor<T>& grad_mag) {
  require_same_shape(fwd.magnitude, grad_mag, "sobel_magnitude_backward");
  const int h = grad_mag.height(), w = grad_mag.width();
  Tensor<T> grad_img = Tensor<T>::plane(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const T m = fwd.magnitude.at(y, x);
      if (m == T(0)) continue;
      const T gx = grad_mag.at(y, x) * fwd.gx.at(y, x) / m;
      const T gy = grad_mag.at(y, x) * fwd.gy.at(y, x) / m;
      for (int dy = -1; dy <= 1; ++dy) {
        const int yy = detail::clamp_index(y + dy, h);
        for (int dx = -1; dx <= 1; ++dx) {
          grad_img.at(yy, detail::clamp_index(x + dx, w)) +=
              T(detail::kSobelX[dy + 1][dx + 1]) * gx + T(detail::kSobelY[dy + 1][dx + 1]) * gy;
        }
      }
    }
  }
  return grad_img;
}

/// Thresholds a gradient-magnitude plane at its own global mean.
template <class T>
BinaryMap binarize_by_global_mean(const Tensor<T>& grad, Polarity polarity = Polarity::kEdgePositive) {
  if (grad.empty()) return BinaryMap();
  // Accumulate in long double so a constant plane yields a mean equal to that constant.
  long double sum = 0;
  for (T v : grad.values()) sum += v;
  const long double avg = sum / static_cast<long double>(grad.size());
  BinaryMap out(grad.channels(), grad.height(), grad.width());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const long double g = grad[i];
    const bool on = polarity == Polarity::kEdgePositive ? g >= avg : g - avg <= 0;
    out[i] = on ? 1 : 0;
  }
  return out;
}

/// Ground-truth structure maps: level k is computed on the image average-pooled
/// (k-1) times.
template <class T>
StructurePyramid structure_pyramid_gt(const Tensor<T>& img, int n_levels,
                                      Polarity polarity = Polarity::kEdgePositive) {
  if (n_levels < 1) throw ShapeError("structure_pyramid_gt: n_levels must be >= 1");
  if (img.empty()) throw ShapeError("structure_pyramid_gt: empty image");
  const int need = 1 << (n_levels - 1);
  if (img.height() < need || img.width() < need) {
    throw ShapeError("structure_pyramid_gt: image " + img.shape_string() + " too small for " +
                     std::to_string(n_levels) + " levels");
  }
  StructurePyramid pyr;
  pyr.polarity = polarity;
  Tensor<T> current = img;
  for (int k = 0; k < n_levels; ++k) {
    if (k > 0) current = avg_pool2(current);
    pyr.levels.push_back(binarize_by_global_mean(sobel_magnitude(current), polarity));
  }
  return pyr;
}

/// Full-resolution edge map (edge-positive polarity) for visual inspection.
/// Pixels with zero gradient are never marked, so flat images render black.
template <class T>
BinaryMap edge_map_for_display(const Tensor<T>& img) {
  const Tensor<T> g = sobel_magnitude(img);
  BinaryMap m = binarize_by_global_mean(g, Polarity::kEdgePositive);
  for (std::size_t i = 0; i < m.size(); ++i)
    if (g[i] == T(0)) m[i] = 0;
  return m;
}

template <class T>
Tensor<T> to_scalar_map(const BinaryMap& m) {
  return m.template cast<T>();
}

}  // namespace sspf
