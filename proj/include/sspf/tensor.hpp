#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sspf/errors.hpp"

namespace sspf {

/// Dense channel-major (C x H x W) array. A single-channel tensor doubles as
/// an image plane.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : c_(channels), h_(height), w_(width) {
    if (channels < 0 || height < 0 || width < 0) {
      throw ShapeError("negative tensor dimension");
    }
    data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
  }

  static Tensor plane(int height, int width, T fill = T(0)) {
    return Tensor(1, height, width, fill);
  }

  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return data_.size(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(h_) * w_; }
  bool empty() const { return data_.empty(); }

  T& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
  const T& operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }

  /// Plane accessors (channel 0).
  T& at(int y, int x) { return data_[index(0, y, x)]; }
  const T& at(int y, int x) const { return data_[index(0, y, x)]; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  std::span<T> channel(int c) {
    return std::span<T>(data_).subspan(static_cast<std::size_t>(c) * plane_size(), plane_size());
  }
  std::span<const T> channel(int c) const {
    return std::span<const T>(data_).subspan(static_cast<std::size_t>(c) * plane_size(), plane_size());
  }

  /// Copy of one channel as a plane.
  Tensor channel_plane(int c) const {
    Tensor out = plane(h_, w_);
    std::copy(channel(c).begin(), channel(c).end(), out.data_.begin());
    return out;
  }

  template <class U>
  bool same_shape(const Tensor<U>& o) const {
    return c_ == o.channels() && h_ == o.height() && w_ == o.width();
  }
  template <class U>
  bool same_spatial(const Tensor<U>& o) const {
    return h_ == o.height() && w_ == o.width();
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << c_ << "x" << h_ << "x" << w_;
    return os.str();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(c_, h_, w_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(*this, o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  bool operator==(const Tensor& o) const = default;

  friend void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
      throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                       b.shape_string());
    }
  }

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * h_ + y) * w_ + x;
  }

  int c_ = 0;
  int h_ = 0;
  int w_ = 0;
  std::vector<T> data_;
};

template <class T>
T mean(const Tensor<T>& t) {
  if (t.empty()) throw ShapeError("mean of empty tensor");
  long double s = 0;
  for (T v : t.values()) s += v;
  return static_cast<T>(s / static_cast<long double>(t.size()));
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(v); });
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max<T>(m, std::abs(a[i] - b[i]));
  return m;
}

/// 2x2 average pooling with floor division of odd sizes.
template <class T>
Tensor<T> avg_pool2(const Tensor<T>& in) {
  const int h = in.height() / 2, w = in.width() / 2;
  if (h == 0 || w == 0) throw ShapeError("avg_pool2: input too small " + in.shape_string());
  Tensor<T> out(in.channels(), h, w);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out(c, y, x) = (in(c, 2 * y, 2 * x) + in(c, 2 * y, 2 * x + 1) + in(c, 2 * y + 1, 2 * x) +
                        in(c, 2 * y + 1, 2 * x + 1)) *
                       T(0.25);
  return out;
}

}  // namespace sspf
