#pragma once

// Infrared/visible pairs in YUV space, colour conversion, cropping, padding
// and dataset layout discovery. Image decoding lives in image_io.hpp.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sspf/errors.hpp"
#include "sspf/tensor.hpp"

namespace sspf {

/// Registered infrared/visible pair. ir_y is H x W, vi_yuv is 3 x H x W with
/// Y in [0,1] and U/V centred at 0.5.
template <class T>
struct ImagePair {
  Tensor<T> ir_y;
  Tensor<T> vi_yuv;
  std::string pair_id;

  int height() const { return ir_y.height(); }
  int width() const { return ir_y.width(); }
  Tensor<T> vi_y() const { return vi_yuv.channel_plane(0); }

  /// Checks the registration and range invariants; throws on violation.
  void validate() const {
    if (ir_y.channels() != 1) throw ShapeError("ImagePair: ir must be a single plane");
    if (vi_yuv.channels() != 3) throw ShapeError("ImagePair: vi must have 3 planes");
    if (!ir_y.same_spatial(vi_yuv)) {
      throw RegistrationError("pair '" + pair_id + "': infrared " + ir_y.shape_string() +
                              " and visible " + vi_yuv.shape_string() + " differ in size");
    }
  }

  template <class U>
  ImagePair<U> cast() const {
    return {ir_y.template cast<U>(), vi_yuv.template cast<U>(), pair_id};
  }
};

// BT.601 full-range (JFIF) coefficients.
namespace bt601 {
inline constexpr double kYr = 0.299, kYg = 0.587, kYb = 0.114;
inline constexpr double kUr = -0.168736, kUg = -0.331264, kUb = 0.5;
inline constexpr double kVr = 0.5, kVg = -0.418688, kVb = -0.081312;
inline constexpr double kRv = 1.402, kGu = -0.344136, kGv = -0.714136, kBu = 1.772;
}  // namespace bt601

inline std::array<double, 3> rgb_to_yuv_pixel(double r, double g, double b) {
  using namespace bt601;
  return {kYr * r + kYg * g + kYb * b, kUr * r + kUg * g + kUb * b + 0.5,
          kVr * r + kVg * g + kVb * b + 0.5};
}

inline std::array<double, 3> yuv_to_rgb_pixel(double y, double u, double v) {
  using namespace bt601;
  auto clamp01 = [](double x) { return std::clamp(x, 0.0, 1.0); };
  const double du = u - 0.5, dv = v - 0.5;
  return {clamp01(y + kRv * dv), clamp01(y + kGu * du + kGv * dv), clamp01(y + kBu * du)};
}

/// 3 x H x W RGB in [0,1] to 3 x H x W YUV.
template <class T>
Tensor<T> rgb_to_yuv(const Tensor<T>& rgb) {
  if (rgb.channels() != 3) throw ShapeError("rgb_to_yuv: expected 3 channels, got " + rgb.shape_string());
  Tensor<T> out(3, rgb.height(), rgb.width());
  for (int y = 0; y < rgb.height(); ++y)
    for (int x = 0; x < rgb.width(); ++x) {
      const auto p = rgb_to_yuv_pixel(rgb(0, y, x), rgb(1, y, x), rgb(2, y, x));
      for (int c = 0; c < 3; ++c) out(c, y, x) = static_cast<T>(p[c]);
    }
  return out;
}

/// Recombines a fused luminance plane with chroma planes (2 x H x W, or the
/// full 3-plane YUV tensor whose Y is ignored). Output RGB is clamped to [0,1].
template <class T>
Tensor<T> yuv_to_rgb(const Tensor<T>& fused_y, const Tensor<T>& uv) {
  if (fused_y.channels() != 1) throw ShapeError("yuv_to_rgb: luminance must be a single plane");
  if (!fused_y.same_spatial(uv) || (uv.channels() != 2 && uv.channels() != 3)) {
    throw ShapeError("yuv_to_rgb: luminance " + fused_y.shape_string() + " vs chroma " +
                     uv.shape_string());
  }
  const int off = uv.channels() == 3 ? 1 : 0;
  Tensor<T> out(3, fused_y.height(), fused_y.width());
  for (int y = 0; y < fused_y.height(); ++y)
    for (int x = 0; x < fused_y.width(); ++x) {
      const auto p = yuv_to_rgb_pixel(fused_y.at(y, x), uv(off, y, x), uv(off + 1, y, x));
      for (int c = 0; c < 3; ++c) out(c, y, x) = static_cast<T>(p[c]);
    }
  return out;
}

/// Luma of an RGB tensor; passes single planes through.
template <class T>
Tensor<T> luminance(const Tensor<T>& img) {
  if (img.channels() == 1) return img;
  return rgb_to_yuv(img).channel_plane(0);
}

template <class T>
Tensor<T> crop(const Tensor<T>& t, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || top + height > t.height() || left + width > t.width()) {
    throw ShapeError("crop window out of range for " + t.shape_string());
  }
  Tensor<T> out(t.channels(), height, width);
  for (int c = 0; c < t.channels(); ++c)
    for (int y = 0; y < height; ++y)
      std::copy_n(&t(c, top + y, left), width, &out(c, y, 0));
  return out;
}

/// Same square window cut from both modalities; deterministic for a seed.
template <class T>
ImagePair<T> random_crop_pair(const ImagePair<T>& pair, int size, std::uint64_t seed) {
  pair.validate();
  if (size <= 0 || size > std::min(pair.height(), pair.width())) {
    throw ShapeError("random_crop_pair: crop " + std::to_string(size) + " exceeds pair " +
                     pair.ir_y.shape_string());
  }
  std::mt19937_64 rng(seed);
  const int top = std::uniform_int_distribution<int>(0, pair.height() - size)(rng);
  const int left = std::uniform_int_distribution<int>(0, pair.width() - size)(rng);
  return {crop(pair.ir_y, top, left, size, size), crop(pair.vi_yuv, top, left, size, size),
          pair.pair_id};
}

/// Replicate-pads right/bottom so both dimensions are multiples of `multiple`.
template <class T>
Tensor<T> pad_to_multiple(const Tensor<T>& t, int multiple) {
  const int h = (t.height() + multiple - 1) / multiple * multiple;
  const int w = (t.width() + multiple - 1) / multiple * multiple;
  if (h == t.height() && w == t.width()) return t;
  Tensor<T> out(t.channels(), h, w);
  for (int c = 0; c < t.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out(c, y, x) = t(c, std::min(y, t.height() - 1), std::min(x, t.width() - 1));
  return out;
}

template <class T>
ImagePair<T> pad_pair_to_multiple(const ImagePair<T>& p, int multiple) {
  return {pad_to_multiple(p.ir_y, multiple), pad_to_multiple(p.vi_yuv, multiple), p.pair_id};
}

/// Pairs matched by identical stem under <root>/ir and <root>/vi.
struct DatasetSplit {
  std::filesystem::path root_path;
  std::vector<std::string> pair_ids;
  std::optional<int> crop_size;

  std::size_t size() const { return pair_ids.size(); }
  bool empty() const { return pair_ids.empty(); }
};

inline bool is_supported_image(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

namespace detail {

inline std::map<std::string, std::vector<std::filesystem::path>> images_by_stem(
    const std::filesystem::path& dir) {
  std::map<std::string, std::vector<std::filesystem::path>> out;
  if (!std::filesystem::is_directory(dir)) throw IoError("missing directory " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && is_supported_image(e.path())) {
      out[e.path().stem().string()].push_back(e.path());
    }
  }
  return out;
}

}  // namespace detail

/// Finds the single image with the given stem in a directory.
inline std::filesystem::path resolve_image(const std::filesystem::path& dir, const std::string& id) {
  std::vector<std::filesystem::path> hits;
  if (std::filesystem::is_directory(dir)) {
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      if (e.is_regular_file() && is_supported_image(e.path()) && e.path().stem() == id) {
        hits.push_back(e.path());
      }
    }
  }
  if (hits.empty()) throw IoError("no image for '" + id + "' in " + dir.string());
  if (hits.size() > 1) throw IoError("ambiguous image stem '" + id + "' in " + dir.string());
  return hits.front();
}

/// Lists a dataset root. Every stem must exist exactly once in both ir/ and vi/.
inline DatasetSplit scan_dataset(const std::filesystem::path& root, std::optional<int> crop_size = {}) {
  const auto ir = detail::images_by_stem(root / "ir");
  const auto vi = detail::images_by_stem(root / "vi");
  DatasetSplit split{root, {}, crop_size};
  for (const auto& [stem, files] : ir) {
    if (files.size() != 1) throw IoError("ambiguous infrared stem '" + stem + "'");
    auto it = vi.find(stem);
    if (it == vi.end()) throw IoError("infrared '" + stem + "' has no visible counterpart");
    if (it->second.size() != 1) throw IoError("ambiguous visible stem '" + stem + "'");
    split.pair_ids.push_back(stem);
  }
  for (const auto& [stem, files] : vi) {
    if (!ir.contains(stem)) throw IoError("visible '" + stem + "' has no infrared counterpart");
  }
  return split;
}

}  // namespace sspf
