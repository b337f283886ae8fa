#pragma once

// PNG/JPEG/BMP decoding and PNG encoding through OpenCV's imgcodecs.

#include <cstdint>
#include <filesystem>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "sspf/errors.hpp"
#include "sspf/imagedata.hpp"
#include "sspf/structmap.hpp"
#include "sspf/tensor.hpp"

namespace sspf::io {

/// Decodes an 8-bit image to a C x H x W tensor in [0,1]; C is 1 for
/// grayscale files and 3 (RGB order) otherwise.
template <class T>
Tensor<T> load_image(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IoError("cannot decode image " + path.string());
  if (m.depth() != CV_8U) throw IoError("not an 8-bit image: " + path.string());
  // Alpha, when present, is dropped.
  const int stride = m.channels();
  const int c = stride <= 2 ? 1 : 3;
  Tensor<T> out(c, m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y) {
    const std::uint8_t* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      if (c == 1) {
        out(0, y, x) = static_cast<T>(row[stride * x] / 255.0);
      } else {
        // OpenCV stores BGR.
        for (int k = 0; k < 3; ++k) out(k, y, x) = static_cast<T>(row[stride * x + (2 - k)] / 255.0);
      }
    }
  }
  return out;
}

/// Loads a registered pair: ir as luminance, vi as YUV (grayscale visible
/// images get neutral chroma).
template <class T>
ImagePair<T> load_pair(const std::filesystem::path& ir_path, const std::filesystem::path& vi_path,
                       std::string pair_id = {}) {
  if (pair_id.empty()) pair_id = ir_path.stem().string();
  Tensor<T> ir = luminance(load_image<T>(ir_path));
  Tensor<T> vi = load_image<T>(vi_path);
  if (!ir.same_spatial(vi)) {
    throw RegistrationError("pair '" + pair_id + "': infrared " + std::to_string(ir.height()) + "x" +
                            std::to_string(ir.width()) + " vs visible " + std::to_string(vi.height()) +
                            "x" + std::to_string(vi.width()));
  }
  Tensor<T> yuv(3, vi.height(), vi.width(), T(0.5));
  if (vi.channels() == 1) {
    std::copy(vi.values().begin(), vi.values().end(), yuv.channel(0).begin());
  } else {
    yuv = rgb_to_yuv(vi);
  }
  ImagePair<T> p{std::move(ir), std::move(yuv), std::move(pair_id)};
  p.validate();
  return p;
}

template <class T>
ImagePair<T> load_pair(const DatasetSplit& split, const std::string& id) {
  return load_pair<T>(resolve_image(split.root_path / "ir", id), resolve_image(split.root_path / "vi", id),
                      id);
}

inline std::uint8_t quantize8(double v) {
  const double s = std::clamp(v, 0.0, 1.0) * 255.0;
  return static_cast<std::uint8_t>(std::lround(s));
}

/// Writes a 1- or 3-channel tensor in [0,1] as an 8-bit PNG.
template <class T>
void save_png(const std::filesystem::path& path, const Tensor<T>& img) {
  if (img.channels() != 1 && img.channels() != 3) throw ShapeError("save_png: need 1 or 3 channels");
  cv::Mat m(img.height(), img.width(), img.channels() == 1 ? CV_8UC1 : CV_8UC3);
  for (int y = 0; y < img.height(); ++y) {
    std::uint8_t* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < img.width(); ++x) {
      if (img.channels() == 1) {
        row[x] = quantize8(img(0, y, x));
      } else {
        for (int k = 0; k < 3; ++k) row[3 * x + (2 - k)] = quantize8(img(k, y, x));
      }
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), m)) throw IoError("cannot write " + path.string());
}

/// Binary map as a 0/255 PNG.
inline void save_binary_png(const std::filesystem::path& path, const BinaryMap& map) {
  save_png(path, map.cast<float>());
}

}  // namespace sspf::io
