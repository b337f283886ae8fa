#pragma once

// Procedural registered infrared/visible scenes for smoke training, demos and
// tests. Warm objects are bright in infrared and low-contrast in visible;
// texture patches exist only in visible; a horizon edge appears in both.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "sspf/imagedata.hpp"
#include "sspf/tensor.hpp"

namespace sspf {

template <class T>
ImagePair<T> synthetic_pair(int height, int width, std::uint64_t seed, std::string pair_id = {}) {
  std::mt19937_64 rng(seed);
  auto uni = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  Tensor<double> ir = Tensor<double>::plane(height, width);
  Tensor<double> rgb(3, height, width);

  const double horizon = uni(0.3, 0.6) * height;
  const double tilt = uni(-0.2, 0.2);
  const double sky[3] = {uni(0.5, 0.8), uni(0.6, 0.85), uni(0.75, 0.95)};
  const double ground[3] = {uni(0.2, 0.4), uni(0.25, 0.45), uni(0.15, 0.3)};
  const double ir_sky = uni(0.05, 0.15), ir_ground = uni(0.25, 0.4);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const bool above = y < horizon + tilt * (x - width / 2.0);
      ir.at(y, x) = above ? ir_sky : ir_ground + 0.1 * y / height;
      for (int c = 0; c < 3; ++c) rgb(c, y, x) = above ? sky[c] * (1 - 0.3 * y / height) : ground[c];
    }

  // Visible-only texture patches.
  const int patches = 2 + static_cast<int>(rng() % 3);
  for (int p = 0; p < patches; ++p) {
    const int x0 = static_cast<int>(uni(0, width * 0.7)), y0 = static_cast<int>(uni(0, height * 0.7));
    const int pw = static_cast<int>(uni(0.15, 0.35) * width), ph = static_cast<int>(uni(0.15, 0.35) * height);
    const double period = uni(3, 8), phase = uni(0, 6.28), amp = uni(0.15, 0.3);
    const bool vertical = rng() % 2 == 0;
    for (int y = y0; y < std::min(height, y0 + ph); ++y)
      for (int x = x0; x < std::min(width, x0 + pw); ++x) {
        const double s = amp * std::sin(2 * 3.14159265358979 * (vertical ? x : y) / period + phase);
        for (int c = 0; c < 3; ++c) rgb(c, y, x) += s;
      }
  }

  // Warm objects.
  const int objects = 1 + static_cast<int>(rng() % 3);
  for (int o = 0; o < objects; ++o) {
    const double cx = uni(0.15, 0.85) * width, cy = uni(0.3, 0.9) * height;
    const double rx = uni(0.05, 0.12) * width, ry = uni(0.1, 0.2) * height;
    const double heat = uni(0.75, 1.0), tint = uni(-0.1, 0.1);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double d = std::pow((x - cx) / rx, 2) + std::pow((y - cy) / ry, 2);
        if (d <= 1) {
          ir.at(y, x) = heat * (1 - 0.2 * d);
          for (int c = 0; c < 3; ++c) rgb(c, y, x) = 0.5 * rgb(c, y, x) + 0.2 + (c == 0 ? tint : -tint / 2);
        }
      }
  }

  for (auto& v : ir.values()) v = std::clamp(v + uni(-0.02, 0.02), 0.0, 1.0);
  for (auto& v : rgb.values()) v = std::clamp(v + uni(-0.02, 0.02), 0.0, 1.0);

  ImagePair<double> pair{std::move(ir), rgb_to_yuv(rgb), std::move(pair_id)};
  return pair.template cast<T>();
}

}  // namespace sspf
