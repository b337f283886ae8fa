#pragma once

// Structure-preserving fusion of two feature pyramids. Unique-structure masks
// come from the classical ground-truth structure maps, so the fusion path
// carries no binarization on its gradient path.
//
// Enhancement rule (the vi rule mirrors the ir rule under ir <-> vi):
//   enhanced_ir = s_ir + (1 - m_ir) * f_ir + m_vi * f_vi
//   enhanced_vi = s_vi + m_ir * f_ir + (1 - m_vi) * f_vi
// where m_ir = s_ir (1 - s_vi) and m_vi = s_vi (1 - s_ir).

#include <string>
#include <utility>
#include <vector>

#include "sspf/autodiff.hpp"
#include "sspf/errors.hpp"
#include "sspf/structmap.hpp"
#include "sspf/tensor.hpp"

namespace sspf {

/// J(x, y) = (1 - x) y + (1 - y) x; XOR on binary maps.
template <class T>
Tensor<T> j_operator(const Tensor<T>& x, const Tensor<T>& y) {
  require_same_shape(x, y, "j_operator");
  Tensor<T> out(x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (T(1) - x[i]) * y[i] + (T(1) - y[i]) * x[i];
  return out;
}

inline BinaryMap j_operator(const BinaryMap& x, const BinaryMap& y) {
  require_same_shape(x, y, "j_operator");
  BinaryMap out(x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int a = x[i], b = y[i];
    out[i] = static_cast<std::uint8_t>((1 - a) * b + (1 - b) * a);
  }
  return out;
}

/// One level of unique-structure masks.
struct UniqueStructureMasks {
  BinaryMap m_ir;     ///< structure only in the infrared map
  BinaryMap m_vi;     ///< structure only in the visible map
  BinaryMap m_union;  ///< m_ir + m_vi
};

inline void require_binary(const BinaryMap& m, const char* what) {
  for (auto v : m.values()) {
    if (v > 1) throw ShapeError(std::string(what) + ": map is not binary");
  }
}

inline UniqueStructureMasks split_unique_masks(const BinaryMap& s_ir, const BinaryMap& s_vi) {
  require_same_shape(s_ir, s_vi, "split_unique_masks");
  require_binary(s_ir, "split_unique_masks");
  require_binary(s_vi, "split_unique_masks");
  UniqueStructureMasks m{BinaryMap(s_ir.channels(), s_ir.height(), s_ir.width()), {}, {}};
  m.m_vi = m.m_ir;
  m.m_union = m.m_ir;
  for (std::size_t i = 0; i < s_ir.size(); ++i) {
    m.m_ir[i] = static_cast<std::uint8_t>(s_ir[i] & (1 - s_vi[i]));
    m.m_vi[i] = static_cast<std::uint8_t>(s_vi[i] & (1 - s_ir[i]));
    m.m_union[i] = static_cast<std::uint8_t>(m.m_ir[i] + m.m_vi[i]);
  }
  return m;
}

namespace detail {

template <class T>
void check_spf_level(const Tensor<T>& f_ir, const Tensor<T>& f_vi, const BinaryMap& s_ir, const BinaryMap& s_vi) {
  require_same_shape(f_ir, f_vi, "enhance_features");
  require_same_shape(s_ir, s_vi, "enhance_features");
  if (s_ir.channels() != 1 || !f_ir.same_spatial(s_ir)) {
    throw ShapeError("enhance_features: structure map " + s_ir.shape_string() + " does not broadcast over " +
                     f_ir.shape_string());
  }
}

}  // namespace detail

template <class T>
struct EnhancedPair {
  Tensor<T> ir;
  Tensor<T> vi;
};

/// Applies the enhancement rule to one pyramid level.
template <class T>
EnhancedPair<T> enhance_features(const Tensor<T>& f_ir, const Tensor<T>& f_vi, const BinaryMap& s_ir,
                                 const BinaryMap& s_vi, const UniqueStructureMasks& masks) {
  detail::check_spf_level(f_ir, f_vi, s_ir, s_vi);
  require_same_shape(masks.m_ir, s_ir, "enhance_features");
  require_same_shape(masks.m_vi, s_ir, "enhance_features");
  EnhancedPair<T> out{f_ir, f_vi};
  const std::size_t hw = f_ir.plane_size();
  for (int c = 0; c < f_ir.channels(); ++c) {
    const auto fi = f_ir.channel(c);
    const auto fv = f_vi.channel(c);
    auto ei = out.ir.channel(c);
    auto ev = out.vi.channel(c);
    for (std::size_t p = 0; p < hw; ++p) {
      const T mi = masks.m_ir[p], mv = masks.m_vi[p];
      ei[p] = T(s_ir[p]) + (T(1) - mi) * fi[p] + mv * fv[p];
      ev[p] = T(s_vi[p]) + mi * fi[p] + (T(1) - mv) * fv[p];
    }
  }
  return out;
}

/// Per level: masks, enhancement, then element-wise sum of the two
/// enhanced tensors.
template <class T>
std::vector<Tensor<T>> fuse_pyramids(const std::vector<Tensor<T>>& pyr_ir, const std::vector<Tensor<T>>& pyr_vi,
                                     const StructurePyramid& struct_ir, const StructurePyramid& struct_vi) {
  const std::size_t n = pyr_ir.size();
  if (pyr_vi.size() != n || struct_ir.levels.size() != n || struct_vi.levels.size() != n) {
    throw ShapeError("fuse_pyramids: level count mismatch");
  }
  std::vector<Tensor<T>> fused;
  fused.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto masks = split_unique_masks(struct_ir.levels[k], struct_vi.levels[k]);
    EnhancedPair<T> e = enhance_features(pyr_ir[k], pyr_vi[k], struct_ir.levels[k], struct_vi.levels[k], masks);
    e.ir += e.vi;
    fused.push_back(std::move(e.ir));
  }
  return fused;
}

namespace ad {

/// Tape version of enhance_features for one level.
template <class T>
std::pair<Var, Var> enhance_features(Tape<T>& tape, Var f_ir, Var f_vi, const BinaryMap& s_ir, const BinaryMap& s_vi) {
  sspf::detail::check_spf_level(tape.value(f_ir), tape.value(f_vi), s_ir, s_vi);
  const auto masks = split_unique_masks(s_ir, s_vi);
  const Tensor<T> m_ir = masks.m_ir.template cast<T>();
  const Tensor<T> m_vi = masks.m_vi.template cast<T>();
  Tensor<T> keep_ir = m_ir, keep_vi = m_vi;
  for (auto& v : keep_ir.values()) v = T(1) - v;
  for (auto& v : keep_vi.values()) v = T(1) - v;
  Var e_ir = add(tape, mul_plane(tape, f_ir, keep_ir), mul_plane(tape, f_vi, m_vi));
  e_ir = add_plane(tape, e_ir, s_ir.template cast<T>());
  Var e_vi = add(tape, mul_plane(tape, f_ir, m_ir), mul_plane(tape, f_vi, keep_vi));
  e_vi = add_plane(tape, e_vi, s_vi.template cast<T>());
  return {e_ir, e_vi};
}

}  // namespace ad

}  // namespace sspf
