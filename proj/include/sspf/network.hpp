#pragma once

// U-shaped fusion backbone: one encoder per modality (residual conv levels
// joined by 2x2 average pooling, with a 1x1 sigmoid structure head per
// level), a structure-preserving merge per level, and a decoder that
// upsamples and concatenates the fused levels back to a single [0,1] plane.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sspf/autodiff.hpp"
#include "sspf/errors.hpp"
#include "sspf/imagedata.hpp"
#include "sspf/spf.hpp"
#include "sspf/structmap.hpp"
#include "sspf/tensor.hpp"

namespace sspf {

enum class MergeMode {
  kSum,      ///< fused = enhanced_ir + enhanced_vi
  kLearned,  ///< fused = conv1x1([enhanced_ir; enhanced_vi])
};

inline std::string to_string(MergeMode m) { return m == MergeMode::kSum ? "sum" : "learned"; }
inline MergeMode parse_merge_mode(const std::string& s) {
  if (s == "sum") return MergeMode::kSum;
  if (s == "learned") return MergeMode::kLearned;
  throw ConfigError("unknown merge mode '" + s + "' (expected sum|learned)");
}

enum class Modality { kInfrared, kVisible };

struct ModelConfig {
  int n_levels = 3;
  int base_channels = 16;
  int residual_blocks_per_level = 2;
  std::uint64_t seed = 0;
  MergeMode merge = MergeMode::kSum;
  Polarity polarity = Polarity::kEdgePositive;

  /// Channels at 0-based level k.
  int level_channels(int k) const { return base_channels << k; }
  /// Input sizes must be multiples of this.
  int size_multiple() const { return 1 << (n_levels - 1); }

  void validate() const {
    if (n_levels < 1) throw ConfigError("n_levels must be >= 1");
    if (n_levels > 12) throw ConfigError("n_levels too large");
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (residual_blocks_per_level < 0) throw ConfigError("residual_blocks_per_level must be >= 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <class T>
using ParamSet = std::map<std::string, Tensor<T>>;

template <class T>
using FeaturePyramid = std::vector<Tensor<T>>;

/// Per-level single-channel sigmoid maps in [0,1].
template <class T>
using SoftStructurePrediction = std::vector<Tensor<T>>;

/// Name and (Cout, Cin, taps) shape of every parameter, in a fixed order.
struct ParamSpec {
  std::string name;
  int cout;
  int cin;
  int kernel;
  bool is_bias;
};

inline std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> specs;
  auto conv = [&specs](const std::string& name, int cout, int cin, int k) {
    specs.push_back({name + ".w", cout, cin, k, false});
    specs.push_back({name + ".b", cout, 1, 1, true});
  };
  for (const char* m : {"ir", "vi"}) {
    for (int k = 0; k < cfg.n_levels; ++k) {
      const std::string lvl = std::string("enc.") + m + ".l" + std::to_string(k + 1);
      const int c = cfg.level_channels(k);
      conv(lvl + ".in", c, k == 0 ? 1 : cfg.level_channels(k - 1), 3);
      for (int r = 0; r < cfg.residual_blocks_per_level; ++r) {
        conv(lvl + ".res" + std::to_string(r) + ".a", c, c, 3);
        conv(lvl + ".res" + std::to_string(r) + ".b", c, c, 3);
      }
      conv(lvl + ".head", 1, c, 1);
    }
  }
  if (cfg.merge == MergeMode::kLearned) {
    for (int k = 0; k < cfg.n_levels; ++k) {
      conv("merge.l" + std::to_string(k + 1), cfg.level_channels(k), 2 * cfg.level_channels(k), 1);
    }
  }
  const int top = cfg.n_levels - 1;
  conv("dec.l" + std::to_string(top + 1) + ".in", cfg.level_channels(top), cfg.level_channels(top), 3);
  for (int k = top - 1; k >= 0; --k) {
    const std::string lvl = "dec.l" + std::to_string(k + 1);
    conv(lvl + ".up", cfg.level_channels(k), cfg.level_channels(k + 1), 3);
    conv(lvl + ".fuse", cfg.level_channels(k), 2 * cfg.level_channels(k), 3);
  }
  conv("dec.out", 1, cfg.base_channels, 3);
  return specs;
}

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

/// Kaiming-uniform (fan-in) weights for ReLU layers, unit-gain uniform for
/// the layers feeding a sigmoid, zeros for the second conv of each residual
/// block (blocks start as identities) and zero biases. Each tensor draws from
/// its own stream keyed by (seed, name), so initialization does not depend
/// on construction order.
template <class T>
ParamSet<T> init_parameters(const ModelConfig& cfg) {
  ParamSet<T> params;
  for (const ParamSpec& s : parameter_specs(cfg)) {
    Tensor<T> t(s.cout, s.cin, s.kernel * s.kernel);
    const bool residual_out = s.name.find(".res") != std::string::npos && s.name.ends_with(".b.w");
    if (!s.is_bias && !residual_out) {
      std::mt19937_64 rng(cfg.seed ^ detail::fnv1a(s.name));
      const bool pre_sigmoid = s.name.ends_with(".head.w") || s.name == "dec.out.w";
      const double bound = std::sqrt((pre_sigmoid ? 3.0 : 6.0) / (s.cin * s.kernel * s.kernel));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    }
    params.emplace(s.name, std::move(t));
  }
  return params;
}

template <class T>
std::size_t parameter_count(const ParamSet<T>& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : p) n += t.size();
  return n;
}

/// Lazily places parameters on a tape as leaves and collects their gradients.
template <class T>
class ParamBinding {
 public:
  ParamBinding(ad::Tape<T>& tape, const ParamSet<T>& params, bool trainable = true)
      : tape_(&tape), params_(&params), trainable_(trainable) {}

  ad::Var operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    auto p = params_->find(name);
    if (p == params_->end()) throw Error("missing parameter '" + name + "'");
    ad::Var v = trainable_ ? tape_->variable(p->second) : tape_->constant(p->second);
    vars_.emplace(name, v);
    return v;
  }

  /// Gradients for every parameter in the set (zeros where unused).
  ParamSet<T> gradients() const {
    ParamSet<T> g;
    for (const auto& [name, t] : *params_) {
      auto it = vars_.find(name);
      g.emplace(name, it == vars_.end() ? Tensor<T>(t.channels(), t.height(), t.width()) : tape_->grad(it->second));
    }
    return g;
  }

  const std::map<std::string, ad::Var>& bound() const { return vars_; }

 private:
  ad::Tape<T>* tape_;
  const ParamSet<T>* params_;
  bool trainable_;
  std::map<std::string, ad::Var> vars_;
};

template <class T>
struct EncoderVars {
  std::vector<ad::Var> features;
  std::vector<ad::Var> soft;  ///< empty when heads are disabled
};

template <class T>
struct FusionVars {
  ad::Var fused_y;
  EncoderVars<T> ir;
  EncoderVars<T> vi;
  std::vector<ad::Var> fused_levels;
};

/// Plain-tensor result of a forward pass.
template <class T>
struct FusionResult {
  Tensor<T> fused_y;
  SoftStructurePrediction<T> soft_ir;
  SoftStructurePrediction<T> soft_vi;
};

template <class T>
class FusionModel {
 public:
  explicit FusionModel(const ModelConfig& cfg) : cfg_(cfg), params_(init_parameters<T>(cfg)) {}
  FusionModel(const ModelConfig& cfg, ParamSet<T> params) : cfg_(cfg), params_(std::move(params)) {
    for (const ParamSpec& s : parameter_specs(cfg_)) {
      auto it = params_.find(s.name);
      if (it == params_.end()) throw ConfigError("parameter set lacks '" + s.name + "'");
      if (it->second.channels() != s.cout || it->second.height() != s.cin ||
          it->second.width() != s.kernel * s.kernel) {
        throw ShapeError("parameter '" + s.name + "' has shape " + it->second.shape_string());
      }
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamSet<T>& params() const { return params_; }
  ParamSet<T>& params() { return params_; }

  void check_input(const Tensor<T>& img) const {
    if (img.channels() != 1) throw ShapeError("encode: expected a single plane, got " + img.shape_string());
    const int m = cfg_.size_multiple();
    if (img.height() % m != 0 || img.width() % m != 0 || img.empty()) {
      throw ShapeError("input " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                       " not divisible by " + std::to_string(m));
    }
  }

  EncoderVars<T> encode(ad::Tape<T>& tape, ParamBinding<T>& p, ad::Var img, Modality m, bool with_heads) const {
    check_input(tape.value(img));
    const std::string prefix = m == Modality::kInfrared ? "enc.ir" : "enc.vi";
    EncoderVars<T> out;
    ad::Var x = img;
    for (int k = 0; k < cfg_.n_levels; ++k) {
      const std::string lvl = prefix + ".l" + std::to_string(k + 1);
      if (k > 0) x = ad::avg_pool2(tape, x);
      x = ad::relu(tape, conv(tape, p, x, lvl + ".in"));
      for (int r = 0; r < cfg_.residual_blocks_per_level; ++r) {
        const std::string blk = lvl + ".res" + std::to_string(r);
        ad::Var y = ad::relu(tape, conv(tape, p, x, blk + ".a"));
        y = conv(tape, p, y, blk + ".b");
        x = ad::relu(tape, ad::add(tape, x, y));
      }
      out.features.push_back(x);
      if (with_heads) out.soft.push_back(ad::sigmoid(tape, conv(tape, p, x, lvl + ".head")));
    }
    return out;
  }

  ad::Var decode(ad::Tape<T>& tape, ParamBinding<T>& p, const std::vector<ad::Var>& fused) const {
    check_pyramid(tape, fused);
    const int top = cfg_.n_levels - 1;
    ad::Var x = ad::relu(tape, conv(tape, p, fused[top], "dec.l" + std::to_string(top + 1) + ".in"));
    for (int k = top - 1; k >= 0; --k) {
      const std::string lvl = "dec.l" + std::to_string(k + 1);
      ad::Var u = ad::relu(tape, conv(tape, p, ad::upsample2(tape, x), lvl + ".up"));
      x = ad::relu(tape, conv(tape, p, ad::concat(tape, u, fused[k]), lvl + ".fuse"));
    }
    return ad::sigmoid(tape, conv(tape, p, x, "dec.out"));
  }

  /// Merges one level. With SPF disabled the merge is a plain sum of the
  /// encoder features.
  ad::Var merge_level(ad::Tape<T>& tape, ParamBinding<T>& p, int k, ad::Var f_ir, ad::Var f_vi, const BinaryMap* s_ir,
                      const BinaryMap* s_vi, bool spf_enabled) const {
    if (!spf_enabled) return ad::add(tape, f_ir, f_vi);
    if (s_ir == nullptr || s_vi == nullptr) throw Error("merge_level: SPF needs structure maps");
    auto [e_ir, e_vi] = ad::enhance_features(tape, f_ir, f_vi, *s_ir, *s_vi);
    if (cfg_.merge == MergeMode::kSum) return ad::add(tape, e_ir, e_vi);
    return conv(tape, p, ad::concat(tape, e_ir, e_vi), "merge.l" + std::to_string(k + 1));
  }

  /// encode(ir), encode(vi), per-level merge, decode. Structure pyramids are
  /// the classical ground-truth maps of the two inputs (required when
  /// spf_enabled).
  FusionVars<T> forward_fusion(ad::Tape<T>& tape, ParamBinding<T>& p, ad::Var ir_y, ad::Var vi_y,
                               const StructurePyramid* s_ir, const StructurePyramid* s_vi, bool spf_enabled,
                               bool sfe_enabled) const {
    if (!tape.value(ir_y).same_shape(tape.value(vi_y))) throw RegistrationError("forward_fusion: ir/vi size mismatch");
    FusionVars<T> out;
    out.ir = encode(tape, p, ir_y, Modality::kInfrared, sfe_enabled);
    out.vi = encode(tape, p, vi_y, Modality::kVisible, sfe_enabled);
    if (spf_enabled) {
      if (s_ir == nullptr || s_vi == nullptr || s_ir->n_levels() != cfg_.n_levels || s_vi->n_levels() != cfg_.n_levels) {
        throw ShapeError("forward_fusion: structure pyramids must have n_levels levels");
      }
    }
    for (int k = 0; k < cfg_.n_levels; ++k) {
      out.fused_levels.push_back(merge_level(tape, p, k, out.ir.features[k], out.vi.features[k],
                                             spf_enabled ? &s_ir->levels[k] : nullptr,
                                             spf_enabled ? &s_vi->levels[k] : nullptr, spf_enabled));
    }
    out.fused_y = decode(tape, p, out.fused_levels);
    return out;
  }

  // Tensor-level conveniences (no gradients).

  std::pair<FeaturePyramid<T>, SoftStructurePrediction<T>> encode(const Tensor<T>& img, Modality m) const {
    ad::Tape<T> tape;
    ParamBinding<T> p(tape, params_, false);
    EncoderVars<T> v = encode(tape, p, tape.constant(img), m, true);
    return {values(tape, v.features), values(tape, v.soft)};
  }

  Tensor<T> decode(const FeaturePyramid<T>& fused) const {
    ad::Tape<T> tape;
    ParamBinding<T> p(tape, params_, false);
    std::vector<ad::Var> vars;
    for (const auto& t : fused) vars.push_back(tape.constant(t));
    return tape.value(decode(tape, p, vars));
  }

  FusionResult<T> forward_fusion(const Tensor<T>& ir_y, const Tensor<T>& vi_y, bool spf_enabled = true,
                                 bool sfe_enabled = true) const {
    ad::Tape<T> tape;
    ParamBinding<T> p(tape, params_, false);
    const StructurePyramid s_ir = structure_pyramid_gt(ir_y, cfg_.n_levels, cfg_.polarity);
    const StructurePyramid s_vi = structure_pyramid_gt(vi_y, cfg_.n_levels, cfg_.polarity);
    FusionVars<T> v = forward_fusion(tape, p, tape.constant(ir_y), tape.constant(vi_y), &s_ir, &s_vi, spf_enabled,
                                     sfe_enabled);
    return {tape.value(v.fused_y), values(tape, v.ir.soft), values(tape, v.vi.soft)};
  }

  FusionResult<T> forward_fusion(const ImagePair<T>& pair, bool spf_enabled = true, bool sfe_enabled = true) const {
    pair.validate();
    return forward_fusion(pair.ir_y, pair.vi_y(), spf_enabled, sfe_enabled);
  }

  /// Fuses an arbitrary-size pair: replicate-pads to the size multiple,
  /// runs the network and crops back.
  Tensor<T> fuse_any_size(const ImagePair<T>& pair, bool spf_enabled = true) const {
    pair.validate();
    const ImagePair<T> padded = pad_pair_to_multiple(pair, cfg_.size_multiple());
    Tensor<T> y = forward_fusion(padded, spf_enabled, false).fused_y;
    return crop(y, 0, 0, pair.height(), pair.width());
  }

 private:
  static ad::Var conv(ad::Tape<T>& tape, ParamBinding<T>& p, ad::Var x, const std::string& name) {
    return ad::conv2d(tape, x, p(name + ".w"), p(name + ".b"));
  }

  static std::vector<Tensor<T>> values(const ad::Tape<T>& tape, const std::vector<ad::Var>& vars) {
    std::vector<Tensor<T>> out;
    for (ad::Var v : vars) out.push_back(tape.value(v));
    return out;
  }

  void check_pyramid(const ad::Tape<T>& tape, const std::vector<ad::Var>& fused) const {
    if (static_cast<int>(fused.size()) != cfg_.n_levels) {
      throw ShapeError("decode: expected " + std::to_string(cfg_.n_levels) + " levels, got " +
                       std::to_string(fused.size()));
    }
    const Tensor<T>& base = tape.value(fused[0]);
    for (int k = 0; k < cfg_.n_levels; ++k) {
      const Tensor<T>& t = tape.value(fused[k]);
      if (t.channels() != cfg_.level_channels(k) || t.height() != base.height() >> k ||
          t.width() != base.width() >> k || (base.height() >> k) << k != base.height() ||
          (base.width() >> k) << k != base.width()) {
        throw ShapeError("decode: level " + std::to_string(k + 1) + " has shape " + t.shape_string());
      }
    }
  }

  ModelConfig cfg_;
  ParamSet<T> params_;
};

}  // namespace sspf
