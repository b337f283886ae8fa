#pragma once

// Two-stage optimization: encoder/structure-head pretraining on the
// Charbonnier structure loss alone, then joint fusion training on the full
// objective. All randomness (batch order, crop windows) is derived from
// (seed, step) so a resumed run replays the uninterrupted trajectory.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "sspf/autodiff.hpp"
#include "sspf/checkpoint.hpp"
#include "sspf/errors.hpp"
#include "sspf/imagedata.hpp"
#include "sspf/losses.hpp"
#include "sspf/network.hpp"
#include "sspf/optim.hpp"
#include "sspf/structmap.hpp"

namespace sspf {

struct TrainConfig {
  double lr_init = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs_main = 300;
  int epochs_pretrain = 50;
  int crop = 256;
  double alpha = 0.01;
  double epsilon = 1.0;
  int n_levels = 3;
  int batch_size = 8;
  std::uint64_t seed = 0;
  bool sfe_enabled = true;
  bool spf_enabled = true;
  std::string schedule = "cosine";  ///< "cosine" (to zero) or "constant"
  int base_channels = 16;
  int residual_blocks = 2;
  std::string merge = "sum";
  std::string polarity = "edge";
  long max_steps = 0;         ///< caps the step count when > 0
  long checkpoint_every = 0;  ///< 0: final checkpoint only

  /// Hyperparameters of the reference full-scale protocol.
  static TrainConfig full_scale() { return TrainConfig{}; }

  /// CPU-sized profile: 64x64 crops, 8 base channels, at most 500 steps.
  static TrainConfig desk() {
    TrainConfig c;
    c.crop = 64;
    c.base_channels = 8;
    c.residual_blocks = 1;
    c.max_steps = 500;
    c.lr_init = 2e-3;
    return c;
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.n_levels = n_levels;
    m.base_channels = base_channels;
    m.residual_blocks_per_level = residual_blocks;
    m.seed = seed;
    m.merge = parse_merge_mode(merge);
    m.polarity = parse_polarity(polarity);
    return m;
  }

  AdamConfig adam() const { return {beta1, beta2, adam_eps}; }

  void validate() const {
    auto positive = [](double v, const char* key) {
      if (!(v > 0)) throw ConfigError(std::string("config value '") + key + "' must be positive");
    };
    positive(lr_init, "lr_init");
    positive(epochs_main, "epochs_main");
    positive(epochs_pretrain, "epochs_pretrain");
    positive(crop, "crop");
    positive(epsilon, "epsilon");
    positive(batch_size, "batch_size");
    if (!(beta1 > 0 && beta1 < 1)) throw ConfigError("config value 'beta1' must be in (0,1)");
    if (!(beta2 > 0 && beta2 < 1)) throw ConfigError("config value 'beta2' must be in (0,1)");
    if (alpha < 0) throw ConfigError("config value 'alpha' must be non-negative");
    if (schedule != "cosine" && schedule != "constant") throw ConfigError("config value 'schedule' must be cosine|constant");
    if (max_steps < 0 || checkpoint_every < 0) throw ConfigError("step counts must be non-negative");
    model_config().validate();
    if (crop % model_config().size_multiple() != 0) {
      throw ConfigError("config value 'crop' must be divisible by 2^(n_levels-1)");
    }
  }

  bool operator==(const TrainConfig&) const = default;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr_init", c.lr_init},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"epochs_main", c.epochs_main},
          {"epochs_pretrain", c.epochs_pretrain},
          {"crop", c.crop},
          {"alpha", c.alpha},
          {"epsilon", c.epsilon},
          {"n_levels", c.n_levels},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"sfe_enabled", c.sfe_enabled},
          {"spf_enabled", c.spf_enabled},
          {"schedule", c.schedule},
          {"base_channels", c.base_channels},
          {"residual_blocks", c.residual_blocks},
          {"merge", c.merge},
          {"polarity", c.polarity},
          {"max_steps", c.max_steps},
          {"checkpoint_every", c.checkpoint_every}};
}

/// Sets one field from its textual form; unknown keys raise ConfigError
/// naming the key.
inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  auto as_double = [&]() {
    try {
      std::size_t pos = 0;
      const double v = std::stod(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': expected a number, got '" + value + "'");
    }
  };
  auto as_long = [&]() {
    const double v = as_double();
    if (v != static_cast<double>(static_cast<long>(v))) throw ConfigError("config key '" + key + "': expected an integer");
    return static_cast<long>(v);
  };
  auto as_bool = [&]() {
    if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "off" || value == "no") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + value + "'");
  };
  if (key == "lr_init") c.lr_init = as_double();
  else if (key == "beta1") c.beta1 = as_double();
  else if (key == "beta2") c.beta2 = as_double();
  else if (key == "adam_eps") c.adam_eps = as_double();
  else if (key == "epochs_main") c.epochs_main = static_cast<int>(as_long());
  else if (key == "epochs_pretrain") c.epochs_pretrain = static_cast<int>(as_long());
  else if (key == "crop") c.crop = static_cast<int>(as_long());
  else if (key == "alpha") c.alpha = as_double();
  else if (key == "epsilon") c.epsilon = as_double();
  else if (key == "n_levels") c.n_levels = static_cast<int>(as_long());
  else if (key == "batch_size") c.batch_size = static_cast<int>(as_long());
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(as_long());
  else if (key == "sfe_enabled") c.sfe_enabled = as_bool();
  else if (key == "spf_enabled") c.spf_enabled = as_bool();
  else if (key == "schedule") c.schedule = value;
  else if (key == "base_channels") c.base_channels = static_cast<int>(as_long());
  else if (key == "residual_blocks") c.residual_blocks = static_cast<int>(as_long());
  else if (key == "merge") c.merge = value;
  else if (key == "polarity") c.polarity = value;
  else if (key == "max_steps") c.max_steps = as_long();
  else if (key == "checkpoint_every") c.checkpoint_every = as_long();
  else throw ConfigError("unknown config key '" + key + "'");
}

/// Overlays a JSON object onto `base`.
inline TrainConfig apply_json(TrainConfig base, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config document must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    std::string text;
    if (v.is_string()) text = v.get<std::string>();
    else if (v.is_boolean()) text = v.get<bool>() ? "true" : "false";
    else if (v.is_number_integer()) text = std::to_string(v.get<long long>());
    else if (v.is_number()) {
      std::ostringstream os;
      os.precision(17);
      os << v.get<double>();
      text = os.str();
    } else {
      throw ConfigError("config key '" + key + "': unsupported value type");
    }
    set_config_value(base, key, text);
  }
  return base;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) { return apply_json(TrainConfig{}, j); }

// ---------------------------------------------------------------------------

enum class Phase { kPretrain, kFusion };

template <class T>
struct TrainState {
  Phase phase = Phase::kFusion;
  long step = 0;   ///< optimizer steps completed in this phase
  long epoch = 0;  ///< epoch of the next step
  std::uint64_t seed = 0;
  ModelConfig model;
  ParamSet<T> params;
  AdamState<T> adam;
};

struct StepRecord {
  long step = 0;
  long epoch = 0;
  double lr = 0;
  LossBreakdown loss;
};

inline std::string loss_log_header() { return "step,epoch,lr,total,rec,ssim,smooth,grad\n"; }

inline std::string format_log_row(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%ld,%ld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.epoch, r.lr, r.loss.total,
                r.loss.rec, r.loss.ssim, r.loss.smooth, r.loss.grad);
  return buf;
}

struct RunOptions {
  std::filesystem::path run_dir;  ///< checkpoints + loss.csv; empty writes nothing
  long stop_at_step = -1;         ///< interrupt before this step (>= 0) without altering the schedule
  std::function<void(const StepRecord&)> on_step;
};

template <class T>
struct TrainResult {
  TrainState<T> state;
  std::vector<StepRecord> log;
  bool completed = false;  ///< false when interrupted by stop_at_step
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b);
}

}  // namespace detail

inline long steps_per_epoch(std::size_t n_pairs, int batch_size) {
  return static_cast<long>((n_pairs + batch_size - 1) / batch_size);
}

inline long total_steps(const TrainConfig& c, std::size_t n_pairs, Phase phase) {
  const long epochs = phase == Phase::kPretrain ? c.epochs_pretrain : c.epochs_main;
  const long n = epochs * steps_per_epoch(n_pairs, c.batch_size);
  return c.max_steps > 0 ? std::min(n, c.max_steps) : n;
}

/// Pair indices used at `step`: a per-epoch permutation, sliced into batches.
inline std::vector<std::size_t> batch_indices(const TrainConfig& c, std::size_t n_pairs, long step) {
  const long spe = steps_per_epoch(n_pairs, c.batch_size);
  const long epoch = step / spe, slot = step % spe;
  std::vector<std::size_t> order(n_pairs);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(detail::derive_seed(c.seed, 0x5eed0001, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t begin = static_cast<std::size_t>(slot) * c.batch_size;
  const std::size_t end = std::min(n_pairs, begin + c.batch_size);
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

template <class T>
ImagePair<T> training_crop(const TrainConfig& c, const ImagePair<T>& pair, long step, std::size_t slot) {
  if (c.crop == pair.height() && c.crop == pair.width()) return pair;
  return random_crop_pair(pair, c.crop, detail::derive_seed(c.seed, static_cast<std::uint64_t>(step) + 1, slot));
}

/// Loss terms and parameter gradients for one pair.
template <class T>
struct PairObjective {
  LossBreakdown loss;
  ParamSet<T> grads;
};

template <class T>
std::vector<Tensor<T>> pyramid_targets(const StructurePyramid& s) {
  std::vector<Tensor<T>> out;
  for (const auto& l : s.levels) out.push_back(l.template cast<T>());
  return out;
}

/// Builds the full objective for one pair on a fresh tape. `phase` selects
/// the structure-only pretraining loss or the fusion loss.
template <class T>
PairObjective<T> pair_objective(const FusionModel<T>& model, const ImagePair<T>& pair, const TrainConfig& c,
                                Phase phase, bool want_grads = true) {
  const ModelConfig& mc = model.config();
  const Tensor<T> ir = pair.ir_y;
  const Tensor<T> vi = pair.vi_y();
  const StructurePyramid s_ir = structure_pyramid_gt(ir, mc.n_levels, mc.polarity);
  const StructurePyramid s_vi = structure_pyramid_gt(vi, mc.n_levels, mc.polarity);
  ad::Tape<T> tape;
  ParamBinding<T> p(tape, model.params(), want_grads);
  const ad::Var ir_v = tape.constant(ir), vi_v = tape.constant(vi);
  PairObjective<T> out;
  out.loss.alpha = c.alpha;
  out.loss.epsilon = c.epsilon;

  auto rec_term = [&](const EncoderVars<T>& a, const EncoderVars<T>& b) {
    std::vector<ad::Var> preds = a.soft;
    preds.insert(preds.end(), b.soft.begin(), b.soft.end());
    std::vector<Tensor<T>> gts = pyramid_targets<T>(s_ir);
    const auto gv = pyramid_targets<T>(s_vi);
    gts.insert(gts.end(), gv.begin(), gv.end());
    return ad::charbonnier_rec(tape, preds, gts, static_cast<T>(c.epsilon));
  };

  ad::Var root;
  if (phase == Phase::kPretrain) {
    const EncoderVars<T> a = model.encode(tape, p, ir_v, Modality::kInfrared, true);
    const EncoderVars<T> b = model.encode(tape, p, vi_v, Modality::kVisible, true);
    root = rec_term(a, b);
    out.loss.rec = tape.value(root)[0];
    out.loss.total = out.loss.rec;
  } else {
    const FusionVars<T> f = model.forward_fusion(tape, p, ir_v, vi_v, &s_ir, &s_vi, c.spf_enabled, c.sfe_enabled);
    std::vector<ad::Var> terms;
    std::vector<T> weights;
    if (c.sfe_enabled) {
      terms.push_back(rec_term(f.ir, f.vi));
      weights.push_back(static_cast<T>(c.alpha));
    }
    const ad::Var l_ssim = ad::ssim_loss(tape, f.fused_y, ir, vi);
    const ad::Var l_smooth = ad::smooth_loss(tape, f.fused_y, ir, vi);
    const ad::Var l_grad = ad::grad_loss(tape, f.fused_y, ir, vi);
    terms.insert(terms.end(), {l_ssim, l_smooth, l_grad});
    weights.insert(weights.end(), {T(1), T(1), T(1)});
    root = ad::weighted_sum(tape, terms, weights);
    out.loss = total_loss(c.sfe_enabled ? static_cast<double>(tape.value(terms.front())[0]) : 0.0,
                          tape.value(l_ssim)[0], tape.value(l_smooth)[0], tape.value(l_grad)[0], c.alpha, c.epsilon);
  }
  if (want_grads) {
    tape.backward(root);
    out.grads = p.gradients();
  }
  return out;
}

/// Mean loss over whole (uncropped) pairs; sizes must suit the model.
template <class T>
LossBreakdown evaluate_loss(const FusionModel<T>& model, const std::vector<ImagePair<T>>& pairs, const TrainConfig& c) {
  if (pairs.empty()) throw Error("evaluate_loss: no pairs");
  LossBreakdown acc;
  for (const auto& pair : pairs) {
    const LossBreakdown l = pair_objective(model, pair, c, Phase::kFusion, false).loss;
    acc.total += l.total;
    acc.rec += l.rec;
    acc.ssim += l.ssim;
    acc.smooth += l.smooth;
    acc.grad += l.grad;
  }
  const double n = static_cast<double>(pairs.size());
  return total_loss(acc.rec / n, acc.ssim / n, acc.smooth / n, acc.grad / n, c.alpha, c.epsilon);
}

inline const char* phase_name(Phase p) { return p == Phase::kPretrain ? "pretrain" : "fusion"; }

template <class T>
Checkpoint<T> to_checkpoint(const TrainState<T>& s, const TrainConfig& c) {
  Checkpoint<T> ck{s.model, s.params, s.adam, nlohmann::json::object()};
  ck.extra["phase"] = phase_name(s.phase);
  ck.extra["step"] = s.step;
  ck.extra["epoch"] = s.epoch;
  ck.extra["seed"] = s.seed;
  ck.extra["train_config"] = to_json(c);
  return ck;
}

/// Restores a full training state (for resuming) from a checkpoint that was
/// written by the trainer.
template <class T>
TrainState<T> state_from_checkpoint(const Checkpoint<T>& ck) {
  if (!ck.adam || !ck.extra.contains("step")) throw IoError("checkpoint carries no resumable training state");
  TrainState<T> s;
  s.phase = ck.extra.at("phase") == "pretrain" ? Phase::kPretrain : Phase::kFusion;
  s.step = ck.extra.at("step").template get<long>();
  s.epoch = ck.extra.at("epoch").template get<long>();
  s.seed = ck.extra.at("seed").template get<std::uint64_t>();
  s.model = ck.model;
  s.params = ck.params;
  s.adam = *ck.adam;
  return s;
}

/// How a phase starts: from fresh initialization, from warm-start weights
/// (fresh optimizer), or by resuming a saved state.
template <class T>
struct TrainInit {
  std::optional<ParamSet<T>> weights;
  std::optional<TrainState<T>> resume;
};

namespace detail {

template <class T>
void check_pairs(const TrainConfig& c, const std::vector<ImagePair<T>>& pairs) {
  if (pairs.empty()) throw Error("training dataset is empty");
  for (const auto& p : pairs) {
    p.validate();
    if (c.crop > std::min(p.height(), p.width())) {
      throw ShapeError("crop " + std::to_string(c.crop) + " exceeds pair '" + p.pair_id + "' (" +
                       std::to_string(p.height()) + "x" + std::to_string(p.width()) + ")");
    }
  }
}

inline bool is_encoder_param(const std::string& name) { return name.rfind("enc.", 0) == 0; }

}  // namespace detail

template <class T>
TrainResult<T> run_phase(Phase phase, const TrainConfig& c, const std::vector<ImagePair<T>>& pairs,
                         const TrainInit<T>& init, const RunOptions& opts) {
  c.validate();
  if (phase == Phase::kPretrain && !c.sfe_enabled) throw ConfigError("pretraining requires sfe_enabled");
  detail::check_pairs(c, pairs);
  const ModelConfig mc = c.model_config();
  TrainResult<T> result;
  TrainState<T>& st = result.state;
  if (init.resume) {
    st = *init.resume;
    if (st.phase != phase) throw ConfigError(std::string("cannot resume a ") + phase_name(st.phase) + " state as " + phase_name(phase));
    if (!(st.model == mc)) throw ConfigError("resume state was produced by a different model configuration");
  } else {
    st.phase = phase;
    st.seed = c.seed;
    st.model = mc;
    st.params = init.weights ? *init.weights : init_parameters<T>(mc);
    st.adam = make_adam_state(st.params);
  }
  FusionModel<T> model(mc, st.params);  // validates shapes
  const long total = total_steps(c, pairs.size(), phase);
  const long spe = steps_per_epoch(pairs.size(), c.batch_size);

  std::ofstream log;
  if (!opts.run_dir.empty()) {
    std::filesystem::create_directories(opts.run_dir);
    const auto log_path = opts.run_dir / (std::string(phase_name(phase)) + "_loss.csv");
    if (init.resume && std::filesystem::exists(log_path)) {
      // Drop rows past the resume point, then append.
      std::ifstream in(log_path);
      std::string line, kept;
      std::getline(in, line);
      kept = line + "\n";
      while (std::getline(in, line)) {
        if (!line.empty() && std::stol(line.substr(0, line.find(','))) < st.step) kept += line + "\n";
      }
      in.close();
      log.open(log_path, std::ios::trunc);
      log << kept;
    } else {
      log.open(log_path, std::ios::trunc);
      log << loss_log_header();
    }
  }
  auto checkpoint_path = [&](const std::string& tag) {
    return opts.run_dir / (std::string(phase_name(phase)) + "_" + tag + ".ckpt");
  };
  std::function<bool(const std::string&)> select;
  if (phase == Phase::kPretrain) select = detail::is_encoder_param;

  while (st.step < total) {
    if (opts.stop_at_step >= 0 && st.step >= opts.stop_at_step) {
      st.params = model.params();
      if (!opts.run_dir.empty()) save_checkpoint(checkpoint_path("last"), to_checkpoint(st, c));
      return result;
    }
    const auto batch = batch_indices(c, pairs.size(), st.step);
    ParamSet<T> grads;
    LossBreakdown acc;
    for (std::size_t slot = 0; slot < batch.size(); ++slot) {
      const ImagePair<T> sample = training_crop(c, pairs[batch[slot]], st.step, slot);
      PairObjective<T> obj = pair_objective(model, sample, c, phase);
      if (!std::isfinite(obj.loss.total)) {
        throw NonFiniteError("non-finite loss at " + std::string(phase_name(phase)) + " step " + std::to_string(st.step) +
                             " (pair '" + sample.pair_id + "')");
      }
      acc.total += obj.loss.total;
      acc.rec += obj.loss.rec;
      acc.ssim += obj.loss.ssim;
      acc.smooth += obj.loss.smooth;
      acc.grad += obj.loss.grad;
      if (grads.empty()) {
        grads = std::move(obj.grads);
      } else {
        for (auto& [name, g] : grads) g += obj.grads.at(name);
      }
    }
    const T inv = T(1) / static_cast<T>(batch.size());
    for (auto& [name, g] : grads) g *= inv;
    const double n = static_cast<double>(batch.size());
    StepRecord rec;
    rec.step = st.step;
    rec.epoch = st.step / spe;
    rec.lr = c.schedule == "cosine" ? cosine_lr(st.step, total, c.lr_init) : c.lr_init;
    rec.loss = phase == Phase::kPretrain ? LossBreakdown{acc.total / n, acc.rec / n, 0, 0, 0, c.alpha, c.epsilon}
                                         : total_loss(acc.rec / n, acc.ssim / n, acc.smooth / n, acc.grad / n, c.alpha, c.epsilon);
    adam_step(model.params(), st.adam, grads, rec.lr, c.adam(), select);
    st.step += 1;
    st.epoch = st.step / spe;
    result.log.push_back(rec);
    if (log.is_open()) {
      log << format_log_row(rec);
      log.flush();
    }
    if (opts.on_step) opts.on_step(rec);
    if (!opts.run_dir.empty() && c.checkpoint_every > 0 && st.step % c.checkpoint_every == 0 && st.step < total) {
      st.params = model.params();
      save_checkpoint(checkpoint_path("last"), to_checkpoint(st, c));
    }
  }
  st.params = model.params();
  result.completed = true;
  if (!opts.run_dir.empty()) save_checkpoint(checkpoint_path("final"), to_checkpoint(st, c));
  return result;
}

/// Structure self-supervision only: encoders and heads are updated, the
/// decoder (and any merge weights) keep their initial values.
template <class T>
TrainResult<T> pretrain_sfe(const TrainConfig& c, const std::vector<ImagePair<T>>& pairs, const TrainInit<T>& init = {},
                            const RunOptions& opts = {}) {
  return run_phase(Phase::kPretrain, c, pairs, init, opts);
}

/// Full objective. `init.weights` warm-starts (typically from pretrain_sfe).
template <class T>
TrainResult<T> train_fusion(const TrainConfig& c, const std::vector<ImagePair<T>>& pairs, const TrainInit<T>& init = {},
                            const RunOptions& opts = {}) {
  return run_phase(Phase::kFusion, c, pairs, init, opts);
}

}  // namespace sspf
