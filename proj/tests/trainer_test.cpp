#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "sspf/synthetic.hpp"
#include "sspf/trainer.hpp"

namespace fs = std::filesystem;
using namespace sspf;

namespace {

TrainConfig tiny() {
  TrainConfig c;
  c.crop = 16;
  c.base_channels = 2;
  c.residual_blocks = 1;
  c.batch_size = 2;
  c.lr_init = 5e-3;
  c.epochs_main = 1000;
  c.epochs_pretrain = 1000;
  c.max_steps = 12;
  c.seed = 5;
  return c;
}

std::vector<ImagePair<float>> pairs(int n, int size = 24) {
  std::vector<ImagePair<float>> out;
  for (int i = 0; i < n; ++i) out.push_back(synthetic_pair<float>(size, size, 100 + i, "p" + std::to_string(i)));
  return out;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "sspf_trainer_test" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Config, DefaultsAndProfiles) {
  const TrainConfig p = TrainConfig::full_scale();
  EXPECT_EQ(p.lr_init, 2e-4);
  EXPECT_EQ(p.epochs_main, 300);
  EXPECT_EQ(p.epochs_pretrain, 50);
  EXPECT_EQ(p.crop, 256);
  EXPECT_EQ(p.alpha, 0.01);
  EXPECT_EQ(p.epsilon, 1.0);
  EXPECT_EQ(p.n_levels, 3);
  EXPECT_EQ(p.beta1, 0.9);
  EXPECT_EQ(p.beta2, 0.999);
  EXPECT_EQ(TrainConfig::desk().crop, 64);
  EXPECT_NO_THROW(TrainConfig::desk().validate());
}

TEST(Config, JsonRoundTripAndOverrides) {
  TrainConfig c = tiny();
  c.spf_enabled = false;
  EXPECT_EQ(train_config_from_json(to_json(c)), c);
  set_config_value(c, "spf_enabled", "on");
  EXPECT_TRUE(c.spf_enabled);
  set_config_value(c, "alpha", "0.5");
  EXPECT_EQ(c.alpha, 0.5);
  try {
    set_config_value(c, "alhpa", "1");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("alhpa"), std::string::npos);
  }
  EXPECT_THROW(set_config_value(c, "batch_size", "two"), ConfigError);
  EXPECT_THROW(set_config_value(c, "sfe_enabled", "maybe"), ConfigError);
  TrainConfig bad = tiny();
  bad.crop = 18;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Schedule, StepsAndBatches) {
  TrainConfig c = tiny();
  c.max_steps = 0;
  c.epochs_main = 3;
  EXPECT_EQ(steps_per_epoch(5, 2), 3);
  EXPECT_EQ(total_steps(c, 5, Phase::kFusion), 9);
  c.max_steps = 4;
  EXPECT_EQ(total_steps(c, 5, Phase::kFusion), 4);
  // Each epoch visits every pair exactly once.
  std::vector<int> seen(5, 0);
  for (long s = 0; s < 3; ++s)
    for (std::size_t i : batch_indices(c, 5, s)) ++seen[i];
  for (int v : seen) EXPECT_EQ(v, 1);
  EXPECT_EQ(batch_indices(c, 5, 2).size(), 1u);
  EXPECT_EQ(batch_indices(c, 5, 7), batch_indices(c, 5, 7));
}

TEST(Pretrain, LowersRecAndLeavesDecoderUntouched) {
  TrainConfig c = tiny();
  c.max_steps = 20;
  c.batch_size = 1;
  const auto data = pairs(2, 16);
  const auto r = pretrain_sfe(c, data);
  ASSERT_TRUE(r.completed);
  ASSERT_EQ(r.log.size(), 20u);
  const auto init = init_parameters<float>(c.model_config());
  const FusionModel<float> before(c.model_config(), init), after(c.model_config(), r.state.params);
  EXPECT_LT(evaluate_loss(after, data, c).rec, evaluate_loss(before, data, c).rec);
  bool encoder_moved = false;
  for (const auto& [name, t] : r.state.params) {
    if (name.starts_with("enc.")) encoder_moved |= !(t == init.at(name));
    else EXPECT_EQ(t, init.at(name)) << name;
  }
  EXPECT_TRUE(encoder_moved);
  EXPECT_EQ(pretrain_sfe(c, data).state.params, r.state.params);
}

TEST(Pretrain, RequiresSfe) {
  TrainConfig c = tiny();
  c.sfe_enabled = false;
  EXPECT_THROW(pretrain_sfe(c, pairs(1)), ConfigError);
}

TEST(Fusion, DeterministicLogs) {
  const TrainConfig c = tiny();
  const auto data = pairs(3);
  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
  train_fusion(c, data, {}, {a});
  train_fusion(c, data, {}, {b});
  EXPECT_EQ(slurp(a / "fusion_loss.csv"), slurp(b / "fusion_loss.csv"));
  EXPECT_EQ(slurp(a / "fusion_final.ckpt"), slurp(b / "fusion_final.ckpt"));
  const std::string log = slurp(a / "fusion_loss.csv");
  EXPECT_EQ(log.substr(0, log.find('\n') + 1), loss_log_header());
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 13);
}

TEST(Fusion, ResumeEqualsUninterrupted) {
  TrainConfig c = tiny();
  const auto data = pairs(3);
  const fs::path full = fresh_dir("full"), part = fresh_dir("part");
  const auto reference = train_fusion(c, data, {}, {full});
  RunOptions stop{part};
  stop.stop_at_step = 5;
  const auto first = train_fusion(c, data, {}, stop);
  EXPECT_FALSE(first.completed);
  EXPECT_EQ(first.state.step, 5);
  TrainInit<float> init;
  init.resume = state_from_checkpoint(load_checkpoint<float>(part / "fusion_last.ckpt"));
  const auto second = train_fusion(c, data, init, {part});
  ASSERT_TRUE(second.completed);
  EXPECT_EQ(second.state.params, reference.state.params);
  EXPECT_EQ(second.state.adam.t, reference.state.adam.t);
  EXPECT_EQ(slurp(part / "fusion_loss.csv"), slurp(full / "fusion_loss.csv"));
}

TEST(Fusion, ResumeRejectsOtherPhaseOrModel) {
  TrainConfig c = tiny();
  const auto data = pairs(2);
  TrainInit<float> init;
  init.resume = pretrain_sfe(c, data).state;
  EXPECT_THROW(train_fusion(c, data, init), ConfigError);
  init.resume->phase = Phase::kFusion;
  c.base_channels = 3;
  EXPECT_THROW(train_fusion(c, data, init), ConfigError);
}

TEST(Fusion, AlphaZeroDropsRecFromTotal) {
  TrainConfig c = tiny();
  c.alpha = 0;
  c.max_steps = 2;
  const auto r = train_fusion(c, pairs(2));
  for (const auto& s : r.log) {
    EXPECT_GT(s.loss.rec, 0);
    EXPECT_NEAR(s.loss.total, s.loss.ssim + s.loss.smooth + s.loss.grad, 1e-9);
  }
}

TEST(Fusion, CosineLrNonIncreasingAndConstantFlat) {
  TrainConfig c = tiny();
  const auto r = train_fusion(c, pairs(2));
  EXPECT_EQ(r.log.front().lr, c.lr_init);
  for (std::size_t i = 1; i < r.log.size(); ++i) EXPECT_LE(r.log[i].lr, r.log[i - 1].lr);
  c.schedule = "constant";
  c.max_steps = 3;
  for (const auto& s : train_fusion(c, pairs(2)).log) EXPECT_EQ(s.lr, c.lr_init);
}

TEST(Fusion, AblationFlagsAllTrain) {
  const auto data = pairs(2);
  for (bool sfe : {true, false})
    for (bool spf : {true, false}) {
      TrainConfig c = tiny();
      c.sfe_enabled = sfe;
      c.spf_enabled = spf;
      const auto r = train_fusion(c, data);
      ASSERT_TRUE(r.completed);
      for (const auto& s : r.log) EXPECT_TRUE(std::isfinite(s.loss.total));
      if (!sfe) EXPECT_EQ(r.log.back().loss.rec, 0.0);
    }
}

TEST(Fusion, NonFiniteAbortKeepsLastGoodCheckpoint) {
  TrainConfig c = tiny();
  c.checkpoint_every = 2;
  c.max_steps = 10;
  const fs::path dir = fresh_dir("nan");
  RunOptions stop{dir};
  stop.stop_at_step = 4;
  train_fusion(c, pairs(2, 16), {}, stop);
  const std::string good = slurp(dir / "fusion_last.ckpt");
  auto poisoned = pairs(2, 16);
  for (auto& p : poisoned) p.ir_y.at(3, 3) = std::numeric_limits<float>::quiet_NaN();
  TrainInit<float> init;
  init.resume = state_from_checkpoint(load_checkpoint<float>(dir / "fusion_last.ckpt"));
  try {
    train_fusion(c, poisoned, init, {dir});
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("step 4"), std::string::npos);
  }
  EXPECT_EQ(slurp(dir / "fusion_last.ckpt"), good);
  EXPECT_FALSE(fs::exists(dir / "fusion_final.ckpt"));
}

TEST(Fusion, InputValidation) {
  TrainConfig c = tiny();
  EXPECT_THROW(train_fusion(c, std::vector<ImagePair<float>>{}), Error);
  c.crop = 32;
  EXPECT_THROW(train_fusion(c, pairs(1, 24)), ShapeError);
}

TEST(Crop, IdentityWhenCropMatchesAndDeterministicOtherwise) {
  TrainConfig c = tiny();
  const auto p = synthetic_pair<float>(16, 16, 1, "x");
  const auto same = training_crop(c, p, 3, 0);
  EXPECT_EQ(same.ir_y, p.ir_y);
  const auto q = synthetic_pair<float>(40, 48, 2, "y");
  const auto a = training_crop(c, q, 3, 1), b = training_crop(c, q, 3, 1);
  EXPECT_EQ(a.ir_y, b.ir_y);
  EXPECT_EQ(a.height(), 16);
  EXPECT_EQ(a.vi_yuv.channels(), 3);
}
