// sspfusion: fuse, eval, train, pretrain, structure-map and synth commands.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sspf/image_io.hpp"
#include "sspf/sspf.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace sspf;

namespace {

enum Exit : int {
  kOk = 0,
  kItemFailure = 1,
  kMissingCheckpoint = 2,
  kEmptyDataset = 3,
  kUsage = 64,
  kBadConfig = 65,
};

// Carries an exit status out of a command.
struct CommandError : std::runtime_error {
  int code;
  CommandError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

std::string utc_stamp(const char* fmt) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, fmt, &tm);
  return buf;
}

std::string kebab(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

std::string env_name(std::string key) {
  std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::toupper(c); });
  return "SSPF_" + key;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(1, jobs), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  for (auto& t : pool) t.join();
}

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  std::string out;
  std::map<std::string, std::string> overrides;  // config key -> text, from flags
};

// Desk profile, then config file, then SSPF_* environment, then flags.
TrainConfig resolve_config(const Globals& g) {
  TrainConfig c = TrainConfig::desk();
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw ConfigError("cannot read config file " + g.config_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config file " + g.config_path + ": " + e.what());
    }
    c = apply_json(c, j);
  }
  const json keys = to_json(c);
  for (const auto& [key, _] : keys.items()) {
    if (const char* v = std::getenv(env_name(key).c_str())) set_config_value(c, key, v);
  }
  for (const auto& [key, v] : g.overrides) set_config_value(c, key, v);
  if (g.seed) c.seed = *g.seed;
  c.validate();
  return c;
}

class Manifest {
 public:
  explicit Manifest(std::string command) : start_(std::chrono::steady_clock::now()) {
    doc_["command"] = std::move(command);
    doc_["version"] = SSPF_VERSION;
    doc_["started"] = utc_stamp("%Y-%m-%dT%H:%M:%SZ");
    doc_["inputs"] = json::object();
    doc_["outputs"] = json::array();
    doc_["config"] = json::object();
    doc_["seed"] = nullptr;
  }
  json& operator[](const char* k) { return doc_[k]; }
  void add_output(const fs::path& p) {
    std::lock_guard lock(mu_);
    doc_["outputs"].push_back(p.string());
  }
  void write(const fs::path& dir, int status) {
    auto& outs = doc_["outputs"];
    std::sort(outs.begin(), outs.end());
    doc_["exit_status"] = status;
    doc_["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    fs::create_directories(dir);
    std::ofstream(dir / "manifest.json") << doc_.dump(2) << '\n';
  }

 private:
  json doc_;
  std::chrono::steady_clock::time_point start_;
  std::mutex mu_;
};

DatasetSplit open_dataset(const std::string& root) {
  DatasetSplit split;
  try {
    split = scan_dataset(root);
  } catch (const IoError& e) {
    throw CommandError(kEmptyDataset, e.what());
  }
  if (split.empty()) throw CommandError(kEmptyDataset, "dataset " + root + " has no pairs");
  return split;
}

template <class T>
Checkpoint<T> open_checkpoint(const std::string& path) {
  if (!fs::is_regular_file(path)) throw CommandError(kMissingCheckpoint, "checkpoint not found: " + path);
  try {
    return load_checkpoint<T>(path);
  } catch (const IoError& e) {
    throw CommandError(kMissingCheckpoint, e.what());
  }
}

fs::path out_dir(const Globals& g, const char* fallback) { return g.out.empty() ? fs::path(fallback) : fs::path(g.out); }

// ---- fuse ----

struct FuseArgs {
  std::string checkpoint, data;
};

int cmd_fuse(const Globals& g, const FuseArgs& a) {
  const fs::path out = out_dir(g, "fused");
  Manifest m("fuse");
  m["inputs"] = {{"checkpoint", a.checkpoint}, {"dataset", a.data}};
  const auto ck = open_checkpoint<float>(a.checkpoint);
  const DatasetSplit split = open_dataset(a.data);
  const bool spf = ck.extra.contains("train_config") ? ck.extra["train_config"].value("spf_enabled", true) : true;
  m["config"] = {{"model", to_json(ck.model)}, {"spf_enabled", spf}};
  m["seed"] = ck.model.seed;
  const FusionModel<float> model(ck.model, ck.params);
  std::vector<std::string> errors(split.size());
  parallel_for(split.size(), g.jobs, [&](std::size_t i) {
    const std::string& id = split.pair_ids[i];
    try {
      const auto pair = io::load_pair<float>(split, id);
      const Tensor<float> y = model.fuse_any_size(pair, spf);
      const fs::path dst = out / (id + ".png");
      io::save_png(dst, yuv_to_rgb(y, pair.vi_yuv));
      m.add_output(dst);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  int failed = 0;
  json failures = json::object();
  for (std::size_t i = 0; i < errors.size(); ++i)
    if (!errors[i].empty()) {
      ++failed;
      failures[split.pair_ids[i]] = errors[i];
      std::cerr << "fuse: " << split.pair_ids[i] << ": " << errors[i] << '\n';
    }
  m["failures"] = failures;
  const int status = failed ? kItemFailure : kOk;
  m.write(out, status);
  std::cout << "fused " << split.size() - failed << "/" << split.size() << " pairs into " << out.string() << '\n';
  return status;
}

// ---- eval ----

struct EvalArgs {
  std::string data, fused, checkpoint_label;
};

PlaneD luminance_255(const fs::path& p) { return to_255(luminance(io::load_image<double>(p))); }

int cmd_eval(const Globals& g, const EvalArgs& a) {
  const fs::path out = out_dir(g, "eval");
  Manifest m("eval");
  m["inputs"] = {{"dataset", a.data}, {"fused", a.fused}};
  const DatasetSplit split = open_dataset(a.data);
  std::vector<std::optional<MetricTriple>> loaded(split.size());
  std::vector<std::string> errors(split.size());
  parallel_for(split.size(), g.jobs, [&](std::size_t i) {
    const std::string& id = split.pair_ids[i];
    try {
      const fs::path f = resolve_image(a.fused, id);
      loaded[i] = MetricTriple{id, luminance_255(resolve_image(split.root_path / "ir", id)),
                               luminance_255(resolve_image(split.root_path / "vi", id)), luminance_255(f)};
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  std::vector<MetricTriple> triples;
  std::map<std::string, std::string> skipped;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (loaded[i]) triples.push_back(std::move(*loaded[i]));
    else skipped[split.pair_ids[i]] = errors[i];
  }
  MetricReport report;
  if (!triples.empty()) report = evaluate_dataset(triples, g.jobs);
  report.skipped.insert(skipped.begin(), skipped.end());
  report.dataset = a.data;
  report.checkpoint = a.checkpoint_label;
  report.timestamp = utc_stamp("%Y-%m-%dT%H:%M:%SZ");
  for (const auto& [id, why] : report.skipped) std::cerr << "eval: skipped " << id << ": " << why << '\n';
  fs::create_directories(out);
  if (!report.per_pair.empty()) {
    std::ofstream(out / "report.json") << to_json(report).dump(2) << '\n';
    std::ofstream(out / "report.csv") << to_csv(report);
    m.add_output(out / "report.json");
    m.add_output(out / "report.csv");
  }
  m["skipped"] = report.skipped;
  const int status = report.skipped.empty() ? kOk : kItemFailure;
  m.write(out, status);
  std::cout << "evaluated " << report.per_pair.size() << "/" << split.size() << " pairs";
  if (!report.per_pair.empty()) {
    const auto v = report.aggregate.as_array();
    for (std::size_t k = 0; k < v.size(); ++k) std::cout << ' ' << MetricValues::kNames[k] << '=' << v[k];
  }
  std::cout << '\n';
  return status;
}

// ---- train / pretrain ----

struct TrainArgs {
  std::string data, init, resume;
};

fs::path new_run_dir(const fs::path& base, std::uint64_t seed) {
  const std::string stem = "run-" + utc_stamp("%Y%m%dT%H%M%SZ") + "-seed" + std::to_string(seed);
  fs::path dir = base / stem;
  for (int k = 1; fs::exists(dir); ++k) dir = base / (stem + "-" + std::to_string(k));
  return dir;
}

int cmd_train(const Globals& g, const TrainArgs& a, Phase phase) {
  const TrainConfig c = resolve_config(g);
  if (phase == Phase::kPretrain && !c.sfe_enabled) throw ConfigError("pretrain requires sfe_enabled=true");
  Manifest m(phase_name(phase) == std::string("pretrain") ? "pretrain" : "train");
  m["config"] = to_json(c);
  m["seed"] = c.seed;
  m["inputs"] = {{"dataset", a.data}};
  TrainInit<float> init;
  fs::path run_dir;
  if (!a.resume.empty()) {
    m["inputs"]["resume"] = a.resume;
    init.resume = state_from_checkpoint(open_checkpoint<float>(a.resume));
    run_dir = fs::path(a.resume).parent_path();
  } else {
    if (!a.init.empty()) {
      m["inputs"]["init"] = a.init;
      const auto ck = open_checkpoint<float>(a.init);
      if (!(ck.model == c.model_config())) throw ConfigError("init checkpoint model does not match the configured model");
      init.weights = ck.params;
    }
    run_dir = new_run_dir(out_dir(g, "runs"), c.seed);
  }
  const DatasetSplit split = open_dataset(a.data);
  std::vector<ImagePair<float>> pairs;
  for (const auto& id : split.pair_ids) pairs.push_back(io::load_pair<float>(split, id));

  RunOptions opts{run_dir};
  const long total = total_steps(c, pairs.size(), phase);
  const long every = std::max(1L, total / 10);
  opts.on_step = [&](const StepRecord& r) {
    if (r.step % every == 0 || r.step + 1 == total) {
      std::fprintf(stderr, "%s step %ld/%ld lr %.3g loss %.6f\n", phase_name(phase), r.step + 1, total, r.lr,
                   r.loss.total);
    }
  };
  int status = kOk;
  try {
    const auto result = run_phase(phase, c, pairs, init, opts);
    (void)result;
  } catch (const NonFiniteError& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    status = kItemFailure;
  }
  for (const auto& e : fs::directory_iterator(run_dir))
    if (e.path().filename() != "manifest.json") m.add_output(e.path());
  m.write(run_dir, status);
  std::cout << run_dir.string() << '\n';
  return status;
}

// ---- structure-map ----

struct MapArgs {
  std::string image;
  int levels = 3;
  std::string polarity = "edge";
};

int cmd_structure_map(const Globals& g, const MapArgs& a) {
  const fs::path out = out_dir(g, "structure");
  Manifest m("structure-map");
  m["inputs"] = {{"image", a.image}};
  m["config"] = {{"levels", a.levels}, {"polarity", a.polarity}};
  const Polarity pol = parse_polarity(a.polarity);
  const auto img = luminance(io::load_image<double>(a.image));
  const StructurePyramid pyr = structure_pyramid_gt(img, a.levels, pol);
  const std::string stem = fs::path(a.image).stem().string();
  for (std::size_t k = 0; k < pyr.levels.size(); ++k) {
    const fs::path dst = out / (stem + "_level" + std::to_string(k + 1) + ".png");
    io::save_binary_png(dst, pyr.levels[k]);
    m.add_output(dst);
  }
  m.write(out, kOk);
  return kOk;
}

// ---- synth ----

struct SynthArgs {
  int count = 4, height = 64, width = 64;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  const fs::path out = out_dir(g, "synthetic");
  if (a.count < 1 || a.height < 1 || a.width < 1) throw ConfigError("synth: count, height and width must be positive");
  const std::uint64_t seed = g.seed.value_or(0);
  Manifest m("synth");
  m["config"] = {{"count", a.count}, {"height", a.height}, {"width", a.width}};
  m["seed"] = seed;
  for (int i = 0; i < a.count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "%04d", i);
    const auto p = synthetic_pair<double>(a.height, a.width, seed * 1000003ULL + i, id);
    const fs::path ir = out / "ir" / (std::string(id) + ".png"), vi = out / "vi" / (std::string(id) + ".png");
    io::save_png(ir, p.ir_y);
    io::save_png(vi, yuv_to_rgb(p.vi_y(), p.vi_yuv));
    m.add_output(ir);
    m.add_output(vi);
  }
  m.write(out, kOk);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structure-preserving infrared/visible image fusion"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON training config (keys as in TrainConfig)");
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--jobs", g.jobs, "Parallel workers for per-pair work")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory");

  FuseArgs fa;
  auto* fuse = app.add_subcommand("fuse", "Fuse every pair of a dataset with a checkpoint");
  fuse->add_option("--checkpoint", fa.checkpoint, "Model checkpoint")->required();
  fuse->add_option("--data", fa.data, "Dataset root with ir/ and vi/")->required();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score fused images with MI, SF, AG, VIF, Qabf and SSIM");
  eval->add_option("--data", ea.data, "Dataset root with ir/ and vi/")->required();
  eval->add_option("--fused", ea.fused, "Directory of fused images named by pair id")->required();
  eval->add_option("--label", ea.checkpoint_label, "Checkpoint name recorded in the report");

  TrainArgs ta, pa;
  std::map<std::string, std::string> train_over, pre_over;
  auto* train = app.add_subcommand("train", "Train the fusion network");
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the structure heads and encoders");
  const json config_keys = to_json(TrainConfig{});
  for (auto [cmd, args, over] : {std::tuple{train, &ta, &train_over}, std::tuple{pretrain, &pa, &pre_over}}) {
    cmd->add_option("--data", args->data, "Dataset root with ir/ and vi/")->required();
    cmd->add_option("--resume", args->resume, "Resume from a saved training state");
    for (const auto& [key, _] : config_keys.items()) {
      cmd->add_option_function<std::string>(
          "--" + kebab(key), [over = over, key = key](const std::string& v) { (*over)[key] = v; },
          "Override config '" + key + "' (env " + env_name(key) + ")");
    }
  }
  train->add_option("--init", ta.init, "Warm-start weights (e.g. a pretrain checkpoint)");
  train->excludes(train->get_option("--resume"));

  MapArgs ma;
  auto* smap = app.add_subcommand("structure-map", "Export binary structure maps, one PNG per level");
  smap->add_option("--image", ma.image, "Input image")->required();
  smap->add_option("--levels", ma.levels, "Pyramid levels")->check(CLI::PositiveNumber);
  smap->add_option("--polarity", ma.polarity, "edge (edges are 1) or flat (flat regions are 1)");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a procedural registered ir/vi dataset");
  synth->add_option("--count", sa.count, "Number of pairs");
  synth->add_option("--height", sa.height, "Image height");
  synth->add_option("--width", sa.width, "Image width");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    if (*fuse) return cmd_fuse(g, fa);
    if (*eval) return cmd_eval(g, ea);
    if (*train) {
      g.overrides = train_over;
      return cmd_train(g, ta, Phase::kFusion);
    }
    if (*pretrain) {
      g.overrides = pre_over;
      return cmd_train(g, pa, Phase::kPretrain);
    }
    if (*smap) return cmd_structure_map(g, ma);
    if (*synth) return cmd_synth(g, sa);
  } catch (const CommandError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kBadConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kItemFailure;
  }
  return kUsage;
}
