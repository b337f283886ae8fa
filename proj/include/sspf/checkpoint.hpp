#pragma once

// Checkpoint archive:
//
//   bytes 0..7    magic "SSPFCKPT"
//   bytes 8..11   uint32 format version (1), little-endian
//   bytes 12..19  uint64 header length N, little-endian
//   next N bytes  UTF-8 JSON header
//   remainder     raw little-endian tensor payload
//
// The header holds "model_config", "dtype" ("f32" or "f64"), "tensors" (a
// list of {name, group, shape[3], offset} with offsets in elements from the
// payload start), optional "adam_t", and a free-form "extra" object. Groups
// are "param", "adam_m" and "adam_v". Files are written to a temporary name
// and renamed into place.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "sspf/errors.hpp"
#include "sspf/network.hpp"
#include "sspf/optim.hpp"
#include "sspf/structmap.hpp"
#include "sspf/tensor.hpp"

namespace sspf {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'P', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_levels", c.n_levels},
          {"base_channels", c.base_channels},
          {"residual_blocks_per_level", c.residual_blocks_per_level},
          {"seed", c.seed},
          {"merge", to_string(c.merge)},
          {"polarity", to_string(c.polarity)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_levels = j.at("n_levels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.residual_blocks_per_level = j.at("residual_blocks_per_level").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.merge = parse_merge_mode(j.at("merge").get<std::string>());
  c.polarity = parse_polarity(j.at("polarity").get<std::string>());
  c.validate();
  return c;
}

template <class T>
struct Checkpoint {
  ModelConfig model;
  ParamSet<T> params;
  std::optional<AdamState<T>> adam;
  nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <class Src, class Dst>
void read_payload(std::istream& in, std::size_t count, Dst* out) {
  std::vector<Src> buf(count);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * sizeof(Src)));
  if (!in) throw IoError("checkpoint: truncated payload");
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<Dst>(buf[i]);
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ck) {
  nlohmann::json header;
  header["model_config"] = to_json(ck.model);
  header["dtype"] = detail::dtype_name<T>();
  header["extra"] = ck.extra;
  header["tensors"] = nlohmann::json::array();
  std::vector<const Tensor<T>*> order;
  std::size_t offset = 0;
  auto add_group = [&](const ParamSet<T>& set, const char* group) {
    for (const auto& [name, t] : set) {
      header["tensors"].push_back(
          {{"name", name}, {"group", group}, {"shape", {t.channels(), t.height(), t.width()}}, {"offset", offset}});
      order.push_back(&t);
      offset += t.size();
    }
  };
  add_group(ck.params, "param");
  if (ck.adam) {
    header["adam_t"] = ck.adam->t;
    add_group(ck.adam->m, "adam_m");
    add_group(ck.adam->v, "adam_v");
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const Tensor<T>* t : order) {
      out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(T)));
    }
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Loads a checkpoint, converting the stored precision to T if needed.
template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("checkpoint: truncated header");
  const nlohmann::json header = nlohmann::json::parse(text);
  const std::string dtype = header.at("dtype");
  if (dtype != "f32" && dtype != "f64") throw IoError("checkpoint: unknown dtype " + dtype);

  Checkpoint<T> ck;
  ck.model = model_config_from_json(header.at("model_config"));
  ck.extra = header.value("extra", nlohmann::json::object());
  if (header.contains("adam_t")) {
    ck.adam = AdamState<T>{};
    ck.adam->t = header["adam_t"].get<long>();
  }
  std::size_t expected_offset = 0;
  for (const auto& e : header.at("tensors")) {
    const auto shape = e.at("shape").get<std::vector<int>>();
    if (shape.size() != 3) throw IoError("checkpoint: bad tensor shape");
    if (e.at("offset").get<std::size_t>() != expected_offset) throw IoError("checkpoint: non-contiguous payload");
    Tensor<T> t(shape[0], shape[1], shape[2]);
    if (dtype == "f32") {
      detail::read_payload<float>(in, t.size(), t.data());
    } else {
      detail::read_payload<double>(in, t.size(), t.data());
    }
    expected_offset += t.size();
    const std::string group = e.at("group");
    const std::string name = e.at("name");
    if (group == "param") {
      ck.params.emplace(name, std::move(t));
    } else if (group == "adam_m" && ck.adam) {
      ck.adam->m.emplace(name, std::move(t));
    } else if (group == "adam_v" && ck.adam) {
      ck.adam->v.emplace(name, std::move(t));
    } else {
      throw IoError("checkpoint: unknown tensor group " + group);
    }
  }
  // Validates names and shapes against the architecture.
  FusionModel<T> check(ck.model, ck.params);
  return ck;
}

}  // namespace sspf
