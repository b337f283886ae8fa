#pragma once

// Six-metric fusion quality evaluation: MI, SF, AG, VIF, Qabf and SSIM.
// All planes are luminance on a [0,255] scale; MI quantizes to 8 bits.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "sspf/errors.hpp"
#include "sspf/losses.hpp"
#include "sspf/structmap.hpp"
#include "sspf/tensor.hpp"

namespace sspf {

using Plane8 = Tensor<std::uint8_t>;
using PlaneD = Tensor<double>;

/// [0,255] plane to 8 bits (round half away from zero, clamp).
inline Plane8 quantize_u8(const PlaneD& p) {
  Plane8 out(p.channels(), p.height(), p.width());
  for (std::size_t i = 0; i < p.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(p[i], 0.0, 255.0)));
  }
  return out;
}

/// [0,1] plane to the [0,255] scale the metrics use.
template <class T>
PlaneD to_255(const Tensor<T>& p) {
  PlaneD out(p.channels(), p.height(), p.width());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = static_cast<double>(p[i]) * 255.0;
  return out;
}

// ---------------------------------------------------------------------------
// MI

/// Shannon entropy (bits) of the 8-bit histogram.
inline double entropy_bits(const Plane8& x) {
  if (x.empty()) throw ShapeError("entropy of empty plane");
  std::array<double, 256> h{};
  for (auto v : x.values()) h[v] += 1;
  double e = 0;
  for (double c : h) {
    if (c > 0) {
      const double p = c / static_cast<double>(x.size());
      e -= p * std::log(p);
    }
  }
  return e / std::numbers::ln2;
}

/// Mutual information (bits) from the 256x256 joint histogram.
inline double mutual_information(const Plane8& a, const Plane8& b) {
  require_same_shape(a, b, "mutual_information");
  if (a.empty()) throw ShapeError("mutual_information of empty planes");
  std::vector<double> joint(256 * 256, 0.0);
  std::array<double, 256> ha{}, hb{};
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[a[i] * 256 + b[i]] += 1;
    ha[a[i]] += 1;
    hb[b[i]] += 1;
  }
  const double n = static_cast<double>(a.size());
  double mi = 0;
  for (int i = 0; i < 256; ++i) {
    if (ha[i] == 0) continue;
    for (int j = 0; j < 256; ++j) {
      const double c = joint[i * 256 + j];
      if (c == 0) continue;
      mi += (c / n) * std::log(c * n / (ha[i] * hb[j]));
    }
  }
  return mi / std::numbers::ln2;
}

/// MI(fused, ir) + MI(fused, vi).
inline double metric_mi(const Plane8& fused, const Plane8& ir, const Plane8& vi) {
  require_same_shape(fused, ir, "metric_mi");
  require_same_shape(fused, vi, "metric_mi");
  return mutual_information(fused, ir) + mutual_information(fused, vi);
}

inline double metric_mi(const PlaneD& fused, const PlaneD& ir, const PlaneD& vi) {
  return metric_mi(quantize_u8(fused), quantize_u8(ir), quantize_u8(vi));
}

// ---------------------------------------------------------------------------
// SF / AG

/// sqrt(RF^2 + CF^2); RF and CF are RMS horizontal / vertical first
/// differences averaged over the interior differences only.
inline double metric_sf(const PlaneD& f) {
  const int h = f.height(), w = f.width();
  double rf = 0, cf = 0;
  if (w > 1) {
    for (int y = 0; y < h; ++y)
      for (int x = 1; x < w; ++x) rf += std::pow(f.at(y, x) - f.at(y, x - 1), 2);
    rf /= static_cast<double>(h) * (w - 1);
  }
  if (h > 1) {
    for (int y = 1; y < h; ++y)
      for (int x = 0; x < w; ++x) cf += std::pow(f.at(y, x) - f.at(y - 1, x), 2);
    cf /= static_cast<double>(h - 1) * w;
  }
  return std::sqrt(rf + cf);
}

/// Mean of sqrt((dx^2 + dy^2) / 2) with forward differences over the
/// (H-1) x (W-1) pixels that have both neighbours.
inline double metric_ag(const PlaneD& f) {
  const int h = f.height(), w = f.width();
  if (h < 2 || w < 2) return 0.0;
  double s = 0;
  for (int y = 0; y < h - 1; ++y)
    for (int x = 0; x < w - 1; ++x) {
      const double dx = f.at(y, x + 1) - f.at(y, x);
      const double dy = f.at(y + 1, x) - f.at(y, x);
      s += std::sqrt((dx * dx + dy * dy) / 2.0);
    }
  return s / (static_cast<double>(h - 1) * (w - 1));
}

// ---------------------------------------------------------------------------
// VIF (pixel domain, four scales)

inline constexpr double kVifNoiseVariance = 2.0;

namespace detail {

// Normalized 1-D Gaussian of length n and sigma n/5; the 2-D window is its
// outer product.
inline std::vector<double> vif_kernel(int n) {
  std::vector<double> k(n);
  const double sigma = n / 5.0, c = (n - 1) / 2.0;
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    k[i] = std::exp(-((i - c) * (i - c)) / (2 * sigma * sigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

inline PlaneD filter_valid(const PlaneD& x, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int oh = x.height() - n + 1, ow = x.width() - n + 1;
  if (oh < 1 || ow < 1) throw ShapeError("vif: image smaller than the filter window");
  PlaneD tmp = PlaneD::plane(x.height(), ow);
  for (int y = 0; y < x.height(); ++y)
    for (int xx = 0; xx < ow; ++xx) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += k[i] * x.at(y, xx + i);
      tmp.at(y, xx) = s;
    }
  PlaneD out = PlaneD::plane(oh, ow);
  for (int y = 0; y < oh; ++y)
    for (int xx = 0; xx < ow; ++xx) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += k[i] * tmp.at(y + i, xx);
      out.at(y, xx) = s;
    }
  return out;
}

inline PlaneD subsample2(const PlaneD& x) {
  PlaneD out = PlaneD::plane((x.height() + 1) / 2, (x.width() + 1) / 2);
  for (int y = 0; y < out.height(); ++y)
    for (int xx = 0; xx < out.width(); ++xx) out.at(y, xx) = x.at(2 * y, 2 * xx);
  return out;
}

}  // namespace detail

/// Pixel-domain VIF of `dist` against reference `ref`. A reference with no
/// variance at any scale carries no information; VIFP is 1 then.
inline double vifp(const PlaneD& ref, const PlaneD& dist) {
  require_same_shape(ref, dist, "vifp");
  constexpr double kTiny = 1e-10;
  double num = 0, den = 0;
  PlaneD r = ref, d = dist;
  for (int scale = 1; scale <= 4; ++scale) {
    const int n = (1 << (4 - scale + 1)) + 1;
    const auto k = detail::vif_kernel(n);
    if (scale > 1) {
      r = detail::subsample2(detail::filter_valid(r, k));
      d = detail::subsample2(detail::filter_valid(d, k));
    }
    const PlaneD mu1 = detail::filter_valid(r, k);
    const PlaneD mu2 = detail::filter_valid(d, k);
    const PlaneD e11 = detail::filter_valid(detail::product(r, r), k);
    const PlaneD e22 = detail::filter_valid(detail::product(d, d), k);
    const PlaneD e12 = detail::filter_valid(detail::product(r, d), k);
    for (std::size_t i = 0; i < mu1.size(); ++i) {
      double s1 = std::max(0.0, e11[i] - mu1[i] * mu1[i]);
      double s2 = std::max(0.0, e22[i] - mu2[i] * mu2[i]);
      const double s12 = e12[i] - mu1[i] * mu2[i];
      double g = s12 / (s1 + kTiny);
      double sv = s2 - g * s12;
      if (s1 < kTiny) {
        g = 0;
        sv = s2;
        s1 = 0;
      }
      if (s2 < kTiny) {
        g = 0;
        sv = 0;
      }
      if (g < 0) {
        sv = s2;
        g = 0;
      }
      if (sv <= kTiny) sv = kTiny;
      num += std::log10(1 + g * g * s1 / (sv + kVifNoiseVariance));
      den += std::log10(1 + s1 / kVifNoiseVariance);
    }
  }
  if (den == 0) return 1.0;
  return num / den;
}

/// VIFP(ir, fused) + VIFP(vi, fused).
inline double metric_vif(const PlaneD& fused, const PlaneD& ir, const PlaneD& vi) {
  require_same_shape(fused, ir, "metric_vif");
  require_same_shape(fused, vi, "metric_vif");
  return vifp(ir, fused) + vifp(vi, fused);
}

// ---------------------------------------------------------------------------
// Qabf

struct QabfConstants {
  double gamma_g = 0.9994;
  double k_g = -15;
  double sigma_g = 0.5;
  double gamma_a = 0.9879;
  double k_a = -22;
  double sigma_a = 0.8;
};

/// Edge preservation value at zero strength and orientation loss.
inline double qabf_ceiling(const QabfConstants& c = {}) {
  return c.gamma_g / (1 + std::exp(c.k_g * (1 - c.sigma_g))) * c.gamma_a / (1 + std::exp(c.k_a * (1 - c.sigma_a)));
}

namespace detail {

struct EdgeInfo {
  PlaneD strength;
  PlaneD orientation;
};

inline EdgeInfo edge_info(const PlaneD& img) {
  const SobelResponse<double> s = sobel(img);
  EdgeInfo e{s.magnitude, PlaneD::plane(img.height(), img.width())};
  for (std::size_t i = 0; i < img.size(); ++i) {
    e.orientation[i] = s.gx[i] == 0 ? std::numbers::pi / 2 : std::atan(s.gy[i] / s.gx[i]);
  }
  return e;
}

inline PlaneD edge_preservation(const EdgeInfo& src, const EdgeInfo& fused, const QabfConstants& c) {
  PlaneD q = PlaneD::plane(src.strength.height(), src.strength.width());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double ga = src.strength[i], gf = fused.strength[i];
    const double rel_g = ga > gf ? gf / ga : (ga == gf ? 1.0 : ga / gf);
    const double rel_a = 1 - std::abs(src.orientation[i] - fused.orientation[i]) / (std::numbers::pi / 2);
    q[i] = c.gamma_g / (1 + std::exp(c.k_g * (rel_g - c.sigma_g))) * c.gamma_a /
           (1 + std::exp(c.k_a * (rel_a - c.sigma_a)));
  }
  return q;
}

}  // namespace detail

/// Xydeas-Petrovic edge-transfer metric with Sobel (replicate-padded) edges.
/// Returns 0 when neither source has any edge.
inline double metric_qabf(const PlaneD& fused, const PlaneD& ir, const PlaneD& vi, const QabfConstants& c = {}) {
  require_same_shape(fused, ir, "metric_qabf");
  require_same_shape(fused, vi, "metric_qabf");
  const auto ef = detail::edge_info(fused);
  const auto ea = detail::edge_info(ir);
  const auto eb = detail::edge_info(vi);
  const PlaneD qa = detail::edge_preservation(ea, ef, c);
  const PlaneD qb = detail::edge_preservation(eb, ef, c);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < fused.size(); ++i) {
    num += qa[i] * ea.strength[i] + qb[i] * eb.strength[i];
    den += ea.strength[i] + eb.strength[i];
  }
  return den == 0 ? 0.0 : num / den;
}

// ---------------------------------------------------------------------------
// SSIM

/// (SSIM(fused, ir) + SSIM(fused, vi)) / 2 with dynamic range 255.
inline double metric_ssim(const PlaneD& fused, const PlaneD& ir, const PlaneD& vi) {
  return (ssim(fused, ir, 255.0) + ssim(fused, vi, 255.0)) / 2.0;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricValues {
  double mi = 0;
  double sf = 0;
  double ag = 0;
  double vif = 0;
  double qabf = 0;
  double ssim = 0;

  static constexpr std::array<const char*, 6> kNames = {"MI", "SF", "AG", "VIF", "Qabf", "SSIM"};

  std::array<double, 6> as_array() const { return {mi, sf, ag, vif, qabf, ssim}; }
  static MetricValues from_array(const std::array<double, 6>& a) { return {a[0], a[1], a[2], a[3], a[4], a[5]}; }
  bool operator==(const MetricValues&) const = default;
};

/// All six metrics for one (fused, ir, vi) luminance triple on [0,255].
inline MetricValues evaluate_triple(const PlaneD& fused, const PlaneD& ir, const PlaneD& vi) {
  return {metric_mi(fused, ir, vi), metric_sf(fused), metric_ag(fused), metric_vif(fused, ir, vi),
          metric_qabf(fused, ir, vi), metric_ssim(fused, ir, vi)};
}

struct MetricTriple {
  std::string pair_id;
  PlaneD ir;
  PlaneD vi;
  PlaneD fused;
};

struct MetricReport {
  std::map<std::string, MetricValues> per_pair;
  MetricValues aggregate;
  std::string dataset;
  std::string checkpoint;
  std::string timestamp;
  std::map<std::string, std::string> skipped;  ///< pair id -> reason
};

inline MetricValues mean_of(const std::map<std::string, MetricValues>& per_pair) {
  std::array<double, 6> acc{};
  for (const auto& [id, v] : per_pair) {
    const auto a = v.as_array();
    for (int i = 0; i < 6; ++i) acc[i] += a[i];
  }
  for (auto& v : acc) v /= static_cast<double>(per_pair.size());
  return MetricValues::from_array(acc);
}

/// Evaluates every triple (up to `jobs` in parallel). Pairs that throw are
/// recorded in `skipped`; the aggregate is the mean over the rest.
inline MetricReport evaluate_dataset(const std::vector<MetricTriple>& triples, int jobs = 1) {
  if (triples.empty()) throw Error("evaluate_dataset: no pairs");
  std::vector<std::optional<MetricValues>> values(triples.size());
  std::vector<std::string> errors(triples.size());
  auto work = [&](std::size_t i) {
    try {
      values[i] = evaluate_triple(triples[i].fused, triples[i].ir, triples[i].vi);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  };
  jobs = std::max(1, std::min<int>(jobs, static_cast<int>(triples.size())));
  if (jobs == 1) {
    for (std::size_t i = 0; i < triples.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) {
      pool.emplace_back([&, j] {
        for (std::size_t i = j; i < triples.size(); i += jobs) work(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  MetricReport r;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    if (values[i]) {
      r.per_pair[triples[i].pair_id] = *values[i];
    } else {
      r.skipped[triples[i].pair_id] = errors[i];
    }
  }
  if (!r.per_pair.empty()) r.aggregate = mean_of(r.per_pair);
  return r;
}

inline constexpr const char* kReportSchema = "sspfusion.metric_report/1";

inline nlohmann::json to_json(const MetricValues& v) {
  nlohmann::json j;
  const auto a = v.as_array();
  for (int i = 0; i < 6; ++i) j[MetricValues::kNames[i]] = a[i];
  return j;
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j;
  j["schema"] = kReportSchema;
  j["metadata"] = {{"dataset", r.dataset}, {"checkpoint", r.checkpoint}, {"timestamp", r.timestamp}};
  j["per_pair"] = nlohmann::json::object();
  for (const auto& [id, v] : r.per_pair) j["per_pair"][id] = to_json(v);
  j["aggregate"] = to_json(r.aggregate);
  j["skipped"] = nlohmann::json::object();
  for (const auto& [id, why] : r.skipped) j["skipped"][id] = why;
  return j;
}

/// Structural problems in a report document; empty when it validates and
/// its aggregate equals the mean of its per-pair rows within 1e-9.
inline std::vector<std::string> validate_report_json(const nlohmann::json& j) {
  std::vector<std::string> problems;
  auto need = [&](const nlohmann::json& obj, const char* key, bool (nlohmann::json::*is)() const noexcept) {
    if (!obj.is_object() || !obj.contains(key) || !(obj.at(key).*is)()) {
      problems.push_back(std::string("missing or mistyped '") + key + "'");
      return false;
    }
    return true;
  };
  if (!need(j, "schema", &nlohmann::json::is_string)) return problems;
  if (j["schema"] != kReportSchema) problems.push_back("unexpected schema " + j["schema"].get<std::string>());
  if (need(j, "metadata", &nlohmann::json::is_object)) {
    for (const char* k : {"dataset", "checkpoint", "timestamp"}) need(j["metadata"], k, &nlohmann::json::is_string);
  }
  need(j, "skipped", &nlohmann::json::is_object);
  const bool has_pairs = need(j, "per_pair", &nlohmann::json::is_object);
  const bool has_agg = need(j, "aggregate", &nlohmann::json::is_object);
  if (!has_pairs || !has_agg) return problems;
  std::map<std::string, MetricValues> rows;
  for (const auto& [id, row] : j["per_pair"].items()) {
    std::array<double, 6> a{};
    for (int i = 0; i < 6; ++i) {
      if (!row.contains(MetricValues::kNames[i]) || !row[MetricValues::kNames[i]].is_number()) {
        problems.push_back("pair '" + id + "' lacks " + MetricValues::kNames[i]);
      } else {
        a[i] = row[MetricValues::kNames[i]].get<double>();
      }
    }
    rows[id] = MetricValues::from_array(a);
  }
  if (rows.empty()) {
    problems.push_back("report has no pairs");
    return problems;
  }
  const auto expect = mean_of(rows).as_array();
  for (int i = 0; i < 6; ++i) {
    const char* name = MetricValues::kNames[i];
    if (!j["aggregate"].contains(name) || !j["aggregate"][name].is_number()) {
      problems.push_back(std::string("aggregate lacks ") + name);
    } else if (std::abs(j["aggregate"][name].get<double>() - expect[i]) > 1e-9) {
      problems.push_back(std::string("aggregate ") + name + " differs from the per-pair mean");
    }
  }
  return problems;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  const auto problems = validate_report_json(j);
  if (!problems.empty()) throw IoError("invalid metric report: " + problems.front());
  MetricReport r;
  r.dataset = j["metadata"]["dataset"];
  r.checkpoint = j["metadata"]["checkpoint"];
  r.timestamp = j["metadata"]["timestamp"];
  auto values = [](const nlohmann::json& row) {
    std::array<double, 6> a{};
    for (int i = 0; i < 6; ++i) a[i] = row[MetricValues::kNames[i]].get<double>();
    return MetricValues::from_array(a);
  };
  for (const auto& [id, row] : j["per_pair"].items()) r.per_pair[id] = values(row);
  r.aggregate = values(j["aggregate"]);
  for (const auto& [id, why] : j["skipped"].items()) r.skipped[id] = why.get<std::string>();
  return r;
}

/// One row per pair (sorted by id) followed by a "mean" row.
inline std::string to_csv(const MetricReport& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "pair_id";
  for (const char* n : MetricValues::kNames) os << ',' << n;
  os << '\n';
  auto row = [&os](const std::string& id, const MetricValues& v) {
    os << id;
    for (double x : v.as_array()) os << ',' << x;
    os << '\n';
  };
  for (const auto& [id, v] : r.per_pair) row(id, v);
  row("mean", r.aggregate);
  return os.str();
}

}  // namespace sspf
