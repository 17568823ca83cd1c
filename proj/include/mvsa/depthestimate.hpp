#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mvsa/costvolume.hpp"
#include "mvsa/detail/binary_io.hpp"
#include "mvsa/errors.hpp"
#include "mvsa/features.hpp"
#include "mvsa/geometry.hpp"
#include "mvsa/image.hpp"

namespace mvsa {

/// 1/sqrt(C) for C-dimensional descriptors.
inline double default_temperature(int feature_channels) {
  if (feature_channels < 1) throw ArgumentError("default_temperature: channel count must be positive");
  return 1.0 / std::sqrt(static_cast<double>(feature_channels));
}

/// Per pixel: p = softmax(scores / T) over bins, depth = exp(sum p_k log bin_k).
/// Pixels with no valid source at any bin are invalid.
inline DepthMap soft_argmin_depth(const CostVolume& cv, double temperature) {
  if (!(temperature > 0.0)) throw ArgumentError("soft_argmin_depth: temperature must be positive");
  const int kcount = cv.bins.count();
  std::vector<double> log_bins(kcount);
  for (int k = 0; k < kcount; ++k) log_bins[k] = std::log(cv.bins[k]);

  DepthMap out(cv.width, cv.height, cv.scale);
#pragma omp parallel for schedule(static)
  for (int v = 0; v < cv.height; ++v) {
    for (int u = 0; u < cv.width; ++u) {
      bool covered = false;
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < kcount; ++k) {
        covered |= cv.cover(k, v, u) > 0;
        mx = std::max(mx, cv.score(k, v, u) / temperature);
      }
      if (!covered) {
        out.invalidate(u, v);
        continue;
      }
      double z = 0.0;
      double acc = 0.0;
      for (int k = 0; k < kcount; ++k) {
        const double e = std::exp(cv.score(k, v, u) / temperature - mx);
        z += e;
        acc += e * log_bins[k];
      }
      const double d = std::clamp(std::exp(acc / z), cv.bins.front(), cv.bins.back());
      out.set(u, v, d);
    }
  }
  return out;
}

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// exp(log d_min + log(d_max/d_min) * sigmoid(x)).
inline double sigmoid_log_depth(double logit, const RangeEstimate& range) {
  range.validate();
  return std::exp(std::log(range.d_min) + std::log(range.d_max / range.d_min) * logistic(logit));
}

/// Inverse of sigmoid_log_depth on the open interval (d_min, d_max).
inline double logit_from_depth(double depth, const RangeEstimate& range) {
  range.validate();
  if (!(depth > range.d_min && depth < range.d_max))
    throw DomainError("logit_from_depth: depth must lie strictly inside the range");
  const double s = std::log(depth / range.d_min) / std::log(range.d_max / range.d_min);
  return std::log(s) - std::log1p(-s);
}

struct PerturbConfig {
  double log_amplitude = std::log(2.0);
};

/// Training-time range augmentation: d_min shrinks by exp(U[0,a]) and d_max
/// grows by exp(U[0,a]), so the result always contains the input range.
inline RangeEstimate perturb_range(const RangeEstimate& range, std::uint64_t seed, const PerturbConfig& cfg = {}) {
  range.validate();
  if (!(cfg.log_amplitude >= 0.0)) throw ArgumentError("perturb_range: amplitude must be non-negative");
  std::mt19937_64 rng(seed);
  // 53-bit uniforms from the raw engine output, identical on every platform.
  const auto uniform = [&rng]() { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  const double lo = uniform();
  const double hi = uniform();
  return {range.d_min * std::exp(-cfg.log_amplitude * lo), range.d_max * std::exp(cfg.log_amplitude * hi)};
}

struct CascadeConfig {
  int bins = 64;
  int passes = 2;
  double margin_frac = 0.05;
  std::optional<double> temperature;  // default 1/sqrt(C)
  RangeHeuristicConfig range;
};

struct CascadePass {
  RangeEstimate range;
  DepthMap depth;
};

struct CascadeResult {
  DepthMap depth;                   // final pass
  std::vector<CascadePass> passes;  // diagnostics, first pass first
};

/// Next-pass range: [min, max] of the valid depths, padded on each side in log
/// space by max(margin * log(max/min), log(1 + margin)).
inline RangeEstimate refine_range(const DepthMap& depth, double margin_frac) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = 0.0;
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (!depth.valid[i]) continue;
    lo = std::min(lo, depth.depth[i]);
    hi = std::max(hi, depth.depth[i]);
  }
  if (!(hi > 0.0)) throw PipelineError("no matchable content");
  const double pad = std::max(margin_frac * std::log(hi / lo), std::log1p(margin_frac));
  return {lo * std::exp(-pad), hi * std::exp(pad)};
}

/// Coarse-to-fine depth: the first pass sweeps the range inferred from the
/// camera geometry; each later pass re-sweeps the span of the previous
/// estimate.
inline CascadeResult cascaded_depth(const CameraFrame& ref, std::span<const CameraFrame> sources,
                                    const FeatureMap& f_ref, std::span<const FeatureMap> f_sources,
                                    const ScorerConfig& scorer, const CascadeConfig& cfg = {}) {
  if (sources.empty()) throw ArgumentError("cascaded_depth: at least one source required");
  if (cfg.passes < 1) throw ArgumentError("cascaded_depth: passes must be >= 1");
  const double temperature = cfg.temperature.value_or(default_temperature(f_ref.channels));

  CascadeResult result;
  RangeEstimate range = estimate_matchable_range(ref, sources, cfg.range);
  for (int pass = 0; pass < cfg.passes; ++pass) {
    if (pass > 0) range = refine_range(result.passes.back().depth, cfg.margin_frac);
    const DepthBins bins = make_log_bins(range, cfg.bins);
    const CostVolume cv = build_cost_volume(ref, sources, f_ref, f_sources, bins, scorer);
    DepthMap depth = soft_argmin_depth(cv, temperature);
    if (depth.count_valid() == 0) throw PipelineError("no matchable content");
    result.passes.push_back({range, std::move(depth)});
  }
  result.depth = result.passes.back().depth;
  return result;
}

// MVSD: "MVSD", u32 width, u32 height, f32 row-major depths (<= 0 invalid).

inline std::vector<unsigned char> encode_depth_map(const DepthMap& d) {
  detail::ByteWriter w;
  w.put_magic("MVSD");
  w.put<std::uint32_t>(d.width);
  w.put<std::uint32_t>(d.height);
  for (std::size_t i = 0; i < d.size(); ++i) w.put<float>(d.valid[i] ? static_cast<float>(d.depth[i]) : 0.0f);
  return std::move(w.bytes());
}

inline DepthMap decode_depth_map(const std::vector<unsigned char>& bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("MVSD", "MVSD");
  const auto w = r.get<std::uint32_t>("MVSD");
  const auto h = r.get<std::uint32_t>("MVSD");
  if (w == 0 || h == 0) throw FormatError("MVSD: zero dimension in header", 4);
  const std::uint64_t count = std::uint64_t{w} * h;
  if (count > (std::uint64_t{1} << 32)) throw FormatError("MVSD: implausible header dimensions", 4);
  r.expect_payload(count * sizeof(float), "MVSD");
  DepthMap d(static_cast<int>(w), static_cast<int>(h));
  const unsigned char* p = r.cursor();
  for (std::size_t i = 0; i < count; ++i) {
    float v;
    std::memcpy(&v, p + i * sizeof(float), sizeof(float));
    if (std::isnan(v)) throw FormatError("MVSD: NaN depth value", r.position() + i * sizeof(float));
    if (v > 0.0f && std::isfinite(v)) {
      d.depth[i] = v;
      d.valid[i] = 1;
    }
  }
  return d;
}

inline void save_depth_mvsd(const std::string& path, const DepthMap& d) {
  detail::write_file_bytes(path, encode_depth_map(d));
}

inline DepthMap load_depth_mvsd(const std::string& path) { return decode_depth_map(detail::read_file_bytes(path)); }

}  // namespace mvsa
