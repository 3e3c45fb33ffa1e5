#pragma once

// Wall-time and peak-activation measurement of a variant's forward+backward
// pass as the token count grows, a log-log exponent fit over the measured
// peaks, and the CSV/table report.
//
// Memory numbers come from the instrumented allocator, never the OS, so they
// are bit-reproducible run to run. Time is wall clock and is not.

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "helix/errors.hpp"
#include "helix/memory.hpp"
#include "helix/model.hpp"
#include "helix/rng.hpp"

namespace helix {

enum class ScalingOutcome { ok, budget_exceeded };

inline const char* outcome_name(ScalingOutcome o) {
  return o == ScalingOutcome::ok ? "ok" : "budget_exceeded";
}

struct ScalingRecord {
  Variant variant = Variant::pure_mamba;
  FrontendKind frontend = FrontendKind::raw;
  std::int64_t L = 0;
  double forward_ms = 0;
  double backward_ms = 0;
  std::size_t peak_activation_bytes = 0;
  ScalingOutcome outcome = ScalingOutcome::ok;
};

inline constexpr std::size_t kDefaultBenchBudget = std::size_t(4) << 30;

namespace benchdet {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double ms_between(std::chrono::steady_clock::time_point a,
                         std::chrono::steady_clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

}  // namespace benchdet

// One forward+backward on random tokens per requested L, at full model width.
// peak_activation_bytes is the retained-activation high-water: live bytes at
// the end of forward minus the resident set (weights, gradients, input). The
// tape only releases from that point on, so this is the peak of the retained
// set over the whole pass; transient scratch inside individual ops is timed
// but not counted. A length that trips the activation budget is reported as
// budget_exceeded, not thrown.
template <class T = float>
std::vector<ScalingRecord> measure_scaling(Variant variant,
                                           const std::vector<std::int64_t>& lengths,
                                           std::size_t memory_budget_bytes = kDefaultBenchBudget,
                                           std::int64_t repeats = 5, std::uint64_t seed = 0) {
  for (std::size_t i = 0; i + 1 < lengths.size(); ++i) {
    if (lengths[i + 1] <= lengths[i]) {
      throw ConfigError("scaling lengths must be strictly ascending");
    }
  }
  if (repeats < 1) throw ConfigError("scaling repeats must be at least 1");

  ModelConfig cfg;
  cfg.variant = variant;
  cfg.n_classes = 50;
  Rng init_rng(seed);
  auto model = build_model<T>(cfg, init_rng);
  auto& meter = MemoryMeter::get();

  std::vector<ScalingRecord> out;
  for (const std::int64_t L : lengths) {
    ScalingRecord rec;
    rec.variant = variant;
    rec.frontend = cfg.frontend;
    rec.L = L;

    Rng trng = substream(seed, "bench", static_cast<std::uint64_t>(L));
    Tensor<T> tokens(Shape{L, cfg.d_model});
    for (auto& x : tokens.raw()) x = static_cast<T>(trng.uniform(-1.0, 1.0));
    Tensor<T> target(Shape{1, cfg.n_classes});
    target.raw()[0] = T(1);

    auto pass = [&](double* fwd_ms, double* bwd_ms, std::size_t* fwd_peak) {
      const auto t0 = std::chrono::steady_clock::now();
      Tape<T> tape;
      auto logits = model_forward(model, tokens);
      auto loss = cross_entropy(logits, target);
      const auto t1 = std::chrono::steady_clock::now();
      *fwd_peak = meter.live_bytes();
      tape.backward(loss);
      const auto t2 = std::chrono::steady_clock::now();
      *fwd_ms = benchdet::ms_between(t0, t1);
      *bwd_ms = benchdet::ms_between(t1, t2);
      model.visit([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
    };

    try {
      BudgetGuard guard(memory_budget_bytes);
      double f = 0, b = 0;
      std::size_t fp = 0;
      pass(&f, &b, &fp);  // warmup; also allocates the gradient buffers
      const std::size_t base = meter.live_bytes();
      std::vector<double> fs, bs;
      std::size_t peak = 0;
      for (std::int64_t r = 0; r < repeats; ++r) {
        pass(&f, &b, &fp);
        fs.push_back(f);
        bs.push_back(b);
        peak = std::max(peak, fp - base);
      }
      rec.forward_ms = benchdet::median(fs);
      rec.backward_ms = benchdet::median(bs);
      rec.peak_activation_bytes = peak;
      rec.outcome = ScalingOutcome::ok;
    } catch (const FeasibilityError&) {
      rec.outcome = ScalingOutcome::budget_exceeded;
    }
    out.push_back(rec);
  }
  return out;
}

// ln(bytes) = intercept + exponent * ln(L), least squares over ok records.
struct ScalingFit {
  double exponent = 0;
  double intercept = 0;
};

inline double projected_bytes(const ScalingFit& fit, std::int64_t L) {
  return std::exp(fit.intercept + fit.exponent * std::log(static_cast<double>(L)));
}

inline std::map<Variant, ScalingFit> fit_scaling_exponent(
    const std::vector<ScalingRecord>& records) {
  std::map<Variant, std::vector<std::pair<double, double>>> pts;
  for (const auto& r : records) {
    if (r.outcome != ScalingOutcome::ok) continue;
    pts[r.variant].emplace_back(std::log(static_cast<double>(r.L)),
                                std::log(static_cast<double>(r.peak_activation_bytes)));
  }
  if (pts.empty()) throw ConfigError("scaling fit: no ok records");

  std::map<Variant, ScalingFit> out;
  for (auto& [variant, xy] : pts) {
    if (xy.size() < 3) {
      throw ConfigError(std::string("scaling fit: ") + variant_name(variant) + " has " +
                        std::to_string(xy.size()) + " ok records, need at least 3");
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& [x, y] : xy) {
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
    }
    const double n = static_cast<double>(xy.size());
    ScalingFit fit;
    fit.exponent = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    fit.intercept = (sy - fit.exponent * sx) / n;
    out[variant] = fit;
  }
  return out;
}

// CSV at `path`, a status table at `path` + ".txt". The table calls a length
// "slow" when its wall time exceeds twice the pure_mamba time at the same L.
// Returns the rendered table.
inline std::string emit_scaling_report(const std::vector<ScalingRecord>& records,
                                       const std::string& path) {
  std::ofstream csv(path, std::ios::trunc);
  if (!csv) throw IoError("cannot write scaling report '" + path + "'");
  csv << "variant,frontend,L,forward_ms,backward_ms,peak_bytes,outcome\n";
  char line[256];
  for (const auto& r : records) {
    std::snprintf(line, sizeof(line), "%s,%s,%" PRId64 ",%.3f,%.3f,%zu,%s\n",
                  variant_name(r.variant), frontend_name(r.frontend), r.L, r.forward_ms,
                  r.backward_ms, r.peak_activation_bytes, outcome_name(r.outcome));
    csv << line;
  }
  csv.close();

  std::map<std::int64_t, double> mamba_wall;
  for (const auto& r : records) {
    if (r.variant == Variant::pure_mamba && r.outcome == ScalingOutcome::ok) {
      mamba_wall[r.L] = r.forward_ms + r.backward_ms;
    }
  }
  std::vector<std::int64_t> lengths;
  for (const auto& r : records) {
    if (std::find(lengths.begin(), lengths.end(), r.L) == lengths.end()) lengths.push_back(r.L);
  }
  std::sort(lengths.begin(), lengths.end());
  const Variant order[] = {Variant::pure_mamba, Variant::helix, Variant::pure_attention};

  std::string table;
  char cell[64];
  std::snprintf(cell, sizeof(cell), "%8s", "L");
  table += cell;
  for (Variant v : order) {
    std::snprintf(cell, sizeof(cell), "  %16s", variant_name(v));
    table += cell;
  }
  table += "\n";
  for (const std::int64_t L : lengths) {
    std::snprintf(cell, sizeof(cell), "%8" PRId64, L);
    table += cell;
    for (Variant v : order) {
      const char* status = "-";
      for (const auto& r : records) {
        if (r.variant != v || r.L != L) continue;
        if (r.outcome == ScalingOutcome::budget_exceeded) {
          status = "exceeded";
        } else {
          const auto ref = mamba_wall.find(L);
          const double wall = r.forward_ms + r.backward_ms;
          status = (ref != mamba_wall.end() && wall > 2.0 * ref->second) ? "slow" : "ok";
        }
        break;
      }
      std::snprintf(cell, sizeof(cell), "  %16s", status);
      table += cell;
    }
    table += "\n";
  }

  std::ofstream txt(path + ".txt", std::ios::trunc);
  if (!txt) throw IoError("cannot write scaling table '" + path + ".txt'");
  txt << table;
  return table;
}

}  // namespace helix
