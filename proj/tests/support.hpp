// Shared oracles and generators for the test binaries.
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "btt/stats.hpp"
#include "btt/trace.hpp"

namespace btt::testing {

// Direct evaluation of the statistic definitions in long double. Quantiles
// come from nth_element per rank, not from a full sort.
struct OracleStats {
  std::array<long double, kStatCount> v{};  // frozen order
};

inline long double oracle_order_stat(std::vector<double> xs, std::size_t k) {
  std::nth_element(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(k), xs.end());
  return xs[k];
}

inline long double oracle_quantile(const std::vector<double>& xs, long double p) {
  const long double rank = p * static_cast<long double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const long double frac = rank - static_cast<long double>(lo);
  const long double a = oracle_order_stat(xs, lo);
  if (frac == 0 || lo + 1 >= xs.size()) return a;
  const long double b = oracle_order_stat(xs, lo + 1);
  return a + frac * (b - a);
}

inline OracleStats oracle_stats(const std::vector<double>& xs) {
  const auto n = static_cast<long double>(xs.size());
  long double sum = 0, mn = xs[0], mx = xs[0];
  std::size_t zeros = 0;
  for (double x : xs) {
    sum += x;
    mn = std::min<long double>(mn, x);
    mx = std::max<long double>(mx, x);
    if (x == 0.0) ++zeros;
  }
  const long double mean = sum / n;
  long double m2 = 0, m3 = 0, m4 = 0;
  for (double x : xs) {
    const long double d = x - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  OracleStats o;
  o.v[0] = mean;
  o.v[1] = m2;
  o.v[2] = oracle_quantile(xs, 0.5L);
  o.v[3] = mn;
  o.v[4] = mx;
  o.v[5] = oracle_quantile(xs, 0.75L);
  o.v[6] = oracle_quantile(xs, 0.25L);
  o.v[7] = m2 == 0 ? 0 : m3 / std::pow(m2, 1.5L);
  o.v[8] = m2 == 0 ? 0 : m4 / (m2 * m2) - 3;
  o.v[9] = static_cast<long double>(zeros) / n;
  return o;
}

// Largest relative error of `got` against the oracle. Location statistics
// are relative to the data's magnitude, var to itself, and the shape
// statistics and zero_ratio are dimensionless, so their floor is 1.
inline double stat_rel_error(const StatVector& got, const OracleStats& want, const std::vector<double>& xs) {
  long double scale = 0;
  for (double x : xs) scale = std::max<long double>(scale, std::fabs(x));
  const auto g = got.to_array();
  double worst = 0;
  for (std::size_t i = 0; i < kStatCount; ++i) {
    long double floor = 1;
    if (i == 0 || (i >= 2 && i <= 6)) floor = scale;
    if (i == 1) floor = 0;
    long double denom = std::max(std::fabs(want.v[i]), floor);
    if (denom == 0) denom = 1;
    const long double err = std::fabs(static_cast<long double>(g[i]) - want.v[i]) / denom;
    worst = std::max(worst, static_cast<double>(err));
  }
  return worst;
}

// Random finite sample with a mix of shapes, including exact zeros and ties.
inline std::vector<double> random_values(std::mt19937_64& rng, std::size_t n) {
  std::vector<double> xs(n);
  const int shape = std::uniform_int_distribution<int>(0, 4)(rng);
  std::normal_distribution<double> normal(std::uniform_real_distribution<double>(-5, 5)(rng),
                                          std::exp(std::uniform_real_distribution<double>(-6, 6)(rng)));
  std::exponential_distribution<double> expo(std::uniform_real_distribution<double>(0.1, 10)(rng));
  std::uniform_int_distribution<int> small(-3, 3);
  std::uniform_real_distribution<double> unit(0, 1);
  for (auto& x : xs) {
    switch (shape) {
      case 0: x = normal(rng); break;
      case 1: x = expo(rng); break;
      case 2: x = small(rng); break;  // many ties and zeros
      case 3: x = unit(rng) < 0.6 ? 0.0 : normal(rng); break;  // relu-like
      default: x = std::ldexp(unit(rng) - 0.5, std::uniform_int_distribution<int>(-20, 20)(rng)); break;
    }
  }
  return xs;
}

// Least-squares line through (i, ys[i]) evaluated in long double.
struct LineFit {
  long double slope = 0;
  long double intercept = 0;
  long double rmse = 0;
  long double mean = 0;
};

inline LineFit oracle_line_fit(const std::vector<double>& ys) {
  const auto n = static_cast<long double>(ys.size());
  long double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const long double x = static_cast<long double>(i);
    sx += x;
    sy += ys[i];
    sxx += x * x;
    sxy += x * ys[i];
  }
  LineFit f;
  f.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  f.intercept = (sy - f.slope * sx) / n;
  long double ss = 0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const long double r = ys[i] - (f.intercept + f.slope * static_cast<long double>(i));
    ss += r * r;
  }
  f.rmse = std::sqrt(ss / n);
  f.mean = sy / n;
  return f;
}

inline StatVector random_stats(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(1, 40);
  return compute_stat_vector(random_values(rng, len(rng)));
}

// A valid trace with random shape: 0..max_epoch epochs, 1..4 layers per
// kind, optional final record and optional non-finite statistics.
inline TrialTrace random_trace(std::mt19937_64& rng, const std::string& trial_id) {
  std::uniform_real_distribution<double> unit(0, 1);
  TrialTrace t;
  t.meta.trial_id = trial_id;
  t.meta.max_epoch = std::uniform_int_distribution<int>(1, 12)(rng);
  t.meta.created_unix_ms = std::uniform_int_distribution<std::int64_t>(0, 2'000'000'000'000)(rng);
  t.meta.config["lr"] = std::exp(-10 * unit(rng));
  t.meta.config["depth"] = std::int64_t{std::uniform_int_distribution<int>(1, 8)(rng)};
  t.meta.config["act"] = std::string(unit(rng) < 0.5 ? "relu" : "tanh");
  const int epochs = std::uniform_int_distribution<int>(0, t.meta.max_epoch)(rng);
  const int layers = std::uniform_int_distribution<int>(1, 4)(rng);
  const MetricMode mode = unit(rng) < 0.5 ? MetricMode::maximize : MetricMode::minimize;
  std::int64_t wall = 0;
  for (int e = 0; e < epochs; ++e) {
    wall += std::uniform_int_distribution<int>(0, 50)(rng);
    EpochRecord r;
    r.trial_id = trial_id;
    r.epoch = e;
    r.train_loss = unit(rng) < 0.05 ? std::numeric_limits<double>::quiet_NaN() : 3 * unit(rng);
    r.val_metric = unit(rng) < 0.05 ? std::numeric_limits<double>::infinity() : unit(rng);
    r.metric_mode = mode;
    r.wall_ms = wall;
    t.epochs.push_back(r);
    for (VarKind k : {VarKind::grad, VarKind::weight, VarKind::act}) {
      for (int l = 0; l < layers; ++l) {
        LayerRecord rec;
        rec.trial_id = trial_id;
        rec.epoch = e;
        rec.layer_index = l;
        rec.layer_name = "dense_" + std::to_string(l);
        rec.var = k;
        rec.stats = random_stats(rng);
        if (unit(rng) < 0.03) rec.stats.max = -std::numeric_limits<double>::infinity();
        t.layers.push_back(rec);
      }
    }
  }
  if (unit(rng) < 0.7) {
    TrialFinal f;
    f.status = static_cast<FinalStatus>(std::uniform_int_distribution<int>(0, 2)(rng));
    f.reason = f.status == FinalStatus::completed ? "" : "bttackler:ERG";
    f.best_val_metric = best_val_metric(t.epochs, mode);
    f.epochs_run = epochs;
    t.final = f;
  }
  canonicalize(t);
  return t;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("btt-" + tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

}  // namespace btt::testing
