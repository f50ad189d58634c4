#include "btt/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "btt/error.hpp"

namespace btt {

std::array<double, kStatCount> StatVector::to_array() const {
  return {avg, var, median, min, max, q3, q1, skewness, kurtosis, zero_ratio};
}

StatVector StatVector::from_array(const std::array<double, kStatCount>& a) {
  return {a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8], a[9]};
}

bool same_value(double a, double b) noexcept {
  if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
  return a == b;
}

bool operator==(const StatVector& a, const StatVector& b) {
  auto x = a.to_array();
  auto y = b.to_array();
  for (std::size_t i = 0; i < kStatCount; ++i) {
    if (!same_value(x[i], y[i])) return false;
  }
  return true;
}

namespace {

// Linear interpolation at rank p*(n-1) on a sorted, NaN-free sequence.
double quantile_sorted(const std::vector<double>& s, double p) {
  const double rank = p * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const double frac = rank - static_cast<double>(lo);
  if (frac == 0.0 || lo + 1 >= s.size()) return s[lo];
  const double a = s[lo];
  const double b = s[lo + 1];
  return std::clamp(a + frac * (b - a), a, b);
}

StatVector summarize(std::vector<double> v) {
  if (v.empty()) fail(ErrorCode::invalid_input, "compute_stat_vector: empty sequence");

  const auto n = static_cast<double>(v.size());
  const auto zeros = std::count(v.begin(), v.end(), 0.0);

  StatVector s;
  s.zero_ratio = static_cast<double>(zeros) / n;

  if (std::any_of(v.begin(), v.end(), [](double x) { return std::isnan(x); })) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    s.avg = s.var = s.median = s.min = s.max = s.q3 = s.q1 = s.skewness = s.kurtosis = nan;
    return s;
  }

  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  s.q1 = quantile_sorted(v, 0.25);
  s.median = quantile_sorted(v, 0.5);
  s.q3 = quantile_sorted(v, 0.75);

  if (s.min == s.max) {
    // Constant input: the mean is exact and all central moments vanish.
    s.avg = s.min;
    return s;
  }

  double sum = 0.0;
  for (double x : v) sum += x;
  s.avg = sum / n;

  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double x : v) {
    const double d = x - s.avg;
    const double d2 = d * d;
    m2 += d2;
    m3 += d2 * d;
    m4 += d2 * d2;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  s.var = m2;
  if (m2 == 0.0) return s;
  s.skewness = m3 / std::pow(m2, 1.5);
  s.kurtosis = m4 / (m2 * m2) - 3.0;
  return s;
}

}  // namespace

StatVector compute_stat_vector(std::span<const double> values) {
  return summarize(std::vector<double>(values.begin(), values.end()));
}

StatVector compute_stat_vector(std::span<const float> values) {
  return summarize(std::vector<double>(values.begin(), values.end()));
}

}  // namespace btt
