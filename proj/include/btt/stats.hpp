#pragma once

#include <array>
#include <cstddef>
#include <span>

namespace btt {

inline constexpr std::size_t kStatCount = 10;

/// Ten-number summary of one tensor snapshot. The member order is the
/// serialization order used in trace files.
struct StatVector {
  double avg = 0.0;
  double var = 0.0;  // population variance
  double median = 0.0;
  double min = 0.0;
  double max = 0.0;
  double q3 = 0.0;
  double q1 = 0.0;
  double skewness = 0.0;
  double kurtosis = 0.0;  // excess
  double zero_ratio = 0.0;

  std::array<double, kStatCount> to_array() const;
  static StatVector from_array(const std::array<double, kStatCount>& a);

  /// NaN compares equal to NaN here, so traces holding non-finite
  /// statistics still round-trip to equal values.
  friend bool operator==(const StatVector& a, const StatVector& b);
};

/// Bit-level value equality for doubles where NaN == NaN.
bool same_value(double a, double b) noexcept;

/// Summarizes a non-empty sequence. Non-finite inputs propagate into the
/// result rather than raising; an empty span throws InvalidInput.
StatVector compute_stat_vector(std::span<const double> values);
StatVector compute_stat_vector(std::span<const float> values);

}  // namespace btt
