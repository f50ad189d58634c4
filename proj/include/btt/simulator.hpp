#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "btt/indicators.hpp"
#include "btt/trace.hpp"

namespace btt {

enum class ReplayMode { combined, per_indicator };
std::string_view to_string(ReplayMode m) noexcept;
ReplayMode parse_replay_mode(std::string_view s);

struct ReplayTrial {
  std::string trial_id;
  int epochs_run = 0;
  std::optional<int> first_positive_epoch;
  std::vector<Indicator> triggering;  // combined: positives at the first positive epoch
  Decision decision = Decision::continue_training;
  /// First positive epoch of each indicator that fired. Filled in both
  /// modes; in combined mode it holds the first trigger only.
  std::map<Indicator, int> first_epoch;
  int epochs_saved = 0;
  std::int64_t wall_saved_ms = 0;

  friend bool operator==(const ReplayTrial&, const ReplayTrial&) = default;
};

struct ReplayWarning {
  std::string source;
  std::string message;

  friend bool operator==(const ReplayWarning&, const ReplayWarning&) = default;
};

struct ReplayReport {
  ReplayMode mode = ReplayMode::combined;
  std::string corpus;               // label for the table row
  std::vector<ReplayTrial> trials;  // sorted by trial_id
  std::map<Indicator, int> counts;  // trials claimed per indicator, all seven keys
  int epochs_saved = 0;
  std::int64_t wall_saved_ms = 0;
  std::vector<ReplayWarning> warnings;

  const ReplayTrial* find(std::string_view trial_id) const;
  /// Single-line JSON document.
  std::string to_json() const;
  /// Indicator columns, one corpus row, then per-trial lines.
  std::string table() const;

  friend bool operator==(const ReplayReport&, const ReplayReport&) = default;
};

/// Diagnoses every epoch prefix of each trace. Input order does not matter.
ReplayReport replay(std::span<const TrialTrace> traces, const IndicatorConfig& cfg, ReplayMode mode);

/// Replays every `*.trace.jsonl` in `dir`. Unreadable or invalid files are
/// skipped and listed as warnings. Files are processed concurrently.
ReplayReport replay_dir(const std::filesystem::path& dir, const IndicatorConfig& cfg, ReplayMode mode);

struct LoadedTraces {
  std::vector<TrialTrace> traces;
  std::vector<ReplayWarning> warnings;
};
LoadedTraces load_trace_dir(const std::filesystem::path& dir);

enum class Outcome { good, bad };

struct CalibrationRow {
  IndicatorConfig cfg;
  double false_positive_rate = 0.0;  // good trials given a malign stop
  double false_negative_rate = 0.0;  // bad trials never given a malign stop
  int epochs_saved = 0;
};

/// Evaluates each config in combined mode, ranked by false-positive rate
/// ascending then epochs saved descending. Unlabeled trials only add to
/// epochs saved. Throws InvalidInput on an empty grid.
std::vector<CalibrationRow> calibrate(std::span<const TrialTrace> traces, const std::map<std::string, Outcome>& labels,
                                      std::span<const IndicatorConfig> grid);

/// Labels trials whose final metric is strictly worse than the q-quantile
/// of all finite final metrics as bad; trials without one are bad too.
std::map<std::string, Outcome> label_by_quantile(std::span<const TrialTrace> traces, double q);

std::string calibration_json(std::span<const CalibrationRow> rows);

}  // namespace btt
