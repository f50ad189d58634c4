#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "btt/error.hpp"
#include "btt/stats.hpp"

namespace btt {

enum class VarKind { grad, weight, act };
enum class MetricMode { maximize, minimize };
enum class FinalStatus { completed, terminated, failed };

std::string_view to_string(VarKind k) noexcept;
std::string_view to_string(MetricMode m) noexcept;
std::string_view to_string(FinalStatus s) noexcept;
VarKind parse_var_kind(std::string_view s);
MetricMode parse_metric_mode(std::string_view s);
FinalStatus parse_final_status(std::string_view s);

/// One hyperparameter value: integer for discrete dims, real for continuous
/// ones, text for categorical choices.
using HpValue = std::variant<std::int64_t, double, std::string>;
using HpConfig = std::map<std::string, HpValue>;

std::string format_hp_value(const HpValue& v);

struct LayerRecord {
  std::string trial_id;
  int epoch = 0;
  int layer_index = 0;
  std::string layer_name;
  VarKind var = VarKind::grad;
  StatVector stats;

  friend bool operator==(const LayerRecord&, const LayerRecord&) = default;
};

struct EpochRecord {
  std::string trial_id;
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  MetricMode metric_mode = MetricMode::maximize;
  std::int64_t wall_ms = 0;  // cumulative since the trial started

  friend bool operator==(const EpochRecord& a, const EpochRecord& b);
};

struct TrialMeta {
  std::string trial_id;
  HpConfig config;
  int max_epoch = 1;
  std::int64_t created_unix_ms = 0;

  friend bool operator==(const TrialMeta&, const TrialMeta&) = default;
};

struct TrialFinal {
  FinalStatus status = FinalStatus::completed;
  std::string reason;
  double best_val_metric = 0.0;
  int epochs_run = 0;

  friend bool operator==(const TrialFinal& a, const TrialFinal& b);
};

struct TrialTrace {
  TrialMeta meta;
  std::vector<EpochRecord> epochs;
  std::vector<LayerRecord> layers;  // canonical order: (epoch, var, layer_index)
  std::optional<TrialFinal> final;

  friend bool operator==(const TrialTrace&, const TrialTrace&) = default;

  /// Statistics of one variable kind at one epoch, ordered by layer index.
  std::vector<StatVector> stats_at(int epoch, VarKind kind) const;
  std::vector<const LayerRecord*> layers_at(int epoch, VarKind kind) const;
  std::vector<double> train_losses(int through_epoch) const;
};

/// Extremum of the finite val_metric values under `mode`; NaN when none.
double best_val_metric(const std::vector<EpochRecord>& epochs, MetricMode mode);

/// Sorts layers into canonical order.
void canonicalize(TrialTrace& trace);

/// Throws Error(code) describing the first violated invariant.
void validate_trace(const TrialTrace& trace, ErrorCode code);

// Single-record encoders; each returns one line without the trailing newline.
std::string encode_meta(const TrialMeta& meta);
std::string encode_epoch(const EpochRecord& rec);
std::string encode_layer(const LayerRecord& rec);
std::string encode_final(const std::string& trial_id, const TrialFinal& fin);

/// Writes the canonical line-delimited form; returns bytes written.
std::size_t write_trace(const TrialTrace& trace, std::ostream& sink);
void write_trace_file(const TrialTrace& trace, const std::filesystem::path& path);

struct TraceReadResult {
  TrialTrace trace;
  std::size_t resume_offset = 0;  // byte offset where the next read should start
  bool truncated = false;         // a partial final line was ignored
};

TraceReadResult read_trace(std::istream& source);
TraceReadResult read_trace(std::string_view bytes);
TraceReadResult read_trace_file(const std::filesystem::path& path);

std::string trace_file_name(std::string_view trial_id);

}  // namespace btt
