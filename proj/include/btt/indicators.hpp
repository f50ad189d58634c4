#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "btt/stats.hpp"
#include "btt/trace.hpp"

namespace btt {

enum class Indicator { AGV, EAG, ERG, PLC, LAR, ULC, NMG };

inline constexpr std::array<Indicator, 7> kAllIndicators = {
    Indicator::AGV, Indicator::EAG, Indicator::ERG, Indicator::PLC,
    Indicator::LAR, Indicator::ULC, Indicator::NMG};

std::string_view to_string(Indicator i) noexcept;
std::optional<Indicator> parse_indicator(std::string_view s) noexcept;

/// Only NMG flags a trial that trained enough rather than one that trains badly.
constexpr bool is_benign(Indicator i) noexcept { return i == Indicator::NMG; }

/// Thresholds and stage geometry for the seven checks. Field names match the
/// config-file keys one-to-one.
struct IndicatorConfig {
  double agv_abs_bound = 1e4;
  double eag_upper = 10.0;
  double erg_lower = 0.1;
  double plc_ratio_threshold = 1e-3;
  double lar_zero_threshold = 0.9;
  double ulc_fluct_tol = 0.10;
  double window_fraction = 0.2;
  double early_stage_fraction = 0.2;
  double late_stage_fraction = 0.5;
  int min_epochs_before_diagnosis = 2;

  /// Throws InvalidInput when a field is out of range.
  void validate() const;

  std::string to_json() const;
  /// Parses a JSON object or a flat `key = value` TOML document. Missing
  /// keys keep their defaults; unknown keys are rejected.
  static IndicatorConfig parse(std::string_view text);
  static IndicatorConfig load(const std::filesystem::path& path);

  friend bool operator==(const IndicatorConfig&, const IndicatorConfig&) = default;
};

struct IndicatorVerdict {
  Indicator indicator = Indicator::AGV;
  bool positive = false;
  bool benign = false;
  int epoch = 0;
  std::string evidence;
};

enum class Decision { continue_training, terminate_bad, terminate_benign };
std::string_view to_string(Decision d) noexcept;

struct DiagnosisReport {
  std::string trial_id;
  int epoch = 0;
  std::vector<IndicatorVerdict> verdicts;
  Decision decision = Decision::continue_training;

  std::vector<Indicator> positives() const;
  /// e.g. "ERG+LAR"; empty when nothing fired.
  std::string positive_names() const;
  std::string to_json() const;
};

enum class Stage { early, mid, late };
std::string_view to_string(Stage s) noexcept;

/// Throws InvalidInput unless 0 <= epoch < max_epoch.
Stage stage_of(int epoch, int max_epoch, const IndicatorConfig& cfg);
bool active_in(Indicator i, Stage s) noexcept;

/// First epoch that is not early.
int early_stage_end(int max_epoch, const IndicatorConfig& cfg);
/// Adaptive loss window used by ULC and NMG.
int loss_window(int max_epoch, const IndicatorConfig& cfg);

IndicatorVerdict agv_check(std::span<const StatVector> grad_layers, const IndicatorConfig& cfg);
std::vector<double> layer_grad_magnitudes(std::span<const StatVector> grad_layers);
IndicatorVerdict eag_check(std::span<const double> magnitudes, const IndicatorConfig& cfg);
IndicatorVerdict erg_check(std::span<const double> magnitudes, const IndicatorConfig& cfg);
IndicatorVerdict plc_check(std::span<const double> train_losses, const IndicatorConfig& cfg);
IndicatorVerdict lar_check(std::span<const StatVector> act_layers, const IndicatorConfig& cfg);
IndicatorVerdict ulc_check(std::span<const double> train_losses, int max_epoch, const IndicatorConfig& cfg);
IndicatorVerdict nmg_check(std::span<const double> train_losses, int max_epoch, const IndicatorConfig& cfg);

enum class Execution { sequential, parallel };

/// Runs the checks active at `epoch`'s stage over the trace prefix
/// 0..epoch. Epochs before min_epochs_before_diagnosis yield an empty
/// report that continues training.
DiagnosisReport diagnose(const TrialTrace& trace, int epoch, const IndicatorConfig& cfg,
                         Execution exec = Execution::sequential);

}  // namespace btt
