#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "btt/indicators.hpp"
#include "btt/runner.hpp"
#include "btt/trace.hpp"

namespace btt {

enum class DimKind { continuous, continuous_log, discrete, categorical };
std::string_view to_string(DimKind k) noexcept;
DimKind parse_dim_kind(std::string_view s);

struct Dim {
  std::string name;
  DimKind kind = DimKind::continuous;
  double low = 0.0;  // integer bounds for discrete dims
  double high = 1.0;
  std::vector<HpValue> choices;  // categorical only

  friend bool operator==(const Dim&, const Dim&) = default;
};

struct SearchSpace {
  std::string name;
  std::string runner;
  std::vector<Dim> dims;

  /// Throws InvalidInput on duplicate names, empty domains or log domains
  /// that are not strictly positive.
  void validate() const;
  bool contains(const HpConfig& config) const;

  std::string to_json() const;
  static SearchSpace parse(std::string_view json);
  static SearchSpace load(const std::filesystem::path& path);

  friend bool operator==(const SearchSpace&, const SearchSpace&) = default;
};

/// Spaces compiled into the library.
std::vector<std::string> builtin_space_names();
SearchSpace builtin_space(std::string_view name);
/// A built-in space name, or else a path to a space file.
SearchSpace resolve_space(std::string_view name_or_path);

/// Draws one configuration. Deterministic in the generator state.
HpConfig random_sample(const SearchSpace& space, std::mt19937_64& rng);

/// Source of configurations. observe() receives final_metric_for_sampler.
class Sampler {
 public:
  virtual ~Sampler() = default;
  virtual HpConfig next() = 0;
  virtual void observe(const std::string& trial_id, const HpConfig& config, double final_metric) = 0;
};

class RandomSampler final : public Sampler {
 public:
  RandomSampler(SearchSpace space, std::uint64_t seed);
  HpConfig next() override;
  void observe(const std::string&, const HpConfig&, double) override {}

 private:
  SearchSpace space_;
  std::mt19937_64 rng_;
};

/// True iff there are at least `min_peers` peers and `metric` is strictly
/// worse than their median.
bool median_stop_check(double metric, std::span<const double> peers, MetricMode mode, int min_peers = 5);

enum class Policy { none, bttackler, msr };
std::string_view to_string(Policy p) noexcept;
Policy parse_policy(std::string_view s);

struct Budget {
  enum class Kind { trials, wall, sim };
  Kind kind = Kind::trials;
  std::int64_t amount = 1;  // trial count or milliseconds

  /// `trials:N`, `wall:Nms` or `sim:Nms`.
  static Budget parse(std::string_view s);
  std::string to_string() const;

  friend bool operator==(const Budget&, const Budget&) = default;
};

enum class TrialStatus { pending, running, completed, terminated, failed };
std::string_view to_string(TrialStatus s) noexcept;
TrialStatus parse_trial_status(std::string_view s);

struct TrialState {
  std::string trial_id;
  HpConfig config;
  std::uint64_t seed = 0;
  TrialStatus status = TrialStatus::pending;
  MetricMode metric_mode = MetricMode::maximize;
  int max_epoch = 0;
  int epochs_run = 0;
  double best_val_metric = 0.0;  // NaN until a finite metric arrives
  double last_val_metric = 0.0;
  double final_metric_for_sampler = 0.0;
  std::optional<std::string> termination_reason;
  bool benign = false;
  std::vector<Indicator> indicators;  // positives of the verdict that stopped the trial
  std::int64_t started_ms = 0;        // experiment clock
  std::int64_t finished_ms = 0;
  std::int64_t wall_ms = 0;

  friend bool operator==(const TrialState& a, const TrialState& b);
};

/// One line of experiment.jsonl; `payload` is a serialized JSON object.
struct LogEvent {
  std::int64_t t_ms = 0;
  std::string kind;
  std::string payload;

  friend bool operator==(const LogEvent&, const LogEvent&) = default;
};

/// The event's line in experiment.jsonl, without the newline.
std::string encode_event(const LogEvent& e);

struct ExperimentLog {
  std::string experiment_id;
  std::string runner;
  Policy policy = Policy::none;
  Budget budget;
  int concurrency = 8;
  std::uint64_t seed = 0;
  bool simulated = true;
  SearchSpace space;
  IndicatorConfig indicators;
  std::vector<LogEvent> events;
  std::vector<TrialState> trials;  // in launch order

  const TrialState* find(std::string_view trial_id) const;

  void write(std::ostream& out) const;
  void write_file(const std::filesystem::path& path) const;
  /// Rebuilds trials from the events.
  static ExperimentLog read(std::istream& in);
  static ExperimentLog read_file(const std::filesystem::path& path);
};

struct ExperimentOptions {
  std::string experiment_id = "exp";
  Policy policy = Policy::none;
  Budget budget;
  int concurrency = 8;
  std::uint64_t seed = 0;
  /// Simulated time is always used for sim budgets and never for wall ones.
  bool simulated = true;
  IndicatorConfig indicators;
  int msr_min_peers = 5;
  /// Simulated delay between an epoch ending and its verdict. Verdicts are
  /// pipelined, so a delay below the epoch cost postpones a stop by at most
  /// one epoch and never holds a trial back.
  std::int64_t checker_latency_ms = 0;
  /// Traces, stop files and experiment.jsonl go here when set.
  std::optional<std::filesystem::path> out_dir;
  /// Defaults to RandomSampler(space, seed).
  std::shared_ptr<Sampler> sampler;
  /// Guards against runners that fail instantly under a time budget.
  int max_trials = 100000;
  /// Called on the scheduler thread after each event is logged.
  std::function<void(const LogEvent&)> on_event;
};

enum class StopAck { stopping, already_stopping, already_finished };
std::string_view to_string(StopAck a) noexcept;

class Experiment {
 public:
  Experiment(SearchSpace space, TrialRunner& runner, ExperimentOptions options);
  ~Experiment();
  Experiment(const Experiment&) = delete;
  Experiment& operator=(const Experiment&) = delete;

  /// Runs to budget exhaustion. Callable once.
  ExperimentLog run();

  /// Safe from any thread, including on_event. The trial finishes after the
  /// epoch in flight. Throws NoSuchTrial for ids never launched.
  StopAck request_stop(const std::string& trial_id, const std::string& reason);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

ExperimentLog run_experiment(const SearchSpace& space, TrialRunner& runner, const ExperimentOptions& options);

std::string trial_id_for(int index);  // 0 -> "t0001"
std::uint64_t trial_seed(std::uint64_t experiment_seed, std::uint64_t index);

/// Reason recorded for a diagnosis stop, e.g. "bttackler:ERG+LAR".
std::string diagnosis_reason(const DiagnosisReport& report);

}  // namespace btt
