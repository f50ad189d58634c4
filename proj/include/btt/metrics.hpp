#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "btt/scheduler.hpp"
#include "btt/trace.hpp"

namespace btt {

struct RankedTrial {
  std::string trial_id;
  std::string source_run;
  double final_metric = 0.0;
  MetricMode metric_mode = MetricMode::maximize;
  std::int64_t finished_at_ms = 0;
};

/// Finished trials of a log with a finite final_metric_for_sampler.
std::vector<RankedTrial> ranked_trials(const ExperimentLog& log, const std::string& source_run);

/// Percentage of the pooled top k that comes from run_i. Ties are broken by
/// earlier finish, then trial id; a tie that survives both goes to run_j.
/// Non-finite metrics are excluded. Throws InvalidInput on mixed metric
/// modes, an empty run or fewer than k ranked trials in the pool.
double top10hr(std::span<const RankedTrial> run_i, std::span<const RankedTrial> run_j, int k = 10);

/// 100 * (t_j - t_i) / t_j. Throws InvalidInput unless t_j > 0.
double tsba_from_times(double t_j, double t_i);

struct MetricPoint {
  std::int64_t t_ms = 0;
  double best = 0.0;
};

/// Best-so-far final metric of a run, one point per improving trial finish.
std::vector<MetricPoint> best_so_far_curve(const ExperimentLog& log);

/// Earliest time the run's best-so-far reaches or beats `target`.
std::optional<std::int64_t> time_to_reach(std::span<const MetricPoint> curve, double target, MetricMode mode);

/// TSBA of `enhanced` against a baseline that reached `baseline_best` after
/// `baseline_time_ms`. Absent when the enhanced run never gets there.
std::optional<double> tsba(double baseline_best, std::int64_t baseline_time_ms, const ExperimentLog& enhanced,
                           MetricMode mode);

MetricMode log_metric_mode(const ExperimentLog& log);

struct RunSummary {
  int trials_run = 0;
  int completed = 0;
  int terminated = 0;
  int failed = 0;
  int benign = 0;
  double top1 = 0.0;        // NaN when nothing ranked
  double top10_mean = 0.0;  // over min(10, ranked) trials
  int top10_count = 0;
  std::map<Indicator, int> indicator_terminations;  // all seven keys
  int msr_terminations = 0;
  int budget_terminations = 0;

  std::string to_json() const;
  friend bool operator==(const RunSummary& a, const RunSummary& b);
};

RunSummary summarize(const ExperimentLog& log);
/// Plain-text rendering of a summary.
std::string summary_table(const RunSummary& s, const std::string& run);
/// The same summary rebuilt from the trial trace files alone.
RunSummary summarize_traces(std::span<const TrialTrace> traces);

/// Mean of the finite values; NaN when there are none.
double mean_over_repeats(std::span<const double> values);

struct CompareRow {
  std::string run;
  int trials = 0;
  double top1 = 0.0;
  double top10_mean = 0.0;
  double top10hr = 0.0;         // against the other run
  std::optional<double> tsba;   // against the other run as baseline
};

struct CompareReport {
  std::vector<CompareRow> rows;
  std::vector<std::pair<std::string, std::vector<MetricPoint>>> curves;

  std::string table() const;
  std::string to_json() const;
  /// run,t_ms,best_so_far
  std::string curve_csv() const;
};

struct CompareOptions {
  int k = 10;
  /// Overrides for the baseline's best metric and the time it took, applied
  /// when run `b` serves as baseline.
  std::optional<double> baseline_best;
  std::optional<std::int64_t> baseline_time_ms;
};

CompareReport compare_runs(const ExperimentLog& a, const std::string& name_a, const ExperimentLog& b,
                           const std::string& name_b, const CompareOptions& options = {});

}  // namespace btt
