#include "btt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <tuple>

#include "json_util.hpp"

namespace btt {

using detail::Json;

namespace {

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

bool same_real(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

std::string num(double v) {
  if (std::isnan(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

bool better(double a, double b, MetricMode mode) { return mode == MetricMode::maximize ? a > b : a < b; }

}  // namespace

std::vector<RankedTrial> ranked_trials(const ExperimentLog& log, const std::string& source_run) {
  std::vector<RankedTrial> out;
  for (const auto& t : log.trials) {
    if (t.status == TrialStatus::failed || !std::isfinite(t.final_metric_for_sampler)) continue;
    out.push_back({t.trial_id, source_run, t.final_metric_for_sampler, t.metric_mode, t.finished_ms});
  }
  return out;
}

double top10hr(std::span<const RankedTrial> run_i, std::span<const RankedTrial> run_j, int k) {
  if (k < 1) fail(ErrorCode::invalid_input, "k must be positive");
  if (run_i.empty() || run_j.empty()) fail(ErrorCode::invalid_input, "both runs need trials");
  const MetricMode mode = run_i.front().metric_mode;
  struct Entry {
    const RankedTrial* t;
    int from_i;
  };
  std::vector<Entry> pool;
  for (const auto& t : run_i) {
    if (t.metric_mode != mode) fail(ErrorCode::invalid_input, "mixed metric modes");
    if (std::isfinite(t.final_metric)) pool.push_back({&t, 1});
  }
  for (const auto& t : run_j) {
    if (t.metric_mode != mode) fail(ErrorCode::invalid_input, "mixed metric modes");
    if (std::isfinite(t.final_metric)) pool.push_back({&t, 0});
  }
  if (static_cast<int>(pool.size()) < k)
    fail(ErrorCode::invalid_input, "pool has " + std::to_string(pool.size()) + " ranked trials, fewer than k");
  std::sort(pool.begin(), pool.end(), [&](const Entry& a, const Entry& b) {
    if (a.t->final_metric != b.t->final_metric) return better(a.t->final_metric, b.t->final_metric, mode);
    return std::tie(a.t->finished_at_ms, a.t->trial_id, a.from_i) < std::tie(b.t->finished_at_ms, b.t->trial_id, b.from_i);
  });
  int k_i = 0;
  for (int n = 0; n < k; ++n) k_i += pool[n].from_i;
  return 100.0 * k_i / k;
}

double tsba_from_times(double t_j, double t_i) {
  if (!(t_j > 0.0)) fail(ErrorCode::invalid_input, "baseline time must be positive");
  return 100.0 * (t_j - t_i) / t_j;
}

MetricMode log_metric_mode(const ExperimentLog& log) {
  return log.trials.empty() ? MetricMode::maximize : log.trials.front().metric_mode;
}

std::vector<MetricPoint> best_so_far_curve(const ExperimentLog& log) {
  const MetricMode mode = log_metric_mode(log);
  std::vector<const TrialState*> done;
  for (const auto& t : log.trials)
    if (t.status != TrialStatus::failed && std::isfinite(t.final_metric_for_sampler)) done.push_back(&t);
  std::stable_sort(done.begin(), done.end(),
                   [](const TrialState* a, const TrialState* b) { return a->finished_ms < b->finished_ms; });
  std::vector<MetricPoint> curve;
  for (const TrialState* t : done)
    if (curve.empty() || better(t->final_metric_for_sampler, curve.back().best, mode))
      curve.push_back({t->finished_ms, t->final_metric_for_sampler});
  return curve;
}

std::optional<std::int64_t> time_to_reach(std::span<const MetricPoint> curve, double target, MetricMode mode) {
  for (const auto& p : curve)
    if (p.best == target || better(p.best, target, mode)) return p.t_ms;
  return std::nullopt;
}

std::optional<double> tsba(double baseline_best, std::int64_t baseline_time_ms, const ExperimentLog& enhanced,
                           MetricMode mode) {
  const auto curve = best_so_far_curve(enhanced);
  const auto t_i = time_to_reach(curve, baseline_best, mode);
  if (!t_i) return std::nullopt;
  return tsba_from_times(static_cast<double>(baseline_time_ms), static_cast<double>(*t_i));
}

// ---------------------------------------------------------------------------
// Summaries

namespace {

void fill_ranking(RunSummary& s, std::vector<double> metrics, MetricMode mode) {
  std::sort(metrics.begin(), metrics.end(), [&](double a, double b) { return better(a, b, mode); });
  s.top10_count = static_cast<int>(std::min<std::size_t>(10, metrics.size()));
  s.top1 = metrics.empty() ? nan() : metrics.front();
  double sum = 0.0;
  for (int i = 0; i < s.top10_count; ++i) sum += metrics[i];
  s.top10_mean = s.top10_count ? sum / s.top10_count : nan();
}

void count_reason(RunSummary& s, const std::string& reason) {
  if (reason == "msr") ++s.msr_terminations;
  if (reason == "budget") ++s.budget_terminations;
  if (reason.rfind("bttackler:", 0) != 0) return;
  std::string_view rest(reason);
  rest.remove_prefix(10);
  while (!rest.empty()) {
    const auto plus = rest.find('+');
    if (auto i = parse_indicator(rest.substr(0, plus))) ++s.indicator_terminations[*i];
    if (plus == std::string_view::npos) break;
    rest.remove_prefix(plus + 1);
  }
}

RunSummary empty_summary() {
  RunSummary s;
  for (auto i : kAllIndicators) s.indicator_terminations[i] = 0;
  return s;
}

}  // namespace

RunSummary summarize(const ExperimentLog& log) {
  RunSummary s = empty_summary();
  std::vector<double> metrics;
  for (const auto& t : log.trials) {
    ++s.trials_run;
    if (t.status == TrialStatus::completed) ++s.completed;
    if (t.status == TrialStatus::failed) ++s.failed;
    if (t.status == TrialStatus::terminated) {
      ++s.terminated;
      s.benign += t.benign;
      count_reason(s, t.termination_reason.value_or(""));
    }
    if (t.status != TrialStatus::failed && std::isfinite(t.final_metric_for_sampler))
      metrics.push_back(t.final_metric_for_sampler);
  }
  fill_ranking(s, std::move(metrics), log_metric_mode(log));
  return s;
}

RunSummary summarize_traces(std::span<const TrialTrace> traces) {
  RunSummary s = empty_summary();
  std::vector<double> metrics;
  MetricMode mode = MetricMode::maximize;
  for (const auto& t : traces) {
    ++s.trials_run;
    if (!t.epochs.empty()) mode = t.epochs.front().metric_mode;
    const FinalStatus status = t.final ? t.final->status : FinalStatus::terminated;
    const std::string reason = t.final ? t.final->reason : "";
    double m = nan();
    if (status == FinalStatus::completed) {
      ++s.completed;
      m = best_val_metric(t.epochs, mode);
    } else if (status == FinalStatus::failed) {
      ++s.failed;
    } else {
      ++s.terminated;
      const bool benign = reason == "bttackler:NMG";
      s.benign += benign;
      count_reason(s, reason);
      if (!t.epochs.empty()) m = benign ? best_val_metric(t.epochs, mode) : t.epochs.back().val_metric;
    }
    if (std::isfinite(m)) metrics.push_back(m);
  }
  fill_ranking(s, std::move(metrics), mode);
  return s;
}

bool operator==(const RunSummary& a, const RunSummary& b) {
  return a.trials_run == b.trials_run && a.completed == b.completed && a.terminated == b.terminated &&
         a.failed == b.failed && a.benign == b.benign && same_real(a.top1, b.top1) &&
         same_real(a.top10_mean, b.top10_mean) && a.top10_count == b.top10_count &&
         a.indicator_terminations == b.indicator_terminations && a.msr_terminations == b.msr_terminations &&
         a.budget_terminations == b.budget_terminations;
}

std::string RunSummary::to_json() const {
  Json j;
  j["trials_run"] = trials_run;
  j["completed"] = completed;
  j["terminated"] = terminated;
  j["failed"] = failed;
  j["benign"] = benign;
  j["top1"] = detail::real_to_json(top1);
  j["top10_mean"] = detail::real_to_json(top10_mean);
  j["top10_count"] = top10_count;
  Json ind = Json::object();
  for (const auto& [i, c] : indicator_terminations) ind[std::string(to_string(i))] = c;
  j["indicator_terminations"] = ind;
  j["msr_terminations"] = msr_terminations;
  j["budget_terminations"] = budget_terminations;
  return detail::dump_line(j);
}

std::string summary_table(const RunSummary& s, const std::string& run) {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-20s %7s %9s %10s %6s %7s %9s %11s\n", "run", "trials", "completed", "terminated",
                "failed", "benign", "top1", "top10_mean");
  out << buf;
  std::snprintf(buf, sizeof buf, "%-20s %7d %9d %10d %6d %7d %9s %11s\n", run.c_str(), s.trials_run, s.completed,
                s.terminated, s.failed, s.benign, num(s.top1).c_str(), num(s.top10_mean).c_str());
  out << buf << "terminations:";
  for (const auto& [i, c] : s.indicator_terminations) out << ' ' << to_string(i) << '=' << c;
  out << " msr=" << s.msr_terminations << " budget=" << s.budget_terminations << '\n';
  if (s.top10_count < 10) out << "top10_mean over " << s.top10_count << " trials\n";
  return out.str();
}

double mean_over_repeats(std::span<const double> values) {
  double sum = 0.0;
  int n = 0;
  for (double v : values)
    if (std::isfinite(v)) {
      sum += v;
      ++n;
    }
  return n ? sum / n : nan();
}

// ---------------------------------------------------------------------------
// Compare

namespace {

std::optional<double> tsba_against(const ExperimentLog& enhanced, const ExperimentLog& baseline,
                                   std::optional<double> best_override, std::optional<std::int64_t> time_override) {
  const MetricMode mode = log_metric_mode(baseline);
  const auto base_curve = best_so_far_curve(baseline);
  if (base_curve.empty() && !best_override) return std::nullopt;
  const double best = best_override ? *best_override : base_curve.back().best;
  std::optional<std::int64_t> t_j = time_override;
  if (!t_j) t_j = time_to_reach(base_curve, best, mode);
  if (!t_j || *t_j <= 0) return std::nullopt;
  return tsba(best, *t_j, enhanced, mode);
}

std::string pct(std::optional<double> v) {
  if (!v || std::isnan(*v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", *v);
  return buf;
}

}  // namespace

CompareReport compare_runs(const ExperimentLog& a, const std::string& name_a, const ExperimentLog& b,
                           const std::string& name_b, const CompareOptions& options) {
  const auto ra = ranked_trials(a, name_a);
  const auto rb = ranked_trials(b, name_b);
  const int k = static_cast<int>(std::min<std::size_t>(options.k, ra.size() + rb.size()));
  const bool rankable = !ra.empty() && !rb.empty() && k > 0;
  const RunSummary sa = summarize(a);
  const RunSummary sb = summarize(b);

  CompareReport rep;
  rep.rows.push_back({name_a, sa.trials_run, sa.top1, sa.top10_mean, rankable ? top10hr(ra, rb, k) : nan(),
                      tsba_against(a, b, options.baseline_best, options.baseline_time_ms)});
  rep.rows.push_back({name_b, sb.trials_run, sb.top1, sb.top10_mean, rankable ? top10hr(rb, ra, k) : nan(),
                      tsba_against(b, a, std::nullopt, std::nullopt)});
  rep.curves.emplace_back(name_a, best_so_far_curve(a));
  rep.curves.emplace_back(name_b, best_so_far_curve(b));
  return rep;
}

std::string CompareReport::table() const {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-20s %7s %9s %11s %9s %8s\n", "run", "trials", "top1", "top10_mean", "Top10HR",
                "TSBA");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-20s %7d %9s %11s %9s %8s\n", r.run.c_str(), r.trials, num(r.top1).c_str(),
                  num(r.top10_mean).c_str(), pct(r.top10hr).c_str(), pct(r.tsba).c_str());
    out << buf;
  }
  return out.str();
}

std::string CompareReport::to_json() const {
  Json j;
  j["kind"] = "compare";
  Json arr = Json::array();
  for (const auto& r : rows) {
    Json jr;
    jr["run"] = r.run;
    jr["trials"] = r.trials;
    jr["top1"] = detail::real_to_json(r.top1);
    jr["top10_mean"] = detail::real_to_json(r.top10_mean);
    jr["top10hr"] = detail::real_to_json(r.top10hr);
    jr["tsba"] = r.tsba ? detail::real_to_json(*r.tsba) : Json(nullptr);
    arr.push_back(jr);
  }
  j["rows"] = arr;
  return detail::dump_line(j);
}

std::string CompareReport::curve_csv() const {
  std::ostringstream out;
  out << "run,t_ms,best_so_far\n";
  char buf[64];
  for (const auto& [run, curve] : curves)
    for (const auto& p : curve) {
      std::snprintf(buf, sizeof buf, ",%lld,%.17g\n", static_cast<long long>(p.t_ms), p.best);
      out << run << buf;
    }
  return out.str();
}

}  // namespace btt
