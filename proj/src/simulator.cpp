#include "btt/simulator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json_util.hpp"

namespace btt {

using detail::Json;

std::string_view to_string(ReplayMode m) noexcept {
  return m == ReplayMode::combined ? "combined" : "per_indicator";
}

ReplayMode parse_replay_mode(std::string_view s) {
  if (s == "combined") return ReplayMode::combined;
  if (s == "per_indicator") return ReplayMode::per_indicator;
  fail(ErrorCode::invalid_input, "unknown replay mode '" + std::string(s) + "'");
}

namespace {

ReplayTrial replay_one(const TrialTrace& t, const IndicatorConfig& cfg, ReplayMode mode) {
  ReplayTrial r;
  r.trial_id = t.meta.trial_id;
  r.epochs_run = static_cast<int>(t.epochs.size());
  for (int e = 0; e < r.epochs_run; ++e) {
    const DiagnosisReport rep = diagnose(t, e, cfg);
    if (rep.decision == Decision::continue_training) continue;
    if (!r.first_positive_epoch) {
      r.first_positive_epoch = e;
      r.triggering = rep.positives();
      r.decision = rep.decision;
    }
    if (mode == ReplayMode::combined) {
      for (auto i : rep.positives()) r.first_epoch[i] = e;
      break;
    }
    for (auto i : rep.positives()) r.first_epoch.try_emplace(i, e);
  }
  if (r.first_positive_epoch) {
    const int f = *r.first_positive_epoch;
    r.epochs_saved = r.epochs_run - (f + 1);
    r.wall_saved_ms = t.epochs.back().wall_ms - t.epochs[f].wall_ms;
  }
  return r;
}

ReplayReport merge(std::vector<ReplayTrial> trials, ReplayMode mode) {
  ReplayReport rep;
  rep.mode = mode;
  std::sort(trials.begin(), trials.end(),
            [](const ReplayTrial& a, const ReplayTrial& b) { return a.trial_id < b.trial_id; });
  for (auto i : kAllIndicators) rep.counts[i] = 0;
  for (const auto& t : trials) {
    for (const auto& [i, e] : t.first_epoch) ++rep.counts[i];
    rep.epochs_saved += t.epochs_saved;
    rep.wall_saved_ms += t.wall_saved_ms;
  }
  rep.trials = std::move(trials);
  return rep;
}

// Runs fn(i) for i in [0, n) on up to hardware_concurrency threads.
template <class Fn>
void parallel_for(std::size_t n, Fn fn) {
  const std::size_t workers = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
}

}  // namespace

ReplayReport replay(std::span<const TrialTrace> traces, const IndicatorConfig& cfg, ReplayMode mode) {
  cfg.validate();
  std::vector<ReplayTrial> out(traces.size());
  parallel_for(traces.size(), [&](std::size_t i) { out[i] = replay_one(traces[i], cfg, mode); });
  return merge(std::move(out), mode);
}

LoadedTraces load_trace_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) fail(ErrorCode::io_error, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.size() > 12 && name.ends_with(".trace.jsonl")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<std::optional<TrialTrace>> loaded(files.size());
  std::vector<std::vector<ReplayWarning>> notes(files.size());
  parallel_for(files.size(), [&](std::size_t i) {
    const std::string src = files[i].filename().string();
    try {
      auto r = read_trace_file(files[i]);
      if (r.truncated) notes[i].push_back({src, "ignored a partial final line"});
      if (!r.trace.final) notes[i].push_back({src, "no final record"});
      if (r.trace.epochs.empty() && !r.trace.final) {
        notes[i].push_back({src, "no epochs; skipped"});
        return;
      }
      loaded[i] = std::move(r.trace);
    } catch (const std::exception& e) {
      notes[i].push_back({src, std::string(e.what()) + "; skipped"});
    }
  });

  LoadedTraces out;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < files.size(); ++i) {
    for (auto& w : notes[i]) out.warnings.push_back(std::move(w));
    if (!loaded[i]) continue;
    if (!seen.insert(loaded[i]->meta.trial_id).second) {
      out.warnings.push_back({files[i].filename().string(), "duplicate trial id; skipped"});
      continue;
    }
    out.traces.push_back(std::move(*loaded[i]));
  }
  return out;
}

ReplayReport replay_dir(const std::filesystem::path& dir, const IndicatorConfig& cfg, ReplayMode mode) {
  LoadedTraces lt = load_trace_dir(dir);
  ReplayReport rep = replay(lt.traces, cfg, mode);
  rep.warnings = std::move(lt.warnings);
  rep.corpus = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
  return rep;
}

const ReplayTrial* ReplayReport::find(std::string_view trial_id) const {
  for (const auto& t : trials)
    if (t.trial_id == trial_id) return &t;
  return nullptr;
}

std::string ReplayReport::to_json() const {
  Json j;
  j["kind"] = "replay_report";
  j["mode"] = to_string(mode);
  j["corpus"] = corpus;
  Json counts_j = Json::object();
  for (const auto& [i, c] : counts) counts_j[std::string(to_string(i))] = c;
  j["counts"] = counts_j;
  j["epochs_saved"] = epochs_saved;
  j["wall_saved_ms"] = wall_saved_ms;
  Json ts = Json::array();
  for (const auto& t : trials) {
    Json jt;
    jt["trial_id"] = t.trial_id;
    jt["epochs_run"] = t.epochs_run;
    jt["first_positive_epoch"] = t.first_positive_epoch ? Json(*t.first_positive_epoch) : Json(nullptr);
    Json trig = Json::array();
    for (auto i : t.triggering) trig.push_back(to_string(i));
    jt["triggering"] = trig;
    jt["decision"] = to_string(t.decision);
    Json fe = Json::object();
    for (const auto& [i, e] : t.first_epoch) fe[std::string(to_string(i))] = e;
    jt["first_epoch"] = fe;
    jt["epochs_saved"] = t.epochs_saved;
    jt["wall_saved_ms"] = t.wall_saved_ms;
    ts.push_back(jt);
  }
  j["trials"] = ts;
  Json ws = Json::array();
  for (const auto& w : warnings) ws.push_back(Json{{"source", w.source}, {"message", w.message}});
  j["warnings"] = ws;
  return detail::dump_line(j);
}

std::string ReplayReport::table() const {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-16s", "task");
  out << buf;
  for (auto i : kAllIndicators) {
    std::snprintf(buf, sizeof buf, " %5s", std::string(to_string(i)).c_str());
    out << buf;
  }
  out << "  trials  epochs_saved  wall_saved_ms\n";
  std::snprintf(buf, sizeof buf, "%-16s", corpus.empty() ? "-" : corpus.c_str());
  out << buf;
  for (auto i : kAllIndicators) {
    std::snprintf(buf, sizeof buf, " %5d", counts.at(i));
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "  %6zu  %12d  %13lld\n", trials.size(), epochs_saved,
                static_cast<long long>(wall_saved_ms));
  out << buf << "\nmode: " << to_string(mode) << "\n";
  for (const auto& t : trials) {
    std::string names;
    for (const auto& [i, e] : t.first_epoch) {
      if (!names.empty()) names += ' ';
      names += std::string(to_string(i)) + "@" + std::to_string(e);
    }
    std::snprintf(buf, sizeof buf, "  %-12s epochs %3d  %-16s %s\n", t.trial_id.c_str(), t.epochs_run,
                  std::string(to_string(t.decision)).c_str(), names.empty() ? "-" : names.c_str());
    out << buf;
  }
  if (!warnings.empty()) {
    out << "\nwarnings:\n";
    for (const auto& w : warnings) out << "  " << w.source << ": " << w.message << "\n";
  }
  return out.str();
}

std::vector<CalibrationRow> calibrate(std::span<const TrialTrace> traces, const std::map<std::string, Outcome>& labels,
                                      std::span<const IndicatorConfig> grid) {
  if (grid.empty()) fail(ErrorCode::invalid_input, "calibration grid is empty");
  std::vector<CalibrationRow> rows;
  for (const IndicatorConfig& cfg : grid) {
    const ReplayReport rep = replay(traces, cfg, ReplayMode::combined);
    int good = 0, bad = 0, fp = 0, fn = 0;
    for (const auto& t : rep.trials) {
      auto it = labels.find(t.trial_id);
      if (it == labels.end()) continue;
      const bool malign = t.decision == Decision::terminate_bad;
      if (it->second == Outcome::good) {
        ++good;
        fp += malign;
      } else {
        ++bad;
        fn += !malign;
      }
    }
    CalibrationRow row;
    row.cfg = cfg;
    row.false_positive_rate = good ? static_cast<double>(fp) / good : 0.0;
    row.false_negative_rate = bad ? static_cast<double>(fn) / bad : 0.0;
    row.epochs_saved = rep.epochs_saved;
    rows.push_back(row);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const CalibrationRow& a, const CalibrationRow& b) {
    if (a.false_positive_rate != b.false_positive_rate) return a.false_positive_rate < b.false_positive_rate;
    return a.epochs_saved > b.epochs_saved;
  });
  return rows;
}

namespace {

// Final metric as the sampler would have seen it, from the trace alone.
double trace_final_metric(const TrialTrace& t) {
  if (t.epochs.empty()) return std::nan("");
  const MetricMode mode = t.epochs.front().metric_mode;
  if (t.final && t.final->status == FinalStatus::failed) return std::nan("");
  if (t.final && t.final->status == FinalStatus::terminated && t.final->reason != "bttackler:NMG")
    return t.epochs.back().val_metric;
  return best_val_metric(t.epochs, mode);
}

}  // namespace

std::map<std::string, Outcome> label_by_quantile(std::span<const TrialTrace> traces, double q) {
  if (!(q >= 0.0 && q <= 1.0)) fail(ErrorCode::invalid_input, "quantile must lie in [0, 1]");
  std::vector<double> finite;
  MetricMode mode = MetricMode::maximize;
  for (const auto& t : traces) {
    if (!t.epochs.empty()) mode = t.epochs.front().metric_mode;
    const double m = trace_final_metric(t);
    if (std::isfinite(m)) finite.push_back(m);
  }
  std::sort(finite.begin(), finite.end());
  double cut = std::nan("");
  if (!finite.empty()) {
    const double pos = q * static_cast<double>(finite.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, finite.size() - 1);
    cut = finite[lo] + (pos - static_cast<double>(lo)) * (finite[hi] - finite[lo]);
  }
  std::map<std::string, Outcome> out;
  for (const auto& t : traces) {
    const double m = trace_final_metric(t);
    bool bad = !std::isfinite(m);
    if (!bad) bad = mode == MetricMode::maximize ? m < cut : m > cut;
    out[t.meta.trial_id] = bad ? Outcome::bad : Outcome::good;
  }
  return out;
}

std::string calibration_json(std::span<const CalibrationRow> rows) {
  Json arr = Json::array();
  for (const auto& r : rows) {
    Json j;
    j["config"] = Json::parse(r.cfg.to_json());
    j["false_positive_rate"] = r.false_positive_rate;
    j["false_negative_rate"] = r.false_negative_rate;
    j["epochs_saved"] = r.epochs_saved;
    arr.push_back(j);
  }
  Json doc;
  doc["kind"] = "calibration";
  doc["rows"] = arr;
  return detail::dump_line(doc);
}

}  // namespace btt
