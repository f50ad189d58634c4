#include "btt/btt.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <memory>
#include <new>
#include <optional>
#include <sstream>
#include <string>

#include "btt/indicators.hpp"
#include "btt/metrics.hpp"
#include "btt/scheduler.hpp"
#include "btt/simulator.hpp"
#include "btt/stats.hpp"
#include "btt/toytrainer.hpp"
#include "btt/trace.hpp"
#include "json_util.hpp"

struct btt_config {
  btt::IndicatorConfig cfg;
};

struct btt_trace {
  btt::TrialTrace trace;
};

struct btt_report {
  btt::DiagnosisReport report;
};

struct btt_replay {
  btt::ReplayReport report;
};

struct btt_experiment {
  std::unique_ptr<btt::TrialRunner> runner;
  std::unique_ptr<btt::Experiment> experiment;
  std::optional<btt::ExperimentLog> log;
  btt_event_fn event_fn = nullptr;
  void* event_user = nullptr;
};

namespace {

using btt::detail::Json;

thread_local std::string g_last_error;

btt_status to_status(btt::ErrorCode c) {
  switch (c) {
    case btt::ErrorCode::invalid_input: return BTT_INVALID_INPUT;
    case btt::ErrorCode::io_error: return BTT_IO_ERROR;
    case btt::ErrorCode::parse_error: return BTT_PARSE_ERROR;
    case btt::ErrorCode::invariant_violation: return BTT_INVARIANT_VIOLATION;
    case btt::ErrorCode::no_such_trial: return BTT_NO_SUCH_TRIAL;
    case btt::ErrorCode::internal: return BTT_INTERNAL;
  }
  return BTT_INTERNAL;
}

template <class Fn>
btt_status guard(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return BTT_OK;
  } catch (const btt::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return BTT_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return BTT_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return BTT_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (!p) btt::fail(btt::ErrorCode::invalid_input, std::string(what) + " is null");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

const btt::IndicatorConfig& cfg_or_default(const btt_config* c) {
  static const btt::IndicatorConfig defaults;
  return c ? c->cfg : defaults;
}

std::unique_ptr<btt::TrialRunner> make_runner(const std::string& name) {
  if (name == "toy_mlp") return std::make_unique<btt::toy::ToyMlpRunner>();
  btt::fail(btt::ErrorCode::invalid_input, "unknown runner '" + name + "'");
}

Json parse_object(const char* text, const char* what) {
  Json j = Json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    btt::fail(btt::ErrorCode::invalid_input, std::string(what) + " must be a JSON object");
  return j;
}

}  // namespace

extern "C" {

const char* btt_version(void) { return "0.1.0"; }

const char* btt_last_error(void) { return g_last_error.c_str(); }

const char* btt_status_name(btt_status status) {
  switch (status) {
    case BTT_OK: return "Ok";
    case BTT_INVALID_INPUT: return "InvalidInput";
    case BTT_IO_ERROR: return "IoError";
    case BTT_PARSE_ERROR: return "ParseError";
    case BTT_INVARIANT_VIOLATION: return "InvariantViolation";
    case BTT_NO_SUCH_TRIAL: return "NoSuchTrial";
    case BTT_INTERNAL: return "Internal";
  }
  return "Unknown";
}

void btt_string_free(char* s) { std::free(s); }

btt_status btt_stat_vector(const double* values, size_t n, double out[10]) {
  return guard([&] {
    need(out, "out");
    if (n > 0) need(values, "values");
    const auto sv = btt::compute_stat_vector(std::span<const double>(values, n));
    const auto arr = sv.to_array();
    std::copy(arr.begin(), arr.end(), out);
  });
}

btt_status btt_config_default(btt_config** out) {
  return guard([&] {
    need(out, "out");
    *out = new btt_config{};
  });
}

btt_status btt_config_parse(const char* text, btt_config** out) {
  return guard([&] {
    need(text, "text");
    need(out, "out");
    *out = new btt_config{btt::IndicatorConfig::parse(text)};
  });
}

btt_status btt_config_load(const char* path, btt_config** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new btt_config{btt::IndicatorConfig::load(path)};
  });
}

btt_status btt_config_to_json(const btt_config* cfg, char** out) {
  return guard([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = dup(cfg->cfg.to_json());
  });
}

void btt_config_free(btt_config* cfg) { delete cfg; }

btt_status btt_trace_read_file(const char* path, btt_trace** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new btt_trace{btt::read_trace_file(path).trace};
  });
}

btt_status btt_trace_epoch_count(const btt_trace* trace, int* out) {
  return guard([&] {
    need(trace, "trace");
    need(out, "out");
    *out = static_cast<int>(trace->trace.epochs.size());
  });
}

btt_status btt_trace_trial_id(const btt_trace* trace, char** out) {
  return guard([&] {
    need(trace, "trace");
    need(out, "out");
    *out = dup(trace->trace.meta.trial_id);
  });
}

void btt_trace_free(btt_trace* trace) { delete trace; }

btt_status btt_diagnose(const btt_trace* trace, int epoch, const btt_config* cfg, btt_report** out) {
  return guard([&] {
    need(trace, "trace");
    need(out, "out");
    *out = new btt_report{btt::diagnose(trace->trace, epoch, cfg_or_default(cfg))};
  });
}

btt_status btt_report_decision(const btt_report* report, btt_decision* out) {
  return guard([&] {
    need(report, "report");
    need(out, "out");
    switch (report->report.decision) {
      case btt::Decision::continue_training: *out = BTT_DECISION_CONTINUE; break;
      case btt::Decision::terminate_bad: *out = BTT_DECISION_TERMINATE_BAD; break;
      case btt::Decision::terminate_benign: *out = BTT_DECISION_TERMINATE_BENIGN; break;
    }
  });
}

btt_status btt_report_positives(const btt_report* report, char** out) {
  return guard([&] {
    need(report, "report");
    need(out, "out");
    *out = dup(report->report.positive_names());
  });
}

btt_status btt_report_to_json(const btt_report* report, char** out) {
  return guard([&] {
    need(report, "report");
    need(out, "out");
    *out = dup(report->report.to_json());
  });
}

void btt_report_free(btt_report* report) { delete report; }

btt_status btt_diagnose_file(const char* path, const btt_config* cfg, char** out_json, char** out_text) {
  return guard([&] {
    need(path, "path");
    const auto read = btt::read_trace_file(path);
    const btt::TrialTrace& t = read.trace;
    const auto& c = cfg_or_default(cfg);
    c.validate();
    Json epochs = Json::array();
    std::ostringstream text;
    text << "trial " << t.meta.trial_id << ": " << t.epochs.size() << " epochs, max_epoch " << t.meta.max_epoch
         << "\n";
    std::optional<btt::DiagnosisReport> first;
    for (int e = 0; e < static_cast<int>(t.epochs.size()); ++e) {
      auto rep = btt::diagnose(t, e, c);
      if (rep.decision == btt::Decision::continue_training) continue;
      if (!first) first = rep;
      epochs.push_back(Json::parse(rep.to_json()));
      text << "epoch " << e << ": " << btt::to_string(rep.decision) << "\n";
      for (const auto& v : rep.verdicts)
        if (v.positive)
          text << "  " << btt::to_string(v.indicator) << " positive" << (v.benign ? " (benign)" : "") << ": "
               << v.evidence << "\n";
    }
    if (first) {
      text << "first positive: epoch " << first->epoch << " " << first->positive_names() << " -> "
           << btt::to_string(first->decision) << "\n";
    } else {
      text << "no indicator fired\n";
    }
    Json doc;
    doc["kind"] = "diagnosis";
    doc["trial_id"] = t.meta.trial_id;
    doc["epochs"] = static_cast<int>(t.epochs.size());
    doc["first_positive_epoch"] = first ? Json(first->epoch) : Json(nullptr);
    doc["decision"] = btt::to_string(first ? first->decision : btt::Decision::continue_training);
    doc["positive_reports"] = epochs;
    if (out_json) *out_json = dup(btt::detail::dump_line(doc));
    if (out_text) *out_text = dup(text.str());
  });
}

btt_status btt_replay_dir(const char* dir, const btt_config* cfg, btt_replay_mode mode, btt_replay** out) {
  return guard([&] {
    need(dir, "dir");
    need(out, "out");
    const auto m = mode == BTT_REPLAY_PER_INDICATOR ? btt::ReplayMode::per_indicator : btt::ReplayMode::combined;
    *out = new btt_replay{btt::replay_dir(dir, cfg_or_default(cfg), m)};
  });
}

btt_status btt_replay_trial_count(const btt_replay* replay, int* out) {
  return guard([&] {
    need(replay, "replay");
    need(out, "out");
    *out = static_cast<int>(replay->report.trials.size());
  });
}

btt_status btt_replay_to_json(const btt_replay* replay, char** out) {
  return guard([&] {
    need(replay, "replay");
    need(out, "out");
    *out = dup(replay->report.to_json());
  });
}

btt_status btt_replay_table(const btt_replay* replay, char** out) {
  return guard([&] {
    need(replay, "replay");
    need(out, "out");
    *out = dup(replay->report.table());
  });
}

void btt_replay_free(btt_replay* replay) { delete replay; }

btt_status btt_calibrate(const char* dir, const char* labels_json, double quantile, const char* grid_json,
                         char** out_json) {
  return guard([&] {
    need(dir, "dir");
    need(out_json, "out_json");
    const auto loaded = btt::load_trace_dir(dir);
    std::map<std::string, btt::Outcome> labels;
    if (labels_json) {
      const Json doc = parse_object(labels_json, "labels");
      for (const auto& [id, v] : doc.items()) {
        if (v == "good") labels[id] = btt::Outcome::good;
        else if (v == "bad") labels[id] = btt::Outcome::bad;
        else btt::fail(btt::ErrorCode::invalid_input, "label for '" + id + "' must be \"good\" or \"bad\"");
      }
    } else {
      labels = btt::label_by_quantile(loaded.traces, quantile);
    }
    std::vector<btt::IndicatorConfig> grid;
    if (grid_json) {
      const Json g = Json::parse(grid_json, nullptr, false);
      if (g.is_discarded() || !g.is_array()) btt::fail(btt::ErrorCode::invalid_input, "grid must be a JSON array");
      for (const Json& c : g) grid.push_back(btt::IndicatorConfig::parse(c.dump()));
    } else {
      grid.emplace_back();
    }
    *out_json = dup(btt::calibration_json(btt::calibrate(loaded.traces, labels, grid)));
  });
}

btt_status btt_experiment_create(const char* manifest_json, btt_experiment** out) {
  return guard([&] {
    need(manifest_json, "manifest_json");
    need(out, "out");
    const Json m = parse_object(manifest_json, "manifest");
    static const char* known[] = {"experiment_id", "runner",  "space", "policy", "budget", "concurrency",
                                  "seed",          "config", "out",   "checker_latency_ms", "simulated"};
    for (const auto& [key, _] : m.items())
      if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) ==
          std::end(known))
        btt::fail(btt::ErrorCode::invalid_input, "unknown manifest key '" + key + "'");
    auto str = [&](const char* key, const std::string& dflt) {
      if (!m.contains(key)) return dflt;
      if (!m[key].is_string()) btt::fail(btt::ErrorCode::invalid_input, std::string(key) + " must be a string");
      return m[key].get<std::string>();
    };
    auto integer = [&](const char* key, std::int64_t dflt) -> std::int64_t {
      if (!m.contains(key)) return dflt;
      if (!m[key].is_number_integer()) btt::fail(btt::ErrorCode::invalid_input, std::string(key) + " must be an integer");
      return m[key].get<std::int64_t>();
    };

    auto exp = std::make_unique<btt_experiment>();
    const std::string runner_name = str("runner", "toy_mlp");
    exp->runner = make_runner(runner_name);
    btt::SearchSpace space = btt::resolve_space(str("space", runner_name));
    if (!space.runner.empty() && space.runner != runner_name)
      btt::fail(btt::ErrorCode::invalid_input, "space '" + space.name + "' is for runner '" + space.runner + "'");

    btt::ExperimentOptions o;
    o.experiment_id = str("experiment_id", "exp");
    o.policy = btt::parse_policy(str("policy", "none"));
    o.budget = btt::Budget::parse(str("budget", "trials:20"));
    o.concurrency = static_cast<int>(integer("concurrency", 8));
    const std::int64_t seed = integer("seed", 0);
    if (seed < 0) btt::fail(btt::ErrorCode::invalid_input, "seed must be nonnegative");
    o.seed = static_cast<std::uint64_t>(seed);
    o.checker_latency_ms = integer("checker_latency_ms", 0);
    if (m.contains("simulated")) {
      if (!m["simulated"].is_boolean()) btt::fail(btt::ErrorCode::invalid_input, "simulated must be a boolean");
      o.simulated = m["simulated"].get<bool>();
    }
    const std::string cfg_path = str("config", "");
    if (!cfg_path.empty()) o.indicators = btt::IndicatorConfig::load(cfg_path);
    const std::string out_dir = str("out", "");
    if (!out_dir.empty()) o.out_dir = out_dir;
    btt_experiment* raw = exp.get();
    o.on_event = [raw](const btt::LogEvent& e) {
      if (raw->event_fn) raw->event_fn(btt::encode_event(e).c_str(), raw->event_user);
    };
    exp->experiment = std::make_unique<btt::Experiment>(std::move(space), *exp->runner, std::move(o));
    *out = exp.release();
  });
}

btt_status btt_experiment_set_event_callback(btt_experiment* exp, btt_event_fn fn, void* user) {
  return guard([&] {
    need(exp, "exp");
    exp->event_fn = fn;
    exp->event_user = user;
  });
}

btt_status btt_experiment_run(btt_experiment* exp) {
  return guard([&] {
    need(exp, "exp");
    exp->log = exp->experiment->run();
  });
}

btt_status btt_experiment_request_stop(btt_experiment* exp, const char* trial_id, const char* reason,
                                       btt_stop_ack* out) {
  return guard([&] {
    need(exp, "exp");
    need(trial_id, "trial_id");
    const auto ack = exp->experiment->request_stop(trial_id, reason ? reason : "");
    if (out) {
      *out = ack == btt::StopAck::stopping           ? BTT_STOP_STOPPING
             : ack == btt::StopAck::already_stopping ? BTT_STOP_ALREADY_STOPPING
                                                     : BTT_STOP_ALREADY_FINISHED;
    }
  });
}

btt_status btt_experiment_summary_json(const btt_experiment* exp, char** out) {
  return guard([&] {
    need(exp, "exp");
    need(out, "out");
    if (!exp->log) btt::fail(btt::ErrorCode::invalid_input, "experiment has not run");
    *out = dup(btt::summarize(*exp->log).to_json());
  });
}

btt_status btt_experiment_summary_table(const btt_experiment* exp, char** out) {
  return guard([&] {
    need(exp, "exp");
    need(out, "out");
    if (!exp->log) btt::fail(btt::ErrorCode::invalid_input, "experiment has not run");
    const auto& log = *exp->log;
    std::string name = log.experiment_id + " (" + std::string(btt::to_string(log.policy)) + ")";
    *out = dup(btt::summary_table(btt::summarize(log), name));
  });
}

void btt_experiment_free(btt_experiment* exp) { delete exp; }

btt_status btt_log_summary_json(const char* log_path, char** out) {
  return guard([&] {
    need(log_path, "log_path");
    need(out, "out");
    *out = dup(btt::summarize(btt::ExperimentLog::read_file(log_path)).to_json());
  });
}

btt_status btt_compare(const char* log_a, const char* name_a, const char* log_b, const char* name_b,
                       const char* options_json, char** out_table, char** out_json, char** out_csv) {
  return guard([&] {
    need(log_a, "log_a");
    need(log_b, "log_b");
    btt::CompareOptions opt;
    if (options_json) {
      const Json o = parse_object(options_json, "options");
      for (const auto& [key, v] : o.items()) {
        if (key == "k" && v.is_number_integer()) opt.k = v.get<int>();
        else if (key == "baseline_best" && v.is_number()) opt.baseline_best = v.get<double>();
        else if (key == "baseline_time_ms" && v.is_number_integer()) opt.baseline_time_ms = v.get<std::int64_t>();
        else btt::fail(btt::ErrorCode::invalid_input, "bad compare option '" + key + "'");
      }
    }
    const auto a = btt::ExperimentLog::read_file(log_a);
    const auto b = btt::ExperimentLog::read_file(log_b);
    const auto rep = btt::compare_runs(a, name_a ? name_a : "a", b, name_b ? name_b : "b", opt);
    if (out_table) *out_table = dup(rep.table());
    if (out_json) *out_json = dup(rep.to_json());
    if (out_csv) *out_csv = dup(rep.curve_csv());
  });
}

btt_status btt_spaces_list(char** out_json) {
  return guard([&] {
    need(out_json, "out_json");
    Json arr = Json::array();
    for (const auto& name : btt::builtin_space_names()) arr.push_back(Json::parse(btt::builtin_space(name).to_json()));
    *out_json = dup(btt::detail::dump_line(arr));
  });
}

}  // extern "C"
