// Command-line front end. Talks to the engine only through btt.h.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "btt/btt.h"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// Owns a string handed out by the library.
struct Owned {
  char* p = nullptr;
  ~Owned() { btt_string_free(p); }
  char** out() { return &p; }
  std::string str() const { return p ? p : ""; }
};

struct Failure {
  btt_status status;
  std::string message;
};

void check(btt_status s) {
  if (s != BTT_OK) throw Failure{s, btt_last_error()};
}

template <class T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  ~Handle() { Free(p); }
  T** out() { return &p; }
};

using Config = Handle<btt_config, btt_config_free>;
using Replay = Handle<btt_replay, btt_replay_free>;
using ExperimentH = Handle<btt_experiment, btt_experiment_free>;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("btt");
  logger->set_pattern("%^%l%$: %v");
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("BTT_LOG");
  spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Failure{BTT_IO_ERROR, "cannot write " + path.string()};
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
  spdlog::info("wrote {}", path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure{BTT_IO_ERROR, "cannot create " + dir.string() + ": " + ec.message()};
}

void load_config(Config& cfg, const std::string& path) {
  if (path.empty()) {
    check(btt_config_default(cfg.out()));
  } else {
    check(btt_config_load(path.c_str(), cfg.out()));
  }
}

fs::path log_path(const std::string& arg) {
  fs::path p(arg);
  if (fs::is_directory(p)) p /= "experiment.jsonl";
  return p;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Failure{BTT_IO_ERROR, "cannot open " + path};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void on_event(const char* line, void*) {
  if (spdlog::should_log(spdlog::level::debug)) {
    spdlog::debug("{}", line);
    return;
  }
  if (!spdlog::should_log(spdlog::level::info)) return;
  const auto j = ordered_json::parse(line);
  if (j["kind"] == "trial_finished") {
    const auto& p = j["payload"];
    spdlog::info("t={}ms {} {} after {} epochs{}", j["t_ms"].get<long long>(), p["trial_id"].get<std::string>(),
                 p["status"].get<std::string>(), p["epochs_run"].get<int>(),
                 p["reason"].is_string() ? " (" + p["reason"].get<std::string>() + ")" : "");
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Diagnosis-driven hyperparameter search"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string out_dir = "./btt-out";
  app.add_option("--out", out_dir, "Output directory")->capture_default_str();

  // run
  auto* run = app.add_subcommand("run", "Run an experiment");
  std::string runner = "toy_mlp", policy = "none", budget = "trials:20", space, config, experiment_id = "exp";
  std::int64_t seed = 0, latency = 0;
  int concurrency = 8;
  bool real_time = false;
  run->add_option("--runner", runner, "Trial runner")->capture_default_str();
  run->add_option("--policy", policy, "none | bttackler | msr")->capture_default_str();
  run->add_option("--budget", budget, "trials:N | wall:Nms | sim:Nms")->capture_default_str();
  run->add_option("--seed", seed, "Experiment seed")->capture_default_str();
  run->add_option("--concurrency", concurrency, "Trials running at once")->capture_default_str();
  run->add_option("--space", space, "Built-in space name or space file (default: the runner's space)");
  run->add_option("--config", config, "Indicator config file (JSON or TOML)");
  run->add_option("--experiment-id", experiment_id, "Experiment id")->capture_default_str();
  run->add_option("--checker-latency-ms", latency, "Simulated checker delay")->capture_default_str();
  run->add_flag("--real-time", real_time, "Use the wall clock with trials budgets");

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "Diagnose one trace file");
  std::string trace_file;
  diag->add_option("trace", trace_file, "Trace file")->required();
  diag->add_option("--config", config, "Indicator config file");

  // replay
  auto* rep = app.add_subcommand("replay", "Replay a directory of traces through the checker");
  std::string trace_dir, mode = "combined";
  rep->add_option("dir", trace_dir, "Trace directory")->required();
  rep->add_option("--config", config, "Indicator config file");
  rep->add_option("--mode", mode, "combined | per_indicator")->capture_default_str();

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Rank indicator configs on labelled traces");
  std::string labels, grid;
  double quantile = 0.5;
  cal->add_option("dir", trace_dir, "Trace directory")->required();
  cal->add_option("--labels", labels, "JSON object trial_id -> good|bad");
  cal->add_option("--quantile", quantile, "Label trials below this metric quantile bad")->capture_default_str();
  cal->add_option("--grid", grid, "JSON array of indicator configs");

  // compare
  auto* cmp = app.add_subcommand("compare", "Compare two experiment logs");
  std::string log_a, log_b, name_a, name_b;
  std::optional<double> baseline_best;
  std::optional<std::int64_t> baseline_time;
  int k = 10;
  cmp->add_option("log_a", log_a, "Experiment log or output directory")->required();
  cmp->add_option("log_b", log_b, "Baseline experiment log or output directory")->required();
  cmp->add_option("--name-a", name_a, "Label for the first run");
  cmp->add_option("--name-b", name_b, "Label for the second run");
  cmp->add_option("--k", k, "Pool size for Top10HR")->capture_default_str();
  cmp->add_option("--baseline-best", baseline_best, "Override the baseline's best metric");
  cmp->add_option("--baseline-time-ms", baseline_time, "Override the time the baseline took to reach it");

  // spaces
  auto* spaces = app.add_subcommand("spaces", "Search spaces");
  spaces->require_subcommand(1);
  auto* spaces_list = spaces->add_subcommand("list", "List built-in spaces");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      ordered_json m;
      m["experiment_id"] = experiment_id;
      m["runner"] = runner;
      m["space"] = space.empty() ? runner : space;
      m["policy"] = policy;
      m["budget"] = budget;
      m["concurrency"] = concurrency;
      m["seed"] = seed;
      if (!config.empty()) m["config"] = config;
      m["out"] = out_dir;
      m["checker_latency_ms"] = latency;
      if (real_time) m["simulated"] = false;
      ExperimentH exp;
      check(btt_experiment_create(m.dump().c_str(), exp.out()));
      check(btt_experiment_set_event_callback(exp.p, on_event, nullptr));
      check(btt_experiment_run(exp.p));
      Owned table, json;
      check(btt_experiment_summary_table(exp.p, table.out()));
      check(btt_experiment_summary_json(exp.p, json.out()));
      write_file(fs::path(out_dir) / "summary.json", json.str());
      std::cout << table.str();
    } else if (*diag) {
      Config cfg;
      load_config(cfg, config);
      Owned json, text;
      check(btt_diagnose_file(trace_file.c_str(), cfg.p, json.out(), text.out()));
      ensure_dir(out_dir);
      write_file(fs::path(out_dir) / "diagnosis.json", json.str());
      std::cout << text.str();
    } else if (*rep) {
      Config cfg;
      load_config(cfg, config);
      if (mode != "combined" && mode != "per_indicator")
        throw Failure{BTT_INVALID_INPUT, "unknown replay mode '" + mode + "'"};
      Replay r;
      check(btt_replay_dir(trace_dir.c_str(), cfg.p,
                           mode == "per_indicator" ? BTT_REPLAY_PER_INDICATOR : BTT_REPLAY_COMBINED, r.out()));
      Owned json, table;
      check(btt_replay_to_json(r.p, json.out()));
      check(btt_replay_table(r.p, table.out()));
      ensure_dir(out_dir);
      write_file(fs::path(out_dir) / "replay.json", json.str());
      std::cout << table.str();
    } else if (*cal) {
      const std::string labels_text = labels.empty() ? "" : read_text(labels);
      const std::string grid_text = grid.empty() ? "" : read_text(grid);
      Owned json;
      check(btt_calibrate(trace_dir.c_str(), labels.empty() ? nullptr : labels_text.c_str(), quantile,
                          grid.empty() ? nullptr : grid_text.c_str(), json.out()));
      ensure_dir(out_dir);
      write_file(fs::path(out_dir) / "calibration.json", json.str());
      const auto doc = ordered_json::parse(json.str());
      std::printf("%-5s %8s %8s %13s  config\n", "rank", "fp_rate", "fn_rate", "epochs_saved");
      int rank = 1;
      for (const auto& row : doc["rows"])
        std::printf("%-5d %8.3f %8.3f %13d  %s\n", rank++, row["false_positive_rate"].get<double>(),
                    row["false_negative_rate"].get<double>(), row["epochs_saved"].get<int>(),
                    row["config"].dump().c_str());
    } else if (*cmp) {
      ordered_json opt;
      opt["k"] = k;
      if (baseline_best) opt["baseline_best"] = *baseline_best;
      if (baseline_time) opt["baseline_time_ms"] = *baseline_time;
      const auto pa = log_path(log_a), pb = log_path(log_b);
      if (name_a.empty()) name_a = pa.parent_path().filename().string();
      if (name_b.empty()) name_b = pb.parent_path().filename().string();
      if (name_a.empty()) name_a = "a";
      if (name_b.empty() || name_b == name_a) name_b = name_a == "b" ? "b2" : "b";
      Owned table, json, csv;
      check(btt_compare(pa.string().c_str(), name_a.c_str(), pb.string().c_str(), name_b.c_str(), opt.dump().c_str(),
                        table.out(), json.out(), csv.out()));
      ensure_dir(out_dir);
      write_file(fs::path(out_dir) / "compare.json", json.str());
      write_file(fs::path(out_dir) / "compare_curve.csv", csv.str());
      std::cout << table.str();
    } else if (*spaces_list) {
      Owned json;
      check(btt_spaces_list(json.out()));
      for (const auto& s : ordered_json::parse(json.str())) {
        std::cout << s["name"].get<std::string>() << " (runner " << s["runner"].get<std::string>() << ")\n";
        for (const auto& d : s["dims"]) {
          std::cout << "  " << d["name"].get<std::string>() << ": " << d["kind"].get<std::string>() << " ";
          std::cout << (d.contains("choices") ? d["choices"].dump() : "[" + d["low"].dump() + ", " + d["high"].dump() + "]")
                    << "\n";
        }
      }
    }
  } catch (const Failure& f) {
    std::fprintf(stderr, "error: %s: %s\n", btt_status_name(f.status), f.message.c_str());
    return f.status == BTT_INVALID_INPUT ? 2 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
