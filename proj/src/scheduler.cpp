#include "btt/scheduler.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <queue>
#include <set>
#include <sstream>
#include <thread>

#include "json_util.hpp"

namespace btt {

using detail::Json;

namespace {

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

bool same_real(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

// Uniform in [0, 1) from the top 53 bits.
double unit_real(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Json hp_value_to_json(const HpValue& v) {
  HpConfig one{{"v", v}};
  return detail::hp_config_to_json(one)["v"];
}

HpValue hp_value_from_json(const Json& j) {
  Json wrap = Json::object();
  wrap["v"] = j;
  return detail::hp_config_from_json(wrap).at("v");
}

}  // namespace

// ---------------------------------------------------------------------------
// Search space

std::string_view to_string(DimKind k) noexcept {
  switch (k) {
    case DimKind::continuous: return "continuous";
    case DimKind::continuous_log: return "continuous_log";
    case DimKind::discrete: return "discrete";
    case DimKind::categorical: return "categorical";
  }
  return "continuous";
}

DimKind parse_dim_kind(std::string_view s) {
  for (auto k : {DimKind::continuous, DimKind::continuous_log, DimKind::discrete, DimKind::categorical})
    if (to_string(k) == s) return k;
  fail(ErrorCode::invalid_input, "unknown dimension kind '" + std::string(s) + "'");
}

void SearchSpace::validate() const {
  std::set<std::string> seen;
  for (const Dim& d : dims) {
    if (d.name.empty()) fail(ErrorCode::invalid_input, "dimension with empty name");
    if (!seen.insert(d.name).second) fail(ErrorCode::invalid_input, "duplicate dimension '" + d.name + "'");
    const std::string where = "dimension '" + d.name + "': ";
    switch (d.kind) {
      case DimKind::categorical:
        if (d.choices.empty()) fail(ErrorCode::invalid_input, where + "no choices");
        break;
      case DimKind::continuous_log:
        if (!(d.low > 0.0)) fail(ErrorCode::invalid_input, where + "log domain must be positive");
        [[fallthrough]];
      case DimKind::continuous:
        if (!std::isfinite(d.low) || !std::isfinite(d.high) || d.low > d.high)
          fail(ErrorCode::invalid_input, where + "empty interval");
        break;
      case DimKind::discrete:
        if (!std::isfinite(d.low) || !std::isfinite(d.high) || std::ceil(d.low) > std::floor(d.high))
          fail(ErrorCode::invalid_input, where + "no integer in range");
        break;
    }
  }
}

bool SearchSpace::contains(const HpConfig& config) const {
  if (config.size() != dims.size()) return false;
  for (const Dim& d : dims) {
    auto it = config.find(d.name);
    if (it == config.end()) return false;
    const HpValue& v = it->second;
    if (d.kind == DimKind::categorical) {
      if (std::find(d.choices.begin(), d.choices.end(), v) == d.choices.end()) return false;
    } else if (d.kind == DimKind::discrete) {
      const auto* i = std::get_if<std::int64_t>(&v);
      if (!i || *i < d.low || *i > d.high) return false;
    } else {
      const auto* x = std::get_if<double>(&v);
      if (!x || *x < d.low || *x > d.high) return false;
    }
  }
  return true;
}

std::string SearchSpace::to_json() const {
  Json j;
  j["name"] = name;
  j["runner"] = runner;
  Json arr = Json::array();
  for (const Dim& d : dims) {
    Json jd;
    jd["name"] = d.name;
    jd["kind"] = to_string(d.kind);
    if (d.kind == DimKind::categorical) {
      Json c = Json::array();
      for (const auto& v : d.choices) c.push_back(hp_value_to_json(v));
      jd["choices"] = c;
    } else if (d.kind == DimKind::discrete) {
      jd["low"] = static_cast<std::int64_t>(std::ceil(d.low));
      jd["high"] = static_cast<std::int64_t>(std::floor(d.high));
    } else {
      jd["low"] = d.low;
      jd["high"] = d.high;
    }
    arr.push_back(jd);
  }
  j["dims"] = arr;
  return detail::dump_line(j);
}

namespace {

SearchSpace space_from_json(const Json& j) {
  if (!j.is_object()) fail(ErrorCode::invalid_input, "search space must be a JSON object");
  SearchSpace s;
  s.name = j.value("name", "");
  s.runner = j.value("runner", "");
  const auto it = j.find("dims");
  if (it == j.end() || !it->is_array()) fail(ErrorCode::invalid_input, "search space needs a 'dims' array");
  for (const Json& jd : *it) {
    Dim d;
    try {
      d.name = detail::require_string(jd, "name");
      d.kind = parse_dim_kind(detail::require_string(jd, "kind"));
      if (d.kind == DimKind::categorical) {
        const Json& c = detail::require(jd, "choices");
        if (!c.is_array()) fail(ErrorCode::invalid_input, "'choices' must be an array");
        for (const Json& v : c) d.choices.push_back(hp_value_from_json(v));
      } else {
        d.low = detail::require_real(jd, "low");
        d.high = detail::require_real(jd, "high");
      }
    } catch (const Error& e) {
      fail(ErrorCode::invalid_input, std::string("search space: ") + e.what());
    }
    s.dims.push_back(std::move(d));
  }
  s.validate();
  return s;
}

}  // namespace

SearchSpace SearchSpace::parse(std::string_view json) {
  Json j;
  try {
    j = Json::parse(json);
  } catch (const Json::exception& e) {
    fail(ErrorCode::invalid_input, std::string("search space: ") + e.what());
  }
  return space_from_json(j);
}

SearchSpace SearchSpace::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io_error, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

HpConfig random_sample(const SearchSpace& space, std::mt19937_64& rng) {
  HpConfig out;
  for (const Dim& d : space.dims) {
    switch (d.kind) {
      case DimKind::continuous:
        out[d.name] = d.low + (d.high - d.low) * unit_real(rng);
        break;
      case DimKind::continuous_log: {
        const double a = std::log(d.low), b = std::log(d.high);
        out[d.name] = std::clamp(std::exp(a + (b - a) * unit_real(rng)), d.low, d.high);
        break;
      }
      case DimKind::discrete: {
        std::uniform_int_distribution<std::int64_t> pick(static_cast<std::int64_t>(std::ceil(d.low)),
                                                          static_cast<std::int64_t>(std::floor(d.high)));
        out[d.name] = pick(rng);
        break;
      }
      case DimKind::categorical: {
        std::uniform_int_distribution<std::size_t> pick(0, d.choices.size() - 1);
        out[d.name] = d.choices[pick(rng)];
        break;
      }
    }
  }
  return out;
}

RandomSampler::RandomSampler(SearchSpace space, std::uint64_t seed) : space_(std::move(space)), rng_(seed) {
  space_.validate();
}

HpConfig RandomSampler::next() { return random_sample(space_, rng_); }

// ---------------------------------------------------------------------------
// Rules and small types

bool median_stop_check(double metric, std::span<const double> peers, MetricMode mode, int min_peers) {
  if (static_cast<int>(peers.size()) < min_peers || peers.empty()) return false;
  std::vector<double> v(peers.begin(), peers.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  const double median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  if (std::isnan(metric)) return true;
  return mode == MetricMode::maximize ? metric < median : metric > median;
}

std::string_view to_string(Policy p) noexcept {
  switch (p) {
    case Policy::none: return "none";
    case Policy::bttackler: return "bttackler";
    case Policy::msr: return "msr";
  }
  return "none";
}

Policy parse_policy(std::string_view s) {
  for (auto p : {Policy::none, Policy::bttackler, Policy::msr})
    if (to_string(p) == s) return p;
  fail(ErrorCode::invalid_input, "unknown policy '" + std::string(s) + "'");
}

Budget Budget::parse(std::string_view s) {
  const auto colon = s.find(':');
  const std::string text(s);
  if (colon == std::string_view::npos) fail(ErrorCode::invalid_input, "budget '" + text + "': expected kind:amount");
  const auto kind = s.substr(0, colon);
  auto amount = s.substr(colon + 1);
  Budget b;
  if (kind == "trials") {
    b.kind = Kind::trials;
  } else if (kind == "wall" || kind == "sim") {
    b.kind = kind == "wall" ? Kind::wall : Kind::sim;
    if (amount.size() < 3 || amount.substr(amount.size() - 2) != "ms")
      fail(ErrorCode::invalid_input, "budget '" + text + "': time budgets end in 'ms'");
    amount.remove_suffix(2);
  } else {
    fail(ErrorCode::invalid_input, "budget '" + text + "': unknown kind");
  }
  if (amount.empty() || !std::all_of(amount.begin(), amount.end(), [](char c) { return c >= '0' && c <= '9'; }) ||
      amount.size() > 15)
    fail(ErrorCode::invalid_input, "budget '" + text + "': amount must be a positive integer");
  b.amount = std::stoll(std::string(amount));
  if (b.amount <= 0) fail(ErrorCode::invalid_input, "budget '" + text + "': amount must be positive");
  return b;
}

std::string Budget::to_string() const {
  switch (kind) {
    case Kind::trials: return "trials:" + std::to_string(amount);
    case Kind::wall: return "wall:" + std::to_string(amount) + "ms";
    case Kind::sim: return "sim:" + std::to_string(amount) + "ms";
  }
  return {};
}

std::string_view to_string(TrialStatus s) noexcept {
  switch (s) {
    case TrialStatus::pending: return "pending";
    case TrialStatus::running: return "running";
    case TrialStatus::completed: return "completed";
    case TrialStatus::terminated: return "terminated";
    case TrialStatus::failed: return "failed";
  }
  return "pending";
}

TrialStatus parse_trial_status(std::string_view s) {
  for (auto t : {TrialStatus::pending, TrialStatus::running, TrialStatus::completed, TrialStatus::terminated,
                 TrialStatus::failed})
    if (to_string(t) == s) return t;
  fail(ErrorCode::parse_error, "unknown trial status '" + std::string(s) + "'");
}

bool operator==(const TrialState& a, const TrialState& b) {
  return a.trial_id == b.trial_id && a.config == b.config && a.seed == b.seed && a.status == b.status &&
         a.metric_mode == b.metric_mode && a.max_epoch == b.max_epoch && a.epochs_run == b.epochs_run &&
         same_real(a.best_val_metric, b.best_val_metric) && same_real(a.last_val_metric, b.last_val_metric) &&
         same_real(a.final_metric_for_sampler, b.final_metric_for_sampler) &&
         a.termination_reason == b.termination_reason && a.benign == b.benign && a.indicators == b.indicators &&
         a.started_ms == b.started_ms && a.finished_ms == b.finished_ms && a.wall_ms == b.wall_ms;
}

std::string_view to_string(StopAck a) noexcept {
  switch (a) {
    case StopAck::stopping: return "stopping";
    case StopAck::already_stopping: return "already_stopping";
    case StopAck::already_finished: return "already_finished";
  }
  return "stopping";
}

std::string trial_id_for(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "t%04d", index + 1);
  return buf;
}

std::uint64_t trial_seed(std::uint64_t experiment_seed, std::uint64_t index) {
  return splitmix64(splitmix64(experiment_seed) ^ (index + 1));
}

std::string diagnosis_reason(const DiagnosisReport& report) { return "bttackler:" + report.positive_names(); }

// ---------------------------------------------------------------------------
// Experiment log

const TrialState* ExperimentLog::find(std::string_view trial_id) const {
  for (const auto& t : trials)
    if (t.trial_id == trial_id) return &t;
  return nullptr;
}

namespace {

Json header_payload(const ExperimentLog& log) {
  Json p;
  p["experiment_id"] = log.experiment_id;
  p["runner"] = log.runner;
  p["policy"] = to_string(log.policy);
  p["budget"] = log.budget.to_string();
  p["concurrency"] = log.concurrency;
  p["seed"] = log.seed;
  p["simulated"] = log.simulated;
  p["space"] = Json::parse(log.space.to_json());
  p["indicators"] = Json::parse(log.indicators.to_json());
  return p;
}

std::string event_line(std::int64_t t_ms, std::string_view kind, const std::string& payload) {
  return "{\"kind\":" + Json(kind).dump() + ",\"t_ms\":" + std::to_string(t_ms) + ",\"payload\":" + payload + "}";
}

}  // namespace

std::string encode_event(const LogEvent& e) { return event_line(e.t_ms, e.kind, e.payload); }

namespace {

Json indicators_json(const std::vector<Indicator>& v) {
  Json a = Json::array();
  for (auto i : v) a.push_back(to_string(i));
  return a;
}

std::vector<Indicator> indicators_from_json(const Json& a) {
  std::vector<Indicator> out;
  if (!a.is_array()) fail(ErrorCode::parse_error, "'indicators' must be an array");
  for (const Json& s : a) {
    auto i = s.is_string() ? parse_indicator(s.get<std::string>()) : std::nullopt;
    if (!i) fail(ErrorCode::parse_error, "unknown indicator in log");
    out.push_back(*i);
  }
  return out;
}

}  // namespace

void ExperimentLog::write(std::ostream& out) const {
  out << event_line(0, "experiment_started", detail::dump_line(header_payload(*this))) << '\n';
  for (const auto& e : events) out << event_line(e.t_ms, e.kind, e.payload) << '\n';
  if (!out) fail(ErrorCode::io_error, "failed to write experiment log");
}

void ExperimentLog::write_file(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io_error, "cannot open " + path.string());
  write(out);
}

ExperimentLog ExperimentLog::read(std::istream& in) {
  ExperimentLog log;
  std::map<std::string, std::size_t> index;
  std::string line;
  int lineno = 0;
  bool header = false;
  auto trial = [&](const Json& p) -> TrialState& {
    auto it = index.find(detail::require_string(p, "trial_id"));
    if (it == index.end()) fail(ErrorCode::parse_error, "event for a trial that never started");
    return log.trials[it->second];
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      const std::string kind = detail::require_string(j, "kind");
      const std::int64_t t = detail::require_int(j, "t_ms");
      const Json& p = detail::require(j, "payload");
      if (kind == "experiment_started") {
        log.experiment_id = detail::require_string(p, "experiment_id");
        log.runner = detail::require_string(p, "runner");
        log.policy = parse_policy(detail::require_string(p, "policy"));
        log.budget = Budget::parse(detail::require_string(p, "budget"));
        log.concurrency = static_cast<int>(detail::require_int(p, "concurrency"));
        log.seed = detail::require(p, "seed").get<std::uint64_t>();
        log.simulated = detail::require(p, "simulated").get<bool>();
        log.space = space_from_json(detail::require(p, "space"));
        log.indicators = IndicatorConfig::parse(detail::require(p, "indicators").dump());
        header = true;
        continue;
      }
      if (!header) fail(ErrorCode::parse_error, "log does not start with experiment_started");
      log.events.push_back({t, kind, detail::dump_line(p)});
      if (kind == "trial_started") {
        TrialState s;
        s.trial_id = detail::require_string(p, "trial_id");
        s.seed = detail::require(p, "seed").get<std::uint64_t>();
        s.config = detail::hp_config_from_json(detail::require(p, "config"));
        s.max_epoch = static_cast<int>(detail::require_int(p, "max_epoch"));
        s.metric_mode = parse_metric_mode(detail::require_string(p, "metric_mode"));
        s.status = TrialStatus::running;
        s.best_val_metric = s.last_val_metric = s.final_metric_for_sampler = nan();
        s.started_ms = t;
        index[s.trial_id] = log.trials.size();
        log.trials.push_back(std::move(s));
      } else if (kind == "epoch_reported") {
        TrialState& s = trial(p);
        const double m = detail::require_real(p, "val_metric");
        s.epochs_run = static_cast<int>(detail::require_int(p, "epoch")) + 1;
        s.last_val_metric = m;
        s.wall_ms = detail::require_int(p, "wall_ms");
      } else if (kind == "trial_finished") {
        TrialState& s = trial(p);
        s.status = parse_trial_status(detail::require_string(p, "status"));
        const Json& r = detail::require(p, "reason");
        if (r.is_string()) s.termination_reason = r.get<std::string>();
        s.epochs_run = static_cast<int>(detail::require_int(p, "epochs_run"));
        s.best_val_metric = detail::require_real(p, "best_val_metric");
        s.last_val_metric = detail::require_real(p, "last_val_metric");
        s.final_metric_for_sampler = detail::require_real(p, "final_metric_for_sampler");
        s.benign = detail::require(p, "benign").get<bool>();
        s.indicators = indicators_from_json(detail::require(p, "indicators"));
        s.wall_ms = detail::require_int(p, "wall_ms");
        s.finished_ms = t;
      } else if (kind != "verdict" && kind != "stop_requested" && kind != "budget_exhausted") {
        fail(ErrorCode::parse_error, "unknown event kind '" + kind + "'");
      }
    } catch (const Error& e) {
      fail(ErrorCode::parse_error, "line " + std::to_string(lineno) + ": " + e.what());
    } catch (const Json::exception& e) {
      fail(ErrorCode::parse_error, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!header) fail(ErrorCode::parse_error, "empty experiment log");
  return log;
}

ExperimentLog ExperimentLog::read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io_error, "cannot open " + path.string());
  try {
    return read(in);
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Experiment

namespace {

struct Live {
  int index = 0;
  std::unique_ptr<TrialSession> session;
  TrialTrace trace;
  std::ofstream file;
  std::int64_t start_ms = 0;
  std::uint64_t generation = 0;
  bool stop_requested = false;
  std::string stop_reason;
  bool stop_benign = false;
  std::vector<Indicator> stop_indicators;
  bool failed = false;
  std::string failure;
  // real-time mode
  std::atomic<bool> stop_flag{false};
  std::jthread worker;
};

struct Message {
  enum class Type { epoch, failed, exited, verdict, wake } type = Type::wake;
  int trial = -1;
  EpochResult result;
  std::int64_t wall_ms = 0;
  std::string what;
  DiagnosisReport report;
};

class MessageQueue {
 public:
  void push(Message m) {
    {
      std::lock_guard lock(mu_);
      q_.push_back(std::move(m));
    }
    cv_.notify_one();
  }
  // Waits until a message arrives or `deadline` passes.
  std::optional<Message> pop_until(std::optional<std::chrono::steady_clock::time_point> deadline) {
    std::unique_lock lock(mu_);
    if (deadline) {
      cv_.wait_until(lock, *deadline, [&] { return !q_.empty(); });
    } else {
      cv_.wait(lock, [&] { return !q_.empty(); });
    }
    if (q_.empty()) return std::nullopt;
    Message m = std::move(q_.front());
    q_.pop_front();
    return m;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Message> q_;
};

}  // namespace

struct Experiment::Impl {
  SearchSpace space;
  TrialRunner& runner;
  ExperimentOptions opt;
  std::shared_ptr<Sampler> sampler;
  ExperimentLog log;
  bool ran = false;

  std::map<int, std::unique_ptr<Live>> running;
  std::vector<std::vector<double>> curves;  // val_metric per epoch, by trial index
  int launched = 0;
  bool budget_hit = false;  // no more launches
  bool time_up = false;     // time budget spent; running trials are cut
  std::uint64_t generations = 0;

  // Shared with request_stop callers.
  struct Control {
    int index;
    bool finished = false;
    bool stopping = false;
  };
  std::mutex ctl_mu;
  std::map<std::string, Control> control;
  std::vector<std::pair<std::string, std::string>> pending_stops;

  MessageQueue inbox;  // real-time mode
  bool real_time = false;
  std::chrono::steady_clock::time_point epoch0;

  Impl(SearchSpace s, TrialRunner& r, ExperimentOptions o) : space(std::move(s)), runner(r), opt(std::move(o)) {
    space.validate();
    if (opt.concurrency < 1) fail(ErrorCode::invalid_input, "concurrency must be positive");
    if (opt.budget.amount <= 0) fail(ErrorCode::invalid_input, "budget must be positive");
    if (opt.checker_latency_ms < 0) fail(ErrorCode::invalid_input, "checker latency must be nonnegative");
    opt.indicators.validate();
    if (opt.budget.kind == Budget::Kind::sim) opt.simulated = true;
    if (opt.budget.kind == Budget::Kind::wall) opt.simulated = false;
    real_time = !opt.simulated;
    sampler = opt.sampler ? opt.sampler : std::make_shared<RandomSampler>(space, opt.seed);
    log.experiment_id = opt.experiment_id;
    log.runner = runner.name();
    log.policy = opt.policy;
    log.budget = opt.budget;
    log.concurrency = opt.concurrency;
    log.seed = opt.seed;
    log.simulated = opt.simulated;
    log.space = space;
    log.indicators = opt.indicators;
    if (opt.out_dir) std::filesystem::create_directories(*opt.out_dir);
  }

  std::int64_t now_real() const {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - epoch0).count();
  }

  void emit(std::int64_t t, std::string_view kind, const Json& payload) {
    log.events.push_back({t, std::string(kind), detail::dump_line(payload)});
    if (opt.on_event) opt.on_event(log.events.back());
  }

  bool can_launch(std::int64_t t) const {
    if (budget_hit || launched >= opt.max_trials) return false;
    switch (opt.budget.kind) {
      case Budget::Kind::trials: return launched < opt.budget.amount;
      case Budget::Kind::sim: return t < opt.budget.amount;
      case Budget::Kind::wall: return true;
    }
    return false;
  }

  void write_line(Live& L, const std::string& line) {
    if (!L.file.is_open()) return;
    L.file << line << '\n';
    if (!L.file) fail(ErrorCode::io_error, "failed writing trace for " + L.trace.meta.trial_id);
  }

  // Returns the new trial's index, or -1 when it failed to start.
  Live* launch(std::int64_t t) {
    const int idx = launched++;
    TrialState s;
    s.trial_id = trial_id_for(idx);
    s.config = sampler->next();
    s.seed = trial_seed(opt.seed, static_cast<std::uint64_t>(idx));
    s.status = TrialStatus::running;
    s.best_val_metric = s.last_val_metric = s.final_metric_for_sampler = nan();
    s.started_ms = t;
    auto L = std::make_unique<Live>();
    L->index = idx;
    L->start_ms = t;
    L->generation = ++generations;
    std::string failure;
    try {
      L->session = runner.start(s.trial_id, s.config, s.seed);
      s.max_epoch = L->session->max_epoch();
      s.metric_mode = L->session->metric_mode();
      if (s.max_epoch < 1) fail(ErrorCode::invalid_input, "runner reported max_epoch < 1");
    } catch (const std::exception& e) {
      failure = e.what();
    }
    log.trials.push_back(s);
    curves.emplace_back();
    {
      std::lock_guard lock(ctl_mu);
      control[s.trial_id] = Control{idx};
    }
    Json p;
    p["trial_id"] = s.trial_id;
    p["seed"] = s.seed;
    p["config"] = detail::hp_config_to_json(s.config);
    p["max_epoch"] = s.max_epoch;
    p["metric_mode"] = to_string(s.metric_mode);
    emit(t, "trial_started", p);

    L->trace.meta.trial_id = s.trial_id;
    L->trace.meta.config = s.config;
    L->trace.meta.max_epoch = std::max(1, s.max_epoch);
    L->trace.meta.created_unix_ms =
        real_time ? std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::system_clock::now().time_since_epoch())
                        .count()
                  : t;
    if (opt.out_dir) {
      L->file.open(*opt.out_dir / trace_file_name(s.trial_id), std::ios::binary | std::ios::trunc);
      if (!L->file) fail(ErrorCode::io_error, "cannot create trace for " + s.trial_id);
      write_line(*L, encode_meta(L->trace.meta));
    }
    Live* raw = L.get();
    running[idx] = std::move(L);
    if (!failure.empty()) {
      raw->failed = true;
      raw->failure = failure;
      finish(*raw, t, TrialStatus::failed, "runner error: " + failure);
      return nullptr;
    }
    return raw;
  }

  void record_epoch(Live& L, EpochResult r, std::int64_t t, std::int64_t wall_ms) {
    TrialState& s = log.trials[L.index];
    const int e = static_cast<int>(L.trace.epochs.size());
    r.record.trial_id = s.trial_id;
    r.record.epoch = e;
    r.record.metric_mode = s.metric_mode;
    r.record.wall_ms = std::max(wall_ms, L.trace.epochs.empty() ? std::int64_t{0} : L.trace.epochs.back().wall_ms);
    for (auto& l : r.layers) {
      l.trial_id = s.trial_id;
      l.epoch = e;
    }
    std::stable_sort(r.layers.begin(), r.layers.end(), [](const LayerRecord& a, const LayerRecord& b) {
      return std::pair(a.var, a.layer_index) < std::pair(b.var, b.layer_index);
    });
    write_line(L, encode_epoch(r.record));
    for (const auto& l : r.layers) write_line(L, encode_layer(l));
    L.trace.epochs.push_back(r.record);
    for (auto& l : r.layers) L.trace.layers.push_back(std::move(l));

    s.epochs_run = e + 1;
    s.last_val_metric = r.record.val_metric;
    s.best_val_metric = best_val_metric(L.trace.epochs, s.metric_mode);
    s.wall_ms = r.record.wall_ms;
    curves[L.index].push_back(r.record.val_metric);

    Json p;
    p["trial_id"] = s.trial_id;
    p["epoch"] = e;
    p["train_loss"] = detail::real_to_json(r.record.train_loss);
    p["val_metric"] = detail::real_to_json(r.record.val_metric);
    p["wall_ms"] = r.record.wall_ms;
    emit(t, "epoch_reported", p);
  }

  void initiate_stop(Live& L, std::int64_t t, const std::string& reason, bool benign = false,
                     std::vector<Indicator> indicators = {}) {
    if (L.stop_requested) return;
    L.stop_requested = true;
    L.stop_reason = reason;
    L.stop_benign = benign;
    L.stop_indicators = std::move(indicators);
    L.stop_flag = true;
    const std::string& id = log.trials[L.index].trial_id;
    {
      std::lock_guard lock(ctl_mu);
      control[id].stopping = true;
    }
    if (opt.out_dir) {
      std::ofstream stop(*opt.out_dir / (id + ".stop"), std::ios::binary | std::ios::trunc);
      stop << reason << '\n';
    }
    Json p;
    p["trial_id"] = id;
    p["reason"] = reason;
    emit(t, "stop_requested", p);
  }

  // Logs a non-continue verdict and asks the trial to stop.
  void apply_report(Live& L, std::int64_t t, const DiagnosisReport& report) {
    if (report.decision == Decision::continue_training) return;
    Json p;
    p["trial_id"] = log.trials[L.index].trial_id;
    p["epoch"] = report.epoch;
    p["decision"] = to_string(report.decision);
    p["indicators"] = indicators_json(report.positives());
    Json ev = Json::array();
    for (const auto& v : report.verdicts) {
      if (!v.positive) continue;
      Json jv;
      jv["indicator"] = to_string(v.indicator);
      jv["evidence"] = v.evidence;
      ev.push_back(jv);
    }
    p["evidence"] = ev;
    emit(t, "verdict", p);
    initiate_stop(L, t, diagnosis_reason(report), report.decision == Decision::terminate_benign, report.positives());
  }

  void msr_check(Live& L, std::int64_t t) {
    const TrialState& s = log.trials[L.index];
    const int e = s.epochs_run - 1;
    if (e < opt.indicators.min_epochs_before_diagnosis || s.epochs_run >= s.max_epoch) return;
    std::vector<double> peers;
    for (std::size_t i = 0; i < log.trials.size(); ++i) {
      if (log.trials[i].status != TrialStatus::completed) continue;
      if (static_cast<int>(curves[i].size()) > e && std::isfinite(curves[i][e])) peers.push_back(curves[i][e]);
    }
    if (median_stop_check(s.last_val_metric, peers, s.metric_mode, opt.msr_min_peers)) initiate_stop(L, t, "msr");
  }

  void finish(Live& L, std::int64_t t, TrialStatus status, std::string reason) {
    TrialState& s = log.trials[L.index];
    s.status = status;
    s.finished_ms = t;
    s.best_val_metric = best_val_metric(L.trace.epochs, s.metric_mode);
    if (status == TrialStatus::terminated) {
      s.termination_reason = reason;
      s.benign = L.stop_benign && reason == L.stop_reason;
      if (reason == L.stop_reason) s.indicators = L.stop_indicators;
      s.final_metric_for_sampler = s.benign ? s.best_val_metric : s.last_val_metric;
    } else if (status == TrialStatus::failed) {
      s.termination_reason = reason;
      s.final_metric_for_sampler = nan();
    } else {
      s.final_metric_for_sampler = s.best_val_metric;
    }
    TrialFinal fin;
    fin.status = status == TrialStatus::completed    ? FinalStatus::completed
                 : status == TrialStatus::terminated ? FinalStatus::terminated
                                                     : FinalStatus::failed;
    fin.reason = s.termination_reason.value_or("");
    fin.best_val_metric = s.best_val_metric;
    fin.epochs_run = s.epochs_run;
    L.trace.final = fin;
    write_line(L, encode_final(s.trial_id, fin));
    if (L.file.is_open()) L.file.close();

    {
      std::lock_guard lock(ctl_mu);
      control[s.trial_id].finished = true;
    }
    Json p;
    p["trial_id"] = s.trial_id;
    p["status"] = to_string(status);
    p["reason"] = s.termination_reason ? Json(*s.termination_reason) : Json(nullptr);
    p["epochs_run"] = s.epochs_run;
    p["best_val_metric"] = detail::real_to_json(s.best_val_metric);
    p["last_val_metric"] = detail::real_to_json(s.last_val_metric);
    p["final_metric_for_sampler"] = detail::real_to_json(s.final_metric_for_sampler);
    p["benign"] = s.benign;
    p["indicators"] = indicators_json(s.indicators);
    p["wall_ms"] = s.wall_ms;
    sampler->observe(s.trial_id, s.config, s.final_metric_for_sampler);
    const int idx = L.index;
    if (L.worker.joinable()) L.worker.join();
    running.erase(idx);  // L is gone from here on
    emit(t, "trial_finished", p);
  }

  void drain_stops(std::int64_t t) {
    std::vector<std::pair<std::string, std::string>> todo;
    {
      std::lock_guard lock(ctl_mu);
      todo.swap(pending_stops);
    }
    for (auto& [id, reason] : todo) {
      int idx;
      {
        std::lock_guard lock(ctl_mu);
        idx = control.at(id).index;
      }
      auto it = running.find(idx);
      if (it != running.end()) initiate_stop(*it->second, t, reason);
    }
  }

  StopAck request_stop(const std::string& id, const std::string& reason) {
    {
      std::lock_guard lock(ctl_mu);
      auto it = control.find(id);
      if (it == control.end()) fail(ErrorCode::no_such_trial, "no trial '" + id + "'");
      if (it->second.finished) return StopAck::already_finished;
      if (it->second.stopping) return StopAck::already_stopping;
      it->second.stopping = true;
      pending_stops.emplace_back(id, reason.empty() ? "user" : reason);
    }
    if (real_time) inbox.push(Message{});
    return StopAck::stopping;
  }

  void budget_exhausted(std::int64_t t) {
    budget_hit = true;
    time_up = opt.budget.kind != Budget::Kind::trials;
    Json p;
    p["budget"] = opt.budget.to_string();
    p["running"] = running.size();
    emit(t, "budget_exhausted", p);
  }

  // ---- simulated time ------------------------------------------------------

  enum class EvKind { epoch_done = 0, verdict = 1, budget = 2 };
  struct Ev {
    std::int64_t t;
    EvKind kind;
    std::uint64_t seq;
    int trial;
    std::uint64_t generation;
    std::shared_ptr<DiagnosisReport> report;
  };
  struct EvOrder {
    bool operator()(const Ev& a, const Ev& b) const {
      return std::tuple(a.t, static_cast<int>(a.kind), a.seq) > std::tuple(b.t, static_cast<int>(b.kind), b.seq);
    }
  };
  std::priority_queue<Ev, std::vector<Ev>, EvOrder> events;
  std::uint64_t seq = 0;

  void schedule_epoch(Live& L, std::int64_t t) {
    const std::int64_t cost = std::max<std::int64_t>(0, L.session->next_epoch_cost_ms());
    events.push({t + cost, EvKind::epoch_done, seq++, L.index, L.generation, nullptr});
  }

  void fill_slots_sim(std::int64_t t) {
    while (static_cast<int>(running.size()) < opt.concurrency && can_launch(t)) {
      if (Live* L = launch(t)) schedule_epoch(*L, t);
      if (opt.budget.kind == Budget::Kind::trials && !can_launch(t) && !budget_hit) budget_exhausted(t);
    }
  }

  void on_epoch_sim(Live& L, std::int64_t t) {
    EpochResult r;
    try {
      r = L.session->run_epoch();
    } catch (const std::exception& e) {
      finish(L, t, TrialStatus::failed, std::string("runner error: ") + e.what());
      return;
    }
    record_epoch(L, std::move(r), t, t - L.start_ms);
    drain_stops(t);
    const TrialState& s = log.trials[L.index];
    const int e = s.epochs_run - 1;
    if (opt.policy == Policy::bttackler && !L.stop_requested && e >= opt.indicators.min_epochs_before_diagnosis) {
      auto report = std::make_shared<DiagnosisReport>(diagnose(L.trace, e, opt.indicators));
      report->trial_id = s.trial_id;
      if (opt.checker_latency_ms == 0) {
        apply_report(L, t, *report);
      } else {
        events.push({t + opt.checker_latency_ms, EvKind::verdict, seq++, L.index, L.generation, report});
      }
    }
    if (opt.policy == Policy::msr && !L.stop_requested) msr_check(L, t);
    if (s.epochs_run >= s.max_epoch) {
      finish(L, t, TrialStatus::completed, "");
    } else if (L.stop_requested) {
      finish(L, t, TrialStatus::terminated, L.stop_reason);
    } else {
      schedule_epoch(L, t);
    }
  }

  void run_simulated() {
    if (opt.budget.kind == Budget::Kind::sim)
      events.push({opt.budget.amount, EvKind::budget, seq++, -1, 0, nullptr});
    fill_slots_sim(0);
    while (!events.empty()) {
      Ev ev = events.top();
      events.pop();
      if (ev.kind == EvKind::budget) {
        budget_exhausted(ev.t);
        std::vector<int> ids;
        for (auto& [i, L] : running) ids.push_back(i);
        for (int i : ids) finish(*running.at(i), ev.t, TrialStatus::terminated, "budget");
        continue;
      }
      auto it = running.find(ev.trial);
      if (it == running.end() || it->second->generation != ev.generation) continue;
      Live& L = *it->second;
      if (ev.kind == EvKind::verdict) {
        if (!L.stop_requested) apply_report(L, ev.t, *ev.report);
      } else {
        on_epoch_sim(L, ev.t);
      }
      drain_stops(ev.t);
      fill_slots_sim(ev.t);
    }
  }

  // ---- real time -----------------------------------------------------------

  struct CheckJob {
    int trial;
    int epoch;
    std::shared_ptr<const TrialTrace> trace;
  };

  void start_worker(Live& L) {
    L.worker = std::jthread([this, &L] {
      const auto t0 = std::chrono::steady_clock::now();
      const int max_epoch = L.session->max_epoch();
      for (int e = 0; e < max_epoch && !L.stop_flag; ++e) {
        Message m;
        m.trial = L.index;
        try {
          m.result = L.session->run_epoch();
          m.type = Message::Type::epoch;
          m.wall_ms =
              std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
        } catch (const std::exception& ex) {
          m.type = Message::Type::failed;
          m.what = ex.what();
          inbox.push(std::move(m));
          break;
        }
        inbox.push(std::move(m));
      }
      Message done;
      done.type = Message::Type::exited;
      done.trial = L.index;
      inbox.push(std::move(done));
    });
  }

  void run_real_time() {
    std::optional<std::chrono::steady_clock::time_point> deadline;
    if (opt.budget.kind == Budget::Kind::wall) deadline = epoch0 + std::chrono::milliseconds(opt.budget.amount);

    // Single checker thread: diagnosis never runs on the scheduler thread.
    std::mutex jobs_mu;
    std::condition_variable jobs_cv;
    std::deque<CheckJob> jobs;
    bool jobs_closed = false;
    std::jthread checker;
    if (opt.policy == Policy::bttackler) {
      checker = std::jthread([&] {
        for (;;) {
          CheckJob job;
          {
            std::unique_lock lock(jobs_mu);
            jobs_cv.wait(lock, [&] { return jobs_closed || !jobs.empty(); });
            if (jobs.empty()) return;
            job = std::move(jobs.front());
            jobs.pop_front();
          }
          Message m;
          m.type = Message::Type::verdict;
          m.trial = job.trial;
          m.report = diagnose(*job.trace, job.epoch, opt.indicators);
          m.report.trial_id = job.trace->meta.trial_id;
          inbox.push(std::move(m));
        }
      });
    }

    auto fill = [&] {
      while (static_cast<int>(running.size()) < opt.concurrency && can_launch(now_real())) {
        const std::int64_t t = now_real();
        if (Live* L = launch(t)) start_worker(*L);
        if (opt.budget.kind == Budget::Kind::trials && !can_launch(t) && !budget_hit) budget_exhausted(t);
      }
    };

    fill();
    while (!running.empty()) {
      auto msg = inbox.pop_until(budget_hit ? std::nullopt : deadline);
      const std::int64_t t = now_real();
      if (!msg) {
        budget_exhausted(t);
        for (auto& [i, L] : running) initiate_stop(*L, t, "budget");
        continue;
      }
      auto it = running.find(msg->trial);
      if (it != running.end()) {
        Live& L = *it->second;
        switch (msg->type) {
          case Message::Type::epoch:
            if (time_up) break;  // in flight when the budget ran out
            record_epoch(L, std::move(msg->result), t, msg->wall_ms);
            drain_stops(t);
            if (opt.policy == Policy::bttackler && !L.stop_requested) {
              const int e = log.trials[L.index].epochs_run - 1;
              if (e >= opt.indicators.min_epochs_before_diagnosis) {
                std::lock_guard lock(jobs_mu);
                jobs.push_back({L.index, e, std::make_shared<const TrialTrace>(L.trace)});
                jobs_cv.notify_one();
              }
            }
            if (opt.policy == Policy::msr && !L.stop_requested) msr_check(L, t);
            break;
          case Message::Type::verdict:
            if (!L.stop_requested && !time_up) apply_report(L, t, msg->report);
            break;
          case Message::Type::failed:
            L.failed = true;
            L.failure = msg->what;
            break;
          case Message::Type::exited: {
            const TrialState& s = log.trials[L.index];
            if (L.failed) {
              finish(L, t, TrialStatus::failed, "runner error: " + L.failure);
            } else if (s.epochs_run >= s.max_epoch) {
              finish(L, t, TrialStatus::completed, "");
            } else {
              finish(L, t, TrialStatus::terminated, L.stop_requested ? L.stop_reason : "budget");
            }
            break;
          }
          case Message::Type::wake:
            break;
        }
      }
      drain_stops(t);
      if (deadline && !budget_hit && std::chrono::steady_clock::now() >= *deadline) {
        budget_exhausted(now_real());
        for (auto& [i, L] : running) initiate_stop(*L, now_real(), "budget");
      }
      fill();
    }
    {
      std::lock_guard lock(jobs_mu);
      jobs_closed = true;
    }
    jobs_cv.notify_all();
  }

  ExperimentLog run() {
    if (ran) fail(ErrorCode::invalid_input, "experiment already ran");
    ran = true;
    epoch0 = std::chrono::steady_clock::now();
    if (real_time) {
      run_real_time();
    } else {
      run_simulated();
    }
    if (opt.out_dir) log.write_file(*opt.out_dir / "experiment.jsonl");
    return log;
  }
};

Experiment::Experiment(SearchSpace space, TrialRunner& runner, ExperimentOptions options)
    : impl_(std::make_unique<Impl>(std::move(space), runner, std::move(options))) {}

Experiment::~Experiment() = default;

ExperimentLog Experiment::run() { return impl_->run(); }

StopAck Experiment::request_stop(const std::string& trial_id, const std::string& reason) {
  return impl_->request_stop(trial_id, reason);
}

ExperimentLog run_experiment(const SearchSpace& space, TrialRunner& runner, const ExperimentOptions& options) {
  Experiment e(space, runner, options);
  return e.run();
}

}  // namespace btt
