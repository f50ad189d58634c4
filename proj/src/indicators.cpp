#include "btt/indicators.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <numeric>
#include <sstream>

#include "json_util.hpp"

namespace btt {

using detail::Json;

namespace {

std::string fmt_num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

IndicatorVerdict verdict(Indicator i, bool positive, std::string evidence) {
  return IndicatorVerdict{i, positive, is_benign(i), 0, std::move(evidence)};
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Ratios m_k / m_{k+1} between adjacent layers, skipping zero denominators.
std::vector<double> amplifications(std::span<const double> m) {
  std::vector<double> a;
  for (std::size_t k = 0; k + 1 < m.size(); ++k) {
    if (m[k + 1] == 0.0) continue;
    a.push_back(m[k] / m[k + 1]);
  }
  return a;
}

}  // namespace

std::string_view to_string(Indicator i) noexcept {
  switch (i) {
    case Indicator::AGV: return "AGV";
    case Indicator::EAG: return "EAG";
    case Indicator::ERG: return "ERG";
    case Indicator::PLC: return "PLC";
    case Indicator::LAR: return "LAR";
    case Indicator::ULC: return "ULC";
    case Indicator::NMG: return "NMG";
  }
  return "?";
}

std::optional<Indicator> parse_indicator(std::string_view s) noexcept {
  for (auto i : kAllIndicators) {
    if (to_string(i) == s) return i;
  }
  return std::nullopt;
}

std::string_view to_string(Decision d) noexcept {
  switch (d) {
    case Decision::continue_training: return "continue";
    case Decision::terminate_bad: return "terminate_bad";
    case Decision::terminate_benign: return "terminate_benign";
  }
  return "continue";
}

std::string_view to_string(Stage s) noexcept {
  switch (s) {
    case Stage::early: return "early";
    case Stage::mid: return "mid";
    case Stage::late: return "late";
  }
  return "mid";
}

// ---------------------------------------------------------------------------
// Config

void IndicatorConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::invalid_input, "indicator config: " + what); };
  if (!(agv_abs_bound > 0)) bad("agv_abs_bound must be positive");
  if (!(eag_upper > 0)) bad("eag_upper must be positive");
  if (!(erg_lower > 0)) bad("erg_lower must be positive");
  if (!(erg_lower < 1.0 && 1.0 < eag_upper)) bad("require erg_lower < 1 < eag_upper");
  if (!(plc_ratio_threshold > 0 && plc_ratio_threshold < 1)) bad("plc_ratio_threshold must be in (0,1)");
  if (!(lar_zero_threshold > 0 && lar_zero_threshold < 1)) bad("lar_zero_threshold must be in (0,1)");
  if (!(ulc_fluct_tol > 0)) bad("ulc_fluct_tol must be positive");
  if (!(window_fraction > 0 && window_fraction < 1)) bad("window_fraction must be in (0,1)");
  if (!(early_stage_fraction >= 0)) bad("early_stage_fraction must be nonnegative");
  if (!(early_stage_fraction <= late_stage_fraction)) bad("early_stage_fraction must not exceed late_stage_fraction");
  if (min_epochs_before_diagnosis < 0) bad("min_epochs_before_diagnosis must be nonnegative");
}

std::string IndicatorConfig::to_json() const {
  Json j;
  j["agv_abs_bound"] = agv_abs_bound;
  j["eag_upper"] = eag_upper;
  j["erg_lower"] = erg_lower;
  j["plc_ratio_threshold"] = plc_ratio_threshold;
  j["lar_zero_threshold"] = lar_zero_threshold;
  j["ulc_fluct_tol"] = ulc_fluct_tol;
  j["window_fraction"] = window_fraction;
  j["early_stage_fraction"] = early_stage_fraction;
  j["late_stage_fraction"] = late_stage_fraction;
  j["min_epochs_before_diagnosis"] = min_epochs_before_diagnosis;
  return detail::dump_line(j);
}

namespace {

void assign_field(IndicatorConfig& c, const std::string& key, double value) {
  double* reals[] = {&c.agv_abs_bound,     &c.eag_upper,     &c.erg_lower,
                     &c.plc_ratio_threshold, &c.lar_zero_threshold, &c.ulc_fluct_tol,
                     &c.window_fraction,   &c.early_stage_fraction, &c.late_stage_fraction};
  const char* names[] = {"agv_abs_bound",       "eag_upper",          "erg_lower",
                         "plc_ratio_threshold", "lar_zero_threshold", "ulc_fluct_tol",
                         "window_fraction",     "early_stage_fraction", "late_stage_fraction"};
  for (std::size_t i = 0; i < std::size(names); ++i) {
    if (key == names[i]) {
      *reals[i] = value;
      return;
    }
  }
  if (key == "min_epochs_before_diagnosis") {
    if (value != std::floor(value)) fail(ErrorCode::invalid_input, "min_epochs_before_diagnosis must be an integer");
    c.min_epochs_before_diagnosis = static_cast<int>(value);
    return;
  }
  fail(ErrorCode::invalid_input, "indicator config: unknown field '" + key + "'");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

IndicatorConfig parse_toml(std::string_view text) {
  IndicatorConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto t = trim(line);
    if (t.empty() || t.front() == '[') continue;  // table headers are accepted and ignored
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::invalid_input, "indicator config line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(std::string_view(t).substr(0, eq));
    const auto val = trim(std::string_view(t).substr(eq + 1));
    double v = 0;
    std::istringstream vs(val);
    if (!(vs >> v) || !vs.eof()) {
      fail(ErrorCode::invalid_input, "indicator config line " + std::to_string(line_no) + ": '" + val +
                                         "' is not a number");
    }
    assign_field(c, key, v);
  }
  return c;
}

}  // namespace

IndicatorConfig IndicatorConfig::parse(std::string_view text) {
  IndicatorConfig c;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string_view::npos && text[first] == '{') {
    Json j = Json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) fail(ErrorCode::invalid_input, "indicator config: malformed JSON");
    for (const auto& [key, v] : j.items()) {
      if (!v.is_number()) fail(ErrorCode::invalid_input, "indicator config: '" + key + "' must be a number");
      assign_field(c, key, v.get<double>());
    }
  } else {
    c = parse_toml(text);
  }
  c.validate();
  return c;
}

IndicatorConfig IndicatorConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::io_error, "cannot open indicator config " + path.string());
  std::ostringstream buf;
  buf << f.rdbuf();
  try {
    return parse(buf.str());
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Stages

int early_stage_end(int max_epoch, const IndicatorConfig& cfg) {
  return std::max(2, static_cast<int>(std::ceil(cfg.early_stage_fraction * max_epoch)));
}

int loss_window(int max_epoch, const IndicatorConfig& cfg) {
  return std::max(3, static_cast<int>(std::ceil(cfg.window_fraction * max_epoch)));
}

Stage stage_of(int epoch, int max_epoch, const IndicatorConfig& cfg) {
  if (epoch < 0 || epoch >= max_epoch) {
    fail(ErrorCode::invalid_input,
         "stage_of: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(max_epoch) + ")");
  }
  // For very short runs the two ranges overlap; the early stage wins.
  if (epoch < early_stage_end(max_epoch, cfg)) return Stage::early;
  if (epoch >= static_cast<int>(std::floor(cfg.late_stage_fraction * max_epoch))) return Stage::late;
  return Stage::mid;
}

bool active_in(Indicator i, Stage s) noexcept {
  switch (i) {
    case Indicator::AGV:
    case Indicator::LAR: return true;
    case Indicator::EAG:
    case Indicator::ERG:
    case Indicator::PLC: return s == Stage::early;
    case Indicator::ULC:
    case Indicator::NMG: return s == Stage::late;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Checks

IndicatorVerdict agv_check(std::span<const StatVector> grad_layers, const IndicatorConfig& cfg) {
  if (grad_layers.empty()) fail(ErrorCode::invalid_input, "agv_check: no gradient layers");
  for (std::size_t l = 0; l < grad_layers.size(); ++l) {
    const auto& s = grad_layers[l];
    for (double x : {s.avg, s.min, s.max, s.median}) {
      if (!std::isfinite(x)) {
        return verdict(Indicator::AGV, true, "layer " + std::to_string(l) + " gradient is non-finite");
      }
    }
    const double peak = std::max(std::fabs(s.min), std::fabs(s.max));
    if (peak > cfg.agv_abs_bound) {
      return verdict(Indicator::AGV, true,
                     "layer " + std::to_string(l) + " |gradient| " + fmt_num(peak) + " > " + fmt_num(cfg.agv_abs_bound));
    }
  }
  return verdict(Indicator::AGV, false, "gradients finite and bounded");
}

std::vector<double> layer_grad_magnitudes(std::span<const StatVector> grad_layers) {
  if (grad_layers.empty()) fail(ErrorCode::invalid_input, "layer_grad_magnitudes: empty input");
  std::vector<double> m;
  m.reserve(grad_layers.size());
  // Root mean square of the layer's gradient entries, recovered from the
  // stored mean and population variance.
  for (const auto& s : grad_layers) m.push_back(std::sqrt(std::max(0.0, s.var) + s.avg * s.avg));
  return m;
}

IndicatorVerdict eag_check(std::span<const double> magnitudes, const IndicatorConfig& cfg) {
  if (magnitudes.size() < 2) return verdict(Indicator::EAG, false, "insufficient layers");
  const auto a = amplifications(magnitudes);
  if (a.empty()) return verdict(Indicator::EAG, false, "no nonzero adjacent pairs");
  const double med = median_of(a);
  const bool pos = med > cfg.eag_upper;
  return verdict(Indicator::EAG, pos, "median amplification " + fmt_num(med) + (pos ? " > " : " <= ") +
                                          fmt_num(cfg.eag_upper));
}

IndicatorVerdict erg_check(std::span<const double> magnitudes, const IndicatorConfig& cfg) {
  if (magnitudes.size() < 2) return verdict(Indicator::ERG, false, "insufficient layers");
  const auto a = amplifications(magnitudes);
  if (a.empty()) return verdict(Indicator::ERG, false, "no nonzero adjacent pairs");
  const double med = median_of(a);
  const bool pos = med < cfg.erg_lower;
  return verdict(Indicator::ERG, pos, "median amplification " + fmt_num(med) + (pos ? " < " : " >= ") +
                                          fmt_num(cfg.erg_lower));
}

IndicatorVerdict plc_check(std::span<const double> train_losses, const IndicatorConfig& cfg) {
  if (train_losses.size() < 3) return verdict(Indicator::PLC, false, "insufficient losses");
  const double base = train_losses.front();
  if (!std::isfinite(base) || base <= 0) return verdict(Indicator::PLC, false, "undefined baseline");
  double sum = 0;
  for (std::size_t i = 0; i + 1 < train_losses.size(); ++i) sum += std::fabs(train_losses[i + 1] - train_losses[i]);
  const double ratio = sum / static_cast<double>(train_losses.size() - 1) / base;
  const bool pos = ratio < cfg.plc_ratio_threshold;
  return verdict(Indicator::PLC, pos, "mean |loss change| / initial loss " + fmt_num(ratio) + (pos ? " < " : " >= ") +
                                          fmt_num(cfg.plc_ratio_threshold));
}

IndicatorVerdict lar_check(std::span<const StatVector> act_layers, const IndicatorConfig& cfg) {
  if (act_layers.empty()) return verdict(Indicator::LAR, false, "no activation data");
  for (std::size_t l = 0; l < act_layers.size(); ++l) {
    if (act_layers[l].zero_ratio > cfg.lar_zero_threshold) {
      return verdict(Indicator::LAR, true, "layer " + std::to_string(l) + " zero ratio " +
                                               fmt_num(act_layers[l].zero_ratio) + " > " +
                                               fmt_num(cfg.lar_zero_threshold));
    }
  }
  return verdict(Indicator::LAR, false, "activation ratios within bound");
}

IndicatorVerdict ulc_check(std::span<const double> train_losses, int max_epoch, const IndicatorConfig& cfg) {
  const auto w = static_cast<std::size_t>(loss_window(max_epoch, cfg));
  if (train_losses.size() < w) return verdict(Indicator::ULC, false, "insufficient losses for window");
  const auto y = train_losses.subspan(train_losses.size() - w);
  if (!all_finite(y)) return verdict(Indicator::ULC, false, "non-finite losses in window");

  const double n = static_cast<double>(w);
  const double x_mean = (n - 1) / 2;
  const double y_mean = std::accumulate(y.begin(), y.end(), 0.0) / n;
  if (y_mean == 0.0) return verdict(Indicator::ULC, false, "degenerate window");

  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < w; ++i) {
    const double dx = static_cast<double>(i) - x_mean;
    sxy += dx * (y[i] - y_mean);
    sxx += dx * dx;
  }
  const double slope = sxy / sxx;
  double sse = 0;
  for (std::size_t i = 0; i < w; ++i) {
    const double r = y[i] - (y_mean + slope * (static_cast<double>(i) - x_mean));
    sse += r * r;
  }
  const double fluct = std::sqrt(sse / n) / std::fabs(y_mean);
  const double rise = slope * (n - 1);
  if (fluct > cfg.ulc_fluct_tol) {
    return verdict(Indicator::ULC, true, "loss fluctuation " + fmt_num(fluct) + " > " + fmt_num(cfg.ulc_fluct_tol));
  }
  if (slope > 0 && rise > 0.01 * std::fabs(y_mean)) {
    return verdict(Indicator::ULC, true, "loss rising by " + fmt_num(rise) + " over window of " + std::to_string(w));
  }
  return verdict(Indicator::ULC, false, "fluctuation " + fmt_num(fluct) + ", slope " + fmt_num(slope));
}

IndicatorVerdict nmg_check(std::span<const double> train_losses, int max_epoch, const IndicatorConfig& cfg) {
  const auto w = static_cast<std::size_t>(loss_window(max_epoch, cfg));
  if (train_losses.size() < w + 1) return verdict(Indicator::NMG, false, "insufficient losses for window");
  if (!all_finite(train_losses)) return verdict(Indicator::NMG, false, "non-finite losses");
  const double global_min = *std::min_element(train_losses.begin(), train_losses.end());
  const double window_min = *std::min_element(train_losses.end() - static_cast<std::ptrdiff_t>(w), train_losses.end());
  const bool pos = window_min > global_min;
  return verdict(Indicator::NMG, pos, "window min " + fmt_num(window_min) + (pos ? " > " : " == ") +
                                          "overall min " + fmt_num(global_min));
}

// ---------------------------------------------------------------------------
// Diagnosis

std::vector<Indicator> DiagnosisReport::positives() const {
  std::vector<Indicator> out;
  for (const auto& v : verdicts) {
    if (v.positive) out.push_back(v.indicator);
  }
  return out;
}

std::string DiagnosisReport::positive_names() const {
  std::string out;
  for (auto i : positives()) {
    if (!out.empty()) out += '+';
    out += to_string(i);
  }
  return out;
}

DiagnosisReport diagnose(const TrialTrace& trace, int epoch, const IndicatorConfig& cfg, Execution exec) {
  DiagnosisReport report;
  report.trial_id = trace.meta.trial_id;
  report.epoch = epoch;
  if (epoch < 0 || static_cast<int>(trace.epochs.size()) <= epoch) {
    fail(ErrorCode::invariant_violation, "diagnose: trace '" + trace.meta.trial_id + "' has no records for epoch " +
                                             std::to_string(epoch));
  }
  if (epoch < cfg.min_epochs_before_diagnosis) return report;

  const int max_epoch = trace.meta.max_epoch;
  const Stage stage = stage_of(epoch, max_epoch, cfg);
  const auto grads = trace.stats_at(epoch, VarKind::grad);
  const auto acts = trace.stats_at(epoch, VarKind::act);
  const auto losses = trace.train_losses(epoch);

  auto evaluate = [&](Indicator ind) -> IndicatorVerdict {
    switch (ind) {
      case Indicator::AGV:
        return grads.empty() ? verdict(ind, false, "no gradient data") : agv_check(grads, cfg);
      case Indicator::EAG:
        return grads.empty() ? verdict(ind, false, "no gradient data") : eag_check(layer_grad_magnitudes(grads), cfg);
      case Indicator::ERG:
        return grads.empty() ? verdict(ind, false, "no gradient data") : erg_check(layer_grad_magnitudes(grads), cfg);
      case Indicator::PLC: {
        const int last_early = early_stage_end(max_epoch, cfg) - 1;
        if (epoch != last_early) return verdict(ind, false, "evaluated at epoch " + std::to_string(last_early));
        return plc_check(losses, cfg);
      }
      case Indicator::LAR: return lar_check(acts, cfg);
      case Indicator::ULC: return ulc_check(losses, max_epoch, cfg);
      case Indicator::NMG: return nmg_check(losses, max_epoch, cfg);
    }
    return verdict(ind, false, "");
  };

  std::vector<Indicator> active;
  for (auto ind : kAllIndicators) {
    if (active_in(ind, stage)) active.push_back(ind);
  }

  if (exec == Execution::parallel) {
    std::vector<std::future<IndicatorVerdict>> futures;
    futures.reserve(active.size());
    for (auto ind : active) futures.push_back(std::async(std::launch::async, evaluate, ind));
    for (auto& f : futures) report.verdicts.push_back(f.get());
  } else {
    for (auto ind : active) report.verdicts.push_back(evaluate(ind));
  }

  bool malign = false, benign = false;
  for (auto& v : report.verdicts) {
    v.epoch = epoch;
    if (v.positive) (v.benign ? benign : malign) = true;
  }
  report.decision = malign ? Decision::terminate_bad : benign ? Decision::terminate_benign : Decision::continue_training;
  return report;
}

std::string DiagnosisReport::to_json() const {
  Json j;
  j["trial_id"] = trial_id;
  j["epoch"] = epoch;
  j["decision"] = to_string(decision);
  Json vs = Json::array();
  for (const auto& v : verdicts) {
    Json jv;
    jv["indicator"] = to_string(v.indicator);
    jv["positive"] = v.positive;
    jv["benign"] = v.benign;
    jv["evidence"] = v.evidence;
    vs.push_back(jv);
  }
  j["verdicts"] = vs;
  return detail::dump_line(j);
}

}  // namespace btt
