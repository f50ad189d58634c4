#include "btt/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json_util.hpp"

namespace btt {

using detail::Json;

std::string_view to_string(VarKind k) noexcept {
  switch (k) {
    case VarKind::grad: return "grad";
    case VarKind::weight: return "weight";
    case VarKind::act: return "act";
  }
  return "grad";
}

std::string_view to_string(MetricMode m) noexcept {
  return m == MetricMode::maximize ? "maximize" : "minimize";
}

std::string_view to_string(FinalStatus s) noexcept {
  switch (s) {
    case FinalStatus::completed: return "completed";
    case FinalStatus::terminated: return "terminated";
    case FinalStatus::failed: return "failed";
  }
  return "failed";
}

VarKind parse_var_kind(std::string_view s) {
  if (s == "grad") return VarKind::grad;
  if (s == "weight") return VarKind::weight;
  if (s == "act") return VarKind::act;
  fail(ErrorCode::parse_error, "unknown var kind '" + std::string(s) + "'");
}

MetricMode parse_metric_mode(std::string_view s) {
  if (s == "maximize") return MetricMode::maximize;
  if (s == "minimize") return MetricMode::minimize;
  fail(ErrorCode::parse_error, "unknown metric_mode '" + std::string(s) + "'");
}

FinalStatus parse_final_status(std::string_view s) {
  if (s == "completed") return FinalStatus::completed;
  if (s == "terminated") return FinalStatus::terminated;
  if (s == "failed") return FinalStatus::failed;
  fail(ErrorCode::parse_error, "unknown status '" + std::string(s) + "'");
}

std::string format_hp_value(const HpValue& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return std::to_string(*i);
  if (const auto* s = std::get_if<std::string>(&v)) return *s;
  return detail::real_to_json(std::get<double>(v)).dump();
}

bool operator==(const EpochRecord& a, const EpochRecord& b) {
  return a.trial_id == b.trial_id && a.epoch == b.epoch && same_value(a.train_loss, b.train_loss) &&
         same_value(a.val_metric, b.val_metric) && a.metric_mode == b.metric_mode && a.wall_ms == b.wall_ms;
}

bool operator==(const TrialFinal& a, const TrialFinal& b) {
  return a.status == b.status && a.reason == b.reason && same_value(a.best_val_metric, b.best_val_metric) &&
         a.epochs_run == b.epochs_run;
}

std::vector<const LayerRecord*> TrialTrace::layers_at(int epoch, VarKind kind) const {
  std::vector<const LayerRecord*> out;
  for (const auto& l : layers) {
    if (l.epoch == epoch && l.var == kind) out.push_back(&l);
  }
  std::sort(out.begin(), out.end(),
            [](const LayerRecord* a, const LayerRecord* b) { return a->layer_index < b->layer_index; });
  return out;
}

std::vector<StatVector> TrialTrace::stats_at(int epoch, VarKind kind) const {
  std::vector<StatVector> out;
  for (const auto* l : layers_at(epoch, kind)) out.push_back(l->stats);
  return out;
}

std::vector<double> TrialTrace::train_losses(int through_epoch) const {
  std::vector<double> out;
  for (const auto& e : epochs) {
    if (e.epoch <= through_epoch) out.push_back(e.train_loss);
  }
  return out;
}

double best_val_metric(const std::vector<EpochRecord>& epochs, MetricMode mode) {
  double best = std::numeric_limits<double>::quiet_NaN();
  for (const auto& e : epochs) {
    if (!std::isfinite(e.val_metric)) continue;
    if (std::isnan(best) || (mode == MetricMode::maximize ? e.val_metric > best : e.val_metric < best)) {
      best = e.val_metric;
    }
  }
  return best;
}

void canonicalize(TrialTrace& trace) {
  std::stable_sort(trace.layers.begin(), trace.layers.end(), [](const LayerRecord& a, const LayerRecord& b) {
    if (a.epoch != b.epoch) return a.epoch < b.epoch;
    if (a.var != b.var) return a.var < b.var;
    return a.layer_index < b.layer_index;
  });
}

void validate_trace(const TrialTrace& trace, ErrorCode code) {
  const auto& id = trace.meta.trial_id;
  if (id.empty()) fail(code, "trace has an empty trial_id");
  if (trace.meta.max_epoch <= 0) fail(code, "max_epoch must be positive");

  for (std::size_t i = 0; i < trace.epochs.size(); ++i) {
    const auto& e = trace.epochs[i];
    if (e.trial_id != id) fail(code, "epoch record belongs to trial '" + e.trial_id + "'");
    if (e.epoch != static_cast<int>(i)) {
      fail(code, "epoch gap: expected epoch " + std::to_string(i) + ", found " + std::to_string(e.epoch));
    }
    if (e.wall_ms < 0) fail(code, "negative wall_ms at epoch " + std::to_string(i));
    if (i > 0 && e.wall_ms < trace.epochs[i - 1].wall_ms) {
      fail(code, "wall_ms decreases at epoch " + std::to_string(i));
    }
  }

  const LayerRecord* prev = nullptr;
  for (const auto& l : trace.layers) {
    if (l.trial_id != id) fail(code, "layer record belongs to trial '" + l.trial_id + "'");
    if (l.epoch < 0 || l.layer_index < 0) fail(code, "negative epoch or layer_index in layer record");
    // Layer records may run at most one epoch ahead of the epoch records
    // while a trace is being tailed.
    if (l.epoch > static_cast<int>(trace.epochs.size())) {
      fail(code, "layer record for epoch " + std::to_string(l.epoch) + " without preceding epochs");
    }
    if (prev && prev->epoch == l.epoch && prev->var == l.var && prev->layer_index >= l.layer_index) {
      fail(code, "layer_index not strictly increasing at epoch " + std::to_string(l.epoch) + " var " +
                     std::string(to_string(l.var)));
    }
    prev = &l;
  }

  if (trace.final) {
    const auto& f = *trace.final;
    if (f.epochs_run != static_cast<int>(trace.epochs.size())) {
      fail(code, "final.epochs_run " + std::to_string(f.epochs_run) + " != " +
                     std::to_string(trace.epochs.size()) + " epoch records");
    }
    if (!trace.epochs.empty()) {
      const double best = best_val_metric(trace.epochs, trace.epochs.front().metric_mode);
      if (!same_value(best, f.best_val_metric)) fail(code, "final.best_val_metric is not the epoch extremum");
    }
  }
}

namespace detail {

Json hp_config_to_json(const HpConfig& config) {
  Json j = Json::object();
  for (const auto& [name, value] : config) {
    std::visit(
        [&](const auto& v) {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, double>) {
            j[name] = real_to_json(v);
          } else {
            j[name] = v;
          }
        },
        value);
  }
  return j;
}

HpConfig hp_config_from_json(const Json& j) {
  if (!j.is_object()) fail(ErrorCode::parse_error, "config must be an object");
  HpConfig out;
  for (const auto& [name, v] : j.items()) {
    if (v.is_number_integer()) {
      out[name] = v.get<std::int64_t>();
    } else if (v.is_number()) {
      out[name] = v.get<double>();
    } else if (v.is_string()) {
      const auto& s = v.get_ref<const std::string&>();
      if (s == "NaN" || s == "Infinity" || s == "-Infinity") {
        out[name] = json_to_real(v, name);
      } else {
        out[name] = s;
      }
    } else {
      fail(ErrorCode::parse_error, "config value '" + name + "' must be a number or string");
    }
  }
  return out;
}

}  // namespace detail

std::string encode_meta(const TrialMeta& meta) {
  Json j;
  j["kind"] = "meta";
  j["trial_id"] = meta.trial_id;
  j["config"] = detail::hp_config_to_json(meta.config);
  j["max_epoch"] = meta.max_epoch;
  j["created_unix_ms"] = meta.created_unix_ms;
  return detail::dump_line(j);
}

std::string encode_epoch(const EpochRecord& rec) {
  Json j;
  j["kind"] = "epoch";
  j["trial_id"] = rec.trial_id;
  j["epoch"] = rec.epoch;
  j["train_loss"] = detail::real_to_json(rec.train_loss);
  j["val_metric"] = detail::real_to_json(rec.val_metric);
  j["metric_mode"] = to_string(rec.metric_mode);
  j["wall_ms"] = rec.wall_ms;
  return detail::dump_line(j);
}

std::string encode_layer(const LayerRecord& rec) {
  Json j;
  j["kind"] = "layer";
  j["trial_id"] = rec.trial_id;
  j["epoch"] = rec.epoch;
  j["layer_index"] = rec.layer_index;
  j["layer_name"] = rec.layer_name;
  j["var"] = to_string(rec.var);
  Json stats = Json::array();
  for (double x : rec.stats.to_array()) stats.push_back(detail::real_to_json(x));
  j["stats"] = std::move(stats);
  return detail::dump_line(j);
}

std::string encode_final(const std::string& trial_id, const TrialFinal& fin) {
  Json j;
  j["kind"] = "final";
  j["trial_id"] = trial_id;
  j["status"] = to_string(fin.status);
  j["reason"] = fin.reason;
  j["best_val_metric"] = detail::real_to_json(fin.best_val_metric);
  j["epochs_run"] = fin.epochs_run;
  return detail::dump_line(j);
}

std::size_t write_trace(const TrialTrace& trace, std::ostream& sink) {
  TrialTrace t = trace;
  canonicalize(t);
  validate_trace(t, ErrorCode::invalid_input);

  std::string out = encode_meta(t.meta);
  out += '\n';
  std::size_t li = 0;
  // Layers of an epoch follow its epoch record; a trailing in-flight epoch's
  // layers come last.
  for (const auto& e : t.epochs) {
    out += encode_epoch(e);
    out += '\n';
    for (; li < t.layers.size() && t.layers[li].epoch <= e.epoch; ++li) {
      out += encode_layer(t.layers[li]);
      out += '\n';
    }
  }
  for (; li < t.layers.size(); ++li) {
    out += encode_layer(t.layers[li]);
    out += '\n';
  }
  if (t.final) {
    out += encode_final(t.meta.trial_id, *t.final);
    out += '\n';
  }
  sink.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!sink) fail(ErrorCode::io_error, "write_trace: sink failure");
  return out.size();
}

void write_trace_file(const TrialTrace& trace, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorCode::io_error, "cannot open " + path.string() + " for writing");
  write_trace(trace, f);
  f.flush();
  if (!f) fail(ErrorCode::io_error, "write failure on " + path.string());
}

namespace {

[[noreturn]] void line_error(std::size_t line_no, const std::string& what) {
  fail(ErrorCode::parse_error, "line " + std::to_string(line_no) + ": " + what);
}

struct Builder {
  std::optional<TrialMeta> meta;
  std::vector<EpochRecord> epochs;
  std::vector<LayerRecord> layers;
  std::optional<TrialFinal> final;
  std::string final_trial_id;

  void add(const Json& j, std::size_t line_no) {
    if (!j.is_object()) line_error(line_no, "record is not a JSON object");
    auto kind_it = j.find("kind");
    if (kind_it == j.end() || !kind_it->is_string()) line_error(line_no, "record without a 'kind'");
    const auto kind = kind_it->get<std::string>();
    try {
      if (kind == "meta") {
        if (meta) line_error(line_no, "duplicate meta record");
        TrialMeta m;
        m.trial_id = detail::require_string(j, "trial_id");
        m.config = detail::hp_config_from_json(detail::require(j, "config"));
        m.max_epoch = static_cast<int>(detail::require_int(j, "max_epoch"));
        m.created_unix_ms = detail::require_int(j, "created_unix_ms");
        meta = std::move(m);
      } else if (kind == "epoch") {
        EpochRecord e;
        e.trial_id = detail::require_string(j, "trial_id");
        e.epoch = static_cast<int>(detail::require_int(j, "epoch"));
        e.train_loss = detail::require_real(j, "train_loss");
        e.val_metric = detail::require_real(j, "val_metric");
        e.metric_mode = parse_metric_mode(detail::require_string(j, "metric_mode"));
        e.wall_ms = detail::require_int(j, "wall_ms");
        epochs.push_back(std::move(e));
      } else if (kind == "layer") {
        LayerRecord l;
        l.trial_id = detail::require_string(j, "trial_id");
        l.epoch = static_cast<int>(detail::require_int(j, "epoch"));
        l.layer_index = static_cast<int>(detail::require_int(j, "layer_index"));
        l.layer_name = detail::require_string(j, "layer_name");
        l.var = parse_var_kind(detail::require_string(j, "var"));
        const Json& stats = detail::require(j, "stats");
        if (!stats.is_array() || stats.size() != kStatCount) line_error(line_no, "'stats' must hold 10 numbers");
        std::array<double, kStatCount> a{};
        for (std::size_t i = 0; i < kStatCount; ++i) a[i] = detail::json_to_real(stats[i], "stats");
        l.stats = StatVector::from_array(a);
        layers.push_back(std::move(l));
      } else if (kind == "final") {
        if (final) line_error(line_no, "duplicate final record");
        TrialFinal f;
        final_trial_id = detail::require_string(j, "trial_id");
        f.status = parse_final_status(detail::require_string(j, "status"));
        f.reason = detail::require_string(j, "reason");
        f.best_val_metric = detail::require_real(j, "best_val_metric");
        f.epochs_run = static_cast<int>(detail::require_int(j, "epochs_run"));
        final = f;
      } else {
        line_error(line_no, "unknown record kind '" + kind + "'");
      }
    } catch (const Error& e) {
      if (e.code() == ErrorCode::parse_error && std::string_view(e.what()).starts_with("line ")) throw;
      line_error(line_no, e.what());
    }
  }

  TrialTrace finish() {
    if (!meta) fail(ErrorCode::parse_error, "trace has no meta record");
    TrialTrace t;
    t.meta = std::move(*meta);
    t.epochs = std::move(epochs);
    std::stable_sort(t.epochs.begin(), t.epochs.end(),
                     [](const EpochRecord& a, const EpochRecord& b) { return a.epoch < b.epoch; });
    t.layers = std::move(layers);
    canonicalize(t);
    if (final) {
      if (final_trial_id != t.meta.trial_id) {
        fail(ErrorCode::invariant_violation, "final record belongs to trial '" + final_trial_id + "'");
      }
      t.final = final;
    }
    validate_trace(t, ErrorCode::invariant_violation);
    return t;
  }
};

}  // namespace

TraceReadResult read_trace(std::string_view bytes) {
  Builder b;
  TraceReadResult result;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < bytes.size()) {
    ++line_no;
    const auto nl = bytes.find('\n', pos);
    const bool complete = nl != std::string_view::npos;
    const auto end = complete ? nl : bytes.size();
    std::string_view line = bytes.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    if (line.find_first_not_of(" \t") == std::string_view::npos) {
      pos = complete ? nl + 1 : bytes.size();
      continue;
    }
    Json j = Json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) {
      if (!complete) {
        // A writer is mid-line; resume here once the rest arrives.
        result.truncated = true;
        break;
      }
      line_error(line_no, "malformed JSON");
    }
    b.add(j, line_no);
    pos = complete ? nl + 1 : bytes.size();
  }
  result.resume_offset = pos;
  result.trace = b.finish();
  return result;
}

TraceReadResult read_trace(std::istream& source) {
  std::ostringstream buf;
  buf << source.rdbuf();
  if (source.bad()) fail(ErrorCode::io_error, "read_trace: source failure");
  return read_trace(std::string_view(buf.str()));
}

TraceReadResult read_trace_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::io_error, "cannot open " + path.string());
  try {
    return read_trace(f);
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

std::string trace_file_name(std::string_view trial_id) { return std::string(trial_id) + ".trace.jsonl"; }

}  // namespace btt
