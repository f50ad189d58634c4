#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "btt/error.hpp"
#include "btt/scheduler.hpp"
#include "btt/simulator.hpp"
#include "btt/toytrainer.hpp"
#include "support.hpp"

using namespace btt;
using btt::testing::random_trace;
using btt::testing::spit;
using btt::testing::TempDir;
using Json = nlohmann::json;

namespace {

std::vector<TrialTrace> random_corpus(std::mt19937_64& rng, int n) {
  std::vector<TrialTrace> out;
  for (int i = 0; i < n; ++i) out.push_back(random_trace(rng, trial_id_for(i)));
  return out;
}

// Pathology recipes (three seeds each) plus healthy-band runs.
struct RecipeCorpus {
  std::vector<TrialTrace> traces;
  std::map<std::string, std::vector<Indicator>> expected;  // empty for healthy
  std::map<std::string, Outcome> labels;
};

const RecipeCorpus& recipe_corpus() {
  static const RecipeCorpus corpus = [] {
    RecipeCorpus c;
    for (const auto& r : toy::pathology_recipes()) {
      for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        const std::string id = r.name + "-" + std::to_string(seed);
        c.traces.push_back(toy::run_to_trace(id, r.spec, r.data, seed));
        c.expected[id] = r.expected;
        // A run that stalls after converging is neither pathology nor healthy.
        if (r.name != "converged_early") c.labels[id] = Outcome::bad;
      }
    }
    for (std::uint64_t seed = 1; seed <= 8; ++seed) {
      const std::string id = "healthy-" + std::to_string(seed);
      c.traces.push_back(toy::run_to_trace(id, toy::healthy_band(seed), toy::default_dataset(), seed));
      c.labels[id] = Outcome::good;
    }
    return c;
  }();
  return corpus;
}

}  // namespace

TEST_CASE("replay of an empty directory") {
  TempDir dir("empty");
  const auto rep = replay_dir(dir.path(), IndicatorConfig{}, ReplayMode::combined);
  CHECK(rep.trials.empty());
  CHECK(rep.epochs_saved == 0);
  CHECK(rep.wall_saved_ms == 0);
  CHECK(rep.warnings.empty());
  CHECK(rep.counts.size() == kAllIndicators.size());
  for (const auto& [i, n] : rep.counts) CHECK(n == 0);
  CHECK_THROWS_AS(replay_dir(dir / "missing", IndicatorConfig{}, ReplayMode::combined), Error);
}

TEST_CASE("replay mode names") {
  CHECK(parse_replay_mode("combined") == ReplayMode::combined);
  CHECK(parse_replay_mode("per_indicator") == ReplayMode::per_indicator);
  CHECK_THROWS_AS(parse_replay_mode("all"), Error);
}

TEST_CASE("property: replay ignores input order and is deterministic") {
  std::mt19937_64 rng(17);
  for (int round = 0; round < 20; ++round) {
    auto traces = random_corpus(rng, 25);
    for (auto mode : {ReplayMode::combined, ReplayMode::per_indicator}) {
      const auto a = replay(traces, IndicatorConfig{}, mode);
      CHECK(replay(traces, IndicatorConfig{}, mode) == a);
      auto shuffled = traces;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      CHECK(replay(shuffled, IndicatorConfig{}, mode) == a);
      CHECK(std::is_sorted(a.trials.begin(), a.trials.end(),
                           [](const ReplayTrial& x, const ReplayTrial& y) { return x.trial_id < y.trial_id; }));
    }
  }
}

TEST_CASE("property: per-indicator replay extends combined replay") {
  std::mt19937_64 rng(23);
  std::vector<TrialTrace> traces = random_corpus(rng, 60);
  for (const auto& t : recipe_corpus().traces) traces.push_back(t);
  const auto combined = replay(traces, IndicatorConfig{}, ReplayMode::combined);
  const auto per = replay(traces, IndicatorConfig{}, ReplayMode::per_indicator);
  REQUIRE(combined.trials.size() == per.trials.size());
  for (auto i : kAllIndicators) CHECK(per.counts.at(i) >= combined.counts.at(i));
  for (std::size_t k = 0; k < combined.trials.size(); ++k) {
    const auto& c = combined.trials[k];
    const auto& p = per.trials[k];
    CHECK(c.first_positive_epoch == p.first_positive_epoch);
    CHECK(c.triggering == p.triggering);
    CHECK(c.decision == p.decision);
    CHECK(c.epochs_saved == p.epochs_saved);
    for (const auto& [i, e] : c.first_epoch) {
      REQUIRE(p.first_epoch.count(i) == 1);
      CHECK(p.first_epoch.at(i) == e);
    }
  }
  CHECK(combined.epochs_saved == per.epochs_saved);
}

TEST_CASE("property: savings add up") {
  std::mt19937_64 rng(29);
  std::vector<TrialTrace> traces = random_corpus(rng, 80);
  for (const auto& t : recipe_corpus().traces) traces.push_back(t);
  for (auto mode : {ReplayMode::combined, ReplayMode::per_indicator}) {
    const auto rep = replay(traces, IndicatorConfig{}, mode);
    int epochs = 0;
    std::int64_t wall = 0;
    std::map<Indicator, int> counts;
    for (const auto& t : rep.trials) {
      if (t.first_positive_epoch) {
        const int f = *t.first_positive_epoch;
        REQUIRE(f < t.epochs_run);
        CHECK(t.epochs_saved == t.epochs_run - f - 1);
        CHECK(t.decision != Decision::continue_training);
        CHECK_FALSE(t.triggering.empty());
        CHECK(t.first_epoch.at(t.triggering.front()) == f);
      } else {
        CHECK(t.epochs_saved == 0);
        CHECK(t.wall_saved_ms == 0);
        CHECK(t.first_epoch.empty());
        CHECK(t.decision == Decision::continue_training);
      }
      CHECK(t.epochs_saved >= 0);
      CHECK(t.wall_saved_ms >= 0);
      epochs += t.epochs_saved;
      wall += t.wall_saved_ms;
      for (const auto& [i, e] : t.first_epoch) ++counts[i];
    }
    CHECK(rep.epochs_saved == epochs);
    CHECK(rep.wall_saved_ms == wall);
    for (auto i : kAllIndicators) CHECK(rep.counts.at(i) == counts[i]);
  }
}

TEST_CASE("recipe corpus: each pathology shows its indicator") {
  const auto& corpus = recipe_corpus();
  const auto rep = replay(corpus.traces, IndicatorConfig{}, ReplayMode::per_indicator);
  for (const auto& [id, expected] : corpus.expected) {
    INFO(id);
    const auto* t = rep.find(id);
    REQUIRE(t);
    const bool hit = std::any_of(expected.begin(), expected.end(), [&](Indicator i) { return t->first_epoch.count(i); });
    CHECK(hit);
    CHECK(t->first_positive_epoch.has_value());
  }
  for (const auto& t : rep.trials)
    if (t.trial_id.starts_with("healthy-")) CHECK(t.decision != Decision::terminate_bad);
}

TEST_CASE("report rendering") {
  const auto rep = replay(recipe_corpus().traces, IndicatorConfig{}, ReplayMode::combined);
  const auto j = Json::parse(rep.to_json());
  CHECK(j["mode"] == "combined");
  CHECK(j["trials"].size() == rep.trials.size());
  CHECK(j["epochs_saved"] == rep.epochs_saved);
  const auto table = rep.table();
  for (auto i : kAllIndicators) CHECK(table.find(std::string(to_string(i))) != std::string::npos);
  CHECK(table.find("vanishing-1") != std::string::npos);
}

TEST_CASE("loading a directory reports bad files and keeps the rest") {
  TempDir dir("corpus");
  std::mt19937_64 rng(5);
  auto good = random_trace(rng, "good");
  while (good.epochs.empty() || !good.final) good = random_trace(rng, "good");
  write_trace_file(good, dir / "good.trace.jsonl");

  auto open = good;
  open.meta.trial_id = "open";
  for (auto& e : open.epochs) e.trial_id = "open";
  for (auto& l : open.layers) l.trial_id = "open";
  open.final.reset();
  std::ostringstream buf;
  write_trace(open, buf);
  std::string text = buf.str();
  text += "{\"kind\":\"epoch\",\"trial";  // crashed mid-write
  spit(dir / "open.trace.jsonl", text);

  spit(dir / "garbage.trace.jsonl", "not json\n");
  TrialTrace bare;
  bare.meta.trial_id = "bare";
  bare.meta.max_epoch = 3;
  write_trace_file(bare, dir / "bare.trace.jsonl");
  write_trace_file(good, dir / "zz-copy.trace.jsonl");
  spit(dir / "notes.txt", "ignored\n");

  const auto loaded = load_trace_dir(dir.path());
  std::set<std::string> ids;
  for (const auto& t : loaded.traces) ids.insert(t.meta.trial_id);
  CHECK(ids == std::set<std::string>{"good", "open"});

  auto warned = [&](const std::string& file, const std::string& fragment) {
    return std::any_of(loaded.warnings.begin(), loaded.warnings.end(), [&](const ReplayWarning& w) {
      return w.source == file && w.message.find(fragment) != std::string::npos;
    });
  };
  CHECK(warned("open.trace.jsonl", "partial final line"));
  CHECK(warned("open.trace.jsonl", "no final record"));
  CHECK(warned("garbage.trace.jsonl", "skipped"));
  CHECK(warned("bare.trace.jsonl", "no epochs"));
  CHECK(warned("zz-copy.trace.jsonl", "duplicate"));
  CHECK_FALSE(warned("notes.txt", ""));

  const auto rep = replay_dir(dir.path(), IndicatorConfig{}, ReplayMode::combined);
  CHECK(rep.trials.size() == 2);
  CHECK(rep.warnings == loaded.warnings);
  CHECK(rep.corpus == dir.path().filename().string());
}

// ---------------------------------------------------------------------------
// Calibration

TEST_CASE("calibration needs a grid") {
  std::vector<IndicatorConfig> grid;
  CHECK_THROWS_AS(calibrate(recipe_corpus().traces, recipe_corpus().labels, grid), Error);
}

TEST_CASE("single-point grid agrees with replay") {
  const auto& corpus = recipe_corpus();
  IndicatorConfig cfg;
  cfg.plc_ratio_threshold = 0.05;
  const std::vector<IndicatorConfig> grid{cfg};
  const auto rows = calibrate(corpus.traces, corpus.labels, grid);
  REQUIRE(rows.size() == 1);
  const auto rep = replay(corpus.traces, cfg, ReplayMode::combined);
  int good = 0, bad = 0, fp = 0, fn = 0;
  for (const auto& t : rep.trials) {
    const bool malign = t.decision == Decision::terminate_bad;
    const auto label = corpus.labels.find(t.trial_id);
    if (label == corpus.labels.end()) continue;
    if (label->second == Outcome::good) {
      ++good;
      fp += malign;
    } else {
      ++bad;
      fn += !malign;
    }
  }
  CHECK(rows[0].cfg == cfg);
  CHECK(rows[0].false_positive_rate == doctest::Approx(static_cast<double>(fp) / good));
  CHECK(rows[0].false_negative_rate == doctest::Approx(static_cast<double>(fn) / bad));
  CHECK(rows[0].epochs_saved == rep.epochs_saved);
}

TEST_CASE("recipe corpus calibrates cleanly at the defaults") {
  const auto& corpus = recipe_corpus();
  const std::vector<IndicatorConfig> grid{IndicatorConfig{}};
  const auto rows = calibrate(corpus.traces, corpus.labels, grid);
  CHECK(rows[0].false_positive_rate == 0.0);
  CHECK(rows[0].false_negative_rate == 0.0);
  CHECK(rows[0].epochs_saved > 0);
  const auto rep = replay(corpus.traces, IndicatorConfig{}, ReplayMode::combined);
  int benign = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed)
    benign += rep.find("converged_early-" + std::to_string(seed))->decision == Decision::terminate_benign;
  CHECK(benign >= 2);
}

TEST_CASE("all-good labels turn every malign stop into a false positive") {
  const auto& corpus = recipe_corpus();
  std::map<std::string, Outcome> labels;
  for (const auto& t : corpus.traces) labels[t.meta.trial_id] = Outcome::good;
  const std::vector<IndicatorConfig> grid{IndicatorConfig{}};
  const auto row = calibrate(corpus.traces, labels, grid)[0];
  const auto rep = replay(corpus.traces, IndicatorConfig{}, ReplayMode::combined);
  const auto malign = std::count_if(rep.trials.begin(), rep.trials.end(),
                                    [](const ReplayTrial& t) { return t.decision == Decision::terminate_bad; });
  REQUIRE(malign > 0);
  CHECK(row.false_positive_rate == doctest::Approx(static_cast<double>(malign) / rep.trials.size()));
  CHECK(row.false_negative_rate == 0.0);
}

TEST_CASE("unlabeled trials only count toward savings") {
  const auto& corpus = recipe_corpus();
  const std::vector<IndicatorConfig> grid{IndicatorConfig{}};
  const auto row = calibrate(corpus.traces, {}, grid)[0];
  CHECK(row.false_positive_rate == 0.0);
  CHECK(row.false_negative_rate == 0.0);
  CHECK(row.epochs_saved == replay(corpus.traces, IndicatorConfig{}, ReplayMode::combined).epochs_saved);
}

TEST_CASE("property: calibration rows are ranked") {
  const auto& corpus = recipe_corpus();
  std::mt19937_64 rng(41);
  std::vector<IndicatorConfig> grid;
  for (int i = 0; i < 12; ++i) {
    IndicatorConfig c;
    c.plc_ratio_threshold = std::exp(std::uniform_real_distribution<double>(-10, -1)(rng));
    c.lar_zero_threshold = std::uniform_real_distribution<double>(0.3, 0.99)(rng);
    c.erg_lower = std::uniform_real_distribution<double>(0.01, 0.5)(rng);
    c.eag_upper = std::uniform_real_distribution<double>(2.0, 50.0)(rng);
    grid.push_back(c);
  }
  const auto rows = calibrate(corpus.traces, corpus.labels, grid);
  REQUIRE(rows.size() == grid.size());
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& a = rows[i - 1];
    const auto& b = rows[i];
    CHECK((a.false_positive_rate < b.false_positive_rate ||
           (a.false_positive_rate == b.false_positive_rate && a.epochs_saved >= b.epochs_saved)));
  }
  for (const auto& c : grid)
    CHECK(std::any_of(rows.begin(), rows.end(), [&](const CalibrationRow& r) { return r.cfg == c; }));
  const auto j = Json::parse(calibration_json(rows));
  CHECK(j["rows"].size() == rows.size());
}

TEST_CASE("quantile labels") {
  auto trace = [](const std::string& id, std::vector<double> metrics, MetricMode mode,
                  std::optional<FinalStatus> status = std::nullopt, std::string reason = "") {
    TrialTrace t;
    t.meta.trial_id = id;
    t.meta.max_epoch = static_cast<int>(metrics.size()) + 5;
    for (std::size_t e = 0; e < metrics.size(); ++e) {
      EpochRecord r;
      r.trial_id = id;
      r.epoch = static_cast<int>(e);
      r.train_loss = 1.0;
      r.val_metric = metrics[e];
      r.metric_mode = mode;
      t.epochs.push_back(r);
    }
    if (status) t.final = TrialFinal{*status, reason, best_val_metric(t.epochs, mode), static_cast<int>(metrics.size())};
    return t;
  };
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<TrialTrace> traces{
      trace("a", {0.1, 0.2}, MetricMode::maximize),
      trace("b", {0.4}, MetricMode::maximize),
      trace("c", {0.9, 0.3}, MetricMode::maximize, FinalStatus::terminated, "bttackler:ERG"),  // last counts
      trace("d", {0.9, 0.6}, MetricMode::maximize, FinalStatus::terminated, "bttackler:NMG"),  // best counts
      trace("e", {nan}, MetricMode::maximize),
      trace("f", {0.7}, MetricMode::maximize, FinalStatus::failed, "runner error: x"),
  };
  // Finite finals: 0.2, 0.4, 0.3, 0.9 -> median 0.35.
  const auto labels = label_by_quantile(traces, 0.5);
  CHECK(labels.at("a") == Outcome::bad);
  CHECK(labels.at("b") == Outcome::good);
  CHECK(labels.at("c") == Outcome::bad);
  CHECK(labels.at("d") == Outcome::good);
  CHECK(labels.at("e") == Outcome::bad);
  CHECK(labels.at("f") == Outcome::bad);

  std::vector<TrialTrace> minimize{trace("x", {3.0}, MetricMode::minimize), trace("y", {1.0}, MetricMode::minimize),
                                   trace("z", {2.0}, MetricMode::minimize)};
  const auto m = label_by_quantile(minimize, 0.5);
  CHECK(m.at("x") == Outcome::bad);
  CHECK(m.at("y") == Outcome::good);
  CHECK(m.at("z") == Outcome::good);
  CHECK(label_by_quantile(minimize, 0.0).at("y") == Outcome::good);
  CHECK_THROWS_AS(label_by_quantile(minimize, 1.5), Error);
}

// ---------------------------------------------------------------------------
// Live runs against replay

TEST_CASE("live verdicts match offline replay") {
  TempDir none_dir("live-none"), btt_dir("live-btt");
  toy::ToyMlpRunner runner;
  ExperimentLog live;
  for (auto [dir, policy] : {std::pair{&none_dir, Policy::none}, std::pair{&btt_dir, Policy::bttackler}}) {
    ExperimentOptions o;
    o.policy = policy;
    o.budget = Budget::parse("trials:24");
    o.seed = 33;
    o.out_dir = dir->path();
    auto log = run_experiment(builtin_space("toy_mlp"), runner, o);
    if (policy == Policy::bttackler) live = std::move(log);
  }
  const auto full = replay_dir(none_dir.path(), IndicatorConfig{}, ReplayMode::combined);
  const auto own = replay_dir(btt_dir.path(), IndicatorConfig{}, ReplayMode::combined);
  REQUIRE(full.trials.size() == 24);
  std::set<std::string> with_verdict;
  int verdicts = 0;
  for (const auto& e : live.events) {
    if (e.kind != "verdict") continue;
    ++verdicts;
    const auto p = Json::parse(e.payload);
    const std::string id = p["trial_id"];
    INFO(id);
    with_verdict.insert(id);
    std::vector<Indicator> inds;
    for (const auto& s : p["indicators"]) inds.push_back(*parse_indicator(s.get<std::string>()));
    for (const auto* rep : {&full, &own}) {
      const auto* r = rep->find(id);
      REQUIRE(r);
      CHECK(r->first_positive_epoch == std::optional<int>(p["epoch"].get<int>()));
      CHECK(r->triggering == inds);
      CHECK(to_string(r->decision) == p["decision"].get<std::string>());
    }
  }
  CHECK(verdicts > 0);
  for (const auto& t : full.trials)
    if (!with_verdict.count(t.trial_id)) CHECK_FALSE(t.first_positive_epoch.has_value());
}
