#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <sstream>
#include <string>

#include "btt/error.hpp"
#include "btt/trace.hpp"
#include "support.hpp"

using namespace btt;
using btt::testing::random_trace;

namespace {

TrialTrace small_trace() {
  TrialTrace t;
  t.meta.trial_id = "t0001";
  t.meta.config = {{"lr", 0.01}, {"depth", std::int64_t{2}}, {"activation", std::string("relu")}};
  t.meta.max_epoch = 5;
  t.meta.created_unix_ms = 1700000000000;
  for (int e = 0; e < 2; ++e) {
    t.epochs.push_back({"t0001", e, 1.0 - 0.1 * e, 0.5 + 0.1 * e, MetricMode::maximize, 10 * (e + 1)});
    for (int l = 0; l < 2; ++l) {
      const std::vector<double> v{1.0 * l, 2.0, 3.0 + e};
      t.layers.push_back({"t0001", e, l, "dense_" + std::to_string(l), VarKind::grad, compute_stat_vector(v)});
    }
  }
  t.final = TrialFinal{FinalStatus::terminated, "bttackler:ERG", 0.6, 2};
  canonicalize(t);
  return t;
}

std::string to_bytes(const TrialTrace& t) {
  std::ostringstream out;
  write_trace(t, out);
  return out.str();
}

ErrorCode read_error(const std::string& bytes, std::string* message = nullptr) {
  try {
    read_trace(std::string_view(bytes));
  } catch (const Error& e) {
    if (message) *message = e.what();
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::internal;
}

}  // namespace

TEST_CASE("meta-only trace is one line") {
  TrialTrace t;
  t.meta.trial_id = "t0007";
  t.meta.max_epoch = 3;
  const auto bytes = to_bytes(t);
  CHECK(std::count(bytes.begin(), bytes.end(), '\n') == 1);
  CHECK(bytes == "{\"kind\":\"meta\",\"trial_id\":\"t0007\",\"config\":{},\"max_epoch\":3,\"created_unix_ms\":0}\n");
}

TEST_CASE("write returns the byte count and is deterministic") {
  const auto t = small_trace();
  std::ostringstream a, b;
  const auto n = write_trace(t, a);
  write_trace(t, b);
  CHECK(n == a.str().size());
  CHECK(a.str() == b.str());
}

TEST_CASE("record order: meta, each epoch with its layers, final") {
  const auto bytes = to_bytes(small_trace());
  std::istringstream in(bytes);
  std::vector<std::string> kinds;
  for (std::string line; std::getline(in, line);) {
    kinds.push_back(line.substr(9, line.find('"', 9) - 9));
  }
  const std::vector<std::string> want{"meta", "epoch", "layer", "layer", "epoch", "layer", "layer", "final"};
  CHECK(kinds == want);
}

TEST_CASE("round trip") {
  const auto t = small_trace();
  const auto r = read_trace(std::string_view(to_bytes(t)));
  CHECK(r.trace == t);
  CHECK_FALSE(r.truncated);
}

TEST_CASE("non-finite numbers are written as strings") {
  auto t = small_trace();
  t.epochs[1].train_loss = std::numeric_limits<double>::quiet_NaN();
  t.layers[0].stats.max = std::numeric_limits<double>::infinity();
  t.layers[0].stats.min = -std::numeric_limits<double>::infinity();
  const auto bytes = to_bytes(t);
  CHECK(bytes.find("\"train_loss\":\"NaN\"") != std::string::npos);
  CHECK(bytes.find("\"Infinity\"") != std::string::npos);
  CHECK(bytes.find("\"-Infinity\"") != std::string::npos);
  CHECK(read_trace(std::string_view(bytes)).trace == t);
}

TEST_CASE("half-written last line is ignored and the offset reported") {
  const auto bytes = to_bytes(small_trace());
  const auto last_nl = bytes.rfind('\n', bytes.size() - 2);
  const std::string partial = bytes.substr(0, last_nl + 1) + bytes.substr(last_nl + 1, 20);
  const auto r = read_trace(std::string_view(partial));
  CHECK(r.truncated);
  CHECK(r.resume_offset == last_nl + 1);
  CHECK_FALSE(r.trace.final.has_value());
  CHECK(r.trace.epochs.size() == 2);

  // Resuming from the offset with the complete remainder restores the trace.
  const auto full = read_trace(std::string_view(partial.substr(0, r.resume_offset) + bytes.substr(r.resume_offset)));
  CHECK(full.trace == small_trace());
  CHECK(full.resume_offset == bytes.size());
}

TEST_CASE("unknown record kind names the line") {
  auto bytes = to_bytes(small_trace());
  bytes += "{\"kind\":\"bogus\"}\n";
  std::string msg;
  CHECK(read_error(bytes, &msg) == ErrorCode::parse_error);
  CHECK(msg.find("line 9") != std::string::npos);
  CHECK(msg.find("bogus") != std::string::npos);
}

TEST_CASE("malformed complete line is a parse error with its number") {
  const auto bytes = to_bytes(small_trace());
  const auto first_nl = bytes.find('\n');
  const std::string broken = bytes.substr(0, first_nl + 1) + "{not json\n" + bytes.substr(first_nl + 1);
  std::string msg;
  CHECK(read_error(broken, &msg) == ErrorCode::parse_error);
  CHECK(msg.find("line 2") != std::string::npos);
}

TEST_CASE("epoch gap is an invariant violation") {
  auto t = small_trace();
  t.final.reset();
  std::string bytes = to_bytes(t);
  EpochRecord gap{"t0001", 3, 0.5, 0.5, MetricMode::maximize, 40};
  bytes += encode_epoch(gap) + "\n";
  CHECK(read_error(bytes) == ErrorCode::invariant_violation);
}

TEST_CASE("records may arrive in any order within an epoch") {
  const auto t = small_trace();
  std::vector<std::string> lines;
  std::istringstream in(to_bytes(t));
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  std::swap(lines[1], lines[3]);  // a layer before its epoch record
  std::string bytes;
  for (const auto& l : lines) bytes += l + "\n";
  CHECK(read_trace(std::string_view(bytes)).trace == t);
}

TEST_CASE("write rejects traces that break invariants") {
  auto t = small_trace();
  t.final->epochs_run = 5;
  std::ostringstream out;
  CHECK_THROWS_AS(write_trace(t, out), Error);
}

TEST_CASE("trace file name") { CHECK(trace_file_name("t0042") == "t0042.trace.jsonl"); }

TEST_CASE("file round trip") {
  btt::testing::TempDir dir("trace");
  const auto path = dir / trace_file_name("t0001");
  write_trace_file(small_trace(), path);
  CHECK(read_trace_file(path).trace == small_trace());
  CHECK_THROWS_AS(read_trace_file(dir / "missing.trace.jsonl"), Error);
}

TEST_CASE("property: generated traces round-trip byte for byte") {
  std::mt19937_64 rng(21);
  for (int i = 0; i < 300; ++i) {
    const auto t = random_trace(rng, "t" + std::to_string(1000 + i));
    const auto bytes = to_bytes(t);
    const auto r = read_trace(std::string_view(bytes));
    REQUIRE(r.trace == t);
    REQUIRE(to_bytes(r.trace) == bytes);
  }
}

TEST_CASE("property: every prefix cut reads as a valid trace prefix") {
  std::mt19937_64 rng(22);
  for (int i = 0; i < 40; ++i) {
    const auto t = random_trace(rng, "t0001");
    const auto bytes = to_bytes(t);
    std::uniform_int_distribution<std::size_t> cut_at(bytes.find('\n') + 1, bytes.size());
    for (int k = 0; k < 10; ++k) {
      const auto cut = cut_at(rng);
      const auto r = read_trace(std::string_view(bytes).substr(0, cut));
      REQUIRE(r.resume_offset <= cut);
      REQUIRE(r.resume_offset > 0);
      // Either the cut fell after a whole line or the reader stopped at one.
      REQUIRE((r.resume_offset == cut || bytes[r.resume_offset - 1] == '\n'));
      REQUIRE(r.trace.epochs.size() <= t.epochs.size());
      for (std::size_t e = 0; e < r.trace.epochs.size(); ++e) REQUIRE(r.trace.epochs[e] == t.epochs[e]);
    }
  }
}

// ---------------------------------------------------------------------------
// Files from other writers. external.trace.jsonl comes from
// fixtures/make_external_trace.py, which uses its own spacing, key order and
// integer literals, and computes the statistics in Python.

namespace {

std::vector<double> external_values(int epoch, int layer, int kind) {
  const int n = 50 + 10 * layer;
  std::vector<double> xs(n);
  for (int i = 0; i < n; ++i) {
    xs[i] = std::sin(0.37 * i + 1.3 * layer + 0.11 * epoch + kind) * (0.5 + kind);
    if (kind == 2) xs[i] = std::max(0.0, xs[i]);
  }
  if (epoch == 1 && layer == 1 && kind == 2) xs[7] = std::numeric_limits<double>::quiet_NaN();
  return xs;
}

}  // namespace

TEST_CASE("a trace written by an external emitter") {
  const auto r = read_trace_file(std::filesystem::path(BTT_FIXTURES_DIR) / "external.trace.jsonl");
  CHECK_FALSE(r.truncated);
  CHECK(r.resume_offset == btt::testing::slurp(std::filesystem::path(BTT_FIXTURES_DIR) / "external.trace.jsonl").size());
  const auto& t = r.trace;
  CHECK(t.meta.trial_id == "py-0001");
  CHECK(t.meta.max_epoch == 4);
  CHECK(std::get<std::string>(t.meta.config.at("optimizer")) == "adam");
  REQUIRE(t.epochs.size() == 3);
  CHECK(t.epochs[0].val_metric == 0.0);
  CHECK(t.epochs[2].wall_ms == 3000);
  REQUIRE(t.final.has_value());
  CHECK(t.final->epochs_run == 3);
  CHECK(t.layers.size() == 3 * 3 * 2);
  CHECK_NOTHROW(validate_trace(t, ErrorCode::invariant_violation));

  const VarKind kinds[] = {VarKind::grad, VarKind::weight, VarKind::act};
  int nan_layers = 0;
  for (int e = 0; e < 3; ++e) {
    for (int k = 0; k < 3; ++k) {
      const auto layers = t.layers_at(e, kinds[k]);
      REQUIRE(layers.size() == 2);
      for (int l = 0; l < 2; ++l) {
        const auto xs = external_values(e, l, k);
        const auto want = compute_stat_vector(xs).to_array();
        const auto got = layers[l]->stats.to_array();
        for (std::size_t i = 0; i < kStatCount; ++i) {
          INFO("epoch " << e << " kind " << k << " layer " << l << " stat " << i);
          if (std::isnan(want[i])) {
            CHECK(std::isnan(got[i]));
            continue;
          }
          const double denom = std::max({std::fabs(want[i]), std::fabs(got[i]), 1e-300});
          // Shape statistics of near-symmetric data sit close to zero.
          const double floor = i >= 7 && i <= 8 ? 1.0 : denom;
          CHECK(std::fabs(got[i] - want[i]) / std::max(denom, floor) <= 1e-12);
        }
        nan_layers += std::isnan(got[0]);
      }
    }
  }
  CHECK(nan_layers == 1);
}
