#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "btt/trace.hpp"

namespace btt {

/// What one epoch of a trial produces.
struct EpochResult {
  EpochRecord record;
  std::vector<LayerRecord> layers;
};

/// One running trial. The scheduler calls run_epoch() at most max_epoch()
/// times, from a single thread at a time.
class TrialSession {
 public:
  virtual ~TrialSession() = default;
  virtual int max_epoch() const = 0;
  virtual MetricMode metric_mode() const = 0;
  /// Simulated duration of the next epoch; must not depend on training results.
  virtual std::int64_t next_epoch_cost_ms() const = 0;
  virtual EpochResult run_epoch() = 0;
};

/// A named producer of trial sessions.
class TrialRunner {
 public:
  virtual ~TrialRunner() = default;
  virtual std::string name() const = 0;
  virtual std::unique_ptr<TrialSession> start(const std::string& trial_id, const HpConfig& config,
                                              std::uint64_t seed) = 0;
};

}  // namespace btt
