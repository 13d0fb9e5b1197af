#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "vla3d/model/model.hpp"

namespace vla3d::app {

/// One measured quantity against a pinned bound.
struct Measurement {
  std::string what;
  double value = 0.0;
  std::string op;  // "<=", "<", ">=", "=="
  double bound = 0.0;
  bool passed = false;
};

struct CheckResult {
  int id = 0;
  std::string name;
  std::vector<Measurement> measurements;
  double seconds = 0.0;
  std::string note;

  bool passed() const;
};

/// Shared state for the criteria: the toy scene sets and trained models are
/// built once and reused.
class CriteriaContext {
 public:
  /// Without `training`, criterion 7 checks only its loss properties.
  explicit CriteriaContext(int jobs = 1, std::ostream* log = nullptr, bool training = true);
  ~CriteriaContext();

  int jobs() const { return jobs_; }
  std::ostream* log() const { return log_; }
  bool training() const { return training_; }

  struct Impl;
  Impl& impl() { return *impl_; }

 private:
  int jobs_;
  std::ostream* log_;
  bool training_;
  std::unique_ptr<Impl> impl_;
};

inline constexpr int kNumCriteria = 12;

/// Criteria that need no training run (the quick invariant suite).
std::vector<int> quick_criteria();

CheckResult run_criterion(int id, CriteriaContext& ctx);

/// "PASS  7 anti-collapse  ..." followed by one indented line per measurement.
void print_result(const CheckResult& r, std::ostream& os, bool detailed);

}  // namespace vla3d::app
