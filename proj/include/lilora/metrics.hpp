#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lilora/errors.hpp"

namespace lilora {

/// Lower-triangular a(k, j): accuracy (percent) on task j after training
/// task k, with 0-based indices and j <= k.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t num_tasks) : k_(num_tasks), rows_(num_tasks) {
    for (std::size_t k = 0; k < num_tasks; ++k) rows_[k].assign(k + 1, 0.0);
  }

  /// Build from explicit rows; row k must have k + 1 entries.
  static AccuracyMatrix from_rows(std::vector<std::vector<double>> rows) {
    AccuracyMatrix m(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (rows[k].size() != k + 1)
        throw BoundsError("row " + std::to_string(k) + " has " + std::to_string(rows[k].size()) + " entries, expected " +
                          std::to_string(k + 1));
      m.rows_[k] = std::move(rows[k]);
    }
    return m;
  }

  std::size_t num_tasks() const noexcept { return k_; }

  double at(std::size_t k, std::size_t j) const {
    check(k, j);
    return rows_[k][j];
  }
  void set(std::size_t k, std::size_t j, double v) {
    check(k, j);
    rows_[k][j] = v;
  }
  const std::vector<double>& row(std::size_t k) const {
    if (k >= k_) throw BoundsError("row " + std::to_string(k) + " out of range");
    return rows_[k];
  }

  friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

 private:
  void check(std::size_t k, std::size_t j) const {
    if (k >= k_ || j > k)
      throw BoundsError("accuracy entry (" + std::to_string(k) + "," + std::to_string(j) + ") undefined for " +
                        std::to_string(k_) + " tasks");
  }
  std::size_t k_ = 0;
  std::vector<std::vector<double>> rows_;
};

// The metric functions below take `stage` = number of tasks learned so far
// (1-based, as in the usual AP_k / BWT_k notation).

inline void check_stage(const AccuracyMatrix& m, std::size_t stage) {
  if (stage < 1 || stage > m.num_tasks())
    throw BoundsError("stage " + std::to_string(stage) + " outside [1, " + std::to_string(m.num_tasks()) + "]");
}

/// AP_k = mean of a(k, 1..k).
inline double average_performance(const AccuracyMatrix& m, std::size_t stage) {
  check_stage(m, stage);
  double s = 0.0;
  for (double v : m.row(stage - 1)) s += v;
  return s / static_cast<double>(stage);
}

/// MAP_k = mean of AP_1..AP_k.
inline double mean_average_performance(const AccuracyMatrix& m, std::size_t stage) {
  check_stage(m, stage);
  double s = 0.0;
  for (std::size_t i = 1; i <= stage; ++i) s += average_performance(m, i);
  return s / static_cast<double>(stage);
}

/// BWT_k = mean over j < k of a(k, j) - a(j, j). Negative means forgetting.
inline double backward_transfer(const AccuracyMatrix& m, std::size_t stage) {
  check_stage(m, stage);
  if (stage < 2) throw ContractError("backward transfer needs at least two stages");
  double s = 0.0;
  for (std::size_t j = 0; j + 1 < stage; ++j) s += m.at(stage - 1, j) - m.at(j, j);
  return s / static_cast<double>(stage - 1);
}

/// Per-task predicate over a model output (here: a predicted class id).
struct MifChecker {
  std::function<bool(std::size_t task, std::size_t output)> accepts;

  /// Desk instantiation: the prediction falls in task j's class range.
  static MifChecker class_range(std::size_t classes_per_task) {
    return {[classes_per_task](std::size_t task, std::size_t out) {
      return out >= task * classes_per_task && out < (task + 1) * classes_per_task;
    }};
  }
};

/// MIF_k = (1/k) sum_j (1/n_j) sum_i B_j(o_i^j), in percent.
/// `outputs[j]` holds the outputs produced for task j.
inline double mean_instruction_following(const std::vector<std::vector<std::size_t>>& outputs,
                                         const MifChecker& checker, std::size_t stage) {
  if (stage < 1 || stage > outputs.size())
    throw BoundsError("stage " + std::to_string(stage) + " outside [1, " + std::to_string(outputs.size()) + "]");
  double s = 0.0;
  for (std::size_t j = 0; j < stage; ++j) {
    if (outputs[j].empty()) throw ContractError("task " + std::to_string(j) + " has no outputs");
    std::size_t ok = 0;
    for (std::size_t o : outputs[j]) ok += checker.accepts(j, o) ? 1 : 0;
    s += static_cast<double>(ok) / static_cast<double>(outputs[j].size());
  }
  return 100.0 * s / static_cast<double>(stage);
}

}  // namespace lilora
