#ifndef APT_CORE_METRICS_HPP
#define APT_CORE_METRICS_HPP

#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace apt {

// Lower-triangular accuracy matrix: entry (t, i) is the accuracy on task i's
// test set measured after training task t, for i <= t.
class EvalMatrix {
 public:
  explicit EvalMatrix(std::size_t tasks);

  std::size_t tasks() const { return tasks_; }
  void set(std::size_t t, std::size_t i, Scalar acc);
  Scalar get(std::size_t t, std::size_t i) const;
  bool has(std::size_t t, std::size_t i) const { return i <= t && t < tasks_; }

  std::string to_csv() const;
  static EvalMatrix from_csv(const std::string& text);

 private:
  std::size_t tasks_;
  std::vector<Scalar> cells_;
  std::vector<bool> filled_;
};

// Mean accuracy over all tasks after the final one: (1/T) * sum_i R[T, i].
Scalar average_accuracy(const EvalMatrix& m);

// Mean drop from each task's just-trained accuracy to its final accuracy:
// (1/(T-1)) * sum_{i<T} (R[i, i] - R[T, i]); zero for a single task.
Scalar forgetting(const EvalMatrix& m);

}  // namespace apt

#endif  // APT_CORE_METRICS_HPP
