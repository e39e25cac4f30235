#ifndef APT_CORE_CLASSIFIER_HPP
#define APT_CORE_CLASSIFIER_HPP

#include <cstdint>
#include <vector>

#include "core/tensor.hpp"

namespace apt {

// Classifier that grows one zero-initialised block of columns per task.
// Blocks for finished tasks are frozen; inference takes the argmax over every
// class seen so far (no task identity), training sees only the current block.
class GrowingClassifier {
 public:
  explicit GrowingClassifier(std::size_t dim) : dim_(dim) {}

  void add_task(const std::vector<std::uint16_t>& classes);

  std::size_t tasks() const { return heads_.size(); }
  std::size_t total_classes() const;
  const std::vector<std::uint16_t>& task_classes(std::size_t t) const { return heads_[t].classes; }

  // Logits over all classes seen so far, ordered task block by task block.
  Tensor logits_all(const Tensor& embedding) const;
  // Logits over the current task's classes only (training-time masking).
  Tensor logits_current(const Tensor& embedding) const;

  // Global class id with the highest joint logit.
  std::uint16_t predict(const Tensor& embedding) const;
  // Same, one prediction per embedding row.
  std::vector<std::uint16_t> predict_batch(const Tensor& embeddings) const;

  // Position of a global label inside the current task's block.
  std::size_t local_label(std::uint16_t global) const;

  std::vector<Tensor> current_parameters() const;
  std::vector<Tensor> all_parameters() const;

  // Raw weight snapshot of one task's block, for integrity checks.
  std::vector<std::vector<Scalar>> snapshot(std::size_t t) const;
  bool matches_snapshot(std::size_t t, const std::vector<std::vector<Scalar>>& snap) const;

 private:
  struct Head {
    Tensor w;  // {dim, n_classes_in_task}
    Tensor b;  // {n_classes_in_task}
    std::vector<std::uint16_t> classes;
  };

  std::size_t dim_;
  std::vector<Head> heads_;
};

}  // namespace apt

#endif  // APT_CORE_CLASSIFIER_HPP
