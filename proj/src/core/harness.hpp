#ifndef APT_CORE_HARNESS_HPP
#define APT_CORE_HARNESS_HPP

#include <cstdint>
#include <vector>

#include "core/classifier.hpp"
#include "core/config.hpp"
#include "core/dataset.hpp"
#include "core/metrics.hpp"
#include "core/prompts.hpp"
#include "core/vit.hpp"
#include "core/weights_io.hpp"

namespace apt {

// Tracks which task's samples were read while each task was being trained.
// A rehearsal-free run never touches data outside the task in progress.
class RehearsalAudit {
 public:
  void begin_task(std::size_t task) { current_ = task; }
  void note_access(std::size_t data_task) {
    ++accesses_;
    if (data_task != current_) ++violations_;
  }
  bool clean() const { return accesses_ > 0 && violations_ == 0; }
  std::size_t accesses() const { return accesses_; }
  std::size_t violations() const { return violations_; }

 private:
  std::size_t current_ = 0;
  std::size_t accesses_ = 0;
  std::size_t violations_ = 0;
};

// Deterministic partition of a class list into `tasks` equal disjoint groups:
// shuffle by seed, then chunk. The class count must divide evenly.
std::vector<std::vector<std::uint16_t>> split_tasks(std::vector<std::uint16_t> classes,
                                                    std::size_t tasks, std::uint64_t seed);

struct PretrainOutcome {
  double test_accuracy = 0.0;
  std::vector<double> loss_curve;  // mean loss per epoch
};

// Supervised pretraining of the whole backbone plus a throwaway head. The
// model comes out frozen with weights rounded to their stored (f32)
// representation, so saving and reloading reproduces it bit for bit.
PretrainOutcome pretrain_backbone(ViTModel& model, const Dataset& train, const Dataset& test,
                                  const RunConfig& cfg);

struct RunResult {
  explicit RunResult(std::size_t tasks) : matrix(tasks) {}

  EvalMatrix matrix;
  double avg_acc = 0.0;
  double forget = 0.0;
  std::size_t trainable_prompt_params = 0;
  double headline_gmacs = 0.0;
  double ratio_vs_plain = 1.0;

  // integrity of the frozen parts, checked bit for bit
  bool backbone_intact = false;
  bool old_heads_intact = false;
  std::size_t audit_accesses = 0;
  std::size_t audit_violations = 0;

  std::vector<std::vector<double>> loss_curves;  // per task, mean loss per epoch
  double first_batch_loss = 0.0;                 // task 1, epoch 1, before any update

  // What inference used after each task, ready to serialize. Empty for the
  // linear probe, which has no prompt state.
  std::vector<TensorStore> snapshots;
};

// The class-incremental loop for cfg.method over a frozen backbone. Task
// identity is used for training and bookkeeping only; predictions are a joint
// argmax over every class seen so far.
RunResult run_cil(const RunConfig& cfg, const ViTModel& frozen, const Dataset& cil_train,
                  const Dataset& cil_test);

}  // namespace apt

#endif  // APT_CORE_HARNESS_HPP
