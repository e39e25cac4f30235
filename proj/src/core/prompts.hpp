#ifndef APT_CORE_PROMPTS_HPP
#define APT_CORE_PROMPTS_HPP

#include <cstddef>
#include <vector>

#include "core/tensor.hpp"
#include "core/vit.hpp"

namespace apt {

// Per-layer additive prompts. kAddKv holds two vectors per layer, added to
// the CLS row of the key and value projections. kInputLevel is the ablation
// that adds a single vector per layer to the CLS row of the block input
// instead; it reuses the k slot and leaves v empty.
struct PromptSet {
  enum class Mode { kAddKv, kInputLevel };

  Mode mode = Mode::kAddKv;
  std::vector<Tensor> k;
  std::vector<Tensor> v;

  static PromptSet zeros(Mode mode, std::size_t depth, std::size_t dim, bool requires_grad);
  static PromptSet randn(Mode mode, std::size_t depth, std::size_t dim, Rng& rng, Scalar stddev,
                         bool requires_grad);

  std::size_t depth() const { return k.size(); }
  std::vector<Tensor> parameters() const;
  std::size_t n_params() const;
  PromptSet clone() const;  // detached deep copy

  // Points the addon fields at this set's vectors. The set must outlive the
  // forward pass.
  void attach(ForwardAddons& addons) const;
};

// Progressive fusion: out = alpha * previous + (1 - alpha) * current,
// elementwise per layer. Inference-time only; the result carries no grads.
PromptSet fuse_prompts(const PromptSet& previous, const PromptSet& current, Scalar alpha);

// Learnable prompt tokens inserted after CLS. Shallow keeps one row block for
// the whole network; deep swaps in a fresh block per layer.
struct TokenPrompts {
  bool deep = false;
  Tensor shallow;                  // {n, dim} when !deep
  std::vector<Tensor> per_layer;   // depth x {n, dim} when deep

  static TokenPrompts make(bool deep, std::size_t depth, std::size_t n, std::size_t dim,
                           Rng& rng, Scalar stddev);

  std::vector<Tensor> parameters() const;
  std::size_t n_params() const;
  void attach(ForwardAddons& addons) const;
};

// Key-queried pool of prompt blocks. Keys are frozen random unit vectors;
// the top_k most cosine-similar blocks to a query embedding are concatenated
// (most similar first, ties to the lower index) and inserted shallow-style.
class PromptPool {
 public:
  PromptPool(std::size_t pool_size, std::size_t block_len, std::size_t top_k, std::size_t dim,
             Rng& rng, Scalar stddev);

  std::vector<std::size_t> select(const Tensor& query) const;  // query {1, dim}
  Tensor compose(const std::vector<std::size_t>& indices) const;

  std::vector<Tensor> parameters() const;  // trainable blocks only
  std::size_t n_trainable_params() const;
  std::size_t n_key_params() const;
  std::size_t top_k() const { return top_k_; }
  const Tensor& keys() const { return keys_; }
  const std::vector<Tensor>& blocks() const { return blocks_; }

 private:
  std::size_t top_k_;
  Tensor keys_;                 // {pool_size, dim}, frozen
  std::vector<Tensor> blocks_;  // pool_size x {block_len, dim}
};

class TensorStore;

// Named-tensor snapshots of each method's prompt state. The "meta" entry
// starts with a mode tag: 0 additive K/V, 1 input-level, 2 token rows
// (shallow), 3 token rows (deep), 4 pool.
TensorStore prompt_snapshot(const PromptSet& prompts);
TensorStore prompt_snapshot(const TokenPrompts& tokens);
TensorStore prompt_snapshot(const PromptPool& pool);

// Rebuilds forward addons from a snapshot (modes 0-3; pool snapshots need
// their own query pass and are rejected). The holder owns the tensors the
// addons point into.
struct SnapshotAddons {
  int mode = -1;
  PromptSet add;
  TokenPrompts tokens;

  void attach(ForwardAddons& addons) const;
};
SnapshotAddons snapshot_addons(const TensorStore& store);

}  // namespace apt

#endif  // APT_CORE_PROMPTS_HPP
