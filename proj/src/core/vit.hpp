#ifndef APT_CORE_VIT_HPP
#define APT_CORE_VIT_HPP

#include <cstddef>
#include <vector>

#include "core/tensor.hpp"

namespace apt {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t patch_size = 8;
  std::size_t depth = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;

  void validate() const;
  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t n_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t seq_len() const { return n_patches() + 1; }  // CLS + patches
  std::size_t head_dim() const { return dim / heads; }
  std::size_t mlp_dim() const { return dim * mlp_ratio; }
};

// Optional modifications applied during a forward pass. All pointers are
// borrowed and may be null. Per-layer vectors must have `depth` entries.
struct ForwardAddons {
  // Added to the CLS row of K and V right after the key/value projections,
  // before the head split.
  const std::vector<Tensor>* k_add = nullptr;
  const std::vector<Tensor>* v_add = nullptr;
  // Added to the CLS row of each block's input (the input-level ablation).
  const std::vector<Tensor>* x_add = nullptr;
  // Prompt rows inserted between CLS and the patch tokens at the input.
  const Tensor* tokens = nullptr;
  // Per-layer prompt rows; each block's input has its prompt rows replaced.
  // Implies the same row count as `tokens` at the input.
  const std::vector<Tensor>* tokens_deep = nullptr;
};

struct Block {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// Captures one block's post-softmax attention during a forward pass.
struct AttentionProbe {
  std::size_t layer = 0;
  Tensor probs;  // {batch*heads*seq, seq} once the pass has run
};

// Pre-norm encoder. Weights start trainable (for pretraining) and are frozen
// afterwards; frozen tensors still pass activation gradients through so
// prompts at early layers keep receiving signal.
class ViTModel {
 public:
  explicit ViTModel(const ViTConfig& config);

  void init(Rng& rng);

  const ViTConfig& config() const { return config_; }

  // All weight tensors in a fixed, documented order.
  std::vector<Tensor> parameters() const;
  void set_trainable(bool trainable);
  bool trainable() const { return trainable_; }

  // {n_patches, patch_dim} row per patch, row-major over (patch_row, patch_col).
  Tensor patchify(const std::vector<float>& image) const;

  // Linear patch stem. Accepts any multiple of n_patches rows so a whole
  // batch can go through in one matmul.
  Tensor embed_patches(const Tensor& patches) const;

  // Runs `batch` samples stacked into one matrix. `embedded` holds the
  // per-sample patch embeddings back to back ({batch*n_patches, dim}); the
  // result stacks the final-layernormed token matrices the same way. Samples
  // never attend across each other.
  Tensor forward_stack(const Tensor& embedded, const ForwardAddons& addons, std::size_t batch,
                       AttentionProbe* probe = nullptr) const;

  // Final-layernormed token matrix for one image.
  Tensor forward_tokens(const Tensor& patches, const ForwardAddons& addons) const;

  // The CLS embedding f(x): row 0 of forward_tokens, shape {1, dim}.
  Tensor cls_embedding(const Tensor& patches, const ForwardAddons& addons) const;

  Tensor patch_w, patch_b;  // {patch_dim, dim}, {dim}
  Tensor cls;               // {1, dim}
  Tensor pos;               // {seq_len, dim}
  std::vector<Block> blocks;
  Tensor final_g, final_b;

 private:
  ViTConfig config_;
  bool trainable_ = true;
};

constexpr Scalar kLnEps = 1e-5;

class TensorStore;

// Flat named-tensor form of a model: a "config" meta tensor holding the
// geometry plus one entry per weight ("patch.w", "block.3.attn.wq", ...).
TensorStore model_to_store(const ViTModel& model);
ViTModel model_from_store(const TensorStore& store);

}  // namespace apt

#endif  // APT_CORE_VIT_HPP
