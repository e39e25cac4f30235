#ifndef APT_CORE_FLOPS_HPP
#define APT_CORE_FLOPS_HPP

#include <cstdint>
#include <string>

#include "core/vit.hpp"

namespace apt {

enum class Method {
  kApt,            // additive key/value prompts, fused at inference
  kAptNoPpf,       // same prompts, no fusion
  kAptInputLevel,  // ablation: vectors added to the block input instead
  kVptShallow,
  kVptDeep,
  kPool,
  kLinearProbe,
};

Method parse_method(const std::string& name);
const char* method_name(Method m);

// Cost-relevant knobs of a method (token counts, pool geometry).
struct MethodShape {
  Method method = Method::kApt;
  std::size_t vpt_n = 4;
  std::size_t pool_size = 10;
  std::size_t pool_block_len = 2;
  std::size_t pool_top_k = 5;
};

// Analytic inference-cost model, in multiply-accumulates for one image.
// The headline number counts transformer blocks only; the patch-embedding
// stem is tracked separately and total_macs (stem + blocks) is what the
// instrumented kernel counters should reproduce. Elementwise prompt additions
// never enter the headline; they are reported on the side.
struct FlopsBreakdown {
  std::uint64_t block_macs = 0;
  std::uint64_t stem_macs = 0;
  std::uint64_t total_macs = 0;
  std::uint64_t elementwise_adds = 0;
  double ratio_vs_plain = 1.0;
};

// MACs of the transformer blocks for a given sequence length.
std::uint64_t block_macs_for_seq(const ViTConfig& config, std::size_t seq_len);

FlopsBreakdown plain_flops(const ViTConfig& config);
FlopsBreakdown method_flops(const ViTConfig& config, const MethodShape& shape);

// Trainable prompt-side parameters a method adds (classifier excluded).
std::size_t prompt_params(const ViTConfig& config, const MethodShape& shape);
// Frozen extras kept alongside (pool keys); zero for every other method.
std::size_t frozen_extra_params(const ViTConfig& config, const MethodShape& shape);

// Human-readable comparison table across methods for one geometry.
std::string flops_table(const ViTConfig& config, const MethodShape& defaults);

}  // namespace apt

#endif  // APT_CORE_FLOPS_HPP
