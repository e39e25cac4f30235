#ifndef APT_CORE_HEATMAP_HPP
#define APT_CORE_HEATMAP_HPP

#include <string>
#include <vector>

#include "core/metrics.hpp"
#include "core/vit.hpp"

namespace apt {

// Where one image's CLS token looks: its attention over the patch positions
// at a chosen block, averaged over heads. The CLS self-weight (and any prompt
// token columns) are dropped, so the weights sum to at most 1.
struct AttentionMap {
  std::size_t grid = 0;          // patches per side
  std::vector<Scalar> weights;   // grid*grid raw weights, row-major
};

AttentionMap cls_attention_map(const ViTModel& model, const ForwardAddons& addons,
                               const Tensor& patches, std::size_t layer);

// ASCII P2 image, weights scaled so the largest maps to 255.
std::string attention_map_pgm(const AttentionMap& map);
// Raw weights, one grid row per line, full precision.
std::string attention_map_csv(const AttentionMap& map);

void write_attention_map(const AttentionMap& map, const std::string& pgm_path,
                         const std::string& csv_path);

// Plain-ASCII PGM (P2) rendering of an accuracy matrix: one pixel per cell,
// accuracy 0..1 mapped to gray 0..255, unmeasured upper-triangle cells black.
std::string heatmap_pgm(const EvalMatrix& m);
void write_heatmap(const EvalMatrix& m, const std::string& pgm_path);

}  // namespace apt

#endif  // APT_CORE_HEATMAP_HPP
