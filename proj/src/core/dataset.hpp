#ifndef APT_CORE_DATASET_HPP
#define APT_CORE_DATASET_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "core/rng.hpp"
#include "core/tensor.hpp"

namespace apt {

// Labeled image set, format "APTD" version 1, little-endian:
//   magic u32 'APTD' | version u32 | n_samples u32 | height u16 | width u16
//   | channels u16 | n_classes u16
//   per sample: label u16 | height*width*channels f32 (row-major, channel last)
struct Dataset {
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint16_t channels = 0;
  std::uint16_t n_classes = 0;
  std::vector<std::uint16_t> labels;
  std::vector<std::vector<float>> images;

  std::size_t size() const { return labels.size(); }

  void save(const std::string& path) const;
  static Dataset load(const std::string& path);
};

struct DataConfig {
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t pretrain_classes = 40;
  std::size_t cil_classes = 40;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  double noise_sigma = 0.25;
  long max_shift = 2;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t total_classes() const { return pretrain_classes + cil_classes; }
};

// Per-class prototype: a coarse random control grid (one knot every 4 pixels)
// bilinearly upsampled with circular wrap, values in [0, 1). Depends only on
// (seed, class), never on how many samples were drawn.
std::vector<float> class_template(const DataConfig& config, std::size_t cls);

// Sample i of a class: the template circularly shifted by up to max_shift
// pixels in each axis, plus Gaussian pixel noise, clamped to [0, 1]. Train
// samples use indices [0, train_per_class), test samples continue after them,
// so train and test draws never overlap.
std::vector<float> synth_sample(const DataConfig& config, std::size_t cls, std::size_t index);

// Samples `indices` [idx_lo, idx_hi) for classes [cls_lo, cls_hi), labels kept
// global so pretrain and incremental splits share one label space.
Dataset synth_range(const DataConfig& config, std::size_t cls_lo, std::size_t cls_hi,
                    std::size_t idx_lo, std::size_t idx_hi);

// Writes pretrain_train/pretrain_test/cil_train/cil_test.aptd under out_dir.
void generate_benchmark(const DataConfig& config, const std::string& out_dir);

// Smallest pairwise L2 distance between class templates; used to confirm the
// stream is learnable relative to the noise level.
double min_template_separation(const DataConfig& config);

}  // namespace apt

#endif  // APT_CORE_DATASET_HPP
