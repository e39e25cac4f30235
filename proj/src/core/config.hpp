#ifndef APT_CORE_CONFIG_HPP
#define APT_CORE_CONFIG_HPP

#include <cstdint>
#include <map>
#include <string>

#include "core/dataset.hpp"
#include "core/flops.hpp"
#include "core/vit.hpp"

namespace apt {

// Everything a run needs, with desk-scale defaults. Every field is reachable
// through set(key, value); unknown keys and out-of-range values are rejected
// up front rather than surfacing mid-run.
struct RunConfig {
  ViTConfig model;
  DataConfig data;

  std::size_t tasks = 5;
  std::string method = "apt";
  double alpha = 0.7;
  std::string ppf_warm_start = "fused";  // fused | raw | fresh
  std::uint64_t seed = 1;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr_prompts = 3e-3;
  double lr_head = 1e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::size_t pretrain_epochs = 20;
  double pretrain_lr = 1e-3;
  std::uint64_t pretrain_seed = 7;

  std::size_t vpt_n = 4;
  std::size_t pool_size = 10;
  std::size_t pool_top_k = 5;
  std::size_t pool_block_len = 2;

  void set(const std::string& key, const std::string& value);
  void set_kv(const std::string& key_equals_value);  // "key=value"
  void load_file(const std::string& path);           // "key = value" lines, # comments
  void validate() const;

  MethodShape method_shape() const;
  std::map<std::string, std::string> to_map() const;
};

}  // namespace apt

#endif  // APT_CORE_CONFIG_HPP
