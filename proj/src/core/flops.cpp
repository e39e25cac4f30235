#include "core/flops.hpp"

#include <cstdio>
#include <sstream>

namespace apt {

Method parse_method(const std::string& name) {
  if (name == "apt") return Method::kApt;
  if (name == "apt-no-ppf") return Method::kAptNoPpf;
  if (name == "apt-input-level") return Method::kAptInputLevel;
  if (name == "vpt-shallow") return Method::kVptShallow;
  if (name == "vpt-deep") return Method::kVptDeep;
  if (name == "pool") return Method::kPool;
  if (name == "linear-probe") return Method::kLinearProbe;
  raise(ErrorCode::Config,
        "unknown method '" + name +
            "' (expected apt, apt-no-ppf, apt-input-level, vpt-shallow, vpt-deep, pool, "
            "linear-probe)");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::kApt: return "apt";
    case Method::kAptNoPpf: return "apt-no-ppf";
    case Method::kAptInputLevel: return "apt-input-level";
    case Method::kVptShallow: return "vpt-shallow";
    case Method::kVptDeep: return "vpt-deep";
    case Method::kPool: return "pool";
    case Method::kLinearProbe: return "linear-probe";
  }
  return "?";
}

std::uint64_t block_macs_for_seq(const ViTConfig& config, std::size_t seq_len) {
  const std::uint64_t n = seq_len;
  const std::uint64_t d = config.dim;
  const std::uint64_t r = config.mlp_ratio;
  // q/k/v/out projections + attention scores + attention values + two mlp mats
  const std::uint64_t per_block = 4 * n * d * d + 2 * n * n * d + 2 * r * n * d * d;
  return config.depth * per_block;
}

namespace {

std::uint64_t stem_macs(const ViTConfig& config) {
  return static_cast<std::uint64_t>(config.n_patches()) * config.patch_dim() * config.dim;
}

}  // namespace

FlopsBreakdown plain_flops(const ViTConfig& config) {
  FlopsBreakdown f;
  f.block_macs = block_macs_for_seq(config, config.seq_len());
  f.stem_macs = stem_macs(config);
  f.total_macs = f.block_macs + f.stem_macs;
  f.ratio_vs_plain = 1.0;
  return f;
}

FlopsBreakdown method_flops(const ViTConfig& config, const MethodShape& shape) {
  const std::uint64_t plain = block_macs_for_seq(config, config.seq_len());
  FlopsBreakdown f;
  switch (shape.method) {
    case Method::kApt:
    case Method::kAptNoPpf:
      // Sequence length is unchanged; the only extra work is one vector add
      // per prompt per layer, which stays out of the headline by design.
      f.block_macs = plain;
      f.stem_macs = stem_macs(config);
      f.elementwise_adds = 2 * config.depth * config.dim;
      break;
    case Method::kAptInputLevel:
      f.block_macs = plain;
      f.stem_macs = stem_macs(config);
      f.elementwise_adds = config.depth * config.dim;
      break;
    case Method::kVptShallow:
    case Method::kVptDeep:
      f.block_macs = block_macs_for_seq(config, config.seq_len() + shape.vpt_n);
      f.stem_macs = stem_macs(config);
      break;
    case Method::kPool: {
      // One full plain pass to form the query, then the prompted pass.
      const std::size_t inserted = shape.pool_top_k * shape.pool_block_len;
      f.block_macs = plain + block_macs_for_seq(config, config.seq_len() + inserted);
      f.stem_macs = 2 * stem_macs(config);
      break;
    }
    case Method::kLinearProbe:
      f.block_macs = plain;
      f.stem_macs = stem_macs(config);
      break;
  }
  f.total_macs = f.block_macs + f.stem_macs;
  f.ratio_vs_plain = static_cast<double>(f.block_macs) / static_cast<double>(plain);
  return f;
}

std::size_t prompt_params(const ViTConfig& config, const MethodShape& shape) {
  switch (shape.method) {
    case Method::kApt:
    case Method::kAptNoPpf:
      return 2 * config.depth * config.dim;
    case Method::kAptInputLevel:
      return config.depth * config.dim;
    case Method::kVptShallow:
      return shape.vpt_n * config.dim;
    case Method::kVptDeep:
      return config.depth * shape.vpt_n * config.dim;
    case Method::kPool:
      return shape.pool_size * shape.pool_block_len * config.dim;
    case Method::kLinearProbe:
      return 0;
  }
  return 0;
}

std::size_t frozen_extra_params(const ViTConfig& config, const MethodShape& shape) {
  return shape.method == Method::kPool ? shape.pool_size * config.dim : 0;
}

std::string flops_table(const ViTConfig& config, const MethodShape& defaults) {
  static const Method kAll[] = {Method::kApt,        Method::kAptInputLevel, Method::kVptShallow,
                                Method::kVptDeep,    Method::kPool,          Method::kLinearProbe};
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "geometry: depth %zu, dim %zu, seq %zu (image %zu, patch %zu)\n",
                config.depth, config.dim, config.seq_len(), config.image_size, config.patch_size);
  os << buf;
  std::snprintf(buf, sizeof(buf), "%-16s %14s %8s %14s %16s\n", "method", "blocks GMACs", "ratio",
                "prompt params", "elementwise add");
  os << buf;
  for (Method m : kAll) {
    MethodShape s = defaults;
    s.method = m;
    FlopsBreakdown f = method_flops(config, s);
    std::snprintf(buf, sizeof(buf), "%-16s %14.4f %8.3f %14zu %16llu\n", method_name(m),
                  static_cast<double>(f.block_macs) / 1e9, f.ratio_vs_plain,
                  prompt_params(config, s),
                  static_cast<unsigned long long>(f.elementwise_adds));
    os << buf;
  }
  return os.str();
}

}  // namespace apt
