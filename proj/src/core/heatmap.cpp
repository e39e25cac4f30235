#include "core/heatmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace apt {

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) raise(ErrorCode::Io, path + ": cannot open for writing");
  os << text;
  os.flush();
  if (!os) raise(ErrorCode::Io, path + ": write failed");
}

}  // namespace

AttentionMap cls_attention_map(const ViTModel& model, const ForwardAddons& addons,
                               const Tensor& patches, std::size_t layer) {
  TapePause pause;  // inference only
  AttentionProbe probe;
  probe.layer = layer;
  model.forward_stack(model.embed_patches(patches), addons, 1, &probe);

  const std::size_t heads = model.config().heads;
  const std::size_t m = model.config().n_patches();
  const std::size_t seq = probe.probs.cols();  // 1 + prompt rows + m
  AttentionMap map;
  map.grid = model.config().patches_per_side();
  map.weights.assign(m, 0.0);
  // The CLS row sits first within each head's block; patch columns are the
  // last m of the row, after CLS and any prompt tokens.
  const Scalar inv_heads = 1.0 / static_cast<Scalar>(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t row = h * seq;
    for (std::size_t j = 0; j < m; ++j)
      map.weights[j] += probe.probs.at(row, seq - m + j) * inv_heads;
  }
  return map;
}

std::string attention_map_pgm(const AttentionMap& map) {
  Scalar mx = 0.0;
  for (Scalar w : map.weights) mx = std::max(mx, w);
  std::ostringstream os;
  os << "P2\n" << map.grid << " " << map.grid << "\n255\n";
  for (std::size_t r = 0; r < map.grid; ++r) {
    for (std::size_t c = 0; c < map.grid; ++c) {
      if (c) os << " ";
      const Scalar w = map.weights[r * map.grid + c];
      os << (mx > 0.0 ? static_cast<int>(std::lround(w / mx * 255.0)) : 0);
    }
    os << "\n";
  }
  return os.str();
}

std::string attention_map_csv(const AttentionMap& map) {
  std::string out;
  char buf[64];
  for (std::size_t r = 0; r < map.grid; ++r) {
    for (std::size_t c = 0; c < map.grid; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", map.weights[r * map.grid + c]);
      if (c) out += ",";
      out += buf;
    }
    out += "\n";
  }
  return out;
}

void write_attention_map(const AttentionMap& map, const std::string& pgm_path,
                         const std::string& csv_path) {
  write_text(pgm_path, attention_map_pgm(map));
  write_text(csv_path, attention_map_csv(map));
}

std::string heatmap_pgm(const EvalMatrix& m) {
  const std::size_t T = m.tasks();
  std::ostringstream os;
  os << "P2\n" << T << " " << T << "\n255\n";
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < T; ++i) {
      if (i) os << " ";
      if (i <= t) {
        const double a = std::clamp(m.get(t, i), 0.0, 1.0);
        os << static_cast<int>(std::lround(a * 255.0));
      } else {
        os << 0;
      }
    }
    os << "\n";
  }
  return os.str();
}

void write_heatmap(const EvalMatrix& m, const std::string& pgm_path) {
  write_text(pgm_path, heatmap_pgm(m));
}

}  // namespace apt
