#include "core/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include "core/error.hpp"

namespace apt {

namespace {

constexpr std::uint32_t kMagic = 0x44545041;  // "APTD" little-endian
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::ifstream& is, const std::string& path) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (static_cast<std::size_t>(is.gcount()) != sizeof(v))
    raise(ErrorCode::Truncated, path + ": file ends mid-record");
  return v;
}

}  // namespace

void Dataset::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) raise(ErrorCode::Io, path + ": cannot open for writing");
  write_pod(os, kMagic);
  write_pod(os, kVersion);
  write_pod(os, static_cast<std::uint32_t>(size()));
  write_pod(os, height);
  write_pod(os, width);
  write_pod(os, channels);
  write_pod(os, n_classes);
  const std::size_t pix = static_cast<std::size_t>(height) * width * channels;
  for (std::size_t i = 0; i < size(); ++i) {
    if (images[i].size() != pix)
      raise(ErrorCode::ShapeMismatch, "dataset: sample " + std::to_string(i) + " has " +
                                          std::to_string(images[i].size()) + " values, expected " +
                                          std::to_string(pix));
    write_pod(os, labels[i]);
    os.write(reinterpret_cast<const char*>(images[i].data()),
             static_cast<std::streamsize>(pix * sizeof(float)));
  }
  os.flush();
  if (!os) raise(ErrorCode::Io, path + ": write failed");
}

Dataset Dataset::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise(ErrorCode::Io, path + ": cannot open");
  auto magic = read_pod<std::uint32_t>(is, path);
  if (magic != kMagic) raise(ErrorCode::BadMagic, path + ": not a dataset file");
  auto version = read_pod<std::uint32_t>(is, path);
  if (version != kVersion)
    raise(ErrorCode::BadVersion,
          path + ": unsupported dataset version " + std::to_string(version));
  auto n = read_pod<std::uint32_t>(is, path);
  Dataset d;
  d.height = read_pod<std::uint16_t>(is, path);
  d.width = read_pod<std::uint16_t>(is, path);
  d.channels = read_pod<std::uint16_t>(is, path);
  d.n_classes = read_pod<std::uint16_t>(is, path);
  const std::size_t pix = static_cast<std::size_t>(d.height) * d.width * d.channels;
  d.labels.reserve(n);
  d.images.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    d.labels.push_back(read_pod<std::uint16_t>(is, path));
    std::vector<float> img(pix);
    is.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(pix * sizeof(float)));
    if (static_cast<std::size_t>(is.gcount()) != pix * sizeof(float))
      raise(ErrorCode::Truncated, path + ": file ends mid-record");
    d.images.push_back(std::move(img));
  }
  return d;
}

void DataConfig::validate() const {
  if (image_size == 0 || channels == 0)
    raise(ErrorCode::Config, "image geometry must be positive");
  if (image_size % 4 != 0)
    raise(ErrorCode::Config, "image_size must be a multiple of 4 (control grid spacing)");
  if (pretrain_classes + cil_classes == 0) raise(ErrorCode::Config, "no classes requested");
  if (total_classes() > 0xffff) raise(ErrorCode::Config, "too many classes for the container");
  if (noise_sigma < 0.0) raise(ErrorCode::Config, "noise_sigma must be non-negative");
  if (max_shift < 0) raise(ErrorCode::Config, "max_shift must be non-negative");
  if (static_cast<std::size_t>(max_shift) >= image_size)
    raise(ErrorCode::Config, "max_shift must be smaller than image_size");
}

std::vector<float> class_template(const DataConfig& config, std::size_t cls) {
  config.validate();
  const std::size_t hw = config.image_size;
  const std::size_t c = config.channels;
  const std::size_t grid = hw / 4;
  Rng rng = Rng(config.seed).substream(cls, 0);
  std::vector<float> knots(grid * grid * c);
  for (float& v : knots) v = static_cast<float>(rng.uniform());
  std::vector<float> out(hw * hw * c);
  for (std::size_t y = 0; y < hw; ++y) {
    const double gy = static_cast<double>(y) / 4.0;
    const std::size_t y0 = static_cast<std::size_t>(gy);
    const std::size_t y1 = (y0 + 1) % grid;
    const double fy = gy - static_cast<double>(y0);
    for (std::size_t x = 0; x < hw; ++x) {
      const double gx = static_cast<double>(x) / 4.0;
      const std::size_t x0 = static_cast<std::size_t>(gx);
      const std::size_t x1 = (x0 + 1) % grid;
      const double fx = gx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v00 = knots[(y0 * grid + x0) * c + ch];
        const double v01 = knots[(y0 * grid + x1) * c + ch];
        const double v10 = knots[(y1 * grid + x0) * c + ch];
        const double v11 = knots[(y1 * grid + x1) * c + ch];
        out[(y * hw + x) * c + ch] = static_cast<float>((1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) +
                                                        fy * ((1.0 - fx) * v10 + fx * v11));
      }
    }
  }
  return out;
}

std::vector<float> synth_sample(const DataConfig& config, std::size_t cls, std::size_t index) {
  const std::vector<float> tmpl = class_template(config, cls);
  const std::size_t hw = config.image_size;
  const std::size_t c = config.channels;
  Rng rng = Rng(config.seed).substream(cls, 1 + index);
  const long dy = rng.uniform_range(-config.max_shift, config.max_shift);
  const long dx = rng.uniform_range(-config.max_shift, config.max_shift);
  const long n = static_cast<long>(hw);
  std::vector<float> out(hw * hw * c);
  for (long y = 0; y < n; ++y) {
    const long sy = ((y + dy) % n + n) % n;
    for (long x = 0; x < n; ++x) {
      const long sx = ((x + dx) % n + n) % n;
      for (std::size_t ch = 0; ch < c; ++ch) {
        double v = tmpl[(static_cast<std::size_t>(sy) * hw + static_cast<std::size_t>(sx)) * c + ch];
        v += config.noise_sigma * rng.normal();
        out[(static_cast<std::size_t>(y) * hw + static_cast<std::size_t>(x)) * c + ch] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

Dataset synth_range(const DataConfig& config, std::size_t cls_lo, std::size_t cls_hi,
                    std::size_t idx_lo, std::size_t idx_hi) {
  config.validate();
  if (cls_hi > config.total_classes() || cls_lo >= cls_hi)
    raise(ErrorCode::InvalidArgument, "synth_range: bad class range");
  Dataset d;
  d.height = static_cast<std::uint16_t>(config.image_size);
  d.width = static_cast<std::uint16_t>(config.image_size);
  d.channels = static_cast<std::uint16_t>(config.channels);
  d.n_classes = static_cast<std::uint16_t>(config.total_classes());
  for (std::size_t cls = cls_lo; cls < cls_hi; ++cls)
    for (std::size_t i = idx_lo; i < idx_hi; ++i) {
      d.labels.push_back(static_cast<std::uint16_t>(cls));
      d.images.push_back(synth_sample(config, cls, i));
    }
  return d;
}

void generate_benchmark(const DataConfig& config, const std::string& out_dir) {
  config.validate();
  // Sanity-check learnability: what limits a nearest-template classifier is
  // the noise component along the line between two templates, sigma*sqrt(2)
  // for a pair of noisy samples (the full-dimensional noise norm grows with
  // image area and says nothing about class overlap).
  const double sep = min_template_separation(config);
  const double noise_gap = std::sqrt(2.0) * config.noise_sigma;
  if (sep <= 4.0 * noise_gap)
    std::fprintf(stderr,
                 "warning: closest class templates are %.3f apart, within 4x the pairwise "
                 "noise scale %.3f; classes may be inseparable\n",
                 sep, noise_gap);
  const std::size_t p = config.pretrain_classes;
  const std::size_t t = config.train_per_class;
  const std::size_t e = config.test_per_class;
  synth_range(config, 0, p, 0, t).save(out_dir + "/pretrain_train.aptd");
  synth_range(config, 0, p, t, t + e).save(out_dir + "/pretrain_test.aptd");
  synth_range(config, p, p + config.cil_classes, 0, t).save(out_dir + "/cil_train.aptd");
  synth_range(config, p, p + config.cil_classes, t, t + e).save(out_dir + "/cil_test.aptd");
}

double min_template_separation(const DataConfig& config) {
  const std::size_t total = config.total_classes();
  std::vector<std::vector<float>> templates;
  templates.reserve(total);
  for (std::size_t cls = 0; cls < total; ++cls) templates.push_back(class_template(config, cls));
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < total; ++a)
    for (std::size_t b = a + 1; b < total; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < templates[a].size(); ++i) {
        const double diff = static_cast<double>(templates[a][i]) - templates[b][i];
        s += diff * diff;
      }
      best = std::min(best, std::sqrt(s));
    }
  return best;
}

}  // namespace apt
