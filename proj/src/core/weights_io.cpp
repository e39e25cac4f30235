#include "core/weights_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace apt {

namespace {

constexpr std::uint32_t kMagic = 0x57545041;  // "APTW" little-endian
constexpr std::uint32_t kVersion = 1;

void write_bytes(std::ofstream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ofstream& os, T v) {
  write_bytes(os, &v, sizeof(v));
}

void read_bytes(std::ifstream& is, void* p, std::size_t n, const std::string& path) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    raise(ErrorCode::Truncated, path + ": file ends mid-record");
}

template <typename T>
T read_pod(std::ifstream& is, const std::string& path) {
  T v;
  read_bytes(is, &v, sizeof(v), path);
  return v;
}

}  // namespace

void TensorStore::put(const std::string& name, const Tensor& tensor) {
  if (name.empty() || name.size() > 0xffff)
    raise(ErrorCode::InvalidArgument, "tensor name must be 1..65535 bytes");
  entries_.insert_or_assign(name, tensor);
}

const Tensor& TensorStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end())
    raise(ErrorCode::Io, "weights: missing tensor '" + name + "'");
  return it->second;
}

void TensorStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) raise(ErrorCode::Io, path + ": cannot open for writing");
  write_pod(os, kMagic);
  write_pod(os, kVersion);
  write_pod(os, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, t] : entries_) {
    write_pod(os, static_cast<std::uint16_t>(name.size()));
    write_bytes(os, name.data(), name.size());
    write_pod(os, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) write_pod(os, static_cast<std::uint32_t>(d));
    std::vector<float> buf(t.numel());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t.at(i));
    write_bytes(os, buf.data(), buf.size() * sizeof(float));
  }
  os.flush();
  if (!os) raise(ErrorCode::Io, path + ": write failed");
}

TensorStore TensorStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) raise(ErrorCode::Io, path + ": cannot open");
  auto magic = read_pod<std::uint32_t>(is, path);
  if (magic != kMagic) raise(ErrorCode::BadMagic, path + ": not a weights file");
  auto version = read_pod<std::uint32_t>(is, path);
  if (version != kVersion)
    raise(ErrorCode::BadVersion,
          path + ": unsupported weights version " + std::to_string(version));
  auto count = read_pod<std::uint32_t>(is, path);
  TensorStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name_len = read_pod<std::uint16_t>(is, path);
    std::string name(name_len, '\0');
    read_bytes(is, name.data(), name_len, path);
    auto rank = read_pod<std::uint8_t>(is, path);
    Shape shape(rank);
    std::size_t n = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      shape[r] = read_pod<std::uint32_t>(is, path);
      n *= shape[r];
    }
    std::vector<float> buf(n);
    read_bytes(is, buf.data(), n * sizeof(float), path);
    std::vector<Scalar> values(n);
    for (std::size_t j = 0; j < n; ++j) values[j] = static_cast<Scalar>(buf[j]);
    store.entries_.insert_or_assign(name, Tensor::from_values(std::move(shape), std::move(values)));
  }
  return store;
}

void snap_to_f32(const Tensor& t) {
  for (Scalar& x : const_cast<Tensor&>(t).mutable_data())
    x = static_cast<Scalar>(static_cast<float>(x));
}

}  // namespace apt
