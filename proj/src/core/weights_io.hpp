#ifndef APT_CORE_WEIGHTS_IO_HPP
#define APT_CORE_WEIGHTS_IO_HPP

#include <map>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace apt {

// Named-tensor container, format "APTW" version 1, little-endian:
//   magic u32 'APTW' | version u32 | tensor_count u32
//   per tensor: name_len u16 | name bytes | rank u8 | dims u32[rank] | f32 data
// Values are stored as float32; loading widens back to the working precision.
// Saving therefore rounds: a save/load cycle is bitwise stable once weights
// have passed through it (the harness snaps weights to f32 when freezing).
class TensorStore {
 public:
  void put(const std::string& name, const Tensor& tensor);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Tensor>& entries() const { return entries_; }

  void save(const std::string& path) const;
  static TensorStore load(const std::string& path);

 private:
  std::map<std::string, Tensor> entries_;  // ordered: file layout is canonical
};

// Rounds every element to float32 in place. Applied when a model is frozen so
// in-memory weights match their on-disk representation exactly.
void snap_to_f32(const Tensor& t);

}  // namespace apt

#endif  // APT_CORE_WEIGHTS_IO_HPP
