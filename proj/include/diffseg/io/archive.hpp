#pragma once

#include "diffseg/core/grid.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace diffseg::io {

/// Array container used for datasets, predictions and checkpoints.
/// Byte layout (all integers little-endian), documented in README.md:
///   magic "VXARRAY1" (8 bytes)
///   u32 entry count
///   per entry: u16 name length | name bytes | u8 dtype | u8 ndim |
///              u64 dims[ndim] | raw payload (row-major in the declared
///              dim order, last dim fastest)
enum class DType : uint8_t { f32 = 1, f64 = 2, i32 = 3, u8 = 4 };

std::size_t dtype_size(DType t);

struct ArrayEntry {
  std::string name;
  DType dtype = DType::f32;
  std::vector<int64_t> dims;
  std::vector<uint8_t> bytes;

  int64_t count() const;
};

class Archive {
 public:
  void add(ArrayEntry entry);
  void add_f32(const std::string& name, std::vector<int64_t> dims, const float* data);
  void add_f64(const std::string& name, std::vector<int64_t> dims, const double* data);
  void add_i32(const std::string& name, std::vector<int64_t> dims, const int32_t* data);

  bool has(const std::string& name) const;
  const ArrayEntry& at(const std::string& name) const;
  const std::vector<ArrayEntry>& entries() const { return entries_; }

  const float* f32(const std::string& name) const;
  const double* f64(const std::string& name) const;
  const int32_t* i32(const std::string& name) const;

  void write(const std::string& path) const;
  static Archive read(const std::string& path);

 private:
  std::vector<ArrayEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Grid <-> entry helpers. A grid with c channels is stored with dims
/// [c, nz, ny, nx] (dims [nz, ny, nx] when c == 1 and flat == true).
ArrayEntry grid_entry_f32(const std::string& name, const Grid<float>& g, bool flat = false);
ArrayEntry grid_entry_i32(const std::string& name, const Grid<int32_t>& g, bool flat = false);
Grid<float> entry_as_grid_f32(const ArrayEntry& e);
Grid<int32_t> entry_as_grid_i32(const ArrayEntry& e);

}  // namespace diffseg::io
