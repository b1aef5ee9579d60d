#include "diffseg/io/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "archive layout assumes a little-endian host");

namespace diffseg::io {

namespace {

constexpr char kMagic[8] = {'V', 'X', 'A', 'R', 'R', 'A', 'Y', '1'};

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), std::streamsize(n));
}

template <typename T>
void put_scalar(std::ostream& os, T v) {
  put_bytes(os, &v, sizeof(v));
}

void get_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), std::streamsize(n));
  if (!is) throw std::runtime_error("archive: truncated file");
}

template <typename T>
T get_scalar(std::istream& is) {
  T v{};
  get_bytes(is, &v, sizeof(v));
  return v;
}

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i32: return 4;
    case DType::u8: return 1;
  }
  throw std::runtime_error("archive: unknown dtype");
}

int64_t ArrayEntry::count() const {
  return std::accumulate(dims.begin(), dims.end(), int64_t(1), std::multiplies<>());
}

void Archive::add(ArrayEntry entry) {
  if (index_.count(entry.name)) throw std::invalid_argument("archive: duplicate entry " + entry.name);
  if (entry.bytes.size() != std::size_t(entry.count()) * dtype_size(entry.dtype))
    throw std::invalid_argument("archive: payload size mismatch for " + entry.name);
  index_[entry.name] = entries_.size();
  entries_.push_back(std::move(entry));
}

namespace {
template <typename T>
ArrayEntry make_entry(const std::string& name, DType dt, std::vector<int64_t> dims, const T* data) {
  ArrayEntry e;
  e.name = name;
  e.dtype = dt;
  e.dims = std::move(dims);
  e.bytes.resize(std::size_t(e.count()) * sizeof(T));
  std::memcpy(e.bytes.data(), data, e.bytes.size());
  return e;
}
}  // namespace

void Archive::add_f32(const std::string& name, std::vector<int64_t> dims, const float* data) {
  add(make_entry(name, DType::f32, std::move(dims), data));
}
void Archive::add_f64(const std::string& name, std::vector<int64_t> dims, const double* data) {
  add(make_entry(name, DType::f64, std::move(dims), data));
}
void Archive::add_i32(const std::string& name, std::vector<int64_t> dims, const int32_t* data) {
  add(make_entry(name, DType::i32, std::move(dims), data));
}

bool Archive::has(const std::string& name) const { return index_.count(name) != 0; }

const ArrayEntry& Archive::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::runtime_error("archive: missing entry " + name);
  return entries_[it->second];
}

const float* Archive::f32(const std::string& name) const {
  const auto& e = at(name);
  if (e.dtype != DType::f32) throw std::runtime_error("archive: " + name + " is not f32");
  return reinterpret_cast<const float*>(e.bytes.data());
}
const double* Archive::f64(const std::string& name) const {
  const auto& e = at(name);
  if (e.dtype != DType::f64) throw std::runtime_error("archive: " + name + " is not f64");
  return reinterpret_cast<const double*>(e.bytes.data());
}
const int32_t* Archive::i32(const std::string& name) const {
  const auto& e = at(name);
  if (e.dtype != DType::i32) throw std::runtime_error("archive: " + name + " is not i32");
  return reinterpret_cast<const int32_t*>(e.bytes.data());
}

void Archive::write(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("archive: cannot open for write: " + path);
  put_bytes(os, kMagic, sizeof(kMagic));
  put_scalar<uint32_t>(os, uint32_t(entries_.size()));
  for (const auto& e : entries_) {
    put_scalar<uint16_t>(os, uint16_t(e.name.size()));
    put_bytes(os, e.name.data(), e.name.size());
    put_scalar<uint8_t>(os, uint8_t(e.dtype));
    put_scalar<uint8_t>(os, uint8_t(e.dims.size()));
    for (int64_t d : e.dims) put_scalar<uint64_t>(os, uint64_t(d));
    put_bytes(os, e.bytes.data(), e.bytes.size());
  }
  if (!os) throw std::runtime_error("archive: write failed: " + path);
}

Archive Archive::read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("archive: cannot open: " + path);
  char magic[8];
  get_bytes(is, magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("archive: bad magic in " + path);
  auto n = get_scalar<uint32_t>(is);
  Archive a;
  for (uint32_t i = 0; i < n; ++i) {
    ArrayEntry e;
    auto name_len = get_scalar<uint16_t>(is);
    e.name.resize(name_len);
    get_bytes(is, e.name.data(), name_len);
    e.dtype = DType(get_scalar<uint8_t>(is));
    auto ndim = get_scalar<uint8_t>(is);
    e.dims.resize(ndim);
    for (auto& d : e.dims) d = int64_t(get_scalar<uint64_t>(is));
    e.bytes.resize(std::size_t(e.count()) * dtype_size(e.dtype));
    get_bytes(is, e.bytes.data(), e.bytes.size());
    a.add(std::move(e));
  }
  return a;
}

ArrayEntry grid_entry_f32(const std::string& name, const Grid<float>& g, bool flat) {
  ArrayEntry e;
  e.name = name;
  e.dtype = DType::f32;
  if (flat && g.channels() == 1)
    e.dims = {g.nz(), g.ny(), g.nx()};
  else
    e.dims = {g.channels(), g.nz(), g.ny(), g.nx()};
  e.bytes.resize(std::size_t(g.size()) * 4);
  std::memcpy(e.bytes.data(), g.data(), e.bytes.size());
  return e;
}

ArrayEntry grid_entry_i32(const std::string& name, const Grid<int32_t>& g, bool flat) {
  ArrayEntry e;
  e.name = name;
  e.dtype = DType::i32;
  if (flat && g.channels() == 1)
    e.dims = {g.nz(), g.ny(), g.nx()};
  else
    e.dims = {g.channels(), g.nz(), g.ny(), g.nx()};
  e.bytes.resize(std::size_t(g.size()) * 4);
  std::memcpy(e.bytes.data(), g.data(), e.bytes.size());
  return e;
}

namespace {
template <typename T>
Grid<T> entry_to_grid(const ArrayEntry& e) {
  int channels = 1, nx = 0, ny = 0, nz = 0;
  if (e.dims.size() == 3) {
    nz = int(e.dims[0]); ny = int(e.dims[1]); nx = int(e.dims[2]);
  } else if (e.dims.size() == 4) {
    channels = int(e.dims[0]); nz = int(e.dims[1]); ny = int(e.dims[2]); nx = int(e.dims[3]);
  } else {
    throw std::runtime_error("archive: entry " + e.name + " is not a 3/4-d grid");
  }
  Grid<T> g(channels, nx, ny, nz);
  std::memcpy(g.data(), e.bytes.data(), e.bytes.size());
  return g;
}
}  // namespace

Grid<float> entry_as_grid_f32(const ArrayEntry& e) {
  if (e.dtype != DType::f32) throw std::runtime_error("archive: " + e.name + " is not f32");
  return entry_to_grid<float>(e);
}

Grid<int32_t> entry_as_grid_i32(const ArrayEntry& e) {
  if (e.dtype != DType::i32) throw std::runtime_error("archive: " + e.name + " is not i32");
  return entry_to_grid<int32_t>(e);
}

}  // namespace diffseg::io
