#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffseg {

template <typename T>
using ArrayX = Eigen::Array<T, Eigen::Dynamic, 1>;
template <typename T>
using MatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VectorX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Spatial extent of a voxel grid.
struct Shape3 {
  int nx = 0, ny = 0, nz = 0;

  Eigen::Index voxels() const { return Eigen::Index(nx) * ny * nz; }
  bool operator==(const Shape3&) const = default;
};

/// Dense multi-channel voxel grid, channel-major with x fastest:
/// index(c,x,y,z) = ((c*nz + z)*ny + y)*nx + x. Each channel is a
/// contiguous block of shape.voxels() scalars, so the whole grid maps
/// onto an Eigen matrix of shape (voxels x channels) without copies.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int channels, Shape3 shape)
      : channels_(channels), shape_(shape),
        data_(ArrayX<T>::Zero(Eigen::Index(channels) * shape.voxels())) {
    if (channels < 1 || shape.nx < 1 || shape.ny < 1 || shape.nz < 1)
      throw std::invalid_argument("Grid: non-positive dimensions");
  }
  Grid(int channels, int nx, int ny, int nz) : Grid(channels, Shape3{nx, ny, nz}) {}

  /// Storage left uninitialized; for outputs that are fully overwritten.
  static Grid uninit(int channels, Shape3 shape) {
    Grid g;
    if (channels < 1 || shape.nx < 1 || shape.ny < 1 || shape.nz < 1)
      throw std::invalid_argument("Grid: non-positive dimensions");
    g.channels_ = channels;
    g.shape_ = shape;
    g.data_.resize(Eigen::Index(channels) * shape.voxels());
    return g;
  }

  int channels() const { return channels_; }
  const Shape3& shape() const { return shape_; }
  int nx() const { return shape_.nx; }
  int ny() const { return shape_.ny; }
  int nz() const { return shape_.nz; }
  Eigen::Index voxels() const { return shape_.voxels(); }
  Eigen::Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Eigen::Index index(int c, int x, int y, int z) const {
    return ((Eigen::Index(c) * shape_.nz + z) * shape_.ny + y) * shape_.nx + x;
  }
  T& operator()(int c, int x, int y, int z) { return data_[index(c, x, y, z)]; }
  T operator()(int c, int x, int y, int z) const { return data_[index(c, x, y, z)]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  ArrayX<T>& array() { return data_; }
  const ArrayX<T>& array() const { return data_; }

  auto channel(int c) {
    return Eigen::Map<ArrayX<T>>(data_.data() + Eigen::Index(c) * voxels(), voxels());
  }
  auto channel(int c) const {
    return Eigen::Map<const ArrayX<T>>(data_.data() + Eigen::Index(c) * voxels(), voxels());
  }

  /// View as (voxels x channels) matrix; column c is channel c.
  auto as_matrix() {
    return Eigen::Map<MatrixX<T>>(data_.data(), voxels(), channels_);
  }
  auto as_matrix() const {
    return Eigen::Map<const MatrixX<T>>(data_.data(), voxels(), channels_);
  }

  bool same_layout(const Grid& other) const {
    return channels_ == other.channels_ && shape_ == other.shape_;
  }

  void setZero() { data_.setZero(); }

  template <typename U>
  Grid<U> cast() const {
    Grid<U> out(channels_, shape_);
    out.array() = data_.template cast<U>();
    return out;
  }

 private:
  int channels_ = 0;
  Shape3 shape_{};
  ArrayX<T> data_;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

template <typename T>
void require_same_layout(const Grid<T>& a, const Grid<T>& b, const char* what) {
  if (!a.same_layout(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace diffseg
