// Dense 3D grids, boxes and probability maps.
//
// All grids use x-fastest linearization: index = x + nx * (y + ny * z).

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "kidnet/errors.hpp"

namespace kidnet {

using Shape3 = Eigen::Array3i;
using Point3 = Eigen::Array3i;
using Spacing3 = Eigen::Array3d;

inline std::int64_t voxel_count(const Shape3& s) {
  return std::int64_t{s.x()} * s.y() * s.z();
}

inline std::int64_t linear_index(const Shape3& s, int x, int y, int z) {
  return x + std::int64_t{s.x()} * (y + std::int64_t{s.y()} * z);
}

inline Point3 unravel(const Shape3& s, std::int64_t i) {
  const int x = static_cast<int>(i % s.x());
  const std::int64_t r = i / s.x();
  return {x, static_cast<int>(r % s.y()), static_cast<int>(r / s.y())};
}

/// Half-open voxel box: lo inclusive, hi exclusive.
struct Box {
  Point3 lo = Point3::Zero();
  Point3 hi = Point3::Zero();

  Shape3 shape() const { return hi - lo; }
  std::int64_t size() const { return empty() ? 0 : voxel_count(shape()); }
  bool empty() const { return (hi <= lo).any(); }
  bool contains(const Point3& p) const { return (p >= lo).all() && (p < hi).all(); }
  bool within(const Shape3& parent) const {
    return (lo >= 0).all() && (hi <= parent).all();
  }
  bool operator==(const Box& o) const { return (lo == o.lo).all() && (hi == o.hi).all(); }

  static Box whole(const Shape3& s) { return {Point3::Zero(), s}; }
};

Box intersect(const Box& a, const Box& b);

/// Axis-aligned grid of scalars with physical spacing (mm per voxel).
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  explicit Grid(const Shape3& shape, T fill = T{}, const Spacing3& spacing = Spacing3::Ones())
      : shape_(shape), spacing_(spacing) {
    if ((shape <= 0).any()) {
      throw ShapeError("grid shape must be positive");
    }
    if ((spacing <= 0.0).any()) {
      throw ShapeError("grid spacing must be positive");
    }
    data_.assign(static_cast<std::size_t>(voxel_count(shape)), fill);
  }

  const Shape3& shape() const { return shape_; }
  const Spacing3& spacing() const { return spacing_; }
  void set_spacing(const Spacing3& s) { spacing_ = s; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  std::int64_t index(int x, int y, int z) const { return linear_index(shape_, x, y, z); }
  bool in_bounds(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < shape_.x() && y < shape_.y() && z < shape_.z();
  }

  T& operator()(int x, int y, int z) { return data_[index(x, y, z)]; }
  const T& operator()(int x, int y, int z) const { return data_[index(x, y, z)]; }
  T& operator()(const Point3& p) { return (*this)(p.x(), p.y(), p.z()); }
  const T& operator()(const Point3& p) const { return (*this)(p.x(), p.y(), p.z()); }
  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  bool operator==(const Grid& o) const {
    return (shape_ == o.shape_).all() && (spacing_ == o.spacing_).all() && data_ == o.data_;
  }

 private:
  Shape3 shape_ = Shape3::Zero();
  Spacing3 spacing_ = Spacing3::Ones();
  std::vector<T> data_;
};

using Volume = Grid<float>;
using LabelVolume = Grid<std::uint8_t>;
using Mask = Grid<std::uint8_t>;

inline constexpr int kDefaultClassCount = 4;

/// Per-voxel class distribution, stored channel-major (classes x voxels).
template <typename Scalar>
struct ProbMapT {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Shape3 shape = Shape3::Zero();
  Matrix probs;

  int classes() const { return static_cast<int>(probs.rows()); }
  std::int64_t voxels() const { return probs.cols(); }
};

using ProbMap = ProbMapT<float>;

template <typename T>
Grid<T> crop(const Grid<T>& src, const Box& box);

template <typename Scalar>
LabelVolume argmax_labels(const ProbMapT<Scalar>& p);

/// Largest per-voxel deviation of the probability sum from 1; also checks range.
template <typename Scalar>
double probmap_normalization_error(const ProbMapT<Scalar>& p);

/// Binary mask of voxels equal to `value`.
Mask binarize(const LabelVolume& labels, std::uint8_t value);

/// Binary mask of voxels with any nonzero label.
Mask foreground_mask(const LabelVolume& labels);

std::string to_string(const Shape3& s);

/// "background", "artery", "vein", "ureter"; "class<k>" beyond.
std::string class_name(int label);

}  // namespace kidnet
