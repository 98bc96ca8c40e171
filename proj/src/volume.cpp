#include "kidnet/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace kidnet {

Box intersect(const Box& a, const Box& b) {
  Box r{a.lo.max(b.lo), a.hi.min(b.hi)};
  r.hi = r.hi.max(r.lo);
  return r;
}

std::string to_string(const Shape3& s) {
  std::ostringstream os;
  os << "(" << s.x() << ", " << s.y() << ", " << s.z() << ")";
  return os.str();
}

std::string class_name(int label) {
  switch (label) {
    case 0: return "background";
    case 1: return "artery";
    case 2: return "vein";
    case 3: return "ureter";
    default: return "class" + std::to_string(label);
  }
}

template <typename T>
Grid<T> crop(const Grid<T>& src, const Box& box) {
  static constexpr const char* kAxis[3] = {"x", "y", "z"};
  for (int a = 0; a < 3; ++a) {
    if (box.lo[a] < 0 || box.hi[a] > src.shape()[a] || box.lo[a] >= box.hi[a]) {
      std::ostringstream os;
      os << "crop box out of range on axis " << kAxis[a] << ": [" << box.lo[a] << ", "
         << box.hi[a] << ") vs extent " << src.shape()[a];
      throw RangeError(os.str());
    }
  }
  Grid<T> out(box.shape(), T{}, src.spacing());
  const int nx = box.hi.x() - box.lo.x();
  for (int z = box.lo.z(); z < box.hi.z(); ++z) {
    for (int y = box.lo.y(); y < box.hi.y(); ++y) {
      const T* from = &src(box.lo.x(), y, z);
      T* to = &out(0, y - box.lo.y(), z - box.lo.z());
      std::copy(from, from + nx, to);
    }
  }
  return out;
}

template Grid<float> crop(const Grid<float>&, const Box&);
template Grid<std::uint8_t> crop(const Grid<std::uint8_t>&, const Box&);

template <typename Scalar>
LabelVolume argmax_labels(const ProbMapT<Scalar>& p) {
  LabelVolume out(p.shape);
  const int n = p.classes();
  for (std::int64_t v = 0; v < p.voxels(); ++v) {
    int best = 0;
    Scalar best_p = p.probs(0, v);
    for (int c = 1; c < n; ++c) {
      // strict comparison keeps the lowest index on ties
      if (p.probs(c, v) > best_p) {
        best_p = p.probs(c, v);
        best = c;
      }
    }
    out[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

template LabelVolume argmax_labels(const ProbMapT<float>&);
template LabelVolume argmax_labels(const ProbMapT<double>&);

template <typename Scalar>
double probmap_normalization_error(const ProbMapT<Scalar>& p) {
  double worst = 0.0;
  for (std::int64_t v = 0; v < p.voxels(); ++v) {
    double sum = 0.0;
    for (int c = 0; c < p.classes(); ++c) {
      const double q = p.probs(c, v);
      if (!(q >= 0.0 && q <= 1.0)) {
        return std::numeric_limits<double>::infinity();
      }
      sum += q;
    }
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  return worst;
}

template double probmap_normalization_error(const ProbMapT<float>&);
template double probmap_normalization_error(const ProbMapT<double>&);

Mask binarize(const LabelVolume& labels, std::uint8_t value) {
  Mask m(labels.shape(), 0, labels.spacing());
  for (std::int64_t i = 0; i < labels.size(); ++i) {
    m[i] = labels[i] == value ? 1 : 0;
  }
  return m;
}

Mask foreground_mask(const LabelVolume& labels) {
  Mask m(labels.shape(), 0, labels.spacing());
  for (std::int64_t i = 0; i < labels.size(); ++i) {
    m[i] = labels[i] != 0 ? 1 : 0;
  }
  return m;
}

}  // namespace kidnet
