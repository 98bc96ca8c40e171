#include "kidnet/conv.hpp"

#include <algorithm>

namespace kidnet {

namespace {

// Per-thread scratch reused across calls; large im2col buffers would
// otherwise be mapped and faulted in on every layer.
template <typename S>
S* scratch(int slot, std::size_t n) {
  thread_local std::vector<S> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) {
    b.resize(n);
  }
  return b.data();
}

template <typename S>
using MatMap = Eigen::Map<Mat<S>>;

struct AxisRange {
  int lo;
  int hi;
};

// Output indices o with 0 <= stride * o + tap - pad < extent.
AxisRange valid_range(int out_extent, int in_extent, int tap, int pad, int stride) {
  const int shift = tap - pad;
  const int lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
  const int last = in_extent - 1 - shift;
  const int hi = last < 0 ? 0 : std::min(out_extent, last / stride + 1);
  return {lo, std::max(lo, hi)};
}

template <typename S>
void im2col(const FeatureMap<S>& in, int k, int stride, const Shape3& os, S* col) {
  const int p = k / 2;
  const Shape3 is = in.shape;
  const std::int64_t nout = voxel_count(os);
  const std::int64_t plane = std::int64_t{is.x()} * is.y();
  S* dst = col;
  for (int ci = 0; ci < in.channels(); ++ci) {
    const S* src = in.data.row(ci).data();
    for (int tz = 0; tz < k; ++tz) {
      const AxisRange rz = valid_range(os.z(), is.z(), tz, p, stride);
      for (int ty = 0; ty < k; ++ty) {
        const AxisRange ry = valid_range(os.y(), is.y(), ty, p, stride);
        for (int tx = 0; tx < k; ++tx) {
          const AxisRange rx = valid_range(os.x(), is.x(), tx, p, stride);
          std::fill(dst, dst + nout, S(0));
          for (int oz = rz.lo; oz < rz.hi; ++oz) {
            const int iz = stride * oz + tz - p;
            for (int oy = ry.lo; oy < ry.hi; ++oy) {
              const int iy = stride * oy + ty - p;
              const S* line = src + iz * plane + std::int64_t{iy} * is.x() + (tx - p);
              S* row = dst + (std::int64_t{oz} * os.y() + oy) * os.x();
              if (stride == 1) {
                std::copy(line + rx.lo, line + rx.hi, row + rx.lo);
              } else {
                for (int ox = rx.lo; ox < rx.hi; ++ox) {
                  row[ox] = line[stride * ox];
                }
              }
            }
          }
          dst += nout;
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const S* col, int k, int stride, const Shape3& os, FeatureMap<S>& din) {
  const int p = k / 2;
  const Shape3 is = din.shape;
  const std::int64_t nout = voxel_count(os);
  const std::int64_t plane = std::int64_t{is.x()} * is.y();
  const S* src = col;
  for (int ci = 0; ci < din.channels(); ++ci) {
    S* dst = din.data.row(ci).data();
    for (int tz = 0; tz < k; ++tz) {
      const AxisRange rz = valid_range(os.z(), is.z(), tz, p, stride);
      for (int ty = 0; ty < k; ++ty) {
        const AxisRange ry = valid_range(os.y(), is.y(), ty, p, stride);
        for (int tx = 0; tx < k; ++tx) {
          const AxisRange rx = valid_range(os.x(), is.x(), tx, p, stride);
          for (int oz = rz.lo; oz < rz.hi; ++oz) {
            const int iz = stride * oz + tz - p;
            for (int oy = ry.lo; oy < ry.hi; ++oy) {
              const int iy = stride * oy + ty - p;
              S* line = dst + iz * plane + std::int64_t{iy} * is.x() + (tx - p);
              const S* row = src + (std::int64_t{oz} * os.y() + oy) * os.x();
              if (stride == 1) {
                for (int ox = rx.lo; ox < rx.hi; ++ox) {
                  line[ox] += row[ox];
                }
              } else {
                for (int ox = rx.lo; ox < rx.hi; ++ox) {
                  line[stride * ox] += row[ox];
                }
              }
            }
          }
          src += nout;
        }
      }
    }
  }
}

// Direct stride-1 convolution for narrow layers: im2col would stream k^3
// copies of the input through memory for a GEMM with only a few rows.
constexpr std::int64_t kDirectMaxChannelProduct = 64;

bool use_direct(int k, int stride, std::int64_t cin, std::int64_t cout) {
  return stride == 1 && k > 1 && cin * cout <= kDirectMaxChannelProduct;
}

template <typename S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

// The direct path treats each tap as one contiguous run over whole planes:
// output o reads input o + shift. Reads that cross an x or y border land in a
// column or row that no valid read of that (dy, dx) tap group ever touches,
// so zeroing those lines in a per-group copy of the input makes the run exact.
template <typename S>
void zero_unread_lines(S* v, const Shape3& s, int dy, int dx) {
  const int x0 = dx < 0 ? s.x() + dx : 0, x1 = dx < 0 ? s.x() : dx;
  const int y0 = dy < 0 ? s.y() + dy : 0, y1 = dy < 0 ? s.y() : dy;
  for (int z = 0; z < s.z(); ++z) {
    for (int y = 0; y < s.y(); ++y) {
      S* row = v + (std::int64_t{z} * s.y() + y) * s.x();
      if (y >= y0 && y < y1) {
        std::fill(row, row + s.x(), S(0));
      } else if (x1 > x0) {
        std::fill(row + x0, row + x1, S(0));
      }
    }
  }
}

// Output range [lo, hi) of a tap run with input offset `shift`.
struct Run {
  std::int64_t lo, hi;
};

Run tap_run(const Shape3& s, int dz, std::int64_t shift) {
  const std::int64_t plane = std::int64_t{s.x()} * s.y();
  const std::int64_t n = plane * s.z();
  std::int64_t lo = std::max<std::int64_t>(0, -dz) * plane;
  std::int64_t hi = std::min<std::int64_t>(s.z(), s.z() - dz) * plane;
  lo = std::max(lo, -shift);
  hi = std::min(hi, n - shift);
  return {lo, std::max(lo, hi)};
}

template <typename S>
void direct_forward(const FeatureMap<S>& in, const Mat<S>& weight, int k, FeatureMap<S>& out) {
  const int p = k / 2, taps = k * k * k;
  const Shape3 s = in.shape;
  const std::int64_t n = in.voxels(), plane = std::int64_t{s.x()} * s.y();
  const int cin = in.channels(), cout = out.channels();
  S* masked = scratch<S>(0, static_cast<std::size_t>(n * cin));
  out.data.setZero();
  for (int ty = 0; ty < k; ++ty) {
    for (int tx = 0; tx < k; ++tx) {
      const int dy = ty - p, dx = tx - p;
      for (int ci = 0; ci < cin; ++ci) {
        std::copy_n(in.data.row(ci).data(), n, masked + ci * n);
        zero_unread_lines(masked + ci * n, s, dy, dx);
      }
      for (int tz = 0; tz < k; ++tz) {
        const int dz = tz - p;
        const std::int64_t shift = dz * plane + std::int64_t{dy} * s.x() + dx;
        const Run r = tap_run(s, dz, shift);
        const int tap = (tz * k + ty) * k + tx;
        for (int co = 0; co < cout; ++co) {
          ArrMap<S> dst(out.data.row(co).data() + r.lo, r.hi - r.lo);
          for (int ci = 0; ci < cin; ++ci) {
            dst += weight(co, ci * taps + tap) * ConstArrMap<S>(masked + ci * n + r.lo + shift, r.hi - r.lo);
          }
        }
      }
    }
  }
}

template <typename S>
void direct_backward(const FeatureMap<S>& in, const Mat<S>& weight, int k, const Mat<S>& dout,
                     Mat<S>& dweight, FeatureMap<S>* din) {
  const int p = k / 2, taps = k * k * k;
  const Shape3 s = in.shape;
  const std::int64_t n = in.voxels(), plane = std::int64_t{s.x()} * s.y();
  const int cin = in.channels(), cout = static_cast<int>(dout.rows());
  S* masked = scratch<S>(0, static_cast<std::size_t>(n * cin));
  S* acc = din != nullptr ? scratch<S>(1, static_cast<std::size_t>(n * cin)) : nullptr;
  for (int ty = 0; ty < k; ++ty) {
    for (int tx = 0; tx < k; ++tx) {
      const int dy = ty - p, dx = tx - p;
      for (int ci = 0; ci < cin; ++ci) {
        std::copy_n(in.data.row(ci).data(), n, masked + ci * n);
        zero_unread_lines(masked + ci * n, s, dy, dx);
      }
      if (acc != nullptr) {
        std::fill(acc, acc + n * cin, S(0));
      }
      for (int tz = 0; tz < k; ++tz) {
        const int dz = tz - p;
        const std::int64_t shift = dz * plane + std::int64_t{dy} * s.x() + dx;
        const Run r = tap_run(s, dz, shift);
        const std::int64_t len = r.hi - r.lo;
        const int tap = (tz * k + ty) * k + tx;
        for (int co = 0; co < cout; ++co) {
          const ConstArrMap<S> g(dout.row(co).data() + r.lo, len);
          for (int ci = 0; ci < cin; ++ci) {
            dweight(co, ci * taps + tap) += (g * ConstArrMap<S>(masked + ci * n + r.lo + shift, len)).sum();
            if (acc != nullptr) {
              ArrMap<S>(acc + ci * n + r.lo + shift, len) += weight(co, ci * taps + tap) * g;
            }
          }
        }
      }
      if (acc != nullptr) {
        for (int ci = 0; ci < cin; ++ci) {
          zero_unread_lines(acc + ci * n, s, dy, dx);
          ArrMap<S>(din->data.row(ci).data(), n) += ConstArrMap<S>(acc + ci * n, n);
        }
      }
    }
  }
}

void check_conv_args(int k, int stride) {
  if (k < 1 || k % 2 == 0) {
    throw ConfigError("convolution kernel size must be odd");
  }
  if (stride != 1 && stride != 2) {
    throw ConfigError("convolution stride must be 1 or 2");
  }
}

}  // namespace

template <typename S>
FeatureMap<S> conv_forward(const FeatureMap<S>& in, const Mat<S>& weight, const Vec<S>& bias,
                           int k, int stride) {
  check_conv_args(k, stride);
  const int taps = k * k * k;
  if (weight.cols() != std::int64_t{in.channels()} * taps) {
    throw ShapeError("convolution weight does not match input channels");
  }
  const Shape3 os = conv_output_shape(in.shape, stride);
  const std::int64_t nout = voxel_count(os);
  FeatureMap<S> out(os, static_cast<int>(weight.rows()));
  if (k == 1 && stride == 1) {
    out.data.noalias() = weight * in.data;
  } else if (use_direct(k, stride, in.channels(), weight.rows())) {
    direct_forward(in, weight, k, out);
  } else {
    MatMap<S> col(scratch<S>(0, static_cast<std::size_t>(weight.cols() * nout)), weight.cols(), nout);
    im2col(in, k, stride, os, col.data());
    out.data.noalias() = weight * col;
  }
  out.data.colwise() += bias;
  return out;
}

template <typename S>
void conv_backward(const FeatureMap<S>& in, const Mat<S>& weight, int k, int stride,
                   const Mat<S>& dout, Mat<S>& dweight, Vec<S>& dbias, FeatureMap<S>* din) {
  check_conv_args(k, stride);
  const Shape3 os = conv_output_shape(in.shape, stride);
  const std::int64_t nout = voxel_count(os);
  dbias += dout.rowwise().sum();
  if (k == 1 && stride == 1) {
    dweight.noalias() += dout * in.data.transpose();
    if (din != nullptr) {
      din->data.noalias() += weight.transpose() * dout;
    }
    return;
  }
  if (use_direct(k, stride, in.channels(), weight.rows())) {
    direct_backward(in, weight, k, dout, dweight, din);
    return;
  }
  MatMap<S> col(scratch<S>(0, static_cast<std::size_t>(weight.cols() * nout)), weight.cols(), nout);
  im2col(in, k, stride, os, col.data());
  dweight.noalias() += dout * col.transpose();
  if (din != nullptr) {
    MatMap<S> dcol(scratch<S>(1, static_cast<std::size_t>(weight.cols() * nout)), weight.cols(), nout);
    dcol.noalias() = weight.transpose() * dout;
    col2im_add(dcol.data(), k, stride, os, *din);
  }
}

template <typename S>
FeatureMap<S> upconv_forward(const FeatureMap<S>& in, const Mat<S>& weight, const Vec<S>& bias) {
  const int cout = static_cast<int>(bias.size());
  if (weight.rows() != std::int64_t{cout} * 8 || weight.cols() != in.channels()) {
    throw ShapeError("transposed convolution weight does not match channels");
  }
  const Shape3 cs = in.shape;
  const Shape3 fs = cs * 2;
  const std::int64_t ncoarse = in.voxels();
  MatMap<S> t(scratch<S>(0, static_cast<std::size_t>(weight.rows() * ncoarse)), weight.rows(), ncoarse);
  t.noalias() = weight * in.data;
  FeatureMap<S> out(fs, cout);
  for (int co = 0; co < cout; ++co) {
    S* dst = out.data.row(co).data();
    const S b = bias(co);
    for (int tap = 0; tap < 8; ++tap) {
      const int dx = tap & 1, dy = (tap >> 1) & 1, dz = tap >> 2;
      const S* src = t.row(co * 8 + tap).data();
      std::int64_t c = 0;
      for (int z = 0; z < cs.z(); ++z) {
        for (int y = 0; y < cs.y(); ++y) {
          S* line = dst + (std::int64_t{2 * z + dz} * fs.y() + (2 * y + dy)) * fs.x() + dx;
          for (int x = 0; x < cs.x(); ++x, ++c) {
            line[2 * x] = src[c] + b;
          }
        }
      }
    }
  }
  return out;
}

template <typename S>
void upconv_backward(const FeatureMap<S>& in, const Mat<S>& weight, const Mat<S>& dout,
                     Mat<S>& dweight, Vec<S>& dbias, FeatureMap<S>* din) {
  const int cout = static_cast<int>(dbias.size());
  const Shape3 cs = in.shape;
  const Shape3 fs = cs * 2;
  const std::int64_t ncoarse = in.voxels();
  MatMap<S> dt(scratch<S>(0, static_cast<std::size_t>(weight.rows() * ncoarse)), weight.rows(), ncoarse);
  for (int co = 0; co < cout; ++co) {
    const S* src = dout.row(co).data();
    dbias(co) += dout.row(co).sum();
    for (int tap = 0; tap < 8; ++tap) {
      const int dx = tap & 1, dy = (tap >> 1) & 1, dz = tap >> 2;
      S* dst = dt.row(co * 8 + tap).data();
      std::int64_t c = 0;
      for (int z = 0; z < cs.z(); ++z) {
        for (int y = 0; y < cs.y(); ++y) {
          const S* line = src + (std::int64_t{2 * z + dz} * fs.y() + (2 * y + dy)) * fs.x() + dx;
          for (int x = 0; x < cs.x(); ++x, ++c) {
            dst[c] = line[2 * x];
          }
        }
      }
    }
  }
  dweight.noalias() += dt * in.data.transpose();
  if (din != nullptr) {
    din->data.noalias() += weight.transpose() * dt;
  }
}

template <typename S>
FeatureMap<S> pointwise_forward(const FeatureMap<S>& in, const Mat<S>& weight, const Vec<S>& bias) {
  return conv_forward(in, weight, bias, 1, 1);
}

template <typename S>
void pointwise_backward(const FeatureMap<S>& in, const Mat<S>& weight, const Mat<S>& dout,
                        Mat<S>& dweight, Vec<S>& dbias, FeatureMap<S>* din) {
  conv_backward(in, weight, 1, 1, dout, dweight, dbias, din);
}

#define KIDNET_INSTANTIATE_CONV(S)                                                              \
  template FeatureMap<S> conv_forward(const FeatureMap<S>&, const Mat<S>&, const Vec<S>&, int, \
                                      int);                                                     \
  template void conv_backward(const FeatureMap<S>&, const Mat<S>&, int, int, const Mat<S>&,     \
                              Mat<S>&, Vec<S>&, FeatureMap<S>*);                                \
  template FeatureMap<S> upconv_forward(const FeatureMap<S>&, const Mat<S>&, const Vec<S>&);    \
  template void upconv_backward(const FeatureMap<S>&, const Mat<S>&, const Mat<S>&, Mat<S>&,    \
                                Vec<S>&, FeatureMap<S>*);                                       \
  template FeatureMap<S> pointwise_forward(const FeatureMap<S>&, const Mat<S>&, const Vec<S>&); \
  template void pointwise_backward(const FeatureMap<S>&, const Mat<S>&, const Mat<S>&, Mat<S>&, \
                                   Vec<S>&, FeatureMap<S>*);

KIDNET_INSTANTIATE_CONV(float)
KIDNET_INSTANTIATE_CONV(double)

#undef KIDNET_INSTANTIATE_CONV

}  // namespace kidnet
