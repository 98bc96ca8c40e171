// 3D convolution primitives on channel-major feature maps.
//
// A FeatureMap stores a (channels x voxels) matrix over an x-fastest spatial
// grid. Convolutions are lowered to im2col + GEMM (narrow stride-1 layers use
// a direct loop); weights are laid out as
// (out_channels, in_channels * k^3) with the tap index running x-fastest
// inside each input channel.

#pragma once

#include <vector>

#include <Eigen/Core>

#include "kidnet/volume.hpp"

namespace kidnet {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct FeatureMap {
  Shape3 shape = Shape3::Zero();
  Mat<S> data;

  FeatureMap() = default;
  FeatureMap(const Shape3& s, int channels) : shape(s), data(channels, voxel_count(s)) {}

  int channels() const { return static_cast<int>(data.rows()); }
  std::int64_t voxels() const { return data.cols(); }
};

/// Output extent of a zero-padded (pad = k/2) convolution with the given stride.
inline Shape3 conv_output_shape(const Shape3& in, int stride) {
  return (in + stride - 1) / stride;
}

/// Convolution with odd kernel `k`, zero padding k/2 and stride 1 or 2.
template <typename S>
FeatureMap<S> conv_forward(const FeatureMap<S>& in, const Mat<S>& weight, const Vec<S>& bias,
                           int k, int stride);

/// Accumulates weight/bias gradients; adds the input gradient into `din` when non-null.
template <typename S>
void conv_backward(const FeatureMap<S>& in, const Mat<S>& weight, int k, int stride,
                   const Mat<S>& dout, Mat<S>& dweight, Vec<S>& dbias, FeatureMap<S>* din);

/// Transposed convolution with a 2^3 kernel and stride 2 (exact doubling).
/// Weight layout: (out_channels * 8, in_channels), row = co * 8 + tap.
template <typename S>
FeatureMap<S> upconv_forward(const FeatureMap<S>& in, const Mat<S>& weight, const Vec<S>& bias);

template <typename S>
void upconv_backward(const FeatureMap<S>& in, const Mat<S>& weight, const Mat<S>& dout,
                     Mat<S>& dweight, Vec<S>& dbias, FeatureMap<S>* din);

/// 1^3 convolution.
template <typename S>
FeatureMap<S> pointwise_forward(const FeatureMap<S>& in, const Mat<S>& weight, const Vec<S>& bias);

template <typename S>
void pointwise_backward(const FeatureMap<S>& in, const Mat<S>& weight, const Mat<S>& dout,
                        Mat<S>& dweight, Vec<S>& dbias, FeatureMap<S>* din);

template <typename S>
void relu_inplace(FeatureMap<S>& x) {
  x.data = x.data.cwiseMax(S(0));
}

}  // namespace kidnet
