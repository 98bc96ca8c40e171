#include "doctest.h"
#include "oracles.hpp"

#include "kidnet/conv.hpp"

using namespace kidnet;

namespace {

template <typename S>
FeatureMap<S> random_map(const Shape3& s, int channels, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  FeatureMap<S> m(s, channels);
  for (Eigen::Index i = 0; i < m.data.size(); ++i) m.data.data()[i] = static_cast<S>(g(rng));
  return m;
}

template <typename S>
Mat<S> random_mat(Eigen::Index r, Eigen::Index c, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Mat<S> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(g(rng));
  return m;
}

template <typename S>
Vec<S> random_vec(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec<S> v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = static_cast<S>(g(rng));
  return v;
}

struct ConvCase {
  int cin, cout, k, stride;
  Shape3 shape;
};

// Covers the direct path (stride 1, cin * cout <= 64) and the im2col path.
const std::vector<ConvCase> kCases{
    {1, 2, 3, 1, {7, 5, 6}},  {2, 2, 3, 1, {8, 8, 8}},  {4, 8, 3, 1, {5, 9, 4}},   {8, 8, 3, 1, {6, 6, 6}},
    {8, 16, 3, 1, {4, 5, 6}}, {2, 4, 3, 2, {8, 8, 8}},  {3, 5, 3, 2, {7, 6, 5}},   {2, 3, 5, 1, {6, 7, 5}},
    {1, 1, 3, 1, {1, 1, 1}},  {2, 2, 3, 1, {2, 1, 3}},  {1, 3, 5, 2, {9, 4, 3}},   {16, 4, 3, 1, {3, 3, 3}},
};

}  // namespace

TEST_CASE("conv_forward matches the nested-loop reference") {
  Rng rng = make_rng(1, 1);
  for (const auto& cs : kCases) {
    CAPTURE(cs.cin);
    CAPTURE(cs.cout);
    CAPTURE(cs.k);
    CAPTURE(cs.stride);
    const auto in = random_map<double>(cs.shape, cs.cin, rng);
    const auto w = random_mat<double>(cs.cout, cs.cin * cs.k * cs.k * cs.k, rng);
    const auto b = random_vec<double>(cs.cout, rng);
    const auto got = conv_forward(in, w, b, cs.k, cs.stride);
    const auto want = oracle::conv(in, w, b, cs.k, cs.stride);
    REQUIRE((got.shape == want.shape).all());
    CHECK((got.data - want.data).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("conv_backward is the adjoint of conv_forward") {
  Rng rng = make_rng(1, 2);
  for (const auto& cs : kCases) {
    CAPTURE(cs.cin);
    CAPTURE(cs.cout);
    CAPTURE(cs.stride);
    const auto in = random_map<double>(cs.shape, cs.cin, rng);
    const auto w = random_mat<double>(cs.cout, cs.cin * cs.k * cs.k * cs.k, rng);
    const Vec<double> zero_bias = Vec<double>::Zero(cs.cout);
    const auto out = conv_forward(in, w, zero_bias, cs.k, cs.stride);
    const auto dout = random_mat<double>(out.channels(), out.voxels(), rng);

    Mat<double> dw = Mat<double>::Zero(w.rows(), w.cols());
    Vec<double> db = Vec<double>::Zero(cs.cout);
    FeatureMap<double> din(in.shape, cs.cin);
    din.data.setZero();
    conv_backward(in, w, cs.k, cs.stride, dout, dw, db, &din);

    // <conv(x; W), g> is bilinear in x and W
    const double lhs = (out.data.array() * dout.array()).sum();
    CHECK(lhs == doctest::Approx((in.data.array() * din.data.array()).sum()).epsilon(1e-10));
    CHECK(lhs == doctest::Approx((w.array() * dw.array()).sum()).epsilon(1e-10));
    CHECK((db - dout.rowwise().sum()).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("conv_backward accumulates into existing gradients") {
  Rng rng = make_rng(1, 3);
  const auto in = random_map<double>({5, 5, 5}, 2, rng);
  const auto w = random_mat<double>(3, 2 * 27, rng);
  const auto dout = random_mat<double>(3, 125, rng);
  Mat<double> dw1 = Mat<double>::Zero(3, 54), dw2 = Mat<double>::Zero(3, 54);
  Vec<double> db1 = Vec<double>::Zero(3), db2 = Vec<double>::Zero(3);
  FeatureMap<double> din1(in.shape, 2), din2(in.shape, 2);
  din1.data.setZero();
  din2.data.setZero();
  conv_backward(in, w, 3, 1, dout, dw1, db1, &din1);
  conv_backward(in, w, 3, 1, dout, dw2, db2, &din2);
  conv_backward(in, w, 3, 1, dout, dw2, db2, &din2);
  CHECK((dw2 - 2 * dw1).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((din2.data - 2 * din1.data).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("float and double paths agree") {
  Rng rng = make_rng(1, 4);
  for (const auto& cs : kCases) {
    const auto in = random_map<double>(cs.shape, cs.cin, rng);
    const auto w = random_mat<double>(cs.cout, cs.cin * cs.k * cs.k * cs.k, rng);
    const auto b = random_vec<double>(cs.cout, rng);
    FeatureMap<float> inf(in.shape, cs.cin);
    inf.data = in.data.cast<float>();
    const auto d = conv_forward(in, w, b, cs.k, cs.stride);
    const auto f = conv_forward(inf, Mat<float>(w.cast<float>()), Vec<float>(b.cast<float>()), cs.k, cs.stride);
    CHECK((f.data.cast<double>() - d.data).cwiseAbs().maxCoeff() < 1e-4);
  }
}

TEST_CASE("upconv doubles the extent and its backward is the adjoint") {
  Rng rng = make_rng(1, 5);
  const auto in = random_map<double>({3, 4, 2}, 3, rng);
  const auto w = random_mat<double>(2 * 8, 3, rng);
  const Vec<double> b = Vec<double>::Zero(2);
  const auto out = upconv_forward(in, w, b);
  CHECK((out.shape == Shape3(6, 8, 4)).all());

  // each output voxel sees exactly one input voxel through tap (x%2, y%2, z%2)
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 6; ++x)
        for (int co = 0; co < 2; ++co) {
          const int tap = (x % 2) + 2 * ((y % 2) + 2 * (z % 2));
          double want = 0.0;
          for (int ci = 0; ci < 3; ++ci) {
            want += w(co * 8 + tap, ci) * in.data(ci, linear_index(in.shape, x / 2, y / 2, z / 2));
          }
          CHECK(out.data(co, linear_index(out.shape, x, y, z)) == doctest::Approx(want).epsilon(1e-12));
        }

  const auto dout = random_mat<double>(2, out.voxels(), rng);
  Mat<double> dw = Mat<double>::Zero(w.rows(), w.cols());
  Vec<double> db = Vec<double>::Zero(2);
  FeatureMap<double> din(in.shape, 3);
  din.data.setZero();
  upconv_backward(in, w, dout, dw, db, &din);
  const double lhs = (out.data.array() * dout.array()).sum();
  CHECK(lhs == doctest::Approx((in.data.array() * din.data.array()).sum()).epsilon(1e-10));
  CHECK(lhs == doctest::Approx((w.array() * dw.array()).sum()).epsilon(1e-10));
}

TEST_CASE("pointwise conv is a per-voxel matrix product") {
  Rng rng = make_rng(1, 6);
  const auto in = random_map<double>({4, 3, 2}, 5, rng);
  const auto w = random_mat<double>(4, 5, rng);
  const auto b = random_vec<double>(4, rng);
  const auto out = pointwise_forward(in, w, b);
  CHECK(((out.data - ((w * in.data).colwise() + b)).cwiseAbs().maxCoeff()) < 1e-12);

  const auto dout = random_mat<double>(4, in.voxels(), rng);
  Mat<double> dw = Mat<double>::Zero(4, 5);
  Vec<double> db = Vec<double>::Zero(4);
  FeatureMap<double> din(in.shape, 5);
  din.data.setZero();
  pointwise_backward(in, w, dout, dw, db, &din);
  CHECK((dw - dout * in.data.transpose()).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((din.data - w.transpose() * dout).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("relu clamps negatives only") {
  FeatureMap<float> m({2, 1, 1}, 2);
  m.data << -1.0f, 2.0f, 0.0f, -0.5f;
  relu_inplace(m);
  CHECK(m.data(0, 0) == 0.0f);
  CHECK(m.data(0, 1) == 2.0f);
  CHECK(m.data(1, 0) == 0.0f);
  CHECK(m.data(1, 1) == 0.0f);
}

TEST_CASE("output extent of strided convolution rounds up") {
  CHECK((conv_output_shape({8, 7, 1}, 2) == Shape3(4, 4, 1)).all());
  CHECK((conv_output_shape({5, 5, 5}, 1) == Shape3(5, 5, 5)).all());
}
