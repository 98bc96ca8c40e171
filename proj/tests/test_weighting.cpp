#include <cmath>

#include "doctest.h"
#include "oracles.hpp"

#include "kidnet/weighting.hpp"

using namespace kidnet;

namespace {

LabelVolume ball(const Shape3& s, const Eigen::Array3d& c, double r, std::uint8_t label) {
  LabelVolume l(s, 0);
  for (std::int64_t i = 0; i < l.size(); ++i) {
    if ((unravel(s, i).cast<double>() - c).square().sum() <= r * r) l[i] = label;
  }
  return l;
}

}  // namespace

TEST_CASE("initial state is uniform and validated") {
  const WeightingState s = WeightingState::initial(4, 0.001);
  CHECK(s.V == std::vector<double>(4, 0.25));
  CHECK_THROWS_AS(WeightingState::initial(1), ConfigError);
  CHECK_THROWS_AS(WeightingState::initial(4, 1.0), ConfigError);
}

TEST_CASE("moving average follows the exponential update") {
  WeightingState s = WeightingState::initial(4, 0.5);
  const std::vector<double> f{1.0, 0.0, 0.0, 0.0};
  s = update_moving_average(s, f);
  CHECK(s.V[0] == doctest::Approx(0.625));
  CHECK(s.V[1] == doctest::Approx(0.125));
  const std::vector<double> wrong{1.0, 0.0};
  CHECK_THROWS_AS(update_moving_average(s, wrong), ShapeError);
}

TEST_CASE("class volumes count every label") {
  LabelVolume l(Shape3(4, 1, 1), 0);
  l[1] = 1;
  l[2] = 3;
  l[3] = 3;
  const auto f = class_volumes(l, 4);
  CHECK(f == std::vector<double>{0.25, 0.25, 0.0, 0.5});
  CHECK(class_volume(l, 3) == 0.5);
  l[0] = 4;
  CHECK_THROWS_AS(class_volumes(l, 4), RangeError);
}

TEST_CASE("class weights balance the moving averages") {
  WeightingState s{0.001, {0.7, 0.1, 0.15, 0.05}};
  const auto cw = class_weights(s);
  for (int c = 0; c < 4; ++c) {
    CHECK(cw[c] * s.V[c] == doctest::Approx(0.25).epsilon(1e-14));
  }
  s.V[2] = 0.0;
  CHECK_THROWS_AS(class_weights(s), DomainError);
}

TEST_CASE("patch weight uses the natural log of the foreground fraction") {
  CHECK(patch_weight_from_fraction(0.0) == 1.0);
  CHECK(patch_weight_from_fraction(1.0) == 1.0);
  CHECK(patch_weight_from_fraction(0.5) == doctest::Approx(1.0 + std::log(2.0)));
  CHECK(patch_weight(LabelVolume(Shape3(3, 3, 3), 0)) == 1.0);
}

TEST_CASE("squared distance transform matches exhaustive search") {
  Rng rng = make_rng(2, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape3 s = oracle::random_shape(rng, 9);
    const Mask m = oracle::random_mask(s, 0.05, rng);
    const auto want = oracle::min_squared_distance(m);
    const auto got = squared_distance_transform(m);
    bool any = false;
    for (auto v : m.data()) any |= v != 0;
    if (!any) continue;
    for (std::int64_t i = 0; i < m.size(); ++i) {
      REQUIRE(got[i] == want[i]);
    }
  }
}

TEST_CASE("dilation of a single voxel is a Euclidean ball") {
  Mask m(Shape3(11, 11, 11), 0);
  m(5, 5, 5) = 1;
  const Mask d = dilate(m, 2);
  std::int64_t n = 0;
  for (auto v : d.data()) n += v;
  // lattice points with x^2 + y^2 + z^2 <= 4
  CHECK(n == 33);
  CHECK(d(7, 5, 5) == 1);
  CHECK(d(6, 6, 6) == 1);
  CHECK(d(7, 6, 5) == 0);
  CHECK(dilate(m, 0) == m);
}

TEST_CASE("bands classify by distance to foreground") {
  LabelVolume l(Shape3(13, 1, 1), 0);
  l[0] = 2;
  const BandMap b = build_bands(l);
  CHECK(b[0] == Band::Foreground);
  CHECK(b[1] == Band::Inner);
  CHECK(b[2] == Band::Inner);
  CHECK(b[3] == Band::Red);
  CHECK(b[4] == Band::Red);
  CHECK(b[5] == Band::Outer);
  const BandMap empty = build_bands(LabelVolume(Shape3(3, 3, 3), 0));
  for (Band v : empty.data()) CHECK(v == Band::Outer);
}

TEST_CASE("background sampling splits between red and outer bands") {
  const LabelVolume l = ball(Shape3(24, 24, 24), {12, 12, 12}, 2.5, 1);
  const BandMap b = build_bands(l);
  std::int64_t fg = 0;
  for (auto v : l.data()) fg += v != 0;
  Rng rng = make_rng(2, 2);
  const auto s = sample_background(l, b, rng);
  REQUIRE(static_cast<std::int64_t>(s.size()) == fg);
  std::int64_t red = 0;
  for (auto i : s) {
    CHECK(b[i] != Band::Foreground);
    CHECK(b[i] != Band::Inner);
    red += b[i] == Band::Red;
  }
  CHECK(red == std::llround(0.2 * fg));
  CHECK(std::is_sorted(s.begin(), s.end()));

  Rng again = make_rng(2, 2);
  CHECK(sample_background(l, b, again) == s);
}

TEST_CASE("exhausted bands hand their shortfall to each other") {
  // foreground fills most of the patch, leaving far fewer outer voxels than requested
  LabelVolume l(Shape3(10, 10, 10), 1);
  for (int x = 0; x < 10; ++x) l(x, 0, 0) = 0;
  for (int x = 0; x < 10; ++x) l(x, 9, 9) = 0;
  const BandMap b = build_bands(l);
  Rng rng = make_rng(2, 3);
  const auto s = sample_background(l, b, rng);
  CHECK(s.empty());  // every background voxel is within distance 2 of foreground

  LabelVolume far(Shape3(40, 4, 4), 0);
  for (int x = 0; x < 3; ++x)
    for (int y = 0; y < 4; ++y)
      for (int z = 0; z < 4; ++z) far(x, y, z) = 1;
  const BandMap fb = build_bands(far);
  const auto fs = sample_background(far, fb, rng);
  CHECK(fs.size() == 48);  // 48 foreground voxels; 32 red voxels exceed the red quota of 10
}

TEST_CASE("foreground-free patches sample one percent of voxels") {
  const LabelVolume l(Shape3(20, 10, 10), 0);
  Rng rng = make_rng(2, 4);
  CHECK(sample_background(l, build_bands(l), rng).size() == 20);
  const LabelVolume tiny(Shape3(2, 2, 2), 0);
  CHECK(sample_background(tiny, build_bands(tiny), rng).size() == 1);
}

TEST_CASE("voxel weights combine patch and class weights") {
  const LabelVolume l = ball(Shape3(20, 20, 20), {10, 10, 10}, 2.0, 3);
  const WeightingState s{0.001, {0.9, 0.05, 0.03, 0.02}};
  const auto cw = class_weights(s);
  std::int64_t fg = 0;
  for (auto v : l.data()) fg += v != 0;
  const double pw = 1.0 - std::log(double(fg) / l.size());
  const BandMap b = build_bands(l);
  Rng rng = make_rng(2, 5);
  const auto samples = sample_background(l, b, rng);
  const WeightMap w = voxel_weight_map(l, s, samples, b);
  const double sampled = pw * (cw[1] + cw[2] + cw[3]) / 3.0;
  std::vector<std::uint8_t> is_sample(l.size(), 0);
  for (auto i : samples) is_sample[i] = 1;
  for (std::int64_t i = 0; i < l.size(); ++i) {
    double want;
    if (l[i] != 0) {
      want = pw * cw[l[i]];
    } else if (is_sample[i]) {
      want = sampled;
    } else if (b[i] == Band::Inner) {
      want = 0.0;
    } else {
      want = pw * cw[0];
    }
    REQUIRE(w[i] == doctest::Approx(want).epsilon(1e-6));
  }

  const WeightMap dw = dynamic_weight_map(l, s);
  for (std::int64_t i = 0; i < l.size(); ++i) {
    REQUIRE(dw[i] == doctest::Approx(pw * cw[l[i]]).epsilon(1e-6));
  }

  const std::vector<std::int64_t> bad{static_cast<std::int64_t>(l.index(10, 10, 10))};
  CHECK_THROWS_AS(voxel_weight_map(l, s, bad, b), IntegrityError);
}
