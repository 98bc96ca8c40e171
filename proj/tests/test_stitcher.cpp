#include "doctest.h"

#include "kidnet/rng.hpp"
#include "kidnet/stitcher.hpp"

using namespace kidnet;

namespace {

Volume random_volume(const Shape3& s, std::uint64_t seed) {
  Rng rng = make_rng(seed, 1);
  std::normal_distribution<float> g(0.0f, 1.0f);
  Volume v(s, 0.0f);
  for (float& x : v.data()) x = g(rng);
  return v;
}

}  // namespace

TEST_CASE("tile cores partition the volume") {
  for (const Point3& off : {Point3(0, 0, 0), Point3(3, 7, 11), Point3(-5, 20, 1)}) {
    const Shape3 s(23, 17, 9);
    const TilePlan plan = plan_tiles(s, 14, 3, off);
    Grid<int> hits(s, 0);
    for (const Tile& t : plan.tiles) {
      CHECK((t.input.shape() == 14).all());
      CHECK((t.input.lo == t.core.lo - 3).all());
      CHECK((t.core.shape() <= 8).all());
      CHECK(t.core.within(s));
      for (int z = t.core.lo.z(); z < t.core.hi.z(); ++z)
        for (int y = t.core.lo.y(); y < t.core.hi.y(); ++y)
          for (int x = t.core.lo.x(); x < t.core.hi.x(); ++x) ++hits(x, y, z);
    }
    for (int h : hits.data()) REQUIRE(h == 1);
  }
}

TEST_CASE("grid lines follow the offset") {
  const TilePlan plan = plan_tiles(Shape3(20, 1, 1), 10, 1, Point3(3, 0, 0));
  std::vector<int> starts;
  for (const Tile& t : plan.tiles) starts.push_back(t.core.lo.x());
  CHECK(starts == std::vector<int>{0, 3, 11, 19});
}

TEST_CASE("plans without room for a core are rejected") {
  CHECK_THROWS_AS(plan_tiles(Shape3(8, 8, 8), 8, 4), ConfigError);
  CHECK_THROWS_AS(plan_tiles(Shape3(8, 8, 8), 8, -1), ConfigError);
}

TEST_CASE("mirror padding repeats the edge voxel") {
  CHECK(mirror_index(-1, 4) == 0);
  CHECK(mirror_index(-2, 4) == 1);
  CHECK(mirror_index(4, 4) == 3);
  CHECK(mirror_index(5, 4) == 2);
  CHECK(mirror_index(8, 4) == 0);
  CHECK(mirror_index(-9, 4) == 0);
  CHECK(mirror_index(0, 1) == 0);
  CHECK(mirror_index(-3, 1) == 0);

  Volume v(Shape3(3, 1, 1), 0.0f);
  v[0] = 1;
  v[1] = 2;
  v[2] = 3;
  const Volume r = read_mirrored(v, Box{{-2, 0, 0}, {5, 1, 1}});
  CHECK(std::vector<float>(r.data().begin(), r.data().end()) == std::vector<float>{2, 1, 1, 2, 3, 3, 2});
}

TEST_CASE("halo alignment rounds up to the stride") {
  NetworkConfig c;
  c.levels = 3;
  CHECK(aligned_halo(c, 36) == 40);
  CHECK(aligned_halo(c, 40) == 40);
  CHECK(aligned_halo(c, 0) == 0);
}

TEST_CASE("stitched output equals one forward over the padded volume") {
  NetworkConfig c;
  c.levels = 1;
  c.base_channels = 2;
  c.patch_size = 8;
  const auto params = init_network<float>(c, 2);
  const Volume v = random_volume(Shape3(20, 14, 10), 3);
  const int halo = aligned_halo(c, receptive_halo(c));
  const Box padded{Point3::Constant(-halo), v.shape() + halo};
  const auto whole = forward_any(params, read_mirrored(v, padded));

  StitchOptions opt;
  opt.tile = 2 * halo + 4;
  opt.grid_offset = Point3(2, 0, 4);
  const Segmentation seg = segment_volume(params, v, opt);
  CHECK(seg.plan.tiles.size() > 8);
  double worst = 0.0;
  for (std::int64_t i = 0; i < seg.probs.voxels(); ++i) {
    const Point3 p = unravel(v.shape(), i) + halo;
    const auto j = linear_index(padded.shape(), p.x(), p.y(), p.z());
    worst = std::max(worst, double((seg.probs.probs.col(i) - whole.final.probs.col(j)).cwiseAbs().maxCoeff()));
  }
  CHECK(worst <= 1e-5);
  CHECK(seg.labels == argmax_labels(seg.probs));

  opt.threads = 3;
  const Segmentation threaded = segment_volume(params, v, opt);
  CHECK(threaded.probs.probs == seg.probs.probs);
}

TEST_CASE("tiles off the stride lattice are rejected") {
  NetworkConfig c;
  c.levels = 2;
  c.base_channels = 1;
  c.patch_size = 8;
  const auto params = init_network<float>(c, 2);
  const Volume v = random_volume(Shape3(12, 12, 12), 3);
  StitchOptions opt;
  opt.grid_offset = Point3(2, 0, 0);
  CHECK_THROWS_AS(segment_volume(params, v, opt), ConfigError);
  opt.grid_offset = Point3::Zero();
  opt.tile = 30;
  CHECK_THROWS_AS(segment_volume(params, v, opt), ConfigError);
}

TEST_CASE("default tile leaves room for a core") {
  NetworkConfig c;
  c.levels = 1;
  c.base_channels = 1;
  c.patch_size = 8;
  const auto params = init_network<float>(c, 2);
  const Segmentation seg = segment_volume(params, random_volume(Shape3(9, 9, 9), 1));
  CHECK(seg.plan.patch_size > 2 * seg.plan.halo);
  CHECK((seg.labels.shape() == Shape3(9, 9, 9)).all());
}
