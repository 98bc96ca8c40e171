#include "kidnet/stitcher.hpp"

#include <algorithm>

#include "kidnet/parallel.hpp"

namespace kidnet {

namespace {

std::vector<std::pair<int, int>> axis_blocks(int n, int core, int offset) {
  std::vector<std::pair<int, int>> blocks;
  int start = 0;
  int next = offset % core;
  if (next <= 0) {
    next += core;
  }
  while (start < n) {
    const int end = std::min(n, next);
    blocks.emplace_back(start, end);
    start = end;
    next += core;
  }
  return blocks;
}

int round_up(int v, int m) { return (v + m - 1) / m * m; }

}  // namespace

TilePlan plan_tiles(const Shape3& shape, int patch_size, int halo, const Point3& grid_offset) {
  if (halo < 0) {
    throw ConfigError("halo must be non-negative");
  }
  if (patch_size <= 2 * halo) {
    throw ConfigError("tile size " + std::to_string(patch_size) + " leaves no core for halo " +
                      std::to_string(halo) + "; use a larger tile or a smaller halo");
  }
  if ((shape <= 0).any()) {
    throw ShapeError("volume shape must be positive");
  }
  const int core = patch_size - 2 * halo;
  TilePlan plan;
  plan.volume_shape = shape;
  plan.patch_size = patch_size;
  plan.halo = halo;
  const auto bx = axis_blocks(shape.x(), core, grid_offset.x());
  const auto by = axis_blocks(shape.y(), core, grid_offset.y());
  const auto bz = axis_blocks(shape.z(), core, grid_offset.z());
  for (const auto& [z0, z1] : bz) {
    for (const auto& [y0, y1] : by) {
      for (const auto& [x0, x1] : bx) {
        Tile t;
        t.core = {{x0, y0, z0}, {x1, y1, z1}};
        t.input.lo = t.core.lo - halo;
        t.input.hi = t.input.lo + patch_size;
        plan.tiles.push_back(t);
      }
    }
  }
  return plan;
}

int mirror_index(int i, int n) {
  const int period = 2 * n;
  int r = i % period;
  if (r < 0) {
    r += period;
  }
  return r < n ? r : period - 1 - r;
}

Volume read_mirrored(const Volume& volume, const Box& box) {
  const Shape3 s = volume.shape();
  Volume out(box.shape(), 0.0f, volume.spacing());
  std::vector<int> xs(box.shape().x());
  for (int x = 0; x < box.shape().x(); ++x) {
    xs[x] = mirror_index(box.lo.x() + x, s.x());
  }
  std::int64_t o = 0;
  for (int z = box.lo.z(); z < box.hi.z(); ++z) {
    const int mz = mirror_index(z, s.z());
    for (int y = box.lo.y(); y < box.hi.y(); ++y) {
      const int my = mirror_index(y, s.y());
      const float* row = &volume(0, my, mz);
      for (int x : xs) {
        out[o++] = row[x];
      }
    }
  }
  return out;
}

int aligned_halo(const NetworkConfig& config, int halo) {
  return round_up(std::max(0, halo), config.stride());
}

Segmentation segment_volume(const NetworkParams<float>& params, const Volume& volume,
                            const StitchOptions& options) {
  const NetworkConfig& c = params.config;
  validate(c);
  if (params.tensors.layers.size() != layer_specs(c).size()) {
    throw ConfigError("checkpoint parameters do not match their network config");
  }
  const int stride = c.stride();
  if ((options.grid_offset.unaryExpr([&](int v) { return v % stride; }) != 0).any()) {
    throw ConfigError("tile grid offset must be a multiple of 2^levels = " + std::to_string(stride));
  }
  const int halo = aligned_halo(c, options.halo < 0 ? receptive_halo(c) : options.halo);
  int tile = options.tile;
  if (tile == 0) {
    tile = c.patch_size > 2 * halo ? c.patch_size : 2 * halo + c.patch_size;
  }
  if (tile % stride != 0) {
    throw ConfigError("tile size " + std::to_string(tile) + " must be a multiple of 2^levels = " +
                      std::to_string(stride));
  }

  Segmentation seg;
  seg.plan = plan_tiles(volume.shape(), tile, halo, options.grid_offset);
  seg.probs.shape = volume.shape();
  seg.probs.probs.resize(c.classes, voxel_count(volume.shape()));

  const Shape3 s = volume.shape();
  auto run_tile = [&](const Tile& t) {
    const Volume in = read_mirrored(volume, t.input);
    const ForwardTrace<float> trace = forward_any(params, in);
    const Shape3 ts = t.input.shape();
    for (int z = t.core.lo.z(); z < t.core.hi.z(); ++z) {
      for (int y = t.core.lo.y(); y < t.core.hi.y(); ++y) {
        const std::int64_t src = linear_index(ts, t.core.lo.x() - t.input.lo.x(), y - t.input.lo.y(),
                                              z - t.input.lo.z());
        const std::int64_t dst = linear_index(s, t.core.lo.x(), y, z);
        const int len = t.core.hi.x() - t.core.lo.x();
        for (int k = 0; k < c.classes; ++k) {
          std::copy_n(&trace.final.probs(k, src), len, &seg.probs.probs(k, dst));
        }
      }
    }
  };

  parallel_for(options.threads, seg.plan.tiles.size(), [&](std::size_t i) { run_tile(seg.plan.tiles[i]); });
  seg.labels = argmax_labels(seg.probs);
  seg.labels.set_spacing(volume.spacing());
  return seg;
}

}  // namespace kidnet
