// Tiled whole-volume inference. Each tile reads a mirror-padded input box
// and contributes only its core (the input box shrunk by the halo); cores
// partition the volume, so tiles can run in any order or in parallel.

#pragma once

#include <vector>

#include "kidnet/network.hpp"

namespace kidnet {

struct Tile {
  Box input;  // may extend past the volume; read with mirror padding
  Box core;   // subset of input, inside the volume
};

struct TilePlan {
  Shape3 volume_shape = Shape3::Zero();
  int patch_size = 0;
  int halo = 0;
  std::vector<Tile> tiles;
};

/// Cores of (patch_size - 2 halo) voxels per axis on a grid whose lines sit at
/// grid_offset + k * core; blocks at either end shrink to fit. Every input box
/// spans exactly patch_size voxels starting at core.lo - halo.
TilePlan plan_tiles(const Shape3& volume_shape, int patch_size, int halo,
                    const Point3& grid_offset = Point3::Zero());

/// Symmetric (edge-repeating) reflection of `i` into [0, n).
int mirror_index(int i, int n);

/// Reads `box` from `volume`, reflecting coordinates that fall outside.
Volume read_mirrored(const Volume& volume, const Box& box);

struct StitchOptions {
  int halo = -1;  // < 0: receptive_halo(config)
  int tile = 0;   // 0: config.patch_size when it leaves room for a core
  Point3 grid_offset = Point3::Zero();
  int threads = 1;
};

struct Segmentation {
  ProbMap probs;
  LabelVolume labels;
  TilePlan plan;
};

/// Halo actually used: the requested halo rounded up to a multiple of 2^levels,
/// which keeps every tile on the network's stride lattice.
int aligned_halo(const NetworkConfig& config, int halo);

Segmentation segment_volume(const NetworkParams<float>& params, const Volume& volume,
                            const StitchOptions& options = {});

}  // namespace kidnet
