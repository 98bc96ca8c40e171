// Dynamic voxel weighting and band-based background sampling.
//
// Each training patch updates an exponential moving average V_c of the
// per-class volume fraction. Class weights are CW_c = 1 / (n V_c), so that
// CW_c * V_c = 1/n for every class. A patch weight PW = 1 - ln(foreground
// fraction) (1 for background-only patches) favours patches with thin
// vessels. Voxel weights are PW * CW_c.
//
// Background sampling builds two shells around the foreground by Euclidean
// dilation with radii 2 and 4. Shell voxels closer than 2 are ignored; a
// foreground-sized set of background voxels is drawn, 20% from the outer
// (red) shell and 80% from beyond it, and given the mean foreground class
// weight.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kidnet/rng.hpp"
#include "kidnet/volume.hpp"

namespace kidnet {

struct WeightingState {
  double alpha = 0.001;
  std::vector<double> V;  // per-class moving-average volume fraction

  int classes() const { return static_cast<int>(V.size()); }

  static WeightingState initial(int classes = kDefaultClassCount, double alpha = 0.001);
};

using WeightMap = Grid<float>;

enum class Band : std::uint8_t { Foreground = 0, Inner = 1, Red = 2, Outer = 3 };
using BandMap = Grid<Band>;

inline constexpr int kInnerRadius = 2;
inline constexpr int kRedRadius = 4;
inline constexpr double kRedShare = 0.2;
inline constexpr double kForegroundFreeShare = 0.01;

double class_volume(const LabelVolume& labels, int c);

/// All n class fractions of a patch in one pass.
std::vector<double> class_volumes(const LabelVolume& labels, int classes);

WeightingState update_moving_average(const WeightingState& state, const LabelVolume& labels);
WeightingState update_moving_average(const WeightingState& state,
                                     std::span<const double> fractions);

std::vector<double> class_weights(const WeightingState& state);

double patch_weight(const LabelVolume& labels);
double patch_weight_from_fraction(double foreground_fraction);

/// Squared Euclidean distance (in voxels) to the nearest set voxel; a large
/// sentinel where the mask is empty.
Grid<std::int32_t> squared_distance_transform(const Mask& mask);

/// Ball dilation: a voxel is set iff a set voxel lies within `radius`.
Mask dilate(const Mask& mask, int radius);

BandMap build_bands(const LabelVolume& labels);

/// Sorted linear indices of sampled background voxels.
std::vector<std::int64_t> sample_background(const LabelVolume& labels, const BandMap& bands,
                                            Rng& rng);

WeightMap voxel_weight_map(const LabelVolume& labels, const WeightingState& state,
                           std::span<const std::int64_t> samples);
WeightMap voxel_weight_map(const LabelVolume& labels, const WeightingState& state,
                           std::span<const std::int64_t> samples, const BandMap& bands);

/// Weighting without sampling: every voxel of class c gets PW * CW_c.
WeightMap dynamic_weight_map(const LabelVolume& labels, const WeightingState& state);

}  // namespace kidnet
