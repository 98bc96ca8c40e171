// Multi-scale residual up-sampling segmentation network.
//
// Down-sampling path: level 0 applies a k^3 conv + ReLU to the input; each
// further level applies a stride-2 k^3 conv followed by a k^3 conv + ReLU.
// Channels double per level starting from base_channels.
//
// Up-sampling path: every level l owns an independent branch that climbs
// back to full resolution through l stages of (2^3 stride-2 transposed conv,
// then a residual k^3 conv + ReLU), ends in a 1^3 conv to n classes and a
// softmax. The final map is the mean of the L+1 branch probability maps.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kidnet/conv.hpp"
#include "kidnet/volume.hpp"

namespace kidnet {

struct NetworkConfig {
  int levels = 3;
  int base_channels = 8;
  int kernel_size = 3;
  int classes = kDefaultClassCount;
  int patch_size = 32;
  // input normalization: x' = (x - input_offset) / input_scale
  double input_offset = 0.0;
  double input_scale = 1.0;

  int stride() const { return 1 << levels; }
  int channels_at(int level) const { return base_channels << level; }
  bool operator==(const NetworkConfig&) const = default;
};

/// Throws ConfigError unless the config is usable.
void validate(const NetworkConfig& config);

enum class LayerKind { Conv, Down, Up, Head };

struct LayerSpec {
  std::string id;
  LayerKind kind;
  int in_channels;
  int out_channels;
  int kernel;

  std::int64_t weight_rows() const;
  std::int64_t weight_cols() const;
  std::int64_t parameter_count() const { return weight_rows() * weight_cols() + out_channels; }
};

std::vector<LayerSpec> layer_specs(const NetworkConfig& config);

template <typename S>
struct LayerParams {
  Mat<S> weight;
  Vec<S> bias;
};

/// Per-layer tensors in layer_specs() order; also used for gradients.
template <typename S>
struct ParamSet {
  std::vector<LayerParams<S>> layers;

  std::int64_t parameter_count() const;
  void set_zero();
  ParamSet& operator+=(const ParamSet& o);
  ParamSet& operator*=(S s);
  /// Flat view helpers for gradient checks and optimizers.
  S& flat(std::int64_t i);
  S flat(std::int64_t i) const;
  bool operator==(const ParamSet& o) const;
};

template <typename S>
ParamSet<S> zeros_like(const ParamSet<S>& p);

template <typename S>
struct NetworkParams {
  NetworkConfig config;
  ParamSet<S> tensors;
  std::uint64_t seed = 0;
};

template <typename S>
NetworkParams<S> init_network(const NetworkConfig& config, std::uint64_t seed);

template <typename To, typename From>
NetworkParams<To> cast_params(const NetworkParams<From>& p);

template <typename S>
struct BranchTrace {
  std::vector<FeatureMap<S>> up;      // transposed-conv outputs, coarse to fine
  std::vector<FeatureMap<S>> act;     // ReLU(conv(up)) per stage
  std::vector<FeatureMap<S>> hidden;  // up + act per stage
  Mat<S> probs;                       // classes x voxels
};

template <typename S>
struct ForwardTrace {
  FeatureMap<S> input;                  // normalized input
  std::vector<FeatureMap<S>> down;      // stride-2 conv outputs, index 1..L (0 unused)
  std::vector<FeatureMap<S>> features;  // encoder features per level
  std::vector<BranchTrace<S>> branches;
  ProbMapT<S> final;
};

/// Forward pass on a patch of exactly config.patch_size^3 voxels.
template <typename S>
ForwardTrace<S> forward(const NetworkParams<S>& params, const Volume& patch);

/// Forward pass on any extent divisible by 2^levels (fully convolutional use).
template <typename S>
ForwardTrace<S> forward_any(const NetworkParams<S>& params, const Volume& volume);

template <typename S>
struct Gradients {
  ParamSet<S> tensors;
  double loss = 0.0;
};

// Which maps the loss is applied to. Final: the averaged map only.
// Branches: the mean over branches of each branch map's loss, an upper bound
// on the final-map loss (the log of a mean is at least the mean of the logs).
// Under Final, a branch whose softmax saturates on the wrong class receives
// a gradient scaled by its own vanishing probability and cannot recover.
enum class Supervision { Final, Branches };

std::string to_string(Supervision s);
Supervision supervision_from_string(const std::string& s);

/// Weighted cross-entropy and its gradient.
/// loss(map) = sum_v w_v * -ln p(v, label_v) / sum_v w_v
template <typename S>
Gradients<S> backward(const NetworkParams<S>& params, const ForwardTrace<S>& trace,
                      const LabelVolume& labels, const Grid<float>& weights,
                      Supervision mode = Supervision::Final);

template <typename S>
double weighted_cross_entropy(const ProbMapT<S>& probs, const LabelVolume& labels,
                              const Grid<float>& weights);

/// Geometry of one layer in a linear chain, for receptive-field arithmetic.
struct LayerGeometry {
  int kernel = 3;
  int stride = 1;
  bool transposed = false;  // transposed layers use kernel == stride
};

/// Receptive half-width of a linear chain of layers, maximized over the
/// alignment phases of the output grid.
int receptive_halo(const std::vector<LayerGeometry>& chain);

/// Receptive half-width of the full network in input voxels.
int receptive_halo(const NetworkConfig& config);

}  // namespace kidnet
