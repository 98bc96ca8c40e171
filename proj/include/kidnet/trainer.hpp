// Patch-stream training with dynamic weighting, optional background
// sampling and Adam updates.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kidnet/network.hpp"
#include "kidnet/phantom.hpp"
#include "kidnet/weighting.hpp"

namespace kidnet {

enum class Schema {
  Uniform,          // every voxel weighs 1
  Dynamic,          // PW * CW_c for every voxel
  DynamicSampling,  // dynamic weights plus band-based background sampling
};

std::string to_string(Schema s);
Schema schema_from_string(const std::string& s);

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int batch_size = 4;
  std::int64_t max_steps = 1000;
  Schema schema = Schema::DynamicSampling;
  Supervision supervision = Supervision::Branches;
  bool flip = true;
  bool jitter = true;
  double jitter_share = 0.02;  // jitter sigma as a share of the dataset intensity range
  bool normalize_input = true; // set input_offset/scale from dataset mean/std
  double alpha = 0.001;
  std::uint64_t seed = 0;
  int log_every = 50;
  int checkpoint_every = 0;  // 0 = only at the end
  int threads = 1;
};

/// Throws ConfigError unless the config is usable.
void validate(const TrainConfig& config);

struct OptimizerState {
  ParamSet<float> m;
  ParamSet<float> v;
  std::int64_t step = 0;

  static OptimizerState zeros_for(const ParamSet<float>& params);
};

struct AdamResult {
  ParamSet<float> params;
  OptimizerState state;
};

/// One bias-corrected Adam update. Throws NonFiniteError naming the first
/// layer with a non-finite gradient.
AdamResult adam_step(const ParamSet<float>& params, const ParamSet<float>& grads,
                     const OptimizerState& state, const TrainConfig& config,
                     const std::vector<LayerSpec>& specs);

/// In-place variant used by the training loop.
void adam_update(ParamSet<float>& params, const ParamSet<float>& grads, OptimizerState& state,
                 const TrainConfig& config, const std::vector<LayerSpec>& specs);

/// Flip along each axis with probability 1/2 and add one Gaussian offset.
void augment(Volume& image, LabelVolume& labels, bool flip, double jitter_sigma, Rng& rng);

/// Everything the loss sees for one patch, exposed to observers.
struct PatchEvent {
  std::int64_t step = 0;
  std::size_t record = 0;
  const LabelVolume* labels = nullptr;
  const WeightMap* weights = nullptr;
  const BandMap* bands = nullptr;  // null unless sampling is enabled
  std::span<const std::int64_t> samples;
  const WeightingState* state = nullptr;  // after this patch's update
};

struct StepLog {
  std::int64_t step = 0;
  double loss = 0.0;  // mean over non-degenerate patches of the batch
  int used_patches = 0;
  std::vector<double> V;
  std::vector<double> CW;
};

struct TrainHooks {
  std::function<void(const PatchEvent&)> on_patch;
  std::function<void(const StepLog&, const NetworkParams<float>&)> on_step;
  std::function<void(std::int64_t step, const NetworkParams<float>&)> on_checkpoint;
};

struct TrainResult {
  NetworkParams<float> params;
  OptimizerState optimizer;
  WeightingState weighting;
  std::vector<StepLog> log;
  std::int64_t skipped_patches = 0;
};

/// Trains from scratch. Requires at least one foreground and one
/// background-only patch. Deterministic for a fixed config regardless of
/// thread count.
TrainResult train(const std::vector<PatchRecord>& dataset, NetworkConfig net,
                  const TrainConfig& config, const TrainHooks& hooks = {});

/// Dataset mean and standard deviation over all patch voxels.
std::pair<double, double> intensity_moments(const std::vector<PatchRecord>& dataset);

}  // namespace kidnet
