#include "kidnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "kidnet/parallel.hpp"

namespace kidnet {

std::string to_string(Schema s) {
  switch (s) {
    case Schema::Uniform:
      return "none";
    case Schema::Dynamic:
      return "dw";
    case Schema::DynamicSampling:
      return "dw+rs";
  }
  return "unknown";
}

Schema schema_from_string(const std::string& s) {
  if (s == "none") return Schema::Uniform;
  if (s == "dw") return Schema::Dynamic;
  if (s == "dw+rs") return Schema::DynamicSampling;
  throw ConfigError("unknown schema '" + s + "' (expected none, dw or dw+rs)");
}

void validate(const TrainConfig& c) {
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) {
    throw ConfigError("learning_rate must be positive");
  }
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw ConfigError("beta1 and beta2 must lie in [0, 1)");
  }
  if (!(c.epsilon > 0.0)) {
    throw ConfigError("epsilon must be positive");
  }
  if (c.batch_size < 1) {
    throw ConfigError("batch_size must be at least 1");
  }
  if (c.max_steps < 0) {
    throw ConfigError("max_steps must be non-negative");
  }
  if (!(c.alpha > 0.0 && c.alpha <= 1.0)) {
    throw ConfigError("alpha must lie in (0, 1]");
  }
  if (c.jitter_share < 0.0 || c.log_every < 0 || c.checkpoint_every < 0 || c.threads < 0) {
    throw ConfigError("jitter_share, log_every, checkpoint_every and threads must be non-negative");
  }
}

OptimizerState OptimizerState::zeros_for(const ParamSet<float>& params) {
  return {zeros_like(params), zeros_like(params), 0};
}

void adam_update(ParamSet<float>& params, const ParamSet<float>& grads, OptimizerState& state,
                 const TrainConfig& c, const std::vector<LayerSpec>& specs) {
  if (grads.layers.size() != params.layers.size() || state.m.layers.size() != params.layers.size()) {
    throw ShapeError("optimizer: parameter, gradient and moment layer counts differ");
  }
  for (std::size_t i = 0; i < grads.layers.size(); ++i) {
    const auto& g = grads.layers[i];
    if (!g.weight.allFinite() || !g.bias.allFinite()) {
      const std::string id = i < specs.size() ? specs[i].id : std::to_string(i);
      throw NonFiniteError("non-finite gradient in layer " + id);
    }
  }
  state.step += 1;
  const double b1 = c.beta1, b2 = c.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const float lr_t = static_cast<float>(c.learning_rate / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(c.epsilon);
  const float fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);

  auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
    m = fb1 * m + (1.0f - fb1) * g;
    v = fb2 * v + (1.0f - fb2) * g.cwiseProduct(g);
    p.array() -= lr_t * m.array() / ((v.array().sqrt() * inv_sqrt_bc2) + eps);
  };
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    update(params.layers[i].weight, grads.layers[i].weight, state.m.layers[i].weight,
           state.v.layers[i].weight);
    update(params.layers[i].bias, grads.layers[i].bias, state.m.layers[i].bias, state.v.layers[i].bias);
  }
}

AdamResult adam_step(const ParamSet<float>& params, const ParamSet<float>& grads,
                     const OptimizerState& state, const TrainConfig& config,
                     const std::vector<LayerSpec>& specs) {
  AdamResult r{params, state};
  adam_update(r.params, grads, r.state, config, specs);
  return r;
}

namespace {

template <typename T>
void flip_axis(Grid<T>& g, int axis) {
  const Shape3 s = g.shape();
  for (int z = 0; z < s.z(); ++z) {
    for (int y = 0; y < s.y(); ++y) {
      for (int x = 0; x < s.x(); ++x) {
        Point3 p(x, y, z);
        Point3 q = p;
        q[axis] = s[axis] - 1 - p[axis];
        if (p[axis] < q[axis]) {
          std::swap(g(p), g(q));
        }
      }
    }
  }
}

}  // namespace

void augment(Volume& image, LabelVolume& labels, bool flip, double jitter_sigma, Rng& rng) {
  if (flip) {
    std::bernoulli_distribution coin(0.5);
    for (int axis = 0; axis < 3; ++axis) {
      if (coin(rng)) {
        flip_axis(image, axis);
        flip_axis(labels, axis);
      }
    }
  }
  if (jitter_sigma > 0.0) {
    std::normal_distribution<double> gauss(0.0, jitter_sigma);
    const float offset = static_cast<float>(gauss(rng));
    for (float& v : image.data()) {
      v += offset;
    }
  }
}

std::pair<double, double> intensity_moments(const std::vector<PatchRecord>& dataset) {
  double sum = 0.0, sq = 0.0;
  std::int64_t n = 0;
  for (const auto& r : dataset) {
    for (float v : r.image.data()) {
      sum += v;
      sq += static_cast<double>(v) * v;
    }
    n += r.image.size();
  }
  if (n == 0) {
    return {0.0, 1.0};
  }
  const double mean = sum / n;
  return {mean, std::sqrt(std::max(0.0, sq / n - mean * mean))};
}

namespace {

struct PreparedPatch {
  Volume image;
  LabelVolume labels;
  WeightMap weights;
};

struct PatchOutcome {
  std::optional<Gradients<float>> grads;
};

}  // namespace

TrainResult train(const std::vector<PatchRecord>& dataset, NetworkConfig net,
                  const TrainConfig& config, const TrainHooks& hooks) {
  validate(config);
  validate(net);
  if (dataset.empty()) {
    throw ConfigError("training dataset is empty");
  }
  bool any_foreground = false, any_background_only = false;
  const Shape3 patch_shape = Shape3::Constant(net.patch_size);
  for (const auto& r : dataset) {
    if ((r.image.shape() != patch_shape).any() || (r.labels.shape() != patch_shape).any()) {
      throw ShapeError("patch of shape " + to_string(r.image.shape()) + " does not match patch_size " +
                       std::to_string(net.patch_size));
    }
    const bool fg = std::any_of(r.labels.data().begin(), r.labels.data().end(),
                                [](std::uint8_t v) { return v != 0; });
    any_foreground |= fg;
    any_background_only |= !fg;
    for (std::uint8_t v : r.labels.data()) {
      if (v >= net.classes) {
        throw RangeError("label " + std::to_string(v) + " exceeds class count " +
                         std::to_string(net.classes));
      }
    }
  }
  if (!any_foreground || !any_background_only) {
    throw ConfigError("training needs at least one foreground patch and one background-only patch");
  }

  float lo = std::numeric_limits<float>::max(), hi = std::numeric_limits<float>::lowest();
  for (const auto& r : dataset) {
    const auto [mn, mx] = std::minmax_element(r.image.data().begin(), r.image.data().end());
    lo = std::min(lo, *mn);
    hi = std::max(hi, *mx);
  }
  if (config.normalize_input) {
    const auto [mean, sd] = intensity_moments(dataset);
    net.input_offset = mean;
    net.input_scale = sd > 0.0 ? sd : 1.0;
  }
  const double jitter_sigma = config.jitter ? config.jitter_share * (hi - lo) : 0.0;

  TrainResult result;
  result.params = init_network<float>(net, config.seed);
  result.optimizer = OptimizerState::zeros_for(result.params.tensors);
  result.weighting = WeightingState::initial(net.classes, config.alpha);
  const auto specs = layer_specs(net);

  Rng shuffle_rng = make_rng(config.seed, streams::kTrainShuffle);
  Rng augment_rng = make_rng(config.seed, streams::kTrainAugment);
  Rng sampling_rng = make_rng(config.seed, streams::kTrainSampling);

  std::vector<std::size_t> order(dataset.size());
  std::size_t cursor = order.size();
  auto next_record = [&]() {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      cursor = 0;
    }
    return order[cursor++];
  };

  const int B = config.batch_size;
  std::vector<PreparedPatch> batch(B);
  std::vector<PatchOutcome> outcomes(B);
  for (std::int64_t step = 1; step <= config.max_steps; ++step) {
    for (int b = 0; b < B; ++b) {
      const std::size_t rec = next_record();
      PreparedPatch& p = batch[b];
      p.image = dataset[rec].image;
      p.labels = dataset[rec].labels;
      augment(p.image, p.labels, config.flip, jitter_sigma, augment_rng);
      result.weighting = update_moving_average(result.weighting, p.labels);

      std::vector<std::int64_t> samples;
      std::optional<BandMap> bands;
      switch (config.schema) {
        case Schema::Uniform:
          p.weights = WeightMap(p.labels.shape(), 1.0f, p.labels.spacing());
          break;
        case Schema::Dynamic:
          p.weights = dynamic_weight_map(p.labels, result.weighting);
          break;
        case Schema::DynamicSampling:
          bands = build_bands(p.labels);
          samples = sample_background(p.labels, *bands, sampling_rng);
          p.weights = voxel_weight_map(p.labels, result.weighting, samples, *bands);
          break;
      }
      if (hooks.on_patch) {
        PatchEvent ev;
        ev.step = step;
        ev.record = rec;
        ev.labels = &p.labels;
        ev.weights = &p.weights;
        ev.bands = bands ? &*bands : nullptr;
        ev.samples = samples;
        ev.state = &result.weighting;
        hooks.on_patch(ev);
      }
    }

    parallel_for(config.threads, static_cast<std::size_t>(B), [&](std::size_t b) {
      const ForwardTrace<float> trace = forward(result.params, batch[b].image);
      try {
        outcomes[b].grads = backward(result.params, trace, batch[b].labels, batch[b].weights,
                                     config.supervision);
      } catch (const DegenerateBatchError&) {
        outcomes[b].grads.reset();
      }
    });

    StepLog entry;
    entry.step = step;
    ParamSet<float> total = zeros_like(result.params.tensors);
    double loss_sum = 0.0;
    for (int b = 0; b < B; ++b) {
      if (!outcomes[b].grads) {
        ++result.skipped_patches;
        continue;
      }
      total += outcomes[b].grads->tensors;
      loss_sum += outcomes[b].grads->loss;
      ++entry.used_patches;
    }
    if (entry.used_patches > 0) {
      total *= 1.0f / static_cast<float>(entry.used_patches);
      adam_update(result.params.tensors, total, result.optimizer, config, specs);
      entry.loss = loss_sum / entry.used_patches;
    } else {
      entry.loss = std::numeric_limits<double>::quiet_NaN();
    }
    entry.V = result.weighting.V;
    entry.CW = class_weights(result.weighting);
    if (hooks.on_step) {
      hooks.on_step(entry, result.params);
    }
    result.log.push_back(std::move(entry));
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && hooks.on_checkpoint) {
      hooks.on_checkpoint(step, result.params);
    }
  }
  if (hooks.on_checkpoint) {
    hooks.on_checkpoint(config.max_steps, result.params);
  }
  return result;
}

}  // namespace kidnet
