#include "kidnet/weighting.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace kidnet {

namespace {

constexpr std::int32_t kFar = std::numeric_limits<std::int32_t>::max() / 4;

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) over one line.
// `f` holds squared distances so far, kFar for "no site".
void squared_edt_line(const std::int32_t* f, int n, std::int32_t* out, std::vector<int>& v,
                      std::vector<double>& z) {
  v.resize(static_cast<std::size_t>(n));
  z.resize(static_cast<std::size_t>(n) + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] >= kFar) {
      continue;
    }
    double s = -std::numeric_limits<double>::infinity();
    while (k >= 0) {
      const int p = v[k];
      s = (static_cast<double>(f[q]) + double(q) * q - (static_cast<double>(f[p]) + double(p) * p)) /
          (2.0 * (q - p));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -std::numeric_limits<double>::infinity() : s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  if (k < 0) {
    std::fill(out, out + n, kFar);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) {
      ++j;
    }
    const std::int64_t d = std::int64_t{q - v[j]} * (q - v[j]) + f[v[j]];
    out[q] = static_cast<std::int32_t>(std::min<std::int64_t>(d, kFar));
  }
}

}  // namespace

WeightingState WeightingState::initial(int classes, double alpha) {
  if (classes < 2) {
    throw ConfigError("weighting needs at least two classes");
  }
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw ConfigError("moving-average rate must lie in [0, 1)");
  }
  return WeightingState{alpha, std::vector<double>(static_cast<std::size_t>(classes), 1.0 / classes)};
}

std::vector<double> class_volumes(const LabelVolume& labels, int classes) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(classes), 0);
  for (std::uint8_t l : labels.data()) {
    if (l >= classes) {
      throw RangeError("label " + std::to_string(l) + " exceeds class count " +
                       std::to_string(classes));
    }
    ++counts[l];
  }
  std::vector<double> out(counts.size());
  const double size = static_cast<double>(labels.size());
  for (std::size_t c = 0; c < counts.size(); ++c) {
    out[c] = static_cast<double>(counts[c]) / size;
  }
  return out;
}

double class_volume(const LabelVolume& labels, int c) {
  const auto hits = std::count(labels.data().begin(), labels.data().end(), static_cast<std::uint8_t>(c));
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

WeightingState update_moving_average(const WeightingState& state,
                                     std::span<const double> fractions) {
  if (static_cast<int>(fractions.size()) != state.classes()) {
    throw ShapeError("fraction vector does not match class count");
  }
  WeightingState next = state;
  for (std::size_t c = 0; c < next.V.size(); ++c) {
    next.V[c] = state.V[c] * (1.0 - state.alpha) + fractions[c] * state.alpha;
  }
  return next;
}

WeightingState update_moving_average(const WeightingState& state, const LabelVolume& labels) {
  const std::vector<double> f = class_volumes(labels, state.classes());
  return update_moving_average(state, f);
}

std::vector<double> class_weights(const WeightingState& state) {
  const double n = state.classes();
  std::vector<double> cw(state.V.size());
  for (std::size_t c = 0; c < cw.size(); ++c) {
    if (!(state.V[c] > 0.0)) {
      std::ostringstream os;
      os << "class " << c << " has zero moving-average volume";
      throw DomainError(os.str());
    }
    cw[c] = 1.0 / (n * state.V[c]);
  }
  return cw;
}

double patch_weight_from_fraction(double foreground_fraction) {
  if (foreground_fraction <= 0.0) {
    return 1.0;
  }
  return 1.0 - std::log(foreground_fraction);
}

double patch_weight(const LabelVolume& labels) {
  const auto fg = std::count_if(labels.data().begin(), labels.data().end(),
                                [](std::uint8_t l) { return l != 0; });
  return patch_weight_from_fraction(static_cast<double>(fg) / static_cast<double>(labels.size()));
}

Grid<std::int32_t> squared_distance_transform(const Mask& mask) {
  const Shape3 s = mask.shape();
  Grid<std::int32_t> d(s, kFar, mask.spacing());
  for (std::int64_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      d[i] = 0;
    }
  }
  const int longest = s.maxCoeff();
  std::vector<std::int32_t> in(static_cast<std::size_t>(longest)), out(in.size());
  std::vector<int> v;
  std::vector<double> z;

  for (int axis = 0; axis < 3; ++axis) {
    const int n = s[axis];
    const int a1 = (axis + 1) % 3;
    const int a2 = (axis + 2) % 3;
    Point3 p;
    for (int j = 0; j < s[a2]; ++j) {
      for (int i = 0; i < s[a1]; ++i) {
        p[a1] = i;
        p[a2] = j;
        for (int q = 0; q < n; ++q) {
          p[axis] = q;
          in[q] = d(p);
        }
        squared_edt_line(in.data(), n, out.data(), v, z);
        for (int q = 0; q < n; ++q) {
          p[axis] = q;
          d(p) = out[q];
        }
      }
    }
  }
  return d;
}

Mask dilate(const Mask& mask, int radius) {
  if (radius < 0) {
    throw RangeError("dilation radius must be non-negative");
  }
  const Grid<std::int32_t> d = squared_distance_transform(mask);
  const std::int32_t r2 = radius * radius;
  Mask out(mask.shape(), 0, mask.spacing());
  for (std::int64_t i = 0; i < mask.size(); ++i) {
    out[i] = d[i] <= r2 ? 1 : 0;
  }
  return out;
}

BandMap build_bands(const LabelVolume& labels) {
  const Grid<std::int32_t> d = squared_distance_transform(foreground_mask(labels));
  BandMap bands(labels.shape(), Band::Outer, labels.spacing());
  constexpr std::int32_t inner2 = kInnerRadius * kInnerRadius;
  constexpr std::int32_t red2 = kRedRadius * kRedRadius;
  for (std::int64_t i = 0; i < labels.size(); ++i) {
    const std::int32_t di = d[i];
    bands[i] = di == 0 ? Band::Foreground : di <= inner2 ? Band::Inner : di <= red2 ? Band::Red : Band::Outer;
  }
  return bands;
}

namespace {

// Moves `k` uniformly chosen elements of `pool` to its front (partial Fisher-Yates).
void choose_front(std::vector<std::int64_t>& pool, std::size_t k, Rng& rng) {
  k = std::min(k, pool.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
}

}  // namespace

std::vector<std::int64_t> sample_background(const LabelVolume& labels, const BandMap& bands,
                                            Rng& rng) {
  if ((labels.shape() != bands.shape()).any()) {
    throw ShapeError("band map does not match label patch");
  }
  std::vector<std::int64_t> red, outer;
  std::int64_t foreground = 0;
  for (std::int64_t i = 0; i < bands.size(); ++i) {
    switch (bands[i]) {
      case Band::Foreground: ++foreground; break;
      case Band::Red: red.push_back(i); break;
      case Band::Outer: outer.push_back(i); break;
      case Band::Inner: break;
    }
  }

  std::vector<std::int64_t> picked;
  if (foreground == 0) {
    const auto quota = std::max<std::int64_t>(
        1, static_cast<std::int64_t>(std::floor(kForegroundFreeShare * static_cast<double>(labels.size()))));
    std::vector<std::int64_t> all(static_cast<std::size_t>(labels.size()));
    std::iota(all.begin(), all.end(), std::int64_t{0});
    choose_front(all, static_cast<std::size_t>(quota), rng);
    picked.assign(all.begin(), all.begin() + std::min<std::int64_t>(quota, labels.size()));
  } else {
    const auto red_quota = static_cast<std::size_t>(std::llround(kRedShare * static_cast<double>(foreground)));
    const auto outer_quota = static_cast<std::size_t>(foreground) - red_quota;
    std::size_t take_red = std::min(red_quota, red.size());
    const std::size_t take_outer = std::min(outer_quota + (red_quota - take_red), outer.size());
    // an exhausted outer band hands its shortfall back to the red band
    take_red = std::min(red.size(), take_red + (outer_quota + (red_quota - take_red) - take_outer));
    choose_front(red, take_red, rng);
    choose_front(outer, take_outer, rng);
    picked.assign(red.begin(), red.begin() + static_cast<std::ptrdiff_t>(take_red));
    picked.insert(picked.end(), outer.begin(), outer.begin() + static_cast<std::ptrdiff_t>(take_outer));
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

namespace {

WeightMap weights_impl(const LabelVolume& labels, const WeightingState& state,
                       std::span<const std::int64_t> samples, const BandMap* bands) {
  const int n = state.classes();
  const std::vector<double> cw = class_weights(state);
  const std::vector<double> fractions = class_volumes(labels, n);
  const double pw = patch_weight_from_fraction(1.0 - fractions[0]);

  double sampled_cw = 0.0;
  for (int c = 1; c < n; ++c) {
    sampled_cw += cw[c];
  }
  sampled_cw /= (n - 1);

  WeightMap w(labels.shape(), 0.0f, labels.spacing());
  for (std::int64_t i = 0; i < labels.size(); ++i) {
    const std::uint8_t l = labels[i];
    if (l == 0 && bands != nullptr && (*bands)[i] == Band::Inner) {
      continue;
    }
    w[i] = static_cast<float>(pw * cw[l]);
  }
  for (std::int64_t i : samples) {
    if (i < 0 || i >= labels.size()) {
      throw IntegrityError("background sample index " + std::to_string(i) + " outside patch");
    }
    if (labels[i] != 0) {
      throw IntegrityError("background sample index " + std::to_string(i) + " is foreground");
    }
    w[i] = static_cast<float>(pw * sampled_cw);
  }
  return w;
}

}  // namespace

WeightMap voxel_weight_map(const LabelVolume& labels, const WeightingState& state,
                           std::span<const std::int64_t> samples, const BandMap& bands) {
  if ((labels.shape() != bands.shape()).any()) {
    throw ShapeError("band map does not match label patch");
  }
  return weights_impl(labels, state, samples, &bands);
}

WeightMap voxel_weight_map(const LabelVolume& labels, const WeightingState& state,
                           std::span<const std::int64_t> samples) {
  const BandMap bands = build_bands(labels);
  return weights_impl(labels, state, samples, &bands);
}

WeightMap dynamic_weight_map(const LabelVolume& labels, const WeightingState& state) {
  return weights_impl(labels, state, {}, nullptr);
}

}  // namespace kidnet
