#include "kidnet/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "kidnet/rng.hpp"

namespace kidnet {

void validate(const NetworkConfig& c) {
  if (c.levels < 0 || c.levels > 6) {
    throw ConfigError("levels must lie in [0, 6]");
  }
  if (c.base_channels < 1) {
    throw ConfigError("base_channels must be >= 1");
  }
  if (c.kernel_size < 1 || c.kernel_size % 2 == 0) {
    throw ConfigError("kernel_size must be odd and positive");
  }
  if (c.classes < 2 || c.classes > 255) {
    throw ConfigError("classes must lie in [2, 255]");
  }
  if (c.patch_size < 1 || c.patch_size % c.stride() != 0) {
    std::ostringstream os;
    os << "patch size " << c.patch_size << " is not divisible by 2^levels = " << c.stride();
    throw ConfigError(os.str());
  }
  if (!(c.input_scale > 0.0) || !std::isfinite(c.input_offset)) {
    throw ConfigError("input normalization must have a positive scale");
  }
}

std::int64_t LayerSpec::weight_rows() const {
  return kind == LayerKind::Up ? std::int64_t{out_channels} * 8 : out_channels;
}

std::int64_t LayerSpec::weight_cols() const {
  switch (kind) {
    case LayerKind::Conv:
    case LayerKind::Down: return std::int64_t{in_channels} * kernel * kernel * kernel;
    case LayerKind::Up:
    case LayerKind::Head: return in_channels;
  }
  return 0;
}

namespace {

// Layer layout: enc0, then (down_l, enc_l) for l = 1..L, then per branch b
// the stages (up, res) from level b down to 1, then the head.
int enc_index(int level) { return level == 0 ? 0 : 2 * level; }
int down_index(int level) { return 2 * level - 1; }
int branch_offset(int levels, int branch) { return 2 * levels + 1 + branch * branch; }

}  // namespace

std::vector<LayerSpec> layer_specs(const NetworkConfig& c) {
  validate(c);
  const int k = c.kernel_size;
  std::vector<LayerSpec> specs;
  specs.push_back({"enc0", LayerKind::Conv, 1, c.channels_at(0), k});
  for (int l = 1; l <= c.levels; ++l) {
    specs.push_back({"down" + std::to_string(l), LayerKind::Down, c.channels_at(l - 1), c.channels_at(l), k});
    specs.push_back({"enc" + std::to_string(l), LayerKind::Conv, c.channels_at(l), c.channels_at(l), k});
  }
  for (int b = 0; b <= c.levels; ++b) {
    const std::string prefix = "branch" + std::to_string(b) + ".";
    for (int s = b; s >= 1; --s) {
      specs.push_back({prefix + "up" + std::to_string(s), LayerKind::Up, c.channels_at(s), c.channels_at(s - 1), 2});
      specs.push_back({prefix + "res" + std::to_string(s), LayerKind::Conv, c.channels_at(s - 1), c.channels_at(s - 1), k});
    }
    specs.push_back({prefix + "head", LayerKind::Head, c.channels_at(0), c.classes, 1});
  }
  return specs;
}

template <typename S>
std::int64_t ParamSet<S>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& l : layers) {
    n += l.weight.size() + l.bias.size();
  }
  return n;
}

template <typename S>
void ParamSet<S>::set_zero() {
  for (auto& l : layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
}

template <typename S>
ParamSet<S>& ParamSet<S>::operator+=(const ParamSet& o) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weight += o.layers[i].weight;
    layers[i].bias += o.layers[i].bias;
  }
  return *this;
}

template <typename S>
ParamSet<S>& ParamSet<S>::operator*=(S s) {
  for (auto& l : layers) {
    l.weight *= s;
    l.bias *= s;
  }
  return *this;
}

template <typename S>
S& ParamSet<S>::flat(std::int64_t i) {
  for (auto& l : layers) {
    if (i < l.weight.size()) {
      return l.weight.data()[i];
    }
    i -= l.weight.size();
    if (i < l.bias.size()) {
      return l.bias.data()[i];
    }
    i -= l.bias.size();
  }
  throw RangeError("flat parameter index out of range");
}

template <typename S>
S ParamSet<S>::flat(std::int64_t i) const {
  return const_cast<ParamSet*>(this)->flat(i);
}

template <typename S>
bool ParamSet<S>::operator==(const ParamSet& o) const {
  if (layers.size() != o.layers.size()) {
    return false;
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weight.rows() != o.layers[i].weight.rows() ||
        layers[i].weight.cols() != o.layers[i].weight.cols() ||
        layers[i].weight != o.layers[i].weight || layers[i].bias != o.layers[i].bias) {
      return false;
    }
  }
  return true;
}

template <typename S>
ParamSet<S> zeros_like(const ParamSet<S>& p) {
  ParamSet<S> z;
  z.layers.reserve(p.layers.size());
  for (const auto& l : p.layers) {
    z.layers.push_back({Mat<S>::Zero(l.weight.rows(), l.weight.cols()), Vec<S>::Zero(l.bias.size())});
  }
  return z;
}

template <typename S>
NetworkParams<S> init_network(const NetworkConfig& config, std::uint64_t seed) {
  const auto specs = layer_specs(config);
  Rng rng = make_rng(seed, streams::kNetworkInit);
  NetworkParams<S> p;
  p.config = config;
  p.seed = seed;
  for (const auto& spec : specs) {
    const double fan_in = static_cast<double>(spec.weight_cols());
    const double gain = spec.kind == LayerKind::Head ? 1.0 : 2.0;
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
    LayerParams<S> lp{Mat<S>(spec.weight_rows(), spec.weight_cols()), Vec<S>::Zero(spec.out_channels)};
    for (std::int64_t i = 0; i < lp.weight.size(); ++i) {
      lp.weight.data()[i] = static_cast<S>(dist(rng));
    }
    p.tensors.layers.push_back(std::move(lp));
  }
  return p;
}

template <typename To, typename From>
NetworkParams<To> cast_params(const NetworkParams<From>& p) {
  NetworkParams<To> out;
  out.config = p.config;
  out.seed = p.seed;
  for (const auto& l : p.tensors.layers) {
    out.tensors.layers.push_back({l.weight.template cast<To>(), l.bias.template cast<To>()});
  }
  return out;
}

namespace {

template <typename S>
void softmax_columns(const Mat<S>& logits, Mat<S>& probs) {
  const Eigen::Matrix<S, 1, Eigen::Dynamic> m = logits.colwise().maxCoeff();
  probs = (logits.rowwise() - m).array().exp().matrix();
  const Eigen::Matrix<S, 1, Eigen::Dynamic> inv = probs.colwise().sum().cwiseInverse();
  probs.array().rowwise() *= inv.array();
}

template <typename S>
FeatureMap<S> relu_mask_product(const FeatureMap<S>& grad, const FeatureMap<S>& activation) {
  FeatureMap<S> out;
  out.shape = grad.shape;
  out.data = (activation.data.array() > S(0)).select(grad.data, S(0));
  return out;
}

}  // namespace

template <typename S>
ForwardTrace<S> forward_any(const NetworkParams<S>& params, const Volume& volume) {
  const NetworkConfig& c = params.config;
  if ((volume.shape().unaryExpr([&](int v) { return v % c.stride(); }) != 0).any()) {
    throw ShapeError("input extent " + to_string(volume.shape()) + " is not divisible by 2^levels");
  }
  const auto& L = params.tensors.layers;
  const int k = c.kernel_size;

  ForwardTrace<S> t;
  t.input = FeatureMap<S>(volume.shape(), 1);
  const S offset = static_cast<S>(c.input_offset);
  const S inv_scale = static_cast<S>(1.0 / c.input_scale);
  for (std::int64_t i = 0; i < volume.size(); ++i) {
    t.input.data(0, i) = (static_cast<S>(volume[i]) - offset) * inv_scale;
  }

  t.down.resize(static_cast<std::size_t>(c.levels) + 1);
  t.features.resize(static_cast<std::size_t>(c.levels) + 1);
  t.features[0] = conv_forward(t.input, L[0].weight, L[0].bias, k, 1);
  relu_inplace(t.features[0]);
  for (int l = 1; l <= c.levels; ++l) {
    const auto& d = L[down_index(l)];
    const auto& e = L[enc_index(l)];
    t.down[l] = conv_forward(t.features[l - 1], d.weight, d.bias, k, 2);
    t.features[l] = conv_forward(t.down[l], e.weight, e.bias, k, 1);
    relu_inplace(t.features[l]);
  }

  t.branches.resize(static_cast<std::size_t>(c.levels) + 1);
  t.final.shape = volume.shape();
  t.final.probs = Mat<S>::Zero(c.classes, volume.size());
  for (int b = 0; b <= c.levels; ++b) {
    BranchTrace<S>& br = t.branches[b];
    br.up.reserve(b);
    br.act.reserve(b);
    br.hidden.reserve(b);
    const int off = branch_offset(c.levels, b);
    const FeatureMap<S>* cur = &t.features[b];
    for (int i = 0; i < b; ++i) {
      const auto& up = L[off + 2 * i];
      const auto& res = L[off + 2 * i + 1];
      br.up.push_back(upconv_forward(*cur, up.weight, up.bias));
      br.act.push_back(conv_forward(br.up.back(), res.weight, res.bias, k, 1));
      relu_inplace(br.act.back());
      FeatureMap<S> h;
      h.shape = br.up.back().shape;
      h.data = br.up.back().data + br.act.back().data;
      br.hidden.push_back(std::move(h));
      cur = &br.hidden.back();
    }
    const auto& head = L[off + 2 * b];
    const FeatureMap<S> logits = pointwise_forward(*cur, head.weight, head.bias);
    softmax_columns(logits.data, br.probs);
    t.final.probs += br.probs;
  }
  t.final.probs /= static_cast<S>(c.levels + 1);
  return t;
}

template <typename S>
ForwardTrace<S> forward(const NetworkParams<S>& params, const Volume& patch) {
  const int p = params.config.patch_size;
  if ((patch.shape() != p).any()) {
    std::ostringstream os;
    os << "patch shape " << to_string(patch.shape()) << " does not match configured size " << p;
    throw ShapeError(os.str());
  }
  return forward_any(params, patch);
}

namespace {

template <typename S>
S probability_floor() {
  return std::numeric_limits<S>::min();
}

}  // namespace

template <typename S>
double weighted_cross_entropy(const ProbMapT<S>& probs, const LabelVolume& labels,
                              const Grid<float>& weights) {
  double total_w = 0.0, total = 0.0;
  for (std::int64_t v = 0; v < labels.size(); ++v) {
    const double w = weights[v];
    if (w == 0.0) {
      continue;
    }
    const S p = std::max(probs.probs(labels[v], v), probability_floor<S>());
    total += w * -std::log(static_cast<double>(p));
    total_w += w;
  }
  if (!(total_w > 0.0)) {
    throw DegenerateBatchError("all voxel weights are zero");
  }
  return total / total_w;
}

std::string to_string(Supervision s) {
  return s == Supervision::Final ? "final" : "branches";
}

Supervision supervision_from_string(const std::string& s) {
  if (s == "final") {
    return Supervision::Final;
  }
  if (s == "branches") {
    return Supervision::Branches;
  }
  throw ConfigError("unknown supervision '" + s + "' (expected final or branches)");
}

template <typename S>
Gradients<S> backward(const NetworkParams<S>& params, const ForwardTrace<S>& t,
                      const LabelVolume& labels, const Grid<float>& weights, Supervision mode) {
  const NetworkConfig& c = params.config;
  const auto& L = params.tensors.layers;
  const int k = c.kernel_size;
  const std::int64_t n = t.final.voxels();
  if ((labels.shape() != t.final.shape).any() || (weights.shape() != t.final.shape).any()) {
    throw ShapeError("labels/weights do not match the forward trace");
  }

  double total_w = 0.0;
  for (float w : weights.data()) {
    total_w += w;
  }
  if (!(total_w > 0.0)) {
    throw DegenerateBatchError("all voxel weights are zero");
  }

  Gradients<S> g;
  g.tensors = zeros_like(params.tensors);
  auto& G = g.tensors.layers;

  for (std::int64_t v = 0; v < n; ++v) {
    if (labels[v] >= c.classes) {
      throw RangeError("label exceeds network class count");
    }
  }
  const S branch_share = S(1) / static_cast<S>(c.levels + 1);

  // Final: d loss / d final probability, nonzero only at the labelled class.
  // Each branch map enters the final map with weight branch_share.
  Mat<S> dfinal;
  if (mode == Supervision::Final) {
    dfinal = Mat<S>::Zero(c.classes, n);
    double loss = 0.0;
    for (std::int64_t v = 0; v < n; ++v) {
      const double w = weights[v];
      if (w == 0.0) {
        continue;
      }
      const int y = labels[v];
      const S p = std::max(t.final.probs(y, v), probability_floor<S>());
      loss += w * -std::log(static_cast<double>(p));
      dfinal(y, v) = static_cast<S>(-w / total_w) / p;
    }
    g.loss = loss / total_w;
    dfinal *= branch_share;
  }

  std::vector<FeatureMap<S>> dfeatures(static_cast<std::size_t>(c.levels) + 1);
  for (int l = 0; l <= c.levels; ++l) {
    dfeatures[l] = FeatureMap<S>(t.features[l].shape, t.features[l].channels());
    dfeatures[l].data.setZero();
  }

  for (int b = 0; b <= c.levels; ++b) {
    const BranchTrace<S>& br = t.branches[b];
    const int off = branch_offset(c.levels, b);
    Mat<S> dlogits;
    if (mode == Supervision::Final) {
      // softmax backward: dz = p * (dp - sum_c p_c dp_c)
      const Eigen::Matrix<S, 1, Eigen::Dynamic> dot = br.probs.cwiseProduct(dfinal).colwise().sum();
      dlogits = br.probs.cwiseProduct(dfinal - Mat<S>::Ones(c.classes, 1) * dot);
    } else {
      // cross-entropy through softmax: dz = w * (p - onehot)
      dlogits = Mat<S>::Zero(c.classes, n);
      double loss = 0.0;
      for (std::int64_t v = 0; v < n; ++v) {
        const double w = weights[v];
        if (w == 0.0) {
          continue;
        }
        const int y = labels[v];
        const S p = std::max(br.probs(y, v), probability_floor<S>());
        loss += w * -std::log(static_cast<double>(p));
        const S scale = static_cast<S>(w / total_w) * branch_share;
        dlogits.col(v) = scale * br.probs.col(v);
        dlogits(y, v) -= scale;
      }
      g.loss += loss / total_w / (c.levels + 1);
    }

    const FeatureMap<S>& head_in = b == 0 ? t.features[0] : br.hidden.back();
    FeatureMap<S> dcur(head_in.shape, head_in.channels());
    dcur.data.setZero();
    pointwise_backward(head_in, L[off + 2 * b].weight, dlogits, G[off + 2 * b].weight,
                       G[off + 2 * b].bias, &dcur);

    for (int i = b - 1; i >= 0; --i) {
      // hidden = up + relu(conv(up))
      const FeatureMap<S> dact = relu_mask_product(dcur, br.act[i]);
      FeatureMap<S> dup = dcur;
      conv_backward(br.up[i], L[off + 2 * i + 1].weight, k, 1, dact.data, G[off + 2 * i + 1].weight,
                    G[off + 2 * i + 1].bias, &dup);
      const FeatureMap<S>& stage_in = i == 0 ? t.features[b] : br.hidden[i - 1];
      FeatureMap<S> dprev(stage_in.shape, stage_in.channels());
      dprev.data.setZero();
      upconv_backward(stage_in, L[off + 2 * i].weight, dup.data, G[off + 2 * i].weight,
                      G[off + 2 * i].bias, &dprev);
      dcur = std::move(dprev);
    }
    dfeatures[b].data += dcur.data;
  }

  for (int l = c.levels; l >= 0; --l) {
    const FeatureMap<S> dpre = relu_mask_product(dfeatures[l], t.features[l]);
    const int ei = enc_index(l);
    if (l == 0) {
      conv_backward(t.input, L[ei].weight, k, 1, dpre.data, G[ei].weight, G[ei].bias,
                    static_cast<FeatureMap<S>*>(nullptr));
      break;
    }
    FeatureMap<S> ddown(t.down[l].shape, t.down[l].channels());
    ddown.data.setZero();
    conv_backward(t.down[l], L[ei].weight, k, 1, dpre.data, G[ei].weight, G[ei].bias, &ddown);
    const int di = down_index(l);
    conv_backward(t.features[l - 1], L[di].weight, k, 2, ddown.data, G[di].weight, G[di].bias,
                  &dfeatures[l - 1]);
  }
  return g;
}

namespace {

struct Interval {
  long long lo;
  long long hi;
};

long long floor_div(long long a, long long b) {
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}

Interval back_through(const LayerGeometry& g, Interval iv) {
  if (g.transposed) {
    return {floor_div(iv.lo, g.stride), floor_div(iv.hi, g.stride)};
  }
  const int pad = g.kernel / 2;
  return {iv.lo * g.stride - pad, iv.hi * g.stride + pad};
}

std::vector<LayerGeometry> branch_chain(const NetworkConfig& c, int branch) {
  const int k = c.kernel_size;
  std::vector<LayerGeometry> chain{{k, 1, false}};
  for (int l = 1; l <= branch; ++l) {
    chain.push_back({k, 2, false});
    chain.push_back({k, 1, false});
  }
  for (int s = branch; s >= 1; --s) {
    chain.push_back({2, 2, true});
    chain.push_back({k, 1, false});  // residual conv; the skip path is a subset
  }
  chain.push_back({1, 1, false});
  return chain;
}

}  // namespace

int receptive_halo(const std::vector<LayerGeometry>& chain) {
  long long down = 1, up = 1;
  for (const auto& g : chain) {
    if (g.kernel < 1 || g.stride < 1) {
      throw ConfigError("layer geometry must have positive kernel and stride");
    }
    (g.transposed ? up : down) *= g.stride;
  }
  if (down != up) {
    throw ConfigError("receptive halo needs a chain whose output matches the input resolution");
  }
  long long halo = 0;
  for (long long o = 0; o < down; ++o) {
    Interval iv{o, o};
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
      iv = back_through(*it, iv);
    }
    halo = std::max({halo, o - iv.lo, iv.hi - o});
  }
  return static_cast<int>(halo);
}

int receptive_halo(const NetworkConfig& config) {
  validate(config);
  int halo = 0;
  for (int b = 0; b <= config.levels; ++b) {
    halo = std::max(halo, receptive_halo(branch_chain(config, b)));
  }
  return halo;
}

#define KIDNET_INSTANTIATE_NETWORK(S)                                                           \
  template struct ParamSet<S>;                                                                  \
  template ParamSet<S> zeros_like(const ParamSet<S>&);                                          \
  template NetworkParams<S> init_network<S>(const NetworkConfig&, std::uint64_t);               \
  template ForwardTrace<S> forward_any(const NetworkParams<S>&, const Volume&);                 \
  template ForwardTrace<S> forward(const NetworkParams<S>&, const Volume&);                     \
  template double weighted_cross_entropy(const ProbMapT<S>&, const LabelVolume&,                \
                                         const Grid<float>&);                                   \
  template Gradients<S> backward(const NetworkParams<S>&, const ForwardTrace<S>&,               \
                                 const LabelVolume&, const Grid<float>&, Supervision);

KIDNET_INSTANTIATE_NETWORK(float)
KIDNET_INSTANTIATE_NETWORK(double)

template NetworkParams<double> cast_params(const NetworkParams<float>&);
template NetworkParams<float> cast_params(const NetworkParams<double>&);
template NetworkParams<float> cast_params(const NetworkParams<float>&);
template NetworkParams<double> cast_params(const NetworkParams<double>&);

#undef KIDNET_INSTANTIATE_NETWORK

}  // namespace kidnet
