#include "kidnet/config_json.hpp"

#include <set>

namespace kidnet {

using nlohmann::json;

namespace {

// Reads fields of one JSON object, remembering which keys were consumed so
// leftovers can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j.is_object()) {
      throw ConfigError(what_ + ": expected a JSON object");
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      return;
    }
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(what_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      (void)value;
      if (!seen_.count(key)) {
        throw ConfigError(what_ + ": unknown key '" + key + "'");
      }
    }
  }

 private:
  const json& j_;
  std::string what_;
  std::set<std::string> seen_;
};

template <typename A>
json array3(const A& a) {
  return json::array({a[0], a[1], a[2]});
}

template <typename A>
A read3(const json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) {
    throw ConfigError(what + ": expected a 3-element array");
  }
  try {
    return A(j[0].get<typename A::Scalar>(), j[1].get<typename A::Scalar>(), j[2].get<typename A::Scalar>());
  } catch (const json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace

json to_json(const NetworkConfig& c) {
  return {{"levels", c.levels},           {"base_channels", c.base_channels}, {"kernel_size", c.kernel_size},
          {"classes", c.classes},         {"patch_size", c.patch_size},       {"input_offset", c.input_offset},
          {"input_scale", c.input_scale}};
}

NetworkConfig network_config_from_json(const json& j) {
  NetworkConfig c;
  ObjectReader r(j, "network");
  r.get("levels", c.levels);
  r.get("base_channels", c.base_channels);
  r.get("kernel_size", c.kernel_size);
  r.get("classes", c.classes);
  r.get("patch_size", c.patch_size);
  r.get("input_offset", c.input_offset);
  r.get("input_scale", c.input_scale);
  r.finish();
  validate(c);
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"batch_size", c.batch_size},
          {"max_steps", c.max_steps},
          {"schema", to_string(c.schema)},
          {"supervision", to_string(c.supervision)},
          {"flip", c.flip},
          {"jitter", c.jitter},
          {"jitter_share", c.jitter_share},
          {"normalize_input", c.normalize_input},
          {"alpha", c.alpha},
          {"seed", c.seed},
          {"log_every", c.log_every},
          {"checkpoint_every", c.checkpoint_every},
          {"threads", c.threads}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  ObjectReader r(j, "train");
  r.get("learning_rate", c.learning_rate);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("epsilon", c.epsilon);
  r.get("batch_size", c.batch_size);
  r.get("max_steps", c.max_steps);
  std::string schema = to_string(c.schema);
  r.get("schema", schema);
  c.schema = schema_from_string(schema);
  std::string supervision = to_string(c.supervision);
  r.get("supervision", supervision);
  c.supervision = supervision_from_string(supervision);
  r.get("flip", c.flip);
  r.get("jitter", c.jitter);
  r.get("jitter_share", c.jitter_share);
  r.get("normalize_input", c.normalize_input);
  r.get("alpha", c.alpha);
  r.get("seed", c.seed);
  r.get("log_every", c.log_every);
  r.get("checkpoint_every", c.checkpoint_every);
  r.get("threads", c.threads);
  r.finish();
  validate(c);
  return c;
}

json to_json(const PhantomSpec& s) {
  json trees = json::array();
  for (const auto& t : s.trees) {
    trees.push_back({{"trunk_radius", t.trunk_radius},
                     {"depth", t.depth},
                     {"branch_count", t.branch_count},
                     {"terminal_radius", t.terminal_radius}});
  }
  json intensities = json::array();
  for (const auto& m : s.intensities) {
    intensities.push_back({{"mean", m.mean}, {"sigma", m.sigma}});
  }
  json j = {{"shape", array3(s.shape)},
            {"spacing_mm", array3(s.spacing)},
            {"trees", trees},
            {"background", {{"mean", s.background.mean}, {"sigma", s.background.sigma}}},
            {"intensities", intensities},
            {"fragment", s.fragment},
            {"drop_rate", s.drop_rate}};
  if (!s.vessel_region.empty()) {
    j["vessel_region"] = {{"lo", array3(s.vessel_region.lo)}, {"hi", array3(s.vessel_region.hi)}};
  }
  return j;
}

namespace {

IntensityModel intensity_from_json(const json& j, const std::string& what) {
  IntensityModel m;
  ObjectReader r(j, what);
  r.get("mean", m.mean);
  r.get("sigma", m.sigma);
  r.finish();
  return m;
}

}  // namespace

PhantomSpec phantom_spec_from_json(const json& j) {
  PhantomSpec s = PhantomSpec::defaults();
  ObjectReader r(j, "phantom");
  if (const json* v = r.sub("shape")) s.shape = read3<Shape3>(*v, "phantom.shape");
  if (const json* v = r.sub("spacing_mm")) s.spacing = read3<Spacing3>(*v, "phantom.spacing_mm");
  if (const json* v = r.sub("trees")) {
    if (!v->is_array()) throw ConfigError("phantom.trees: expected an array");
    s.trees.clear();
    for (const auto& t : *v) {
      TreeParams p;
      ObjectReader tr(t, "phantom.trees[]");
      tr.get("trunk_radius", p.trunk_radius);
      tr.get("depth", p.depth);
      tr.get("branch_count", p.branch_count);
      tr.get("terminal_radius", p.terminal_radius);
      tr.finish();
      s.trees.push_back(p);
    }
  }
  if (const json* v = r.sub("background")) s.background = intensity_from_json(*v, "phantom.background");
  if (const json* v = r.sub("intensities")) {
    if (!v->is_array()) throw ConfigError("phantom.intensities: expected an array");
    s.intensities.clear();
    for (const auto& m : *v) {
      s.intensities.push_back(intensity_from_json(m, "phantom.intensities[]"));
    }
  }
  r.get("fragment", s.fragment);
  r.get("drop_rate", s.drop_rate);
  if (const json* v = r.sub("vessel_region")) {
    ObjectReader vr(*v, "phantom.vessel_region");
    const json* lo = vr.sub("lo");
    const json* hi = vr.sub("hi");
    vr.finish();
    if (!lo || !hi) throw ConfigError("phantom.vessel_region needs lo and hi");
    s.vessel_region = {read3<Point3>(*lo, "phantom.vessel_region.lo"), read3<Point3>(*hi, "phantom.vessel_region.hi")};
  }
  r.finish();
  validate(s);
  return s;
}

json to_json(const AblationConfig& c) {
  json schemas = json::array();
  for (Schema s : c.schemas) {
    schemas.push_back(to_string(s));
  }
  return {{"phantom", to_json(c.phantom)},
          {"train_phantoms", c.train_phantoms},
          {"heldout_phantoms", c.heldout_phantoms},
          {"patch_counts", c.patch_counts},
          {"train_fragment", c.train_fragment},
          {"heldout_fragment", c.heldout_fragment},
          {"network", to_json(c.network)},
          {"train", to_json(c.train)},
          {"schemas", schemas},
          {"seed", c.seed},
          {"threads", c.threads}};
}

AblationConfig ablation_config_from_json(const json& j) {
  AblationConfig c;
  ObjectReader r(j, "ablation");
  if (const json* v = r.sub("phantom")) c.phantom = phantom_spec_from_json(*v);
  r.get("train_phantoms", c.train_phantoms);
  r.get("heldout_phantoms", c.heldout_phantoms);
  r.get("patch_counts", c.patch_counts);
  r.get("train_fragment", c.train_fragment);
  r.get("heldout_fragment", c.heldout_fragment);
  if (const json* v = r.sub("network")) c.network = network_config_from_json(*v);
  if (const json* v = r.sub("train")) c.train = train_config_from_json(*v);
  std::vector<std::string> schemas;
  r.get("schemas", schemas);
  if (!schemas.empty()) {
    c.schemas.clear();
    for (const auto& s : schemas) {
      c.schemas.push_back(schema_from_string(s));
    }
  }
  r.get("seed", c.seed);
  r.get("threads", c.threads);
  r.finish();
  validate(c);
  return c;
}

}  // namespace kidnet
