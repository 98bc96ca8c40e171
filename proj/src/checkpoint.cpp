#include "kidnet/checkpoint.hpp"

#include <cstring>

#include "kidnet/config_json.hpp"
#include "kidnet/kvol_io.hpp"

namespace kidnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

fs::path with_suffix(const fs::path& base, const char* suffix) {
  fs::path p = base;
  p += suffix;
  return p;
}

}  // namespace

fs::path checkpoint_base(const fs::path& path) {
  std::string s = path.string();
  for (const char* suffix : {".ckpt.json", ".ckpt.raw", ".ckpt"}) {
    if (ends_with(s, suffix)) {
      return s.substr(0, s.size() - std::strlen(suffix));
    }
  }
  return path;
}

void write_checkpoint(const fs::path& path, const NetworkParams<float>& params, std::int64_t step) {
  const fs::path base = checkpoint_base(path);
  const auto specs = layer_specs(params.config);
  if (specs.size() != params.tensors.layers.size()) {
    throw IntegrityError("parameter set does not match its network config");
  }
  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["config"] = to_json(params.config);
  manifest["seed"] = params.seed;
  manifest["step"] = step;
  manifest["layers"] = json::array();
  std::vector<float> payload;
  payload.reserve(static_cast<std::size_t>(params.tensors.parameter_count()));
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& l = params.tensors.layers[i];
    manifest["layers"].push_back({{"id", specs[i].id},
                                  {"shape", {l.weight.rows(), l.weight.cols()}},
                                  {"bias", l.bias.size()}});
    payload.insert(payload.end(), l.weight.data(), l.weight.data() + l.weight.size());
    payload.insert(payload.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  write_bytes_atomic(with_suffix(base, ".ckpt.raw"), reinterpret_cast<const char*>(payload.data()),
                     payload.size() * sizeof(float));
  write_text_atomic(with_suffix(base, ".ckpt.json"), manifest.dump(1));
}

Checkpoint read_checkpoint(const fs::path& path) {
  const fs::path base = checkpoint_base(path);
  const json manifest = read_json_file(with_suffix(base, ".ckpt.json"));
  Checkpoint ck;
  std::vector<LayerSpec> specs;
  try {
    if (manifest.at("format") != kCheckpointFormat) {
      throw ParseError("not a checkpoint manifest: " + base.string());
    }
    if (manifest.at("version").get<int>() != kCheckpointVersion) {
      throw ParseError("unsupported checkpoint version in " + base.string());
    }
    ck.params.config = network_config_from_json(manifest.at("config"));
    ck.params.seed = manifest.at("seed").get<std::uint64_t>();
    ck.step = manifest.at("step").get<std::int64_t>();
    validate(ck.params.config);
    specs = layer_specs(ck.params.config);
    const auto& layers = manifest.at("layers");
    if (layers.size() != specs.size()) {
      throw IntegrityError("checkpoint layer count does not match its config");
    }
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const auto& l = layers[i];
      if (l.at("id").get<std::string>() != specs[i].id ||
          l.at("shape").at(0).get<std::int64_t>() != specs[i].weight_rows() ||
          l.at("shape").at(1).get<std::int64_t>() != specs[i].weight_cols() ||
          l.at("bias").get<std::int64_t>() != specs[i].out_channels) {
        throw IntegrityError("checkpoint layer " + std::to_string(i) + " disagrees with its config");
      }
    }
  } catch (const json::exception& e) {
    throw ParseError("malformed checkpoint manifest " + base.string() + ": " + e.what());
  }

  const std::string raw = read_file_bytes(with_suffix(base, ".ckpt.raw"));
  std::int64_t total = 0;
  for (const auto& s : specs) {
    total += s.parameter_count();
  }
  if (raw.size() != static_cast<std::size_t>(total) * sizeof(float)) {
    throw IntegrityError("checkpoint payload holds " + std::to_string(raw.size()) + " bytes, expected " +
                         std::to_string(total * sizeof(float)));
  }
  const char* cursor = raw.data();
  for (const auto& s : specs) {
    LayerParams<float> l{Mat<float>(s.weight_rows(), s.weight_cols()), Vec<float>(s.out_channels)};
    std::memcpy(l.weight.data(), cursor, l.weight.size() * sizeof(float));
    cursor += l.weight.size() * sizeof(float);
    std::memcpy(l.bias.data(), cursor, l.bias.size() * sizeof(float));
    cursor += l.bias.size() * sizeof(float);
    if (!l.weight.allFinite() || !l.bias.allFinite()) {
      throw IntegrityError("non-finite value in checkpoint layer " + s.id);
    }
    ck.params.tensors.layers.push_back(std::move(l));
  }
  return ck;
}

}  // namespace kidnet
