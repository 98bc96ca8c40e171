#include "kidnet/kvol_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace kidnet {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "kvol payloads are little-endian; big-endian hosts need byte swapping");

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IntegrityError("cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_bytes_atomic(const fs::path& path, const char* data, std::size_t bytes) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw IntegrityError("cannot write " + tmp.string());
    }
    out.write(data, static_cast<std::streamsize>(bytes));
    if (!out) {
      throw IntegrityError("short write to " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

namespace {

json header_json(const Shape3& shape, const Spacing3& spacing, const std::string& dtype,
                 int channels) {
  json j;
  j["shape"] = {shape.x(), shape.y(), shape.z()};
  j["spacing_mm"] = {spacing.x(), spacing.y(), spacing.z()};
  j["dtype"] = dtype;
  j["order"] = "x-fastest";
  if (channels != 1) {
    j["channels"] = channels;
  }
  return j;
}

template <typename T>
void write_grid(const fs::path& path, const Grid<T>& v, const std::string& dtype) {
  write_text_atomic(kvol_header_path(path), header_json(v.shape(), v.spacing(), dtype, 1).dump(2));
  write_bytes_atomic(kvol_payload_path(path), reinterpret_cast<const char*>(v.data().data()),
            v.data().size_bytes());
}

std::string read_payload(const fs::path& path, std::size_t expected_bytes) {
  std::string raw = read_file_bytes(kvol_payload_path(path));
  if (raw.size() != expected_bytes) {
    std::ostringstream os;
    os << "payload " << kvol_payload_path(path).string() << " has " << raw.size()
       << " bytes, header implies " << expected_bytes;
    throw IntegrityError(os.str());
  }
  return raw;
}

Volume read_f32(const fs::path& path, const KvolHeader& h) {
  Volume v(h.shape, 0.0f, h.spacing);
  const std::string raw = read_payload(path, static_cast<std::size_t>(v.size()) * sizeof(float));
  std::memcpy(v.data().data(), raw.data(), raw.size());
  for (float x : v.data()) {
    if (!std::isfinite(x)) {
      throw IntegrityError("non-finite intensity in " + kvol_payload_path(path).string());
    }
  }
  return v;
}

LabelVolume read_u8(const fs::path& path, const KvolHeader& h) {
  LabelVolume v(h.shape, 0, h.spacing);
  const std::string raw = read_payload(path, static_cast<std::size_t>(v.size()));
  std::memcpy(v.data().data(), raw.data(), raw.size());
  return v;
}

}  // namespace

fs::path kvol_base(const fs::path& path) {
  std::string s = path.string();
  if (ends_with(s, ".json") || ends_with(s, ".raw")) {
    s = s.substr(0, s.rfind('.'));
  }
  if (!ends_with(s, ".kvol")) {
    s += ".kvol";
  }
  return s;
}

fs::path kvol_header_path(const fs::path& path) {
  return kvol_base(path).string() + ".json";
}

fs::path kvol_payload_path(const fs::path& path) {
  return kvol_base(path).string() + ".raw";
}

KvolHeader parse_kvol_header(const json& j) {
  try {
    if (!j.is_object()) {
      throw ParseError("kvol header is not a JSON object");
    }
    KvolHeader h;
    const auto& shape = j.at("shape");
    const auto& spacing = j.at("spacing_mm");
    if (!shape.is_array() || shape.size() != 3 || !spacing.is_array() || spacing.size() != 3) {
      throw ParseError("kvol header: shape and spacing_mm must be 3-element arrays");
    }
    for (int a = 0; a < 3; ++a) {
      if (!shape[a].is_number_integer() || shape[a].get<long long>() <= 0) {
        throw ParseError("kvol header: shape entries must be positive integers");
      }
      h.shape[a] = shape[a].get<int>();
      if (!spacing[a].is_number()) {
        throw ParseError("kvol header: spacing_mm entries must be numbers");
      }
      h.spacing[a] = spacing[a].get<double>();
      if (!(h.spacing[a] > 0.0) || !std::isfinite(h.spacing[a])) {
        throw ParseError("kvol header: spacing_mm entries must be positive");
      }
    }
    h.dtype = j.at("dtype").get<std::string>();
    if (h.dtype != "f32" && h.dtype != "u8") {
      throw ParseError("kvol header: unsupported dtype '" + h.dtype + "'");
    }
    if (j.at("order").get<std::string>() != "x-fastest") {
      throw ParseError("kvol header: only order \"x-fastest\" is supported");
    }
    if (j.contains("channels")) {
      h.channels = j.at("channels").get<int>();
      if (h.channels < 1) {
        throw ParseError("kvol header: channels must be >= 1");
      }
    }
    return h;
  } catch (const json::exception& e) {
    throw ParseError(std::string("kvol header: ") + e.what());
  }
}

KvolHeader read_kvol_header(const fs::path& path) {
  const fs::path hp = kvol_header_path(path);
  json j;
  try {
    j = json::parse(read_file_bytes(hp));
  } catch (const json::parse_error& e) {
    throw ParseError("malformed kvol header " + hp.string() + ": " + e.what());
  }
  return parse_kvol_header(j);
}

AnyVolume read_volume(const fs::path& path) {
  const KvolHeader h = read_kvol_header(path);
  if (h.channels != 1) {
    throw ParseError("expected a single-channel kvol, got channels=" + std::to_string(h.channels));
  }
  if (h.dtype == "f32") {
    return read_f32(path, h);
  }
  return read_u8(path, h);
}

Volume read_image(const fs::path& path) {
  AnyVolume v = read_volume(path);
  if (auto* img = std::get_if<Volume>(&v)) {
    return std::move(*img);
  }
  throw ParseError(kvol_header_path(path).string() + ": expected dtype f32");
}

LabelVolume read_labels(const fs::path& path) {
  AnyVolume v = read_volume(path);
  if (auto* lbl = std::get_if<LabelVolume>(&v)) {
    return std::move(*lbl);
  }
  throw ParseError(kvol_header_path(path).string() + ": expected dtype u8");
}

ProbMap read_probmap(const fs::path& path) {
  const KvolHeader h = read_kvol_header(path);
  if (h.dtype != "f32") {
    throw ParseError("probability maps must be f32");
  }
  ProbMap p;
  p.shape = h.shape;
  p.probs.resize(h.channels, voxel_count(h.shape));
  const std::string raw =
      read_payload(path, static_cast<std::size_t>(p.probs.size()) * sizeof(float));
  std::memcpy(p.probs.data(), raw.data(), raw.size());
  return p;
}

void write_volume(const fs::path& path, const Volume& v) { write_grid(path, v, "f32"); }

void write_volume(const fs::path& path, const LabelVolume& v) { write_grid(path, v, "u8"); }

void write_probmap(const fs::path& path, const ProbMap& p, const Spacing3& spacing) {
  write_text_atomic(kvol_header_path(path),
                    header_json(p.shape, spacing, "f32", p.classes()).dump(2));
  write_bytes_atomic(kvol_payload_path(path), reinterpret_cast<const char*>(p.probs.data()),
            static_cast<std::size_t>(p.probs.size()) * sizeof(float));
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  write_bytes_atomic(path, text.data(), text.size());
}

json read_json_file(const fs::path& path) {
  try {
    return json::parse(read_file_bytes(path));
  } catch (const json::parse_error& e) {
    throw ParseError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace kidnet
