// "kvol" on-disk format: `<name>.kvol.json` header plus `<name>.kvol.raw`
// little-endian payload in x-fastest order. Probability maps add a
// `channels` header field and store one f32 volume per class back to back.

#pragma once

#include <filesystem>
#include <string>
#include <variant>

#include <nlohmann/json.hpp>

#include "kidnet/volume.hpp"

namespace kidnet {

struct KvolHeader {
  Shape3 shape = Shape3::Zero();
  Spacing3 spacing = Spacing3::Ones();
  std::string dtype;  // "f32" | "u8"
  int channels = 1;
};

/// Accepts `name`, `name.kvol`, `name.kvol.json` or `name.kvol.raw`; returns `name.kvol`.
std::filesystem::path kvol_base(const std::filesystem::path& path);
std::filesystem::path kvol_header_path(const std::filesystem::path& path);
std::filesystem::path kvol_payload_path(const std::filesystem::path& path);

KvolHeader parse_kvol_header(const nlohmann::json& j);
KvolHeader read_kvol_header(const std::filesystem::path& path);

using AnyVolume = std::variant<Volume, LabelVolume>;

AnyVolume read_volume(const std::filesystem::path& path);
Volume read_image(const std::filesystem::path& path);
LabelVolume read_labels(const std::filesystem::path& path);
ProbMap read_probmap(const std::filesystem::path& path);

void write_volume(const std::filesystem::path& path, const Volume& v);
void write_volume(const std::filesystem::path& path, const LabelVolume& v);
void write_probmap(const std::filesystem::path& path, const ProbMap& p,
                   const Spacing3& spacing = Spacing3::Ones());

/// Writes bytes via a temporary sibling and rename.
void write_bytes_atomic(const std::filesystem::path& path, const char* data, std::size_t bytes);
std::string read_file_bytes(const std::filesystem::path& path);

/// Writes `text` to `path` via a temporary sibling and rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace kidnet
