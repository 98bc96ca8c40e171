// Synthetic CT-like phantoms with tree-structured tubular foreground classes.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kidnet/volume.hpp"

namespace kidnet {

struct TreeParams {
  double trunk_radius = 3.0;    // voxels
  int depth = 3;                // bifurcation levels below the trunk
  int branch_count = 2;         // children per bifurcation
  double terminal_radius = 1.0; // radius at the deepest level
};

struct IntensityModel {
  double mean = 0.0;
  double sigma = 1.0;
};

struct PhantomSpec {
  Shape3 shape{64, 64, 64};
  Spacing3 spacing{0.757, 0.757, 0.906};
  std::vector<TreeParams> trees;            // one per foreground class (labels 1..n-1)
  IntensityModel background;
  std::vector<IntensityModel> intensities;  // one per foreground class
  bool fragment = false;
  double drop_rate = 0.26;
  // Vessels are confined to this box; empty means the upper z half
  // (leaving room for foreground-free patches below).
  Box vessel_region;

  int classes() const { return static_cast<int>(trees.size()) + 1; }

  static PhantomSpec defaults();
};

/// Throws ConfigError if the spec is unusable.
void validate(const PhantomSpec& spec);

struct PhantomMeta {
  std::vector<std::vector<Point3>> centerlines;  // indexed by label; entry 0 unused
  Box kidney_box;
  std::array<int, 2> roi_z{0, 0};                // inclusive z range
};

struct VesselSegment {
  int label = 0;
  int depth = 0;
  int parent = -1;
  Eigen::Vector3d start = Eigen::Vector3d::Zero();
  Eigen::Vector3d end = Eigen::Vector3d::Zero();
  double radius = 1.0;
  bool dropped = false;  // omitted from the ground truth (fragmentation)
};

struct Phantom {
  Volume image;
  LabelVolume labels;
  PhantomMeta meta;
  std::vector<VesselSegment> segments;
};

Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed);

struct PatchRecord {
  Volume image;
  LabelVolume labels;
  std::string source;
  Point3 origin = Point3::Zero();
  int kind = 0;  // 0 = background, c = centred on a class-c centerline
};

inline constexpr int kBackgroundAttempts = 50;

/// counts[k] patches of kind k; kind 0 draws foreground-free patches when possible.
std::vector<PatchRecord> slice_patches(const Volume& volume, const LabelVolume& labels,
                                       const PhantomMeta& meta, int patch_size,
                                       std::span<const int> counts, std::uint64_t seed,
                                       const std::string& source = "");

nlohmann::json to_json(const PhantomMeta& meta);
PhantomMeta meta_from_json(const nlohmann::json& j);
PhantomMeta read_meta(const std::filesystem::path& path);

/// Writes `<dir>/<name>_image.kvol`, `<dir>/<name>_labels.kvol`, `<dir>/<name>.meta.json`.
void write_phantom(const std::filesystem::path& dir, const std::string& name, const Phantom& p);

/// One kvol pair per patch plus `index.json`.
void write_patch_set(const std::filesystem::path& dir, const std::vector<PatchRecord>& records);
std::vector<PatchRecord> read_patch_set(const std::filesystem::path& dir);

}  // namespace kidnet
