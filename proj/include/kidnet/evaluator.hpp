// Dice evaluation over two regions (z-clipped subject ROI and kidney box),
// counting only predicted components that touch a ground-truth island.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kidnet/phantom.hpp"
#include "kidnet/volume.hpp"

namespace kidnet {

/// 26-connected components, ordered by their smallest linear index.
struct IslandSet {
  Shape3 shape = Shape3::Zero();
  std::vector<std::vector<std::int64_t>> islands;  // sorted voxel indices per island

  std::size_t size() const { return islands.size(); }
};

double dice(const Mask& pred, const Mask& gt);

IslandSet connected_components(const Mask& mask);

Mask filter_predictions_by_islands(const Mask& pred, const IslandSet& islands);

struct RegionScore {
  bool applicable = true;
  double dice = 0.0;
  std::int64_t tp = 0;
  std::int64_t fp = 0;  // after island filtering
  std::int64_t fn = 0;
  std::int64_t fp_unfiltered = 0;
  Box region;
};

struct ClassReport {
  std::string name;
  int label = 0;
  RegionScore whole_roi;
  RegionScore kidney_box;
};

struct DiceReport {
  std::vector<ClassReport> classes;

  const ClassReport& at(const std::string& name) const;
};

inline const char* kRegionWholeRoi = "whole_roi";
inline const char* kRegionKidneyBox = "kidney_box";

RegionScore score_region(const LabelVolume& pred, const LabelVolume& gt, const Box& region, int label);

DiceReport evaluate(const LabelVolume& pred, const LabelVolume& gt, const PhantomMeta& meta,
                    int classes = kDefaultClassCount);

/// Box covering the full x/y extent and meta.roi_z (inclusive) in z.
Box roi_box(const Shape3& shape, const PhantomMeta& meta);

nlohmann::json to_json(const DiceReport& report);

}  // namespace kidnet
