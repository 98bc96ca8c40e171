#include "kidnet/evaluator.hpp"

#include <algorithm>

namespace kidnet {

namespace {

void require_same_shape(const Shape3& a, const Shape3& b, const char* what) {
  if ((a != b).any()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

}  // namespace

double dice(const Mask& pred, const Mask& gt) {
  require_same_shape(pred.shape(), gt.shape(), "dice");
  std::int64_t inter = 0, np = 0, ng = 0;
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += p && g;
    np += p;
    ng += g;
  }
  if (np + ng == 0) {
    return 1.0;
  }
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

IslandSet connected_components(const Mask& mask) {
  const Shape3 s = mask.shape();
  IslandSet out;
  out.shape = s;
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(mask.size()), 0);
  std::vector<std::int64_t> stack;
  for (std::int64_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || seen[start]) {
      continue;
    }
    std::vector<std::int64_t> island;
    seen[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::int64_t v = stack.back();
      stack.pop_back();
      island.push_back(v);
      const Point3 p = unravel(s, v);
      for (int dz = -1; dz <= 1; ++dz) {
        const int z = p.z() + dz;
        if (z < 0 || z >= s.z()) continue;
        for (int dy = -1; dy <= 1; ++dy) {
          const int y = p.y() + dy;
          if (y < 0 || y >= s.y()) continue;
          for (int dx = -1; dx <= 1; ++dx) {
            const int x = p.x() + dx;
            if (x < 0 || x >= s.x()) continue;
            const std::int64_t u = linear_index(s, x, y, z);
            if (mask[u] && !seen[u]) {
              seen[u] = 1;
              stack.push_back(u);
            }
          }
        }
      }
    }
    std::sort(island.begin(), island.end());
    out.islands.push_back(std::move(island));
  }
  return out;
}

Mask filter_predictions_by_islands(const Mask& pred, const IslandSet& islands) {
  require_same_shape(pred.shape(), islands.shape, "island filter");
  Mask gt_any(pred.shape(), 0, pred.spacing());
  for (const auto& island : islands.islands) {
    for (std::int64_t v : island) {
      gt_any[v] = 1;
    }
  }
  Mask out(pred.shape(), 0, pred.spacing());
  for (const auto& component : connected_components(pred).islands) {
    const bool touches = std::any_of(component.begin(), component.end(),
                                     [&](std::int64_t v) { return gt_any[v] != 0; });
    if (touches) {
      for (std::int64_t v : component) {
        out[v] = 1;
      }
    }
  }
  return out;
}

const ClassReport& DiceReport::at(const std::string& name) const {
  for (const auto& c : classes) {
    if (c.name == name) {
      return c;
    }
  }
  throw RangeError("no class named " + name + " in report");
}

Box roi_box(const Shape3& shape, const PhantomMeta& meta) {
  return intersect(Box::whole(shape), Box{{0, 0, meta.roi_z[0]}, {shape.x(), shape.y(), meta.roi_z[1] + 1}});
}

RegionScore score_region(const LabelVolume& pred, const LabelVolume& gt, const Box& region, int label) {
  require_same_shape(pred.shape(), gt.shape(), "evaluate");
  RegionScore r;
  r.region = intersect(Box::whole(gt.shape()), region);
  if (r.region.empty()) {
    r.applicable = false;
    return r;
  }
  const Mask p = binarize(crop(pred, r.region), static_cast<std::uint8_t>(label));
  const Mask g = binarize(crop(gt, r.region), static_cast<std::uint8_t>(label));
  const Mask kept = filter_predictions_by_islands(p, connected_components(g));
  for (std::int64_t i = 0; i < g.size(); ++i) {
    r.tp += kept[i] && g[i];
    r.fp += kept[i] && !g[i];
    r.fn += !kept[i] && g[i];
    r.fp_unfiltered += p[i] && !g[i];
  }
  const std::int64_t denom = 2 * r.tp + r.fp + r.fn;
  r.dice = denom == 0 ? 1.0 : 2.0 * static_cast<double>(r.tp) / static_cast<double>(denom);
  return r;
}

DiceReport evaluate(const LabelVolume& pred, const LabelVolume& gt, const PhantomMeta& meta,
                    int classes) {
  require_same_shape(pred.shape(), gt.shape(), "evaluate");
  const Box roi = roi_box(gt.shape(), meta);
  DiceReport report;
  for (int c = 1; c < classes; ++c) {
    ClassReport cr;
    cr.name = class_name(c);
    cr.label = c;
    cr.whole_roi = score_region(pred, gt, roi, c);
    cr.kidney_box = score_region(pred, gt, meta.kidney_box, c);
    report.classes.push_back(std::move(cr));
  }
  return report;
}

namespace {

nlohmann::json region_json(const RegionScore& r) {
  nlohmann::json j;
  j["applicable"] = r.applicable;
  if (r.applicable) {
    j["dice"] = r.dice;
    j["tp"] = r.tp;
    j["fp"] = r.fp;
    j["fn"] = r.fn;
    j["fp_unfiltered"] = r.fp_unfiltered;
  }
  j["box"] = {{"lo", {r.region.lo.x(), r.region.lo.y(), r.region.lo.z()}},
              {"hi", {r.region.hi.x(), r.region.hi.y(), r.region.hi.z()}}};
  return j;
}

}  // namespace

nlohmann::json to_json(const DiceReport& report) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& c : report.classes) {
    j[c.name][kRegionWholeRoi] = region_json(c.whole_roi);
    j[c.name][kRegionKidneyBox] = region_json(c.kidney_box);
  }
  return j;
}

}  // namespace kidnet
