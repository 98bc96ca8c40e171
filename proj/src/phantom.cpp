#include "kidnet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <Eigen/Geometry>

#include "kidnet/kvol_io.hpp"
#include "kidnet/rng.hpp"

namespace kidnet {

namespace fs = std::filesystem;
using nlohmann::json;
using Vec3 = Eigen::Vector3d;

PhantomSpec PhantomSpec::defaults() {
  PhantomSpec s;
  // artery, vein, ureter (collecting system)
  s.trees = {{3.0, 3, 2, 1.0}, {3.5, 3, 2, 1.0}, {2.0, 3, 2, 1.0}};
  s.background = {40.0, 20.0};
  // neighbouring means exactly 2 sigma apart: separable, yet noisy enough
  // that background bias and false positives show up
  s.intensities = {{160.0, 20.0}, {120.0, 20.0}, {80.0, 20.0}};
  return s;
}

void validate(const PhantomSpec& s) {
  if ((s.shape < 8).any()) {
    throw ConfigError("phantom shape must be at least 8 voxels per axis");
  }
  if ((s.spacing <= 0.0).any()) {
    throw ConfigError("phantom spacing must be positive");
  }
  if (s.trees.empty() || s.trees.size() > 254) {
    throw ConfigError("phantom needs between 1 and 254 foreground trees");
  }
  if (s.intensities.size() != s.trees.size()) {
    throw ConfigError("phantom needs one intensity model per foreground tree");
  }
  for (const auto& t : s.trees) {
    if (t.terminal_radius < 1.0) {
      throw ConfigError("terminal radius must be at least 1 voxel");
    }
    if (t.trunk_radius < t.terminal_radius) {
      throw ConfigError("trunk radius must not be smaller than the terminal radius");
    }
    if (t.depth < 0 || t.depth > 8 || t.branch_count < 1 || t.branch_count > 4) {
      throw ConfigError("tree depth must lie in [0, 8] and branch count in [1, 4]");
    }
  }
  std::vector<IntensityModel> all{s.background};
  all.insert(all.end(), s.intensities.begin(), s.intensities.end());
  for (const auto& m : all) {
    if (!(m.sigma > 0.0) || !std::isfinite(m.mean)) {
      throw ConfigError("intensity models need a finite mean and positive sigma");
    }
  }
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t j = i + 1; j < all.size(); ++j) {
      const double sigma = std::max(all[i].sigma, all[j].sigma);
      if (std::abs(all[i].mean - all[j].mean) < 2.0 * sigma) {
        std::ostringstream os;
        os << "intensity means of " << class_name(static_cast<int>(i)) << " and "
           << class_name(static_cast<int>(j)) << " must differ by at least 2 sigma";
        throw ConfigError(os.str());
      }
    }
  }
  if (!(s.drop_rate >= 0.0 && s.drop_rate < 1.0)) {
    throw ConfigError("drop_rate must lie in [0, 1)");
  }
  if (!s.vessel_region.empty() && !s.vessel_region.within(s.shape)) {
    throw ConfigError("vessel_region must lie inside the phantom shape");
  }
}

namespace {

constexpr double kClearance = 1.5;
constexpr int kRootAttempts = 40;
constexpr int kBranchAttempts = 12;
constexpr double kRootLengthShare = 0.36;
constexpr double kLengthDecay = 0.72;
constexpr double kPieceLength = 6.0;

double segment_distance2(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (a + t * ab - p).squaredNorm();
}

template <typename F>
void for_each_voxel_near(const Shape3& shape, const Vec3& a, const Vec3& b, double r, F&& f) {
  const Vec3 lo = a.cwiseMin(b).array() - r;
  const Vec3 hi = a.cwiseMax(b).array() + r;
  const int x0 = std::max(0, static_cast<int>(std::floor(lo.x())));
  const int y0 = std::max(0, static_cast<int>(std::floor(lo.y())));
  const int z0 = std::max(0, static_cast<int>(std::floor(lo.z())));
  const int x1 = std::min(shape.x() - 1, static_cast<int>(std::ceil(hi.x())));
  const int y1 = std::min(shape.y() - 1, static_cast<int>(std::ceil(hi.y())));
  const int z1 = std::min(shape.z() - 1, static_cast<int>(std::ceil(hi.z())));
  const double r2 = r * r;
  for (int z = z0; z <= z1; ++z) {
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (segment_distance2(Vec3(x, y, z), a, b) <= r2) {
          f(linear_index(shape, x, y, z));
        }
      }
    }
  }
}

bool inside(const Vec3& p, const Box& region, double margin) {
  for (int a = 0; a < 3; ++a) {
    if (p[a] < region.lo[a] + margin || p[a] > region.hi[a] - 1 - margin) {
      return false;
    }
  }
  return true;
}

Vec3 any_perpendicular(const Vec3& d) {
  const Vec3 helper = std::abs(d.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  return d.cross(helper).normalized();
}

class TreeGrower {
 public:
  TreeGrower(const PhantomSpec& spec, const Box& region, Rng& rng, LabelVolume& owner,
             std::vector<VesselSegment>& segments)
      : spec_(spec), region_(region), rng_(rng), owner_(owner), segments_(segments) {}

  void grow_class(int label, const TreeParams& tree, const Vec3& root_anchor, double root_length) {
    std::uniform_real_distribution<double> jitter(-1.0, 1.0);
    for (int attempt = 0; attempt < kRootAttempts; ++attempt) {
      const Vec3 start = root_anchor + Vec3(0.0, 2.0 * jitter(rng_), 2.0 * jitter(rng_));
      const Vec3 dir = Vec3(1.0, 0.15 * jitter(rng_), 0.15 * jitter(rng_)).normalized();
      const Vec3 end = start + root_length * dir;
      if (fits(label, start, end, tree.trunk_radius)) {
        const int idx = add_segment(label, 0, -1, start, end, tree.trunk_radius);
        grow_children(label, tree, idx, dir, root_length);
        return;
      }
    }
    std::ostringstream os;
    os << "vessel tree for " << class_name(label) << " does not fit in shape "
       << to_string(spec_.shape) << "; use a larger shape or thinner trunks";
    throw GenerationError(os.str());
  }

 private:
  double radius_at(const TreeParams& tree, int depth) const {
    if (tree.depth == 0) {
      return tree.trunk_radius;
    }
    const double decay = std::pow(tree.terminal_radius / tree.trunk_radius, 1.0 / tree.depth);
    return tree.trunk_radius * std::pow(decay, depth);
  }

  void grow_children(int label, const TreeParams& tree, int parent, const Vec3& parent_dir,
                     double parent_length) {
    const VesselSegment seg = segments_[parent];
    if (seg.depth >= tree.depth) {
      return;
    }
    const int depth = seg.depth + 1;
    const double radius = radius_at(tree, depth);
    const double length = parent_length * kLengthDecay;
    const Vec3 e1 = any_perpendicular(parent_dir);
    const Vec3 e2 = parent_dir.cross(e1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double phase = 2.0 * std::numbers::pi * unit(rng_);
    for (int child = 0; child < tree.branch_count; ++child) {
      for (int attempt = 0; attempt < kBranchAttempts; ++attempt) {
        const double theta = (25.0 + 25.0 * unit(rng_)) * std::numbers::pi / 180.0;
        const double phi = phase + 2.0 * std::numbers::pi * child / tree.branch_count +
                           0.6 * (unit(rng_) - 0.5) + 0.3 * attempt;
        const Vec3 dir = (std::cos(theta) * parent_dir +
                          std::sin(theta) * (std::cos(phi) * e1 + std::sin(phi) * e2))
                             .normalized();
        const Vec3 end = seg.end + length * dir;
        if (fits(label, seg.end, end, radius)) {
          const int idx = add_segment(label, depth, parent, seg.end, end, radius);
          grow_children(label, tree, idx, dir, length);
          break;
        }
      }
    }
  }

  bool fits(int label, const Vec3& a, const Vec3& b, double r) const {
    if (!inside(a, region_, r) || !inside(b, region_, r)) {
      return false;
    }
    bool clear = true;
    for_each_voxel_near(spec_.shape, a, b, r + kClearance, [&](std::int64_t i) {
      const std::uint8_t o = owner_[i];
      clear = clear && (o == 0 || o == label);
    });
    return clear;
  }

  // Stores the tube as collinear pieces of at most kPieceLength voxels, the
  // unit of fragmentation; returns the index of the last piece.
  int add_segment(int label, int depth, int parent, const Vec3& a, const Vec3& b, double r) {
    for_each_voxel_near(spec_.shape, a, b, r, [&](std::int64_t i) {
      if (owner_[i] == 0) {
        owner_[i] = static_cast<std::uint8_t>(label);
      }
    });
    const int pieces = std::max(1, static_cast<int>(std::ceil((b - a).norm() / kPieceLength)));
    for (int k = 0; k < pieces; ++k) {
      const Vec3 p0 = a + (b - a) * (static_cast<double>(k) / pieces);
      const Vec3 p1 = a + (b - a) * (static_cast<double>(k + 1) / pieces);
      segments_.push_back({label, depth, parent, p0, p1, r, false});
      parent = static_cast<int>(segments_.size()) - 1;
    }
    return parent;
  }

  const PhantomSpec& spec_;
  Box region_;
  Rng& rng_;
  LabelVolume& owner_;
  std::vector<VesselSegment>& segments_;
};

Box default_region(const Shape3& s) {
  return {{2, 2, s.z() / 2}, {s.x() - 2, s.y() - 2, s.z() - 2}};
}

std::vector<Point3> skeleton_points(const VesselSegment& seg, const Shape3& shape) {
  std::vector<Point3> pts;
  const double len = (seg.end - seg.start).norm();
  const int steps = std::max(1, static_cast<int>(std::ceil(len / 0.5)));
  for (int i = 0; i <= steps; ++i) {
    const Vec3 p = seg.start + (seg.end - seg.start) * (static_cast<double>(i) / steps);
    Point3 q(static_cast<int>(std::lround(p.x())), static_cast<int>(std::lround(p.y())),
             static_cast<int>(std::lround(p.z())));
    q = q.max(0).min(shape - 1);
    if (pts.empty() || (pts.back() != q).any()) {
      pts.push_back(q);
    }
  }
  return pts;
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  validate(spec);
  const Box region = spec.vessel_region.empty() ? default_region(spec.shape) : spec.vessel_region;
  if (region.empty()) {
    throw GenerationError("vessel region is empty; use a larger shape");
  }
  const int fg_classes = static_cast<int>(spec.trees.size());

  Phantom ph;
  LabelVolume owner(spec.shape, 0, spec.spacing);
  Rng geo = make_rng(seed, streams::kPhantomGeometry);
  TreeGrower grower(spec, region, geo, owner, ph.segments);
  const Eigen::Array3d extent = (region.hi - region.lo).cast<double>();
  for (int k = 0; k < fg_classes; ++k) {
    const TreeParams& tree = spec.trees[k];
    const Vec3 anchor(region.lo.x() + tree.trunk_radius + 1.0,
                      region.lo.y() + extent.y() * (k + 1.0) / (fg_classes + 1.0),
                      region.lo.z() + extent.z() * 0.5);
    grower.grow_class(k + 1, tree, anchor, kRootLengthShare * extent.x());
  }

  if (spec.fragment) {
    Rng frag = make_rng(seed, streams::kPhantomFragment);
    std::bernoulli_distribution drop(spec.drop_rate);
    for (auto& seg : ph.segments) {
      seg.dropped = drop(frag);
    }
    for (int label = 1; label <= fg_classes; ++label) {
      auto first = std::find_if(ph.segments.begin(), ph.segments.end(),
                                [&](const VesselSegment& s) { return s.label == label; });
      const bool all_dropped = std::all_of(ph.segments.begin(), ph.segments.end(), [&](const VesselSegment& s) {
        return s.label != label || s.dropped;
      });
      if (all_dropped && first != ph.segments.end()) {
        first->dropped = false;
      }
    }
  }

  ph.labels = LabelVolume(spec.shape, 0, spec.spacing);
  for (const auto& seg : ph.segments) {
    if (seg.dropped) {
      continue;
    }
    for_each_voxel_near(spec.shape, seg.start, seg.end, seg.radius, [&](std::int64_t i) {
      if (owner[i] == seg.label) {
        ph.labels[i] = static_cast<std::uint8_t>(seg.label);
      }
    });
  }

  ph.image = Volume(spec.shape, 0.0f, spec.spacing);
  Rng noise = make_rng(seed, streams::kPhantomNoise);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::int64_t i = 0; i < owner.size(); ++i) {
    const std::uint8_t o = owner[i];
    const IntensityModel& m = o == 0 ? spec.background : spec.intensities[o - 1];
    ph.image[i] = static_cast<float>(m.mean + m.sigma * gauss(noise));
  }

  ph.meta.centerlines.assign(static_cast<std::size_t>(fg_classes) + 1, {});
  int deepest = 0;
  for (const auto& seg : ph.segments) {
    auto pts = skeleton_points(seg, spec.shape);
    auto& dst = ph.meta.centerlines[seg.label];
    dst.insert(dst.end(), pts.begin(), pts.end());
    deepest = std::max(deepest, seg.depth);
  }
  for (int label = 1; label <= fg_classes; ++label) {
    if (ph.meta.centerlines[label].empty()) {
      throw GenerationError("no vessel generated for " + class_name(label) + "; use a larger shape");
    }
  }

  Point3 lo = spec.shape, hi = Point3::Constant(-1);
  for (const auto& seg : ph.segments) {
    if (seg.depth != deepest) {
      continue;
    }
    for_each_voxel_near(spec.shape, seg.start, seg.end, seg.radius, [&](std::int64_t i) {
      const Point3 p = unravel(spec.shape, i);
      lo = lo.min(p);
      hi = hi.max(p);
    });
  }
  ph.meta.kidney_box = intersect(Box::whole(spec.shape), Box{lo - 2, hi + 3});

  int zlo = spec.shape.z(), zhi = -1;
  for (std::int64_t i = 0; i < owner.size(); ++i) {
    if (owner[i] != 0) {
      const int z = static_cast<int>(i / (std::int64_t{spec.shape.x()} * spec.shape.y()));
      zlo = std::min(zlo, z);
      zhi = std::max(zhi, z);
    }
  }
  ph.meta.roi_z = {std::max(0, zlo - 2), std::min(spec.shape.z() - 1, zhi + 2)};
  return ph;
}

std::vector<PatchRecord> slice_patches(const Volume& volume, const LabelVolume& labels,
                                       const PhantomMeta& meta, int patch_size,
                                       std::span<const int> counts, std::uint64_t seed,
                                       const std::string& source) {
  if ((volume.shape() != labels.shape()).any()) {
    throw ShapeError("image and label volumes differ in shape");
  }
  if (patch_size < 1 || (volume.shape() < patch_size).any()) {
    std::ostringstream os;
    os << "patch size " << patch_size << " does not fit in volume " << to_string(volume.shape());
    throw SizeError(os.str());
  }
  if (counts.size() > meta.centerlines.size() && counts.size() > 1) {
    for (std::size_t k = meta.centerlines.size(); k < counts.size(); ++k) {
      if (counts[k] > 0) {
        throw ConfigError("patch counts request a class without centerlines");
      }
    }
  }

  Rng rng(seed);
  const Shape3 shape = volume.shape();
  const Point3 max_origin = shape - patch_size;
  const Point3 half = Point3::Constant(patch_size / 2);
  auto origin_for = [&](const Point3& center) { return (center - half).max(0).min(max_origin); };
  auto make = [&](const Point3& origin, int kind) {
    const Box box{origin, origin + patch_size};
    return PatchRecord{crop(volume, box), crop(labels, box), source, origin, kind};
  };

  std::vector<PatchRecord> out;
  for (std::size_t kind = 0; kind < counts.size(); ++kind) {
    for (int n = 0; n < counts[kind]; ++n) {
      if (kind == 0) {
        std::uniform_int_distribution<int> ux(0, shape.x() - 1), uy(0, shape.y() - 1), uz(0, shape.z() - 1);
        Point3 origin = Point3::Zero();
        for (int attempt = 0; attempt < kBackgroundAttempts; ++attempt) {
          origin = origin_for(Point3(ux(rng), uy(rng), uz(rng)));
          const LabelVolume l = crop(labels, Box{origin, origin + patch_size});
          if (std::all_of(l.data().begin(), l.data().end(), [](std::uint8_t v) { return v == 0; })) {
            break;
          }
        }
        out.push_back(make(origin, 0));
      } else {
        const auto& pts = meta.centerlines.at(kind);
        if (pts.empty()) {
          throw ConfigError("no centerline points for " + class_name(static_cast<int>(kind)));
        }
        std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
        out.push_back(make(origin_for(pts[pick(rng)]), static_cast<int>(kind)));
      }
    }
  }
  return out;
}

namespace {

json point_json(const Point3& p) { return json::array({p.x(), p.y(), p.z()}); }

Point3 point_from(const json& j) {
  if (!j.is_array() || j.size() != 3) {
    throw ParseError("expected a 3-element coordinate array");
  }
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

}  // namespace

json to_json(const PhantomMeta& meta) {
  json j;
  j["centerlines"] = json::array();
  for (std::size_t label = 1; label < meta.centerlines.size(); ++label) {
    json pts = json::array();
    for (const auto& p : meta.centerlines[label]) {
      pts.push_back(point_json(p));
    }
    j["centerlines"].push_back({{"label", label}, {"name", class_name(static_cast<int>(label))}, {"points", pts}});
  }
  j["kidney_box"] = {{"lo", point_json(meta.kidney_box.lo)}, {"hi", point_json(meta.kidney_box.hi)}};
  j["roi_z"] = {meta.roi_z[0], meta.roi_z[1]};
  return j;
}

PhantomMeta meta_from_json(const json& j) {
  try {
    PhantomMeta m;
    m.centerlines.assign(1, {});
    for (const auto& entry : j.at("centerlines")) {
      const auto label = entry.at("label").get<std::size_t>();
      if (label == 0 || label > 254) {
        throw ParseError("meta: centerline label out of range");
      }
      if (m.centerlines.size() <= label) {
        m.centerlines.resize(label + 1);
      }
      for (const auto& p : entry.at("points")) {
        m.centerlines[label].push_back(point_from(p));
      }
    }
    m.kidney_box = {point_from(j.at("kidney_box").at("lo")), point_from(j.at("kidney_box").at("hi"))};
    const auto& rz = j.at("roi_z");
    m.roi_z = {rz.at(0).get<int>(), rz.at(1).get<int>()};
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("meta: ") + e.what());
  }
}

PhantomMeta read_meta(const fs::path& path) { return meta_from_json(read_json_file(path)); }

void write_phantom(const fs::path& dir, const std::string& name, const Phantom& p) {
  fs::create_directories(dir);
  write_volume(dir / (name + "_image.kvol"), p.image);
  write_volume(dir / (name + "_labels.kvol"), p.labels);
  write_text_atomic(dir / (name + ".meta.json"), to_json(p.meta).dump(1));
}

void write_patch_set(const fs::path& dir, const std::vector<PatchRecord>& records) {
  fs::create_directories(dir);
  json index;
  index["records"] = json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "patch_%05zu", i);
    const auto& r = records[i];
    write_volume(dir / (std::string(id) + "_image.kvol"), r.image);
    write_volume(dir / (std::string(id) + "_labels.kvol"), r.labels);
    index["records"].push_back({{"id", id},
                                {"image", std::string(id) + "_image.kvol"},
                                {"labels", std::string(id) + "_labels.kvol"},
                                {"source", r.source},
                                {"origin", point_json(r.origin)},
                                {"kind", r.kind}});
  }
  if (!records.empty()) {
    index["patch_size"] = records.front().image.shape().x();
  }
  write_text_atomic(dir / "index.json", index.dump(1));
}

std::vector<PatchRecord> read_patch_set(const fs::path& dir) {
  const json index = read_json_file(dir / "index.json");
  std::vector<PatchRecord> out;
  try {
    for (const auto& r : index.at("records")) {
      PatchRecord rec;
      rec.image = read_image(dir / r.at("image").get<std::string>());
      rec.labels = read_labels(dir / r.at("labels").get<std::string>());
      rec.source = r.value("source", "");
      rec.origin = point_from(r.at("origin"));
      rec.kind = r.at("kind").get<int>();
      if ((rec.image.shape() != rec.labels.shape()).any()) {
        throw IntegrityError("patch " + r.at("id").get<std::string>() + ": image/label shapes differ");
      }
      out.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("patch index: ") + e.what());
  }
  return out;
}

}  // namespace kidnet
