#include "kidnet/ablation.hpp"

#include <chrono>
#include <cstdio>
#include <sstream>

#include "kidnet/parallel.hpp"
#include "kidnet/rng.hpp"
#include "kidnet/stitcher.hpp"
#include "kidnet/weighting.hpp"

namespace kidnet {

void validate(const AblationConfig& c) {
  validate(c.phantom);
  validate(c.network);
  validate(c.train);
  if (c.train_phantoms < 1 || c.heldout_phantoms < 1) {
    throw ConfigError("ablation needs at least one training and one held-out phantom");
  }
  if (static_cast<int>(c.patch_counts.size()) != c.phantom.classes()) {
    throw ConfigError("patch_counts needs one entry per class (background first)");
  }
  if (c.patch_counts[0] < 1) {
    throw ConfigError("patch_counts must request background patches");
  }
  if (c.network.classes != c.phantom.classes()) {
    throw ConfigError("network class count does not match the phantom class count");
  }
  if (c.schemas.empty()) {
    throw ConfigError("ablation needs at least one schema");
  }
}

AblationData prepare_ablation_data(const AblationConfig& c) {
  validate(c);
  AblationData data;
  std::vector<std::vector<PatchRecord>> per_phantom(c.train_phantoms);
  PhantomSpec train_spec = c.phantom;
  train_spec.fragment = c.train_fragment;
  parallel_for(c.threads, per_phantom.size(), [&](std::size_t i) {
    const Phantom ph = generate_phantom(train_spec, derive_seed(c.seed, streams::kTrainPhantomBase + i));
    per_phantom[i] = slice_patches(ph.image, ph.labels, ph.meta, c.network.patch_size, c.patch_counts,
                                   derive_seed(c.seed, streams::kSliceBase + i),
                                   "train_" + std::to_string(i));
  });
  for (auto& v : per_phantom) {
    for (auto& r : v) {
      data.patches.push_back(std::move(r));
    }
  }
  PhantomSpec heldout_spec = c.phantom;
  heldout_spec.fragment = c.heldout_fragment;
  data.heldout.resize(c.heldout_phantoms);
  parallel_for(c.threads, data.heldout.size(), [&](std::size_t i) {
    data.heldout[i] = generate_phantom(heldout_spec, derive_seed(c.seed, streams::kHeldoutPhantomBase + i));
  });
  return data;
}

HeldoutScore score_heldout(const LabelVolume& pred, const Phantom& truth, int classes) {
  HeldoutScore s;
  s.dice = evaluate(pred, truth.labels, truth.meta, classes);
  const Box roi = roi_box(truth.labels.shape(), truth.meta);
  Mask foreground(truth.labels.shape(), 0);
  for (std::int64_t i = 0; i < foreground.size(); ++i) {
    foreground[i] = truth.labels[i] != 0;
  }
  const Grid<std::int32_t> d2 = squared_distance_transform(foreground);
  for (int z = roi.lo.z(); z < roi.hi.z(); ++z) {
    for (int y = roi.lo.y(); y < roi.hi.y(); ++y) {
      for (int x = roi.lo.x(); x < roi.hi.x(); ++x) {
        if (truth.labels(x, y, z) == 0 && pred(x, y, z) != 0) {
          ++(d2(x, y, z) <= kInnerRadius * kInnerRadius ? s.background_fp_marginal : s.background_fp);
        }
      }
    }
  }
  for (std::int64_t i = 0; i < pred.size(); ++i) {
    if (truth.labels[i] != 0) {
      ++s.foreground_total;
      s.foreground_hits += pred[i] != 0;
    }
  }
  return s;
}

SchemaResult run_schema(const AblationData& data, const AblationConfig& c, Schema schema,
                        const TrainHooks& hooks) {
  using Clock = std::chrono::steady_clock;
  SchemaResult r;
  r.schema = schema;
  TrainConfig tc = c.train;
  tc.schema = schema;
  tc.seed = c.seed;
  tc.threads = c.threads;
  const auto t0 = Clock::now();
  TrainResult trained = train(data.patches, c.network, tc, hooks);
  const auto t1 = Clock::now();
  r.params = std::move(trained.params);
  if (!trained.log.empty()) {
    // mean over the last 50 logged steps
    const std::size_t n = std::min<std::size_t>(50, trained.log.size());
    double sum = 0.0;
    for (std::size_t i = trained.log.size() - n; i < trained.log.size(); ++i) {
      sum += trained.log[i].loss;
    }
    r.final_loss = sum / n;
  }

  StitchOptions so;
  so.threads = c.threads;
  std::int64_t hits = 0, total = 0;
  for (const Phantom& ph : data.heldout) {
    const Segmentation seg = segment_volume(r.params, ph.image, so);
    r.heldout.push_back(score_heldout(seg.labels, ph, c.network.classes));
    r.background_fp += r.heldout.back().background_fp;
    r.background_fp_marginal += r.heldout.back().background_fp_marginal;
    hits += r.heldout.back().foreground_hits;
    total += r.heldout.back().foreground_total;
  }
  r.infer_seconds = std::chrono::duration<double>(Clock::now() - t1).count();
  r.train_seconds = std::chrono::duration<double>(t1 - t0).count();
  r.foreground_recall = total > 0 ? static_cast<double>(hits) / total : 0.0;

  for (int label = 1; label < c.network.classes; ++label) {
    const std::string name = class_name(label);
    std::array<double, 2> sum{0.0, 0.0};
    std::array<int, 2> count{0, 0};
    for (const auto& h : r.heldout) {
      const ClassReport& cr = h.dice.at(name);
      if (cr.whole_roi.applicable) {
        sum[0] += cr.whole_roi.dice;
        ++count[0];
      }
      if (cr.kidney_box.applicable) {
        sum[1] += cr.kidney_box.dice;
        ++count[1];
      }
    }
    r.mean_dice[name] = {count[0] ? sum[0] / count[0] : 0.0, count[1] ? sum[1] / count[1] : 0.0};
  }
  return r;
}

const SchemaResult& AblationReport::at(Schema s) const {
  for (const auto& r : results) {
    if (r.schema == s) {
      return r;
    }
  }
  throw RangeError("schema " + to_string(s) + " not in the ablation report");
}

AblationReport run_ablation(const AblationConfig& c,
                            const std::function<void(const std::string&)>& progress) {
  auto note = [&](const std::string& msg) {
    if (progress) {
      progress(msg);
    }
  };
  note("generating " + std::to_string(c.train_phantoms) + " training and " +
       std::to_string(c.heldout_phantoms) + " held-out phantoms");
  const AblationData data = prepare_ablation_data(c);
  AblationReport report;
  for (Schema s : c.schemas) {
    note("schema " + to_string(s) + ": training " + std::to_string(c.train.max_steps) + " steps on " +
         std::to_string(data.patches.size()) + " patches");
    report.results.push_back(run_schema(data, c, s));
    const auto& r = report.results.back();
    std::ostringstream os;
    os << "schema " << to_string(s) << ": train " << r.train_seconds << " s, infer " << r.infer_seconds
       << " s, final loss " << r.final_loss;
    note(os.str());
  }
  return report;
}

nlohmann::json to_json(const AblationReport& report) {
  nlohmann::json j;
  j["schemas"] = nlohmann::json::object();
  for (const auto& r : report.results) {
    nlohmann::json s;
    for (const auto& [name, d] : r.mean_dice) {
      s["mean_dice"][name] = {{kRegionWholeRoi, d[0]}, {kRegionKidneyBox, d[1]}};
    }
    s["background_fp_unfiltered"] = r.background_fp;
    s["background_fp_marginal_band"] = r.background_fp_marginal;
    s["foreground_recall"] = r.foreground_recall;
    s["final_loss"] = r.final_loss;
    s["train_seconds"] = r.train_seconds;
    s["infer_seconds"] = r.infer_seconds;
    s["heldout"] = nlohmann::json::array();
    for (const auto& h : r.heldout) {
      s["heldout"].push_back({{"dice", to_json(h.dice)},
                              {"background_fp_unfiltered", h.background_fp},
                              {"background_fp_marginal_band", h.background_fp_marginal},
                              {"foreground_hits", h.foreground_hits},
                              {"foreground_total", h.foreground_total}});
    }
    j["schemas"][to_string(r.schema)] = s;
  }
  j["table"] = format_table(report);
  return j;
}

std::string format_table(const AblationReport& report) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %-8s %10s %12s\n", "class", "schema", "whole ROI", "kidney box");
  os << line;
  if (report.results.empty()) {
    return os.str();
  }
  for (const auto& [name, unused] : report.results.front().mean_dice) {
    (void)unused;
    for (const auto& r : report.results) {
      const auto& d = r.mean_dice.at(name);
      std::snprintf(line, sizeof line, "%-10s %-8s %10.3f %12.3f\n", name.c_str(), to_string(r.schema).c_str(),
                    d[0], d[1]);
      os << line;
    }
  }
  return os.str();
}

}  // namespace kidnet
