// kidnet: phantom generation, patch slicing, training, tiled inference,
// evaluation and schema ablation from the command line.
//
// Exit codes: 0 success, 1 bad input or usage, 2 internal failure.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "kidnet/ablation.hpp"
#include "kidnet/checkpoint.hpp"
#include "kidnet/config_json.hpp"
#include "kidnet/evaluator.hpp"
#include "kidnet/kvol_io.hpp"
#include "kidnet/parallel.hpp"
#include "kidnet/phantom.hpp"
#include "kidnet/stitcher.hpp"
#include "kidnet/trainer.hpp"
#include "kidnet/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kidnet;

namespace {

struct Manifest {
  std::string subcommand;
  json config = json::object();
  std::uint64_t seed = 0;
  json inputs = json::object();
  json outputs = json::object();

  void write(const fs::path& path, double seconds) const {
    json j = {{"subcommand", subcommand}, {"config", config},   {"seed", seed},
              {"tool_version", kVersion}, {"inputs", inputs},   {"outputs", outputs},
              {"duration_seconds", seconds}};
    write_text_atomic(path, j.dump(1));
  }
};

void log_line(const std::string& msg) { std::cerr << "[kidnet] " << msg << std::endl; }

fs::path sibling(const fs::path& prefix, const std::string& suffix) {
  fs::path p = prefix;
  p += suffix;
  return p;
}

std::vector<int> parse_counts(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size() || v < 0) {
        throw std::invalid_argument(item);
      }
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("--counts expects comma-separated non-negative integers, got '" + s + "'");
    }
  }
  return out;
}

// phantom -----------------------------------------------------------------

struct PhantomArgs {
  std::string spec;
  std::uint64_t seed = 0;
  std::string out;
  std::string name = "phantom";
};

Manifest run_phantom(const PhantomArgs& a) {
  PhantomSpec spec = a.spec.empty() ? PhantomSpec::defaults() : phantom_spec_from_json(read_json_file(a.spec));
  validate(spec);
  const Phantom ph = generate_phantom(spec, a.seed);
  write_phantom(a.out, a.name, ph);
  log_line("wrote phantom " + a.name + " " + to_string(spec.shape) + " to " + a.out);
  Manifest m;
  m.subcommand = "phantom";
  m.config = to_json(spec);
  m.seed = a.seed;
  m.inputs["spec"] = a.spec;
  m.outputs["image"] = (fs::path(a.out) / (a.name + "_image.kvol")).string();
  m.outputs["labels"] = (fs::path(a.out) / (a.name + "_labels.kvol")).string();
  m.outputs["meta"] = (fs::path(a.out) / (a.name + ".meta.json")).string();
  return m;
}

// slice -------------------------------------------------------------------

struct SliceArgs {
  std::string image, labels, meta, out;
  int patch_size = 32;
  std::string counts = "8,4,4,4";
  std::uint64_t seed = 0;
};

Manifest run_slice(const SliceArgs& a) {
  const Volume image = read_image(a.image);
  const LabelVolume labels = read_labels(a.labels);
  const PhantomMeta meta = read_meta(a.meta);
  const std::vector<int> counts = parse_counts(a.counts);
  const auto records = slice_patches(image, labels, meta, a.patch_size, counts, a.seed,
                                     fs::path(a.image).filename().string());
  write_patch_set(a.out, records);
  log_line("wrote " + std::to_string(records.size()) + " patches to " + a.out);
  Manifest m;
  m.subcommand = "slice";
  m.config = {{"patch_size", a.patch_size}, {"counts", counts}};
  m.seed = a.seed;
  m.inputs = {{"image", a.image}, {"labels", a.labels}, {"meta", a.meta}};
  m.outputs["patch_set"] = a.out;
  return m;
}

// train -------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::int64_t steps = -1;
  int dump_weights = 0;
  int threads = 1;
};

Manifest run_train(const TrainArgs& a) {
  NetworkConfig net;
  TrainConfig tc;
  if (!a.config.empty()) {
    const json j = read_json_file(a.config);
    if (!j.is_object()) {
      throw ConfigError("train config must be a JSON object with 'network' and 'train' sections");
    }
    for (const auto& [key, value] : j.items()) {
      if (key == "network") {
        net = network_config_from_json(value);
      } else if (key == "train") {
        tc = train_config_from_json(value);
      } else {
        throw ConfigError("train config: unknown key '" + key + "'");
      }
    }
  }
  if (a.seed_set) tc.seed = a.seed;
  if (a.steps >= 0) tc.max_steps = a.steps;
  tc.threads = a.threads;

  const auto dataset = read_patch_set(a.data);
  const fs::path out(a.out);
  fs::create_directories(out);
  std::ofstream log(out / "train_log.jsonl", std::ios::trunc);
  if (!log) {
    throw IntegrityError("cannot write " + (out / "train_log.jsonl").string());
  }

  TrainHooks hooks;
  int dumped = 0;
  if (a.dump_weights > 0) {
    fs::create_directories(out / "weights");
    hooks.on_patch = [&](const PatchEvent& ev) {
      if (dumped < a.dump_weights) {
        char name[64];
        std::snprintf(name, sizeof name, "step%06lld_patch%02d", static_cast<long long>(ev.step), dumped);
        write_volume(out / "weights" / (std::string(name) + "_weights.kvol"), *ev.weights);
        write_volume(out / "weights" / (std::string(name) + "_labels.kvol"), *ev.labels);
        ++dumped;
      }
    };
  }
  hooks.on_step = [&](const StepLog& s, const NetworkParams<float>&) {
    const bool emit = tc.log_every == 0 ? s.step == tc.max_steps
                                        : (s.step % tc.log_every == 0 || s.step == 1 || s.step == tc.max_steps);
    if (emit) {
      json j = {{"step", s.step}, {"loss", s.loss}, {"used_patches", s.used_patches}, {"V", s.V}, {"CW", s.CW}};
      log << j.dump() << '\n' << std::flush;
      char msg[96];
      std::snprintf(msg, sizeof msg, "step %lld loss %.5f", static_cast<long long>(s.step), s.loss);
      log_line(msg);
    }
  };
  hooks.on_checkpoint = [&](std::int64_t step, const NetworkParams<float>& p) {
    if (step == tc.max_steps) {
      write_checkpoint(out / "checkpoint", p, step);
    } else {
      write_checkpoint(out / ("checkpoint_step" + std::to_string(step)), p, step);
    }
  };
  const TrainResult r = train(dataset, net, tc, hooks);
  log_line("trained " + std::to_string(tc.max_steps) + " steps; skipped " +
           std::to_string(r.skipped_patches) + " degenerate patches");

  Manifest m;
  m.subcommand = "train";
  m.config = {{"network", to_json(r.params.config)}, {"train", to_json(tc)}};
  m.seed = tc.seed;
  m.inputs = {{"config", a.config}, {"data", a.data}};
  m.outputs = {{"checkpoint", (out / "checkpoint.ckpt.json").string()},
               {"log", (out / "train_log.jsonl").string()}};
  return m;
}

// infer -------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint, input, output;
  int halo = -1;
  int tile = 0;
  int threads = 1;
};

Manifest run_infer(const InferArgs& a) {
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const Volume volume = read_image(a.input);
  StitchOptions so;
  so.halo = a.halo;
  so.tile = a.tile;
  so.threads = a.threads;
  const auto t0 = std::chrono::steady_clock::now();
  const Segmentation seg = segment_volume(ck.params, volume, so);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_probmap(sibling(a.output, "_prob.kvol"), seg.probs, volume.spacing());
  write_volume(sibling(a.output, "_labels.kvol"), seg.labels);
  log_line("segmented " + to_string(volume.shape()) + " in " + std::to_string(seg.plan.tiles.size()) +
           " tiles (halo " + std::to_string(seg.plan.halo) + ", tile " + std::to_string(seg.plan.patch_size) +
           ") in " + std::to_string(secs) + " s");
  Manifest m;
  m.subcommand = "infer";
  m.config = {{"network", to_json(ck.params.config)},
              {"halo", seg.plan.halo},
              {"tile", seg.plan.patch_size},
              {"tiles", seg.plan.tiles.size()}};
  m.seed = ck.params.seed;
  m.inputs = {{"checkpoint", a.checkpoint}, {"input", a.input}};
  m.outputs = {{"prob", sibling(a.output, "_prob.kvol").string()},
               {"labels", sibling(a.output, "_labels.kvol").string()}};
  return m;
}

// eval --------------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, meta, out = "report.json";
  int classes = kDefaultClassCount;
};

Manifest run_eval(const EvalArgs& a) {
  const LabelVolume pred = read_labels(a.pred);
  const LabelVolume gt = read_labels(a.gt);
  const PhantomMeta meta = read_meta(a.meta);
  const DiceReport report = evaluate(pred, gt, meta, a.classes);
  write_text_atomic(a.out, to_json(report).dump(1));
  for (const auto& c : report.classes) {
    char line[128];
    std::snprintf(line, sizeof line, "%-8s whole_roi %.4f  kidney_box %.4f", c.name.c_str(), c.whole_roi.dice,
                  c.kidney_box.dice);
    log_line(line);
  }
  Manifest m;
  m.subcommand = "eval";
  m.config = {{"classes", a.classes}};
  m.inputs = {{"pred", a.pred}, {"gt", a.gt}, {"meta", a.meta}};
  m.outputs = {{"report", a.out}};
  return m;
}

// ablate ------------------------------------------------------------------

struct AblateArgs {
  std::string config, out = ".";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
};

Manifest run_ablate(const AblateArgs& a) {
  AblationConfig c = a.config.empty() ? AblationConfig{} : ablation_config_from_json(read_json_file(a.config));
  if (a.seed_set) c.seed = a.seed;
  c.threads = a.threads;
  const AblationReport report = run_ablation(c, log_line);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_text_atomic(out / "ablation_report.json", to_json(report).dump(1));
  std::cout << format_table(report);
  Manifest m;
  m.subcommand = "ablate";
  m.config = to_json(c);
  m.seed = c.seed;
  m.inputs = {{"config", a.config}};
  m.outputs = {{"report", (out / "ablation_report.json").string()}};
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kidnet: vessel segmentation with dynamic weighting and band sampling"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom");
  phantom->add_option("--spec", pa.spec, "Phantom spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  phantom->add_option("--seed", pa.seed, "Random seed");
  phantom->add_option("--out", pa.out, "Output directory")->required();
  phantom->add_option("--name", pa.name, "Output file stem");

  SliceArgs sa;
  auto* slice = app.add_subcommand("slice", "Slice training patches from a phantom");
  slice->add_option("--image", sa.image)->required();
  slice->add_option("--labels", sa.labels)->required();
  slice->add_option("--meta", sa.meta)->required()->check(CLI::ExistingFile);
  slice->add_option("--patch-size", sa.patch_size);
  slice->add_option("--counts", sa.counts, "Patches per kind: background,artery,vein,ureter");
  slice->add_option("--seed", sa.seed);
  slice->add_option("--out", sa.out, "Patch set directory")->required();

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train", "Train a network on a patch set");
  trainc->add_option("--config", ta.config, "JSON with 'network' and 'train' sections")->check(CLI::ExistingFile);
  trainc->add_option("--data", ta.data, "Patch set directory")->required()->check(CLI::ExistingDirectory);
  trainc->add_option("--out", ta.out, "Output directory")->required();
  auto* train_seed = trainc->add_option("--seed", ta.seed);
  trainc->add_option("--steps", ta.steps, "Override max_steps");
  trainc->add_option("--dump-weights", ta.dump_weights, "Write the first N voxel weight maps as kvol");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "Segment a volume by tiled inference");
  infer->add_option("--checkpoint", ia.checkpoint)->required();
  infer->add_option("--input", ia.input)->required();
  infer->add_option("--output", ia.output, "Output prefix")->required();
  infer->add_option("--halo", ia.halo, "Tile halo (default: receptive halo)");
  infer->add_option("--tile", ia.tile, "Tile edge length (default: training patch size)");

  EvalArgs ea;
  auto* evalc = app.add_subcommand("eval", "Score a segmentation against ground truth");
  evalc->add_option("--pred", ea.pred)->required();
  evalc->add_option("--gt", ea.gt)->required();
  evalc->add_option("--meta", ea.meta)->required()->check(CLI::ExistingFile);
  evalc->add_option("--out", ea.out);
  evalc->add_option("--classes", ea.classes);

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "Compare weighting schemas end to end");
  ablate->add_option("--config", aa.config)->check(CLI::ExistingFile);
  ablate->add_option("--out", aa.out);
  auto* ablate_seed = ablate->add_option("--seed", aa.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  const auto t0 = std::chrono::steady_clock::now();
  const int workers = resolve_threads(threads);
  try {
    Manifest m;
    fs::path manifest_path;
    if (*phantom) {
      m = run_phantom(pa);
      manifest_path = fs::path(pa.out) / (pa.name + ".manifest.json");
    } else if (*slice) {
      m = run_slice(sa);
      manifest_path = fs::path(sa.out) / "slice.manifest.json";
    } else if (*trainc) {
      ta.seed_set = train_seed->count() > 0;
      ta.threads = workers;
      m = run_train(ta);
      manifest_path = fs::path(ta.out) / "train.manifest.json";
    } else if (*infer) {
      ia.threads = workers;
      m = run_infer(ia);
      manifest_path = sibling(ia.output, ".manifest.json");
    } else if (*evalc) {
      m = run_eval(ea);
      manifest_path = sibling(ea.out, ".manifest.json");
    } else if (*ablate) {
      aa.seed_set = ablate_seed->count() > 0;
      aa.threads = workers;
      m = run_ablate(aa);
      manifest_path = fs::path(aa.out) / "ablate.manifest.json";
    }
    m.config["threads"] = workers;
    m.write(manifest_path, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return 0;
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << std::endl;
    return 2;
  }
}
