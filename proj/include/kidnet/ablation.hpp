// Schema comparison: train one network per weighting schema on the same
// generated phantoms and patch stream, segment held-out phantoms, and score
// them per class and region.

#pragma once

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kidnet/evaluator.hpp"
#include "kidnet/network.hpp"
#include "kidnet/phantom.hpp"
#include "kidnet/trainer.hpp"

namespace kidnet {

struct AblationConfig {
  PhantomSpec phantom = PhantomSpec::defaults();
  int train_phantoms = 20;
  int heldout_phantoms = 5;
  std::vector<int> patch_counts{8, 4, 4, 4};  // per phantom: background, then per class
  bool train_fragment = false;
  bool heldout_fragment = false;
  NetworkConfig network;
  TrainConfig train;
  std::vector<Schema> schemas{Schema::Dynamic, Schema::DynamicSampling};
  std::uint64_t seed = 0;
  int threads = 1;
};

void validate(const AblationConfig& config);

struct AblationData {
  std::vector<PatchRecord> patches;
  std::vector<Phantom> heldout;
};

/// Phantom i of the training (held-out) set uses sub-seed
/// derive_seed(seed, kTrainPhantomBase + i) (kHeldoutPhantomBase + i);
/// its patches use derive_seed(seed, kSliceBase + i).
AblationData prepare_ablation_data(const AblationConfig& config);

struct HeldoutScore {
  DiceReport dice;
  // gt background predicted foreground in the whole ROI, before island
  // filtering, split at the marginal band (squared distance <= 4 from gt
  // foreground). The marginal band carries zero loss weight under sampling.
  std::int64_t background_fp = 0;           // beyond the marginal band
  std::int64_t background_fp_marginal = 0;  // inside the marginal band
  std::int64_t foreground_hits = 0; // gt foreground predicted as any foreground class
  std::int64_t foreground_total = 0;
};

HeldoutScore score_heldout(const LabelVolume& pred, const Phantom& truth, int classes);

struct SchemaResult {
  Schema schema = Schema::DynamicSampling;
  std::vector<HeldoutScore> heldout;
  std::map<std::string, std::array<double, 2>> mean_dice;  // class -> {whole ROI, kidney box}
  std::int64_t background_fp = 0;
  std::int64_t background_fp_marginal = 0;
  double foreground_recall = 0.0;
  double final_loss = 0.0;
  double train_seconds = 0.0;
  double infer_seconds = 0.0;
  NetworkParams<float> params;
};

SchemaResult run_schema(const AblationData& data, const AblationConfig& config, Schema schema,
                        const TrainHooks& hooks = {});

struct AblationReport {
  std::vector<SchemaResult> results;

  const SchemaResult& at(Schema s) const;
};

AblationReport run_ablation(const AblationConfig& config,
                            const std::function<void(const std::string&)>& progress = {});

nlohmann::json to_json(const AblationReport& report);

/// Plain-text table: one row per class and schema, one column per region.
std::string format_table(const AblationReport& report);

}  // namespace kidnet
