// SPDX-License-Identifier: Apache-2.0
//
// Training protocols over an ordered sequence of domains: static joint
// training, naive sequential fine-tuning, the multi-model benchmark, EWC and LwF.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "clseg/models/checkpoint.hpp"
#include "clseg/models/seg_model.hpp"
#include "clseg/synthdata/synthdata.hpp"

namespace clseg {

enum class ProtocolKind { static_joint, naive_sequential, multi_model, ewc, lwf };

std::string to_string(ProtocolKind kind);
/// Accepts "static", "naive_sequential" (or "naive"), "multi_model", "ewc", "lwf".
ProtocolKind parse_protocol(const std::string& name);

struct ProtocolConfig {
  ProtocolKind kind = ProtocolKind::naive_sequential;
  bool use_heads = false;
  int epochs_per_stage = 15;
  double lr = 0.05;
  double l2_weight = 1e-4;
  int batch_size = 4;
  std::uint64_t seed = 0;
  AugmentConfig augmentation;

  std::optional<double> ewc_lambda;     ///< ewc only
  bool ewc_sum_literal = false;         ///< ewc only: Ω as a sum over samples instead of the mean
  std::optional<int> lwf_warmup_epochs;  ///< lwf only
  std::optional<double> lwf_distill_weight;  ///< lwf only

  /// Kind-specific fields must be set iff the kind matches. Throws ConfigError.
  void validate() const;
  Manifest to_manifest() const;
  static ProtocolConfig from_manifest(const Manifest& m);

  static ProtocolConfig make(ProtocolKind kind);  ///< defaults filled for the kind
};

/// Importance-weighted anchors, one per past domain, over the penalised names.
struct EWCAnchor {
  int domain_id = 0;
  ParameterSet<float> anchor;
  ParameterSet<float> importance;
};

struct EWCState {
  std::vector<EWCAnchor> anchors;
};

/// Soft targets from one past state on the current domain's training slices.
struct PseudoDataset {
  int source_domain = 0;
  int head = 0;
  std::vector<TensorF> targets;  ///< one [1,1,H,W] per training slice, aligned with the slice list
};

struct StageRecord {
  int stage = 0;
  int domain_id = -1;  ///< -1 for the static joint stage
  std::string domain_name;
  std::vector<std::string> checkpoints;  ///< paths relative to the run directory
  std::map<int, double> val_dice;        ///< per domain at stage end
  int best_epoch = 0;
  double best_val_loss = 0.0;

  Manifest to_manifest() const;
  static StageRecord from_manifest(const Manifest& m);
  bool operator==(const StageRecord&) const = default;
};

/// Everything a protocol run produces.
struct TrainingRun {
  ProtocolConfig config;
  SegModelConfig model_config;
  std::uint64_t model_seed = 0;
  int num_heads = 1;
  std::vector<int> ordering;  ///< domain ids in training order
  std::vector<std::string> domain_names;  ///< indexed by domain id
  std::vector<StageRecord> stages;
  std::vector<ParameterSet<float>> stage_states;  ///< model state at the end of each stage
  std::map<int, ParameterSet<float>> store;       ///< multi-model benchmark: state per domain
  EWCState ewc;

  /// Stage at which `domain_id` was trained, or -1.
  int stage_of(int domain_id) const;
  /// Segmentation model holding `state`.
  SegModel<float> instantiate(const ParameterSet<float>& state) const;
};

/// Which state and head serve `domain_id` after `stage`. Seen domains use their
/// own head (or stored state); unseen ones the current domain's.
struct Route {
  const ParameterSet<float>* state = nullptr;
  int head = 0;
};
Route route(const TrainingRun& run, int stage, int domain_id);

/// Probabilities for a [K,1,H,W] batch under the given route.
TensorF predict_routed(const TrainingRun& run, const Route& r, const TensorF& batch);

using ProgressFn = std::function<void(const std::string&)>;

/// Runs `config.kind` over `ordering` (ids index into `domains`). The model is
/// initialised from `model_seed`; batch order and augmentation depend only on
/// (config.seed, stage, epoch), so degenerate configurations reproduce the
/// naive sequential trajectory bit for bit.
TrainingRun run_protocol(const std::vector<DomainDataset>& domains, const std::vector<int>& ordering,
                         const ProtocolConfig& config, const SegModelConfig& model_config, std::uint64_t model_seed,
                         const ProgressFn& progress = nullptr);

TrainingRun train_static(const std::vector<DomainDataset>& domains, ProtocolConfig config,
                         const SegModelConfig& model_config, std::uint64_t model_seed);
TrainingRun train_naive_sequential(const std::vector<DomainDataset>& domains, const std::vector<int>& ordering,
                                   ProtocolConfig config, const SegModelConfig& model_config,
                                   std::uint64_t model_seed);
TrainingRun train_multi_model(const std::vector<DomainDataset>& domains, const std::vector<int>& ordering,
                              ProtocolConfig config, const SegModelConfig& model_config, std::uint64_t model_seed);
TrainingRun train_ewc(const std::vector<DomainDataset>& domains, const std::vector<int>& ordering,
                      ProtocolConfig config, const SegModelConfig& model_config, std::uint64_t model_seed);
TrainingRun train_lwf(const std::vector<DomainDataset>& domains, const std::vector<int>& ordering,
                      ProtocolConfig config, const SegModelConfig& model_config, std::uint64_t model_seed);

// ---------------------------------------------------------------------------
// Building blocks, exposed for testing.

/// One training slice: volume index into a list and slice index.
struct SliceRef {
  const Volume* volume = nullptr;
  Index slice = 0;
};
std::vector<SliceRef> slice_list(const std::vector<Volume>& volumes);
/// Stacks the referenced slices into [N,1,H,W] image and mask batches.
std::pair<TensorF, TensorF> make_batch(const std::vector<SliceRef>& refs);

/// Ω = mean (or sum) over slices of the squared BCE gradient, for `names` only.
ParameterSet<float> compute_importance(SegModel<float>& model, int head, const NameSet& names,
                                       const std::vector<Volume>& data, bool sum_literal = false);

/// Σ_i Σ Ω_i·(θ_i − θ)² over every anchor. Throws SchemaError on name or shape mismatch.
double ewc_penalty(const ParameterSet<float>& params, const EWCState& state);

/// Soft targets F_{θ,head}(x) for every slice in `slices`.
PseudoDataset lwf_generate_pseudo(SegModel<float>& model, int head, int source_domain,
                                  const std::vector<SliceRef>& slices);

/// LwF warm-up: `lwf_warmup_epochs` epochs of loss_seg updating only `head`.
void lwf_warmup(SegModel<float>& model, int head, const std::vector<SliceRef>& slices, const ProtocolConfig& config,
                int stage);

/// Mean loss_seg over `volumes` through `head`, evaluated one volume at a time.
double validation_loss(SegModel<float>& model, int head, const std::vector<Volume>& volumes);

// ---------------------------------------------------------------------------
// Artifacts: runs/<id>/run.manifest, runs/<id>/stage<k>/{record.txt, *.clseg}.

void save_run(const std::filesystem::path& dir, const TrainingRun& run);
/// Throws InputError listing missing stages when the run is incomplete.
TrainingRun load_run(const std::filesystem::path& dir);
/// Writes the manifest with status "incomplete" before training starts.
void begin_run(const std::filesystem::path& dir, const TrainingRun& header);

}  // namespace clseg
