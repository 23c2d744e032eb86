// SPDX-License-Identifier: Apache-2.0
//
// Experiment driver behind the clseg executable. Everything lives under one
// output root:
//   data/                 generated datasets (dataset.manifest + volumes/)
//   runs/<method>__<ord>/ one directory per protocol run
//   oracle/<kind>/        autoencoder ensembles, oracle_accuracy.{csv,txt}
//   eval/, report/        tables, comparisons and plots, indexed by index.manifest
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "clseg/continual/continual.hpp"
#include "clseg/evaluation/evaluation.hpp"
#include "clseg/oracle/oracle.hpp"

namespace clseg::cli {

enum ExitCode : int { kOk = 0, kConfigFailure = 2, kDataFailure = 3, kNumericFailure = 4 };

/// Overrides the configured output root when --out is not given.
inline constexpr const char* kOutputRootEnv = "CLSEG_OUTPUT_ROOT";

struct ExperimentConfig {
  std::string preset = "three_domain";  ///< "none" builds domains from data.domains and domain.<name>.* keys
  std::uint64_t data_seed = 0;
  std::uint64_t split_seed = 1;
  DatasetSizes sizes;
  std::vector<DomainSpec> domains;  ///< resolved specs, ids in order

  SegModelConfig model;
  std::uint64_t model_seed = 7;

  ProtocolConfig train;  ///< shared fields; kind and kind-specific fields are filled per protocol
  double ewc_lambda = 1.0;
  bool ewc_sum_literal = false;
  int lwf_warmup_epochs = 2;
  double lwf_distill_weight = 1.0;

  std::vector<std::string> protocols{"static", "naive_sequential", "multi_model", "ewc+heads", "lwf+heads"};
  std::vector<std::vector<std::string>> orderings;  ///< empty means every permutation

  std::vector<AEKind> oracle_kinds{AEKind::cnn, AEKind::linear};
  OracleTrainConfig oracle;
  int oracle_repetitions = 1;

  std::filesystem::path output_dir = "clseg_out";

  /// "ewc", "ewc+heads", ... resolved against the shared training fields.
  ProtocolConfig protocol(const std::string& name) const;
  /// Domain id sequences to train, from `orderings` or all permutations.
  std::vector<std::vector<int>> ordering_ids(const std::vector<std::string>& names) const;
  void validate() const;
};

/// Flat `key = value` text. Unknown or malformed keys raise ConfigError naming the key and line.
ExperimentConfig parse_experiment_config(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct Options {
  std::optional<std::filesystem::path> config;
  std::string protocol;
  std::string ordering;
  std::string comparison;
  std::optional<std::filesystem::path> oracle_dir;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

/// Output root: --out, then $CLSEG_OUTPUT_ROOT, then output.dir.
std::filesystem::path output_root(const ExperimentConfig& config, const Options& options);
/// Directory name of a run, e.g. "ewc-heads__A-B-C".
std::string run_id(const std::string& method, const std::vector<std::string>& ordering_names);
/// "A,B,C" -> domain ids. Throws ConfigError on unknown or repeated names.
std::vector<int> parse_ordering(const std::string& text, const std::vector<std::string>& names);

void cmd_generate(const ExperimentConfig& config, const Options& options, std::ostream& log);
void cmd_train(const ExperimentConfig& config, const Options& options, std::ostream& log);
void cmd_evaluate(const ExperimentConfig& config, const Options& options, std::ostream& log);
void cmd_oracle(const ExperimentConfig& config, const Options& options, std::ostream& log);
void cmd_report(const ExperimentConfig& config, const Options& options, std::ostream& log);

/// Dice-vs-stage curves, one polyline per domain, as a standalone SVG document.
std::string dice_stage_svg(const std::string& title, const std::vector<std::string>& domains,
                           const std::vector<std::vector<double>>& dice_by_stage);

/// Parses arguments, dispatches and maps errors to exit codes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace clseg::cli
