// SPDX-License-Identifier: Apache-2.0
//
// Autoencoder domain oracle: one reconstruction network per seen domain; a
// volume is assigned to the domain whose autoencoder reconstructs most of its
// slices best.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "clseg/continual/continual.hpp"
#include "clseg/models/autoencoder.hpp"
#include "clseg/synthdata/synthdata.hpp"

namespace clseg {

struct OracleTrainConfig {
  int epochs = 15;
  double lr = 0.5;
  int batch_size = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

struct OracleEnsemble {
  AEConfig config;
  Index height = 0;
  Index width = 0;
  OracleTrainConfig training;
  std::map<int, ParameterSet<float>> members;  ///< domain id -> autoencoder parameters
  std::map<int, std::string> names;            ///< domain id -> domain name

  Autoencoder<float> member(int domain_id) const;
};

/// Minimises loss_mse(x, A(x)) over every training slice with SGD.
ParameterSet<float> train_oracle_member(const std::vector<Volume>& train, const AEConfig& config,
                                        const OracleTrainConfig& training, int domain_id);
OracleEnsemble train_oracle(const std::vector<DomainDataset>& domains, const AEConfig& config,
                            const OracleTrainConfig& training);

struct DomainVerdict {
  int domain_id = -1;
  std::vector<int> votes;           ///< per slice argmin domain
  std::map<int, double> mean_mse;   ///< per domain, averaged over slices
};

/// Per slice, per domain reconstruction MSE.
std::vector<std::map<int, double>> slice_errors(const OracleEnsemble& ensemble, const Volume& volume);
/// Plurality of per-slice argmins; ties go to the lowest mean MSE, then the lowest id.
DomainVerdict decide_domain(const std::vector<std::map<int, double>>& errors);
DomainVerdict infer_domain(const OracleEnsemble& ensemble, const Volume& volume);

struct OracleAccuracy {
  std::map<int, double> per_domain;
  double macro = 0.0;
};

/// Fraction of volumes per labelled domain whose verdict matches the label.
OracleAccuracy oracle_accuracy(const OracleEnsemble& ensemble, const std::vector<DomainDataset>& labelled);
OracleAccuracy accuracy_from_verdicts(const std::vector<std::pair<int, int>>& label_and_verdict);

/// Segments `batch` with the state serving `domain_id` at the end of the run:
/// the stored state (multi-model), θ^S + θ_d^D (heads), or the single model.
TensorF predict_for_domain(const TrainingRun& run, int domain_id, const TensorF& batch);
/// Oracle-routed segmentation of a volume; the verdict is written to `verdict` when given.
TensorF route_inference(const OracleEnsemble& ensemble, const TrainingRun& run, const Volume& volume,
                        DomainVerdict* verdict = nullptr);

/// Persistence: oracle.manifest plus member_<id>.clseg per domain.
void save_oracle(const std::filesystem::path& dir, const OracleEnsemble& ensemble);
OracleEnsemble load_oracle(const std::filesystem::path& dir);

}  // namespace clseg
