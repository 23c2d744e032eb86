// SPDX-License-Identifier: Apache-2.0
//
// Test-set scoring of trained runs: forgetting matrices, backwards transfer,
// aggregation over orderings and the A/B/C comparison against the multi-model
// benchmark.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "clseg/continual/continual.hpp"
#include "clseg/evaluation/metrics.hpp"
#include "clseg/oracle/oracle.hpp"

namespace clseg {

/// Test Dice is the mean of per-volume Dice scores, never pooled over pixels.
inline constexpr const char* kDiceAveraging = "volume-wise mean";
inline constexpr const char* kMacroColumn = "macro";

enum class Routing { ground_truth, oracle };

/// Per-volume Dice on `ds.test` after `stage`, with ground-truth routing.
std::vector<double> volume_dice(const TrainingRun& run, int stage, const DomainDataset& ds);
/// Per-volume Dice on `ds.test` at the end of the run under `routing`; `oracle` is required for Routing::oracle.
std::vector<double> volume_dice(const TrainingRun& run, const DomainDataset& ds, Routing routing,
                                const OracleEnsemble* oracle);
double mean_of(const std::vector<double>& values);

/// M[j][i]: mean test Dice on domain i after stage j of one ordering.
struct ForgettingMatrix {
  std::vector<int> ordering;
  std::map<int, int> trained_stage;         ///< domain id -> stage that trained it
  std::vector<std::map<int, double>> dice;  ///< one map per stage, keyed by domain id
};

ForgettingMatrix forgetting_matrix(const TrainingRun& run, const std::vector<DomainDataset>& domains);

/// BWT(i) = M[last][i] − M[stage of i][i]. Throws InputError when an entry is missing.
std::map<int, double> backwards_transfer(const ForgettingMatrix& m);

/// Mean and population standard deviation over orderings.
struct Cell {
  double mean = 0.0;
  double std = 0.0;
  int count = 0;

  /// "0.60 ($\pm$0.129)".
  std::string render() const;
};
std::string format_cell(double mean, double std);

/// One ordering's scores, keyed by domain name.
using DomainScores = std::map<std::string, double>;
/// Adds the macro average over the domains present.
DomainScores with_macro(DomainScores scores);

/// Cells per domain over orderings. Throws SchemaError when the orderings score different domains.
std::map<std::string, Cell> aggregate_orderings(const std::vector<DomainScores>& per_ordering);

/// Rows are methods, columns domains; `columns` fixes the column order.
struct ResultTable {
  std::vector<std::string> columns;
  std::vector<std::pair<std::string, std::map<std::string, Cell>>> rows;

  /// The first row fixes the columns: domains in name order, macro last.
  void add_row(const std::string& method, const std::map<std::string, Cell>& cells);
  /// method,domain,mean,std,n with fixed six-decimal numbers.
  std::string to_csv() const;
  /// Aligned table with rendered cells.
  std::string to_text() const;
};

/// Test scores of one run for every domain (plus macro) at the end of training.
DomainScores score_run(const TrainingRun& run, const std::vector<DomainDataset>& domains, Routing routing,
                       const OracleEnsemble* oracle = nullptr);

/// "naive_sequential", "ewc+heads", ...: protocol name plus the head mode.
std::string method_label(const ProtocolConfig& config);
std::string method_label(const TrainingRun& run);

enum class ComparisonKind { A, B, C };
std::string to_string(ComparisonKind kind);
ComparisonKind parse_comparison(const std::string& name);

struct ComparisonReport {
  ComparisonKind kind = ComparisonKind::A;
  std::string method;
  std::vector<std::string> columns;  ///< domain names then the macro column
  std::map<std::string, Cell> method_cells;
  std::map<std::string, Cell> benchmark_cells;
  std::map<std::string, bool> method_outperforms;  ///< per column, strict >
  bool overall = false;                            ///< on the macro column

  std::string to_csv() const;
  std::string to_text() const;
};

/// Recomputes the verdicts from the cells. Ties favour the benchmark.
void apply_verdicts(ComparisonReport& report);

/// A: ground-truth routing for both; B: method without domain information,
/// benchmark routed by the oracle; C: oracle routing for both. Throws
/// ConfigError when the kind needs an oracle and none is given, or when B gets
/// a method that relies on domain identity.
ComparisonReport run_comparison(ComparisonKind kind, const std::vector<TrainingRun>& method_runs,
                                const std::vector<TrainingRun>& benchmark_runs,
                                const std::vector<DomainDataset>& domains, const OracleEnsemble* oracle);

}  // namespace clseg
