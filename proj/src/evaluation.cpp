// SPDX-License-Identifier: Apache-2.0
#include "clseg/evaluation/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

namespace clseg {

std::vector<double> volume_dice(const TrainingRun& run, int stage, const DomainDataset& ds) {
  const Route r = route(run, stage, ds.spec.domain_id);
  std::vector<double> out;
  for (const auto& v : ds.test) out.push_back(dice_score(predict_routed(run, r, v.slices), v.mask));
  return out;
}

std::vector<double> volume_dice(const TrainingRun& run, const DomainDataset& ds, Routing routing,
                                const OracleEnsemble* oracle) {
  if (routing == Routing::ground_truth) return volume_dice(run, int(run.stage_states.size()) - 1, ds);
  if (oracle == nullptr) throw ConfigError("oracle routing needs an oracle ensemble");
  std::vector<double> out;
  for (const auto& v : ds.test) out.push_back(dice_score(route_inference(*oracle, run, v), v.mask));
  return out;
}

double mean_of(const std::vector<double>& values) {
  if (values.empty()) throw InputError("cannot average an empty score list");
  double total = 0;
  for (double v : values) total += v;
  return total / double(values.size());
}

ForgettingMatrix forgetting_matrix(const TrainingRun& run, const std::vector<DomainDataset>& domains) {
  ForgettingMatrix m;
  m.ordering = run.ordering;
  for (const auto& ds : domains) {
    const int s = run.stage_of(ds.spec.domain_id);
    if (s >= 0) m.trained_stage[ds.spec.domain_id] = s;
  }
  for (int j = 0; j < int(run.stage_states.size()); ++j) {
    std::map<int, double> row;
    for (const auto& ds : domains) row[ds.spec.domain_id] = mean_of(volume_dice(run, j, ds));
    m.dice.push_back(std::move(row));
  }
  return m;
}

std::map<int, double> backwards_transfer(const ForgettingMatrix& m) {
  if (m.dice.empty()) throw InputError("forgetting matrix has no stages");
  std::map<int, double> out;
  for (int d : m.ordering) {
    auto s = m.trained_stage.find(d);
    if (s == m.trained_stage.end() || s->second < 0 || s->second >= int(m.dice.size())) {
      throw InputError("forgetting matrix has no training stage for domain " + std::to_string(d));
    }
    const auto& own = m.dice[std::size_t(s->second)];
    const auto& last = m.dice.back();
    if (!own.count(d) || !last.count(d)) {
      throw InputError("forgetting matrix is missing an entry for domain " + std::to_string(d));
    }
    out[d] = last.at(d) - own.at(d);
  }
  return out;
}

std::string format_cell(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ($\\pm$%.3f)", mean, std);
  return buf;
}

std::string Cell::render() const { return format_cell(mean, std); }

DomainScores with_macro(DomainScores scores) {
  scores.erase(kMacroColumn);
  if (scores.empty()) throw InputError("no domain scores to average");
  double total = 0;
  for (const auto& [_, v] : scores) total += v;
  scores[kMacroColumn] = total / double(scores.size());
  return scores;
}

std::map<std::string, Cell> aggregate_orderings(const std::vector<DomainScores>& per_ordering) {
  if (per_ordering.empty()) throw InputError("aggregation needs at least one ordering");
  for (const auto& scores : per_ordering) {
    bool same = scores.size() == per_ordering[0].size();
    for (auto a = scores.begin(), b = per_ordering[0].begin(); same && a != scores.end(); ++a, ++b)
      same = a->first == b->first;
    if (!same) throw SchemaError("orderings were scored on different domain sets");
  }
  std::map<std::string, Cell> out;
  const double n = double(per_ordering.size());
  for (const auto& [name, _] : per_ordering[0]) {
    Cell c;
    c.count = int(per_ordering.size());
    for (const auto& scores : per_ordering) c.mean += scores.at(name) / n;
    double var = 0;
    for (const auto& scores : per_ordering) var += (scores.at(name) - c.mean) * (scores.at(name) - c.mean) / n;
    c.std = std::sqrt(var);
    out[name] = c;
  }
  return out;
}

namespace {

std::vector<std::string> column_order(const std::map<std::string, Cell>& cells) {
  std::vector<std::string> cols;
  for (const auto& [name, _] : cells)
    if (name != kMacroColumn) cols.push_back(name);
  if (cells.count(kMacroColumn)) cols.push_back(kMacroColumn);
  return cols;
}

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string csv_line(const std::string& row, const std::string& column, const Cell& c) {
  return row + "," + column + "," + fixed6(c.mean) + "," + fixed6(c.std) + "," + std::to_string(c.count) + "\n";
}

std::string render_grid(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) width[i] = header[i].size();
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  auto line = [&](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) s += " | ";
      s += cells[i] + std::string(width[i] - cells[i].size(), ' ');
    }
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s + "\n";
  };
  std::string out = line(header);
  std::size_t total = 0;
  for (std::size_t w : width) total += w;
  out += std::string(total + 3 * (width.size() - 1), '-') + "\n";
  for (const auto& r : rows) out += line(r);
  return out;
}

}  // namespace

void ResultTable::add_row(const std::string& method, const std::map<std::string, Cell>& cells) {
  if (columns.empty()) columns = column_order(cells);
  for (const auto& c : columns)
    if (!cells.count(c)) throw SchemaError("row '" + method + "' has no cell for column '" + c + "'");
  if (cells.size() != columns.size()) throw SchemaError("row '" + method + "' has extra columns");
  rows.emplace_back(method, cells);
}

std::string ResultTable::to_csv() const {
  std::string out = "method,domain,mean,std,n\n";
  for (const auto& [method, cells] : rows)
    for (const auto& c : columns) out += csv_line(method, c, cells.at(c));
  return out;
}

std::string ResultTable::to_text() const {
  std::vector<std::string> header{"method"};
  header.insert(header.end(), columns.begin(), columns.end());
  std::vector<std::vector<std::string>> grid;
  for (const auto& [method, cells] : rows) {
    std::vector<std::string> r{method};
    for (const auto& c : columns) r.push_back(cells.at(c).render());
    grid.push_back(std::move(r));
  }
  return render_grid(header, grid);
}

DomainScores score_run(const TrainingRun& run, const std::vector<DomainDataset>& domains, Routing routing,
                       const OracleEnsemble* oracle) {
  DomainScores scores;
  for (const auto& ds : domains) scores[ds.spec.name] = mean_of(volume_dice(run, ds, routing, oracle));
  return with_macro(std::move(scores));
}

std::string method_label(const ProtocolConfig& config) {
  return to_string(config.kind) + (config.use_heads ? "+heads" : "");
}

std::string method_label(const TrainingRun& run) { return method_label(run.config); }

std::string to_string(ComparisonKind kind) {
  switch (kind) {
    case ComparisonKind::A: return "A";
    case ComparisonKind::B: return "B";
    case ComparisonKind::C: return "C";
  }
  return "?";
}

ComparisonKind parse_comparison(const std::string& name) {
  if (name == "A" || name == "a") return ComparisonKind::A;
  if (name == "B" || name == "b") return ComparisonKind::B;
  if (name == "C" || name == "c") return ComparisonKind::C;
  throw ConfigError("unknown comparison '" + name + "' (expected A, B or C)");
}

void apply_verdicts(ComparisonReport& report) {
  report.method_outperforms.clear();
  for (const auto& c : report.columns) {
    report.method_outperforms[c] = report.method_cells.at(c).mean > report.benchmark_cells.at(c).mean;
  }
  report.overall = report.method_outperforms.count(kMacroColumn) && report.method_outperforms.at(kMacroColumn);
}

ComparisonReport run_comparison(ComparisonKind kind, const std::vector<TrainingRun>& method_runs,
                                const std::vector<TrainingRun>& benchmark_runs,
                                const std::vector<DomainDataset>& domains, const OracleEnsemble* oracle) {
  if (kind != ComparisonKind::A && oracle == nullptr) {
    throw ConfigError("comparison " + to_string(kind) + " needs an oracle (--oracle-dir)");
  }
  if (method_runs.empty() || benchmark_runs.empty()) throw InputError("comparison needs method and benchmark runs");
  for (const auto& run : benchmark_runs) {
    if (run.config.kind != ProtocolKind::multi_model) {
      throw ConfigError("benchmark runs must use the multi_model protocol, got " + method_label(run));
    }
  }
  const std::string method = method_label(method_runs[0]);
  for (const auto& run : method_runs) {
    if (method_label(run) != method) throw ConfigError("method runs mix " + method + " and " + method_label(run));
    if (kind == ComparisonKind::B && (run.num_heads > 1 || run.config.kind == ProtocolKind::multi_model)) {
      throw ConfigError("comparison B needs a method without domain-specific parameters, got " + method);
    }
  }
  const Routing method_routing = kind == ComparisonKind::C ? Routing::oracle : Routing::ground_truth;
  const Routing bench_routing = kind == ComparisonKind::A ? Routing::ground_truth : Routing::oracle;

  std::vector<DomainScores> m, b;
  for (const auto& run : method_runs) m.push_back(score_run(run, domains, method_routing, oracle));
  for (const auto& run : benchmark_runs) b.push_back(score_run(run, domains, bench_routing, oracle));

  ComparisonReport report;
  report.kind = kind;
  report.method = method;
  report.method_cells = aggregate_orderings(m);
  report.benchmark_cells = aggregate_orderings(b);
  report.columns = column_order(report.method_cells);
  if (column_order(report.benchmark_cells) != report.columns) {
    throw SchemaError("method and benchmark were scored on different domains");
  }
  apply_verdicts(report);
  return report;
}

std::string ComparisonReport::to_csv() const {
  std::string out = "comparison,row,domain,mean,std,n,method_outperforms\n";
  const std::string k = to_string(kind);
  for (const auto& c : columns) {
    const std::string verdict = method_outperforms.at(c) ? "yes" : "no";
    std::string line = csv_line(method, c, method_cells.at(c));
    line.pop_back();
    out += k + "," + line + "," + verdict + "\n";
    line = csv_line("multi_model", c, benchmark_cells.at(c));
    line.pop_back();
    out += k + "," + line + "," + verdict + "\n";
  }
  return out;
}

std::string ComparisonReport::to_text() const {
  std::ostringstream os;
  os << "comparison " << to_string(kind) << ": " << method << " vs multi_model benchmark\n";
  os << "dice averaging: " << kDiceAveraging << "\n\n";
  std::vector<std::string> header{"row"};
  header.insert(header.end(), columns.begin(), columns.end());
  std::vector<std::string> mr{method}, br{"multi_model"}, vr{"method outperforms"};
  for (const auto& c : columns) {
    mr.push_back(method_cells.at(c).render());
    br.push_back(benchmark_cells.at(c).render());
    vr.push_back(method_outperforms.at(c) ? "yes" : "no");
  }
  os << render_grid(header, {mr, br, vr});
  os << "\noverall: " << (overall ? "method_outperforms" : "benchmark_not_beaten") << "\n";
  return os.str();
}

}  // namespace clseg
