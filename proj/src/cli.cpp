// SPDX-License-Identifier: Apache-2.0
#include "clseg/cli/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "clseg/models/checkpoint.hpp"

namespace clseg::cli {

namespace {

namespace fs = std::filesystem;

std::string lower(std::string s) {
  for (auto& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
  }
  return out;
}

std::string join(const std::vector<std::string>& items, const std::string& sep) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : sep) + s;
  return out;
}

const std::set<std::string> kKeys{
    "data.preset",           "data.seed",
    "data.split_seed",       "data.domains",
    "data.volumes_per_domain", "data.slices_per_volume",
    "data.height",           "data.width",
    "data.train_fraction",   "data.val_fraction",
    "model.encoder_blocks",  "model.base_channels",
    "model.seed",            "train.epochs_per_stage",
    "train.lr",              "train.l2_weight",
    "train.batch_size",      "train.seed",
    "augment.flip_prob",     "augment.affine_prob",
    "augment.max_rotation_deg", "augment.max_translation",
    "augment.noise_prob",    "augment.noise_sigma",
    "augment.bias_prob",     "augment.bias_amplitude",
    "ewc.lambda",            "ewc.sum_literal",
    "lwf.warmup_epochs",     "lwf.distill_weight",
    "experiment.protocols",  "experiment.orderings",
    "oracle.kinds",          "oracle.epochs",
    "oracle.lr",             "oracle.batch_size",
    "oracle.seed",           "oracle.repetitions",
    "output.dir",
};

const std::set<std::string> kDomainFields{
    "radius_min",     "radius_max",           "center_concentration", "intensity_gain",       "intensity_offset",
    "noise_sigma",    "bias_field_amplitude", "foreground_intensity", "background_intensity", "seed",
};

class ConfigReader {
 public:
  ConfigReader(const Manifest& kv, std::string source) : kv_(kv), source_(std::move(source)) {}

  std::string where(const std::string& key) const { return source_ + ":" + std::to_string(kv_.line_of(key)) + ": "; }
  bool has(const std::string& key) const { return kv_.contains(key); }

  void text(const std::string& key, std::string& v) const {
    if (has(key)) v = kv_.at(key);
  }
  void number(const std::string& key, double& v) const {
    if (has(key)) v = kv_.number(key);
  }
  template <typename Int>
  void integer(const std::string& key, Int& v) const {
    if (has(key)) v = Int(kv_.integer(key));
  }
  void seed(const std::string& key, std::uint64_t& v) const {
    if (!has(key)) return;
    const std::string& s = kv_.at(key);
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError(where(key) + "key '" + key + "' needs an unsigned integer seed, got '" + s + "'");
    }
    v = std::stoull(s);
  }
  void boolean(const std::string& key, bool& v) const {
    if (!has(key)) return;
    const std::string s = lower(kv_.at(key));
    if (s == "true" || s == "1" || s == "yes") {
      v = true;
    } else if (s == "false" || s == "0" || s == "no") {
      v = false;
    } else {
      throw ConfigError(where(key) + "key '" + key + "' needs true or false, got '" + kv_.at(key) + "'");
    }
  }

 private:
  const Manifest& kv_;
  std::string source_;
};

/// Replaces or refuses a non-empty output directory.
void prepare_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError("output directory '" + dir.string() + "' is not empty; pass --force to replace it");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

/// Writes every file and an index.manifest listing them with their digests.
void write_outputs(const fs::path& dir, const std::vector<std::pair<std::string, std::string>>& files) {
  fs::create_directories(dir);
  Manifest index;
  index.set("format", std::string("clseg-index-1"));
  std::vector<std::string> names;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto& [name, body] = files[i];
    write_file_atomic(dir / name, body);
    names.push_back(name);
    index.set("sha256." + std::to_string(i),
              to_hex(sha256(reinterpret_cast<const std::uint8_t*>(body.data()), body.size())));
  }
  index.set("files", join(names, ","));
  index.set("tool_version", std::string(CLSEG_VERSION));
  write_file_atomic(dir / "index.manifest", index.to_text());
}

std::vector<DomainDataset> load_data(const fs::path& root) {
  const fs::path dir = root / "data";
  if (!fs::exists(dir / "dataset.manifest")) {
    throw InputError("no datasets under '" + dir.string() + "'; run 'clseg generate' first");
  }
  return load_datasets(dir);
}

std::vector<std::string> domain_names(const std::vector<DomainDataset>& data) {
  std::vector<std::string> names;
  for (const auto& ds : data) names.push_back(ds.spec.name);
  return names;
}

/// Canonical row order: static, naive, multi-model, EWC, LwF; plain before heads.
std::pair<int, bool> method_rank(const TrainingRun& run) { return {int(run.config.kind), run.config.use_heads}; }

struct LoadedRun {
  std::string id;
  TrainingRun run;
};

std::vector<LoadedRun> load_runs(const fs::path& root, const std::string& method_filter) {
  const fs::path dir = root / "runs";
  if (!fs::exists(dir)) throw InputError("no runs under '" + dir.string() + "'; run 'clseg train' first");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<LoadedRun> out;
  for (const auto& d : dirs) {
    TrainingRun run = load_run(d);
    if (!method_filter.empty() && method_label(run) != method_filter) continue;
    out.push_back({d.filename().string(), std::move(run)});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const LoadedRun& a, const LoadedRun& b) { return method_rank(a.run) < method_rank(b.run); });
  if (out.empty()) {
    throw InputError("no runs" + (method_filter.empty() ? std::string() : " for '" + method_filter + "'") +
                     " under '" + dir.string() + "'");
  }
  return out;
}

std::map<std::string, std::vector<const TrainingRun*>> group_by_method(const std::vector<LoadedRun>& runs,
                                                                       std::vector<std::string>& order) {
  std::map<std::string, std::vector<const TrainingRun*>> groups;
  for (const auto& r : runs) {
    const std::string m = method_label(r.run);
    if (!groups.count(m)) order.push_back(m);
    groups[m].push_back(&r.run);
  }
  return groups;
}

std::string file_token(std::string s) {
  std::replace(s.begin(), s.end(), '+', '-');
  return s;
}

std::string ordering_text(const TrainingRun& run) {
  std::vector<std::string> names;
  for (int d : run.ordering) names.push_back(run.domain_names.at(std::size_t(d)));
  return join(names, "-");
}

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// Results table, forgetting matrices, BWT and plots for every loaded run.
std::vector<std::pair<std::string, std::string>> results_files(const std::vector<LoadedRun>& runs,
                                                                const std::vector<DomainDataset>& data) {
  std::vector<std::string> order;
  const auto groups = group_by_method(runs, order);
  const auto names = domain_names(data);
  ResultTable table, bwt_table;
  std::string forgetting = "method,ordering,stage,domain,dice\n";
  std::vector<std::pair<std::string, std::string>> files;
  std::vector<std::pair<std::string, std::string>> plots;
  for (const auto& method : order) {
    std::vector<DomainScores> finals, bwts;
    std::vector<std::vector<double>> curve;  // [stage][domain], summed over orderings
    int sequential = 0;
    for (const TrainingRun* run : groups.at(method)) {
      const ForgettingMatrix m = forgetting_matrix(*run, data);
      DomainScores final_scores;
      for (const auto& ds : data) final_scores[ds.spec.name] = m.dice.back().at(ds.spec.domain_id);
      finals.push_back(with_macro(final_scores));
      for (std::size_t j = 0; j < m.dice.size(); ++j)
        for (const auto& ds : data)
          forgetting += method + "," + ordering_text(*run) + "," + std::to_string(j) + "," + ds.spec.name + "," +
                        fixed6(m.dice[j].at(ds.spec.domain_id)) + "\n";
      DomainScores b;
      for (const auto& [d, v] : backwards_transfer(m)) b[names.at(std::size_t(d))] = v;
      bwts.push_back(b);
      if (run->config.kind != ProtocolKind::static_joint) {
        if (curve.empty()) curve.assign(m.dice.size(), std::vector<double>(data.size(), 0.0));
        for (std::size_t j = 0; j < m.dice.size() && j < curve.size(); ++j)
          for (std::size_t i = 0; i < data.size(); ++i) curve[j][i] += m.dice[j].at(data[i].spec.domain_id);
        ++sequential;
      }
    }
    table.add_row(method, aggregate_orderings(finals));
    bwt_table.add_row(method, aggregate_orderings(bwts));
    if (sequential > 0) {
      for (auto& row : curve)
        for (auto& v : row) v /= double(sequential);
      plots.emplace_back("dice_vs_stage_" + file_token(method) + ".svg",
                         dice_stage_svg(method + ": test Dice after each stage", names, curve));
    }
  }
  files.emplace_back("results.csv", table.to_csv());
  files.emplace_back("results.txt", std::string("test Dice after the final stage, ") + kDiceAveraging +
                                        ", mean (std) over orderings\n\n" + table.to_text());
  files.emplace_back("forgetting.csv", forgetting);
  files.emplace_back("bwt.csv", bwt_table.to_csv());
  files.insert(files.end(), plots.begin(), plots.end());
  return files;
}

OracleEnsemble resolve_oracle(const fs::path& dir) {
  if (fs::exists(dir / "oracle.manifest")) return load_oracle(dir);
  if (fs::exists(dir / "cnn" / "oracle.manifest")) return load_oracle(dir / "cnn");
  throw InputError("no oracle ensemble at '" + dir.string() + "'");
}

std::vector<TrainingRun> runs_of(const std::vector<LoadedRun>& runs, const std::string& method) {
  std::vector<TrainingRun> out;
  for (const auto& r : runs)
    if (method_label(r.run) == method) out.push_back(r.run);
  return out;
}

std::string comparison_name(ComparisonKind kind, const std::string& method) {
  return "comparison_" + to_string(kind) + "_" + file_token(method);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ProtocolConfig ExperimentConfig::protocol(const std::string& name) const {
  std::string base = name;
  bool heads = false;
  if (const auto plus = name.find('+'); plus != std::string::npos) {
    if (name.substr(plus) != "+heads") throw ConfigError("unknown protocol suffix in '" + name + "' (expected +heads)");
    base = name.substr(0, plus);
    heads = true;
  }
  ProtocolConfig c = train;
  c.kind = parse_protocol(base);
  c.use_heads = heads;
  c.ewc_lambda.reset();
  c.ewc_sum_literal = false;
  c.lwf_warmup_epochs.reset();
  c.lwf_distill_weight.reset();
  if (c.kind == ProtocolKind::ewc) {
    c.ewc_lambda = ewc_lambda;
    c.ewc_sum_literal = ewc_sum_literal;
  }
  if (c.kind == ProtocolKind::lwf) {
    c.lwf_warmup_epochs = lwf_warmup_epochs;
    c.lwf_distill_weight = lwf_distill_weight;
  }
  c.validate();
  return c;
}

std::vector<std::vector<int>> ExperimentConfig::ordering_ids(const std::vector<std::string>& names) const {
  if (orderings.empty()) {
    std::vector<int> ids(names.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = int(i);
    return clseg::orderings(ids);
  }
  std::vector<std::vector<int>> out;
  for (const auto& o : orderings) out.push_back(parse_ordering(join(o, ","), names));
  return out;
}

void ExperimentConfig::validate() const {
  if (domains.empty()) throw ConfigError("no domains configured");
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].domain_id != int(i)) throw ConfigError("domain ids must follow the configured order");
    domains[i].validate(sizes.height, sizes.width);
  }
  model.validate();
  train.augmentation.validate();
  for (const auto& p : protocols) protocol(p);
  std::vector<std::string> names;
  for (const auto& d : domains) names.push_back(d.name);
  ordering_ids(names);
  oracle.validate();
  if (oracle_repetitions < 1) throw ConfigError("oracle.repetitions must be >= 1");
  if (oracle_kinds.empty()) throw ConfigError("oracle.kinds is empty");
}

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& source) {
  const Manifest kv = Manifest::parse(text, source);
  const ConfigReader r(kv, source);
  ExperimentConfig c;
  c.train.seed = 5;
  c.oracle.seed = 3;

  std::set<std::string> domain_keys;
  for (const auto& [key, _] : kv.entries()) {
    if (kKeys.count(key)) continue;
    const auto parts = split(key, '.');
    if (parts.size() == 3 && parts[0] == "domain" && kDomainFields.count(parts[2])) {
      domain_keys.insert(parts[1]);
      continue;
    }
    throw ConfigError(r.where(key) + "unknown key '" + key + "'");
  }

  r.text("data.preset", c.preset);
  r.seed("data.seed", c.data_seed);
  r.seed("data.split_seed", c.split_seed);
  r.integer("data.volumes_per_domain", c.sizes.volumes_per_domain);
  r.integer("data.slices_per_volume", c.sizes.slices_per_volume);
  r.integer("data.height", c.sizes.height);
  r.integer("data.width", c.sizes.width);
  r.number("data.train_fraction", c.sizes.train_fraction);
  r.number("data.val_fraction", c.sizes.val_fraction);

  if (c.preset == "none") {
    if (!r.has("data.domains")) throw ConfigError(source + ": data.preset = none needs data.domains");
    for (const auto& name : split(kv.at("data.domains"), ',')) {
      DomainSpec s;
      s.domain_id = int(c.domains.size());
      s.name = name;
      s.seed = derive_seed({c.data_seed, static_cast<std::uint64_t>(s.domain_id), 0x5eed});
      c.domains.push_back(s);
    }
  } else {
    if (r.has("data.domains")) throw ConfigError(r.where("data.domains") + "data.domains needs data.preset = none");
    c.domains = domain_preset(c.preset, c.data_seed);
  }
  std::set<std::string> seen;
  for (const auto& s : c.domains) {
    if (!seen.insert(lower(s.name)).second) throw ConfigError(source + ": duplicate domain name '" + s.name + "'");
  }
  for (const auto& key_domain : domain_keys) {
    if (!seen.count(key_domain)) {
      for (const auto& [key, _] : kv.entries())
        if (split(key, '.')[1] == key_domain) throw ConfigError(r.where(key) + "key '" + key + "' names an unknown domain");
    }
  }
  for (auto& s : c.domains) {
    const std::string p = "domain." + lower(s.name) + ".";
    r.number(p + "radius_min", s.radius_min);
    r.number(p + "radius_max", s.radius_max);
    r.number(p + "center_concentration", s.center_concentration);
    r.number(p + "intensity_gain", s.intensity_gain);
    r.number(p + "intensity_offset", s.intensity_offset);
    r.number(p + "noise_sigma", s.noise_sigma);
    r.number(p + "bias_field_amplitude", s.bias_field_amplitude);
    r.number(p + "foreground_intensity", s.foreground_intensity);
    r.number(p + "background_intensity", s.background_intensity);
    r.seed(p + "seed", s.seed);
  }

  r.integer("model.encoder_blocks", c.model.encoder_blocks);
  r.integer("model.base_channels", c.model.base_channels);
  r.seed("model.seed", c.model_seed);

  r.integer("train.epochs_per_stage", c.train.epochs_per_stage);
  r.number("train.lr", c.train.lr);
  r.number("train.l2_weight", c.train.l2_weight);
  r.integer("train.batch_size", c.train.batch_size);
  r.seed("train.seed", c.train.seed);
  auto& a = c.train.augmentation;
  r.number("augment.flip_prob", a.flip_prob);
  r.number("augment.affine_prob", a.affine_prob);
  r.number("augment.max_rotation_deg", a.max_rotation_deg);
  r.number("augment.max_translation", a.max_translation);
  r.number("augment.noise_prob", a.noise_prob);
  r.number("augment.noise_sigma", a.noise_sigma);
  r.number("augment.bias_prob", a.bias_prob);
  r.number("augment.bias_amplitude", a.bias_amplitude);
  r.number("ewc.lambda", c.ewc_lambda);
  r.boolean("ewc.sum_literal", c.ewc_sum_literal);
  r.integer("lwf.warmup_epochs", c.lwf_warmup_epochs);
  r.number("lwf.distill_weight", c.lwf_distill_weight);

  if (r.has("experiment.protocols")) c.protocols = split(kv.at("experiment.protocols"), ',');
  if (r.has("experiment.orderings") && lower(kv.at("experiment.orderings")) != "all") {
    for (const auto& o : split(kv.at("experiment.orderings"), ';')) c.orderings.push_back(split(o, ','));
  }

  if (r.has("oracle.kinds")) {
    c.oracle_kinds.clear();
    for (const auto& k : split(kv.at("oracle.kinds"), ',')) c.oracle_kinds.push_back(parse_ae_kind(k));
  }
  r.integer("oracle.epochs", c.oracle.epochs);
  r.number("oracle.lr", c.oracle.lr);
  r.integer("oracle.batch_size", c.oracle.batch_size);
  r.seed("oracle.seed", c.oracle.seed);
  r.integer("oracle.repetitions", c.oracle_repetitions);

  std::string out = c.output_dir.string();
  r.text("output.dir", out);
  c.output_dir = out;

  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
  return parse_experiment_config(read_file(path), path.string());
}

fs::path output_root(const ExperimentConfig& config, const Options& options) {
  if (options.out) return *options.out;
  if (const char* env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') return env;
  return config.output_dir;
}

std::string run_id(const std::string& method, const std::vector<std::string>& ordering_names) {
  return file_token(method) + "__" + join(ordering_names, "-");
}

std::vector<int> parse_ordering(const std::string& text, const std::vector<std::string>& names) {
  std::vector<int> ids;
  for (const auto& item : split(text, ',')) {
    auto it = std::find_if(names.begin(), names.end(), [&](const std::string& n) { return lower(n) == lower(item); });
    if (it == names.end()) throw ConfigError("ordering names unknown domain '" + item + "'");
    const int id = int(it - names.begin());
    if (std::count(ids.begin(), ids.end(), id)) throw ConfigError("ordering repeats domain '" + item + "'");
    ids.push_back(id);
  }
  if (ids.empty()) throw ConfigError("ordering '" + text + "' is empty");
  return ids;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_generate(const ExperimentConfig& config, const Options& options, std::ostream& log) {
  const fs::path dir = output_root(config, options) / "data";
  std::vector<DomainSpec> specs = config.domains;
  if (options.seed) {
    for (auto& s : specs) s.seed = derive_seed({*options.seed, static_cast<std::uint64_t>(s.domain_id), 0x5eed});
  }
  std::vector<DomainDataset> data;
  for (const auto& s : specs) data.push_back(make_domain_dataset(s, config.sizes, config.split_seed));
  prepare_dir(dir, options.force);
  save_datasets(dir, data);
  for (const auto& ds : data) {
    log << "domain " << ds.spec.name << ": " << ds.train.size() << " train, " << ds.val.size() << " val, "
        << ds.test.size() << " test volumes\n";
  }
  log << "wrote " << dir.string() << "\n";
}

void cmd_train(const ExperimentConfig& config, const Options& options, std::ostream& log) {
  const fs::path root = output_root(config, options);
  const auto data = load_data(root);
  const auto names = domain_names(data);
  const std::vector<std::string> protocols =
      options.protocol.empty() ? config.protocols : std::vector<std::string>{options.protocol};
  const auto ords = options.ordering.empty() ? config.ordering_ids(names)
                                             : std::vector<std::vector<int>>{parse_ordering(options.ordering, names)};
  for (const auto& name : protocols) {
    ProtocolConfig pc = config.protocol(name);
    if (options.seed) pc.seed = *options.seed;
    const std::string label = method_label(pc);
    std::vector<std::vector<int>> todo = ords;
    if (pc.kind == ProtocolKind::static_joint) {
      std::vector<int> all(names.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = int(i);
      todo = {all};
    }
    for (const auto& ord : todo) {
      std::vector<std::string> ord_names;
      for (int d : ord) ord_names.push_back(names.at(std::size_t(d)));
      const fs::path dir = root / "runs" / run_id(label, ord_names);
      prepare_dir(dir, options.force);
      TrainingRun header;
      header.config = pc;
      header.model_config = config.model;
      header.model_seed = config.model_seed;
      header.num_heads = pc.use_heads ? int(data.size()) : 1;
      header.ordering = ord;
      header.domain_names = names;
      begin_run(dir, header);
      const TrainingRun run = run_protocol(data, ord, pc, config.model, config.model_seed,
                                           [&](const std::string& msg) { log << "  " << msg << "\n"; });
      save_run(dir, run);
      log << "trained " << dir.filename().string() << " (" << run.stages.size() << " stages)\n";
    }
  }
}

void cmd_evaluate(const ExperimentConfig& config, const Options& options, std::ostream& log) {
  const fs::path root = output_root(config, options);
  std::optional<ComparisonKind> kind;
  if (!options.comparison.empty()) kind = parse_comparison(options.comparison);
  if (kind && *kind != ComparisonKind::A && !options.oracle_dir) {
    throw ConfigError("comparison " + to_string(*kind) + " needs --oracle-dir");
  }
  if (kind && options.protocol.empty()) throw ConfigError("a comparison needs --protocol naming the method");
  const std::string method = options.protocol.empty() ? "" : method_label(config.protocol(options.protocol));
  const auto data = load_data(root);

  if (!kind) {
    const auto runs = load_runs(root, method);
    const fs::path dir = root / "eval" / (method.empty() ? "results" : "results_" + file_token(method));
    prepare_dir(dir, options.force);
    write_outputs(dir, results_files(runs, data));
    log << "wrote " << dir.string() << "\n";
    return;
  }
  const auto runs = load_runs(root, "");
  const auto method_runs = runs_of(runs, method);
  const auto bench = runs_of(runs, "multi_model");
  if (method_runs.empty()) throw InputError("no complete runs for '" + method + "'");
  if (bench.empty()) throw InputError("no multi_model benchmark runs");
  std::optional<OracleEnsemble> oracle;
  if (*kind != ComparisonKind::A) oracle = resolve_oracle(*options.oracle_dir);
  const ComparisonReport report = run_comparison(*kind, method_runs, bench, data, oracle ? &*oracle : nullptr);
  const fs::path dir = root / "eval" / comparison_name(*kind, method);
  prepare_dir(dir, options.force);
  write_outputs(dir, {{"comparison.csv", report.to_csv()}, {"comparison.txt", report.to_text()}});
  log << report.to_text() << "wrote " << dir.string() << "\n";
}

void cmd_oracle(const ExperimentConfig& config, const Options& options, std::ostream& log) {
  const fs::path root = output_root(config, options);
  const auto data = load_data(root);
  const fs::path dir = options.oracle_dir.value_or(root / "oracle");
  prepare_dir(dir, options.force);
  ResultTable table;
  for (AEKind k : config.oracle_kinds) {
    AEConfig ae;
    ae.kind = k;
    std::vector<DomainScores> reps;
    for (int rep = 0; rep < config.oracle_repetitions; ++rep) {
      OracleTrainConfig t = config.oracle;
      if (options.seed) t.seed = *options.seed;
      if (rep > 0) t.seed = derive_seed({t.seed, static_cast<std::uint64_t>(rep)});
      const OracleEnsemble ens = train_oracle(data, ae, t);
      const OracleAccuracy acc = oracle_accuracy(ens, data);
      DomainScores s;
      for (const auto& [d, v] : acc.per_domain) s[ens.names.at(d)] = v;
      reps.push_back(with_macro(s));
      if (rep == 0) save_oracle(dir / to_string(k), ens);
    }
    table.add_row(to_string(k) + " autoencoder", aggregate_orderings(reps));
  }
  const std::string text = "domain identification accuracy on the test volumes, mean (std) over " +
                           std::to_string(config.oracle_repetitions) + " repetition(s)\n\n" + table.to_text();
  write_outputs(dir, {{"oracle_accuracy.csv", table.to_csv()}, {"oracle_accuracy.txt", text}});
  log << text << "wrote " << dir.string() << "\n";
}

void cmd_report(const ExperimentConfig& config, const Options& options, std::ostream& log) {
  const fs::path root = output_root(config, options);
  const auto data = load_data(root);
  const auto runs = load_runs(root, "");
  auto files = results_files(runs, data);

  std::optional<OracleEnsemble> oracle;
  const fs::path oracle_dir = options.oracle_dir.value_or(root / "oracle");
  if (options.oracle_dir || fs::exists(oracle_dir)) oracle = resolve_oracle(oracle_dir);

  std::string summary = std::string("clseg report (tool ") + CLSEG_VERSION + ")\n\n";
  summary += "== Test Dice after the final stage (" + std::string(kDiceAveraging) + ") ==\n\n";
  summary += files[1].second.substr(files[1].second.find("\n\n") + 2);
  const auto bench = runs_of(runs, "multi_model");
  std::vector<std::string> order;
  group_by_method(runs, order);
  for (const auto& method : order) {
    if (method == "multi_model" || method == "static" || bench.empty()) continue;
    const auto method_runs = runs_of(runs, method);
    const bool uses_domain = method_runs[0].num_heads > 1;
    std::vector<ComparisonKind> kinds{ComparisonKind::A};
    if (oracle && !uses_domain) kinds.push_back(ComparisonKind::B);
    if (oracle) kinds.push_back(ComparisonKind::C);
    for (ComparisonKind k : kinds) {
      const ComparisonReport rep = run_comparison(k, method_runs, bench, data, oracle ? &*oracle : nullptr);
      const std::string name = comparison_name(k, method);
      files.emplace_back(name + ".csv", rep.to_csv());
      files.emplace_back(name + ".txt", rep.to_text());
      summary += "\n== " + rep.to_text();
    }
  }
  if (fs::exists(oracle_dir / "oracle_accuracy.txt")) {
    summary += "\n== Oracle\n" + read_file(oracle_dir / "oracle_accuracy.txt");
  }
  files.emplace_back("summary.txt", summary);
  const fs::path dir = root / "report";
  prepare_dir(dir, options.force);
  write_outputs(dir, files);
  log << summary << "wrote " << dir.string() << "\n";
}

// ---------------------------------------------------------------------------
// Plot

std::string dice_stage_svg(const std::string& title, const std::vector<std::string>& domains,
                           const std::vector<std::vector<double>>& dice_by_stage) {
  static const char* kColours[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  const double w = 480, h = 320, left = 50, right = 110, top = 40, bottom = 45;
  const double pw = w - left - right, ph = h - top - bottom;
  const std::size_t stages = dice_by_stage.size();
  auto px = [&](std::size_t j) { return left + (stages <= 1 ? pw / 2 : pw * double(j) / double(stages - 1)); };
  auto py = [&](double v) { return top + ph * (1.0 - std::clamp(v, 0.0, 1.0)); };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return std::string(buf);
  };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<path d=\"M" << left << " " << top << " V" << top + ph << " H" << left + pw
     << "\" stroke=\"black\" fill=\"none\"/>\n";
  for (double t : {0.0, 0.5, 1.0}) {
    os << "<line x1=\"" << left - 4 << "\" y1=\"" << num(py(t)) << "\" x2=\"" << left + pw << "\" y2=\"" << num(py(t))
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << left - 8 << "\" y=\"" << num(py(t) + 4) << "\" text-anchor=\"end\">" << num(t)
       << "</text>\n";
  }
  for (std::size_t j = 0; j < stages; ++j) {
    os << "<text x=\"" << num(px(j)) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << j + 1
       << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 8 << "\" text-anchor=\"middle\">stage</text>\n";
  os << "<text x=\"14\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
     << top + ph / 2 << ")\">Dice</text>\n";
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const char* colour = kColours[i % 5];
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (std::size_t j = 0; j < stages; ++j) os << (j ? " " : "") << num(px(j)) << "," << num(py(dice_by_stage[j][i]));
    os << "\"/>\n";
    for (std::size_t j = 0; j < stages; ++j)
      os << "<circle cx=\"" << num(px(j)) << "\" cy=\"" << num(py(dice_by_stage[j][i])) << "\" r=\"3\" fill=\""
         << colour << "\"/>\n";
    const double ly = top + 10 + 18 * double(i);
    os << "<line x1=\"" << left + pw + 15 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 35 << "\" y2=\"" << ly
       << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << left + pw + 40 << "\" y=\"" << ly + 4 << "\">" << domains[i] << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Entry point

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"clseg: continual learning for segmentation across acquisition domains"};
  app.set_version_flag("--version", std::string(CLSEG_VERSION));
  app.require_subcommand(1);
  Options o;
  std::string config_path, oracle_dir, out_dir;
  std::uint64_t seed = 0;
  const std::map<std::string, std::string> help{
      {"generate", "generate the synthetic domains into <out>/data"},
      {"train", "train protocol runs into <out>/runs"},
      {"evaluate", "score runs; with --comparison, compare a method against the multi-model benchmark"},
      {"oracle", "train the autoencoder oracles and report their accuracy"},
      {"report", "write every table, comparison and plot into <out>/report"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, text] : help) {
    CLI::App* s = app.add_subcommand(name, text);
    s->add_option("--config", config_path, "experiment config (flat key = value)");
    s->add_option("--out", out_dir, "output root");
    s->add_option("--seed", seed, "overrides the seed of this command");
    s->add_flag("--force", o.force, "replace non-empty output directories");
    if (name == "train" || name == "evaluate") {
      s->add_option("--protocol", o.protocol, "static, naive_sequential, multi_model, ewc, lwf; +heads for heads");
    }
    if (name == "train") s->add_option("--ordering", o.ordering, "domain names in training order, e.g. \"A,B,C\"");
    if (name == "evaluate") {
      s->add_option("--comparison", o.comparison, "A, B or C")->check(CLI::IsMember({"A", "B", "C", "a", "b", "c"}));
    }
    if (name == "evaluate" || name == "oracle" || name == "report") {
      s->add_option("--oracle-dir", oracle_dir, "oracle ensemble directory");
    }
    subs[name] = s;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kConfigFailure;
  }
  std::string command;
  for (const auto& [name, s] : subs)
    if (s->parsed()) command = name;
  CLI::App* s = subs.at(command);
  if (!config_path.empty()) o.config = config_path;
  if (!oracle_dir.empty()) o.oracle_dir = oracle_dir;
  if (!out_dir.empty()) o.out = out_dir;
  if (s->count("--seed")) o.seed = seed;

  try {
    const ExperimentConfig config = o.config ? load_experiment_config(*o.config) : parse_experiment_config("");
    if (command == "generate") cmd_generate(config, o, out);
    if (command == "train") cmd_train(config, o, out);
    if (command == "evaluate") cmd_evaluate(config, o, out);
    if (command == "oracle") cmd_oracle(config, o, out);
    if (command == "report") cmd_report(config, o, out);
    return kOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigFailure;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kConfigFailure;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kDataFailure;
  }
}

}  // namespace clseg::cli
