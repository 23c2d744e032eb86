// SPDX-License-Identifier: Apache-2.0
#include "clseg/oracle/oracle.hpp"

#include <algorithm>
#include <sstream>

#include "clseg/models/checkpoint.hpp"
#include "clseg/numerics/losses.hpp"
#include "clseg/numerics/optim.hpp"

namespace clseg {

void OracleTrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("oracle epochs must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("oracle lr must be > 0");
  if (batch_size < 1) throw ConfigError("oracle batch_size must be >= 1");
}

namespace {

std::uint64_t member_seed(std::uint64_t seed, int domain_id) {
  return derive_seed({seed, static_cast<std::uint64_t>(domain_id), 0xAE});
}

}  // namespace

Autoencoder<float> OracleEnsemble::member(int domain_id) const {
  auto it = members.find(domain_id);
  if (it == members.end()) throw RoutingError("oracle has no autoencoder for domain " + std::to_string(domain_id));
  Autoencoder<float> ae(config, height, width, member_seed(training.seed, domain_id));
  ae.params().assign(it->second);
  return ae;
}

ParameterSet<float> train_oracle_member(const std::vector<Volume>& train, const AEConfig& config,
                                        const OracleTrainConfig& training, int domain_id) {
  training.validate();
  const auto refs = slice_list(train);
  if (refs.empty()) throw InputError("oracle member needs nonempty training slices");
  Autoencoder<float> ae(config, refs[0].volume->height(), refs[0].volume->width(),
                        member_seed(training.seed, domain_id));
  const NameSet all = ae.params().name_set();
  const float lr = float(training.lr);
  std::vector<std::size_t> order(refs.size());
  for (int e = 0; e < training.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed({training.seed, static_cast<std::uint64_t>(domain_id), static_cast<std::uint64_t>(e)}));
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += std::size_t(training.batch_size)) {
      std::vector<SliceRef> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + std::size_t(training.batch_size)); ++i)
        batch.push_back(refs[order[i]]);
      const TensorF x = make_batch(batch).first;
      ae.params().zero_grad();
      Tape<float> tape;
      Var input = tape.constant(x);
      tape.backward(loss_mse(tape, input, ae.forward(tape, input, &all)));
      for (const auto& n : ae.params().names()) {
        auto& p = ae.params().at(n);
        sgd_step(p, p.grad(), lr, 0.0f, n);
      }
    }
  }
  ae.params().drop_grad();
  return ae.params().snapshot();
}

OracleEnsemble train_oracle(const std::vector<DomainDataset>& domains, const AEConfig& config,
                            const OracleTrainConfig& training) {
  if (domains.empty()) throw InputError("oracle needs at least one domain");
  OracleEnsemble ens;
  ens.config = config;
  ens.height = domains[0].train.at(0).height();
  ens.width = domains[0].train.at(0).width();
  ens.training = training;
  for (const auto& ds : domains) {
    ens.members[ds.spec.domain_id] = train_oracle_member(ds.train, config, training, ds.spec.domain_id);
    ens.names[ds.spec.domain_id] = ds.spec.name;
  }
  return ens;
}

std::vector<std::map<int, double>> slice_errors(const OracleEnsemble& ensemble, const Volume& volume) {
  if (ensemble.members.empty()) throw InputError("oracle ensemble is empty");
  if (volume.slices.size() == 0 || volume.slice_count() < 1) throw InputError("cannot classify an empty volume");
  const Index k = volume.slice_count(), plane = volume.height() * volume.width();
  std::vector<std::map<int, double>> out(static_cast<std::size_t>(k));
  for (const auto& [d, _] : ensemble.members) {
    Autoencoder<float> ae = ensemble.member(d);
    const TensorF recon = ae.reconstruct(volume.slices);
    for (Index s = 0; s < k; ++s) {
      const auto diff = (volume.slices.values().segment(s * plane, plane).cast<double>() -
                         recon.values().segment(s * plane, plane).cast<double>());
      out[std::size_t(s)][d] = diff.squaredNorm() / double(plane);
    }
  }
  return out;
}

DomainVerdict decide_domain(const std::vector<std::map<int, double>>& errors) {
  if (errors.empty()) throw InputError("cannot classify an empty volume");
  DomainVerdict v;
  std::map<int, int> counts;
  for (const auto& slice : errors) {
    if (slice.empty()) throw InputError("slice has no reconstruction errors");
    int best = slice.begin()->first;
    for (const auto& [d, e] : slice)
      if (e < slice.at(best)) best = d;  // map order makes equal errors go to the lowest id
    v.votes.push_back(best);
    ++counts[best];
    for (const auto& [d, e] : slice) v.mean_mse[d] += e / double(errors.size());
  }
  int top = 0;
  for (const auto& [_, c] : counts) top = std::max(top, c);
  for (const auto& [d, c] : counts) {
    if (c != top) continue;
    if (v.domain_id < 0 || v.mean_mse.at(d) < v.mean_mse.at(v.domain_id)) v.domain_id = d;
  }
  return v;
}

DomainVerdict infer_domain(const OracleEnsemble& ensemble, const Volume& volume) {
  return decide_domain(slice_errors(ensemble, volume));
}

OracleAccuracy accuracy_from_verdicts(const std::vector<std::pair<int, int>>& label_and_verdict) {
  std::map<int, std::pair<int, int>> tally;  // label -> (correct, total)
  for (const auto& [label, verdict] : label_and_verdict) {
    tally[label].first += label == verdict;
    tally[label].second += 1;
  }
  OracleAccuracy acc;
  for (const auto& [label, t] : tally) {
    acc.per_domain[label] = double(t.first) / double(t.second);
    acc.macro += acc.per_domain[label];
  }
  if (!acc.per_domain.empty()) acc.macro /= double(acc.per_domain.size());
  return acc;
}

OracleAccuracy oracle_accuracy(const OracleEnsemble& ensemble, const std::vector<DomainDataset>& labelled) {
  std::vector<std::pair<int, int>> pairs;
  for (const auto& ds : labelled) {
    for (const auto& v : ds.test) {
      if (!ensemble.members.count(v.domain_id)) {
        throw InputError("test volume labelled with unseen domain " + std::to_string(v.domain_id));
      }
      pairs.emplace_back(v.domain_id, infer_domain(ensemble, v).domain_id);
    }
  }
  if (pairs.empty()) throw InputError("no labelled test volumes");
  return accuracy_from_verdicts(pairs);
}

TensorF predict_for_domain(const TrainingRun& run, int domain_id, const TensorF& batch) {
  if (run.stage_states.empty()) throw RoutingError("run has no trained state");
  const bool single = run.num_heads == 1 && run.config.kind != ProtocolKind::multi_model;
  if (!single && run.stage_of(domain_id) < 0) {
    throw RoutingError("run has no state for domain " + std::to_string(domain_id));
  }
  return predict_routed(run, route(run, int(run.stage_states.size()) - 1, domain_id), batch);
}

TensorF route_inference(const OracleEnsemble& ensemble, const TrainingRun& run, const Volume& volume,
                        DomainVerdict* verdict) {
  DomainVerdict v = infer_domain(ensemble, volume);
  TensorF out = predict_for_domain(run, v.domain_id, volume.slices);
  if (verdict) *verdict = std::move(v);
  return out;
}

void save_oracle(const std::filesystem::path& dir, const OracleEnsemble& ensemble) {
  std::filesystem::create_directories(dir);
  Manifest m;
  m.set("format", std::string("clseg-oracle-1"));
  m.set("kind", to_string(ensemble.config.kind));
  m.set("height", static_cast<long long>(ensemble.height));
  m.set("width", static_cast<long long>(ensemble.width));
  m.set("epochs", ensemble.training.epochs);
  m.set("lr", ensemble.training.lr);
  m.set("batch_size", ensemble.training.batch_size);
  m.set("seed", std::to_string(ensemble.training.seed));
  std::string ids;
  for (const auto& [d, params] : ensemble.members) {
    const std::string file = "member_" + std::to_string(d) + ".clseg";
    Manifest meta;
    meta.set("domain_id", d);
    meta.set("domain", ensemble.names.count(d) ? ensemble.names.at(d) : std::to_string(d));
    save_checkpoint(params, meta, dir / file);
    m.set("member." + std::to_string(d), file);
    m.set("name." + std::to_string(d), ensemble.names.count(d) ? ensemble.names.at(d) : std::to_string(d));
    ids += (ids.empty() ? "" : ",") + std::to_string(d);
  }
  m.set("members", ids);
  write_file_atomic(dir / "oracle.manifest", m.to_text());
}

OracleEnsemble load_oracle(const std::filesystem::path& dir) {
  const auto mpath = dir / "oracle.manifest";
  if (!std::filesystem::exists(mpath)) throw InputError("no oracle manifest at '" + mpath.string() + "'");
  const Manifest m = Manifest::parse(read_file(mpath), mpath.string());
  OracleEnsemble ens;
  ens.config.kind = parse_ae_kind(m.at("kind"));
  ens.height = Index(m.integer("height"));
  ens.width = Index(m.integer("width"));
  ens.training.epochs = int(m.integer("epochs"));
  ens.training.lr = m.number("lr");
  ens.training.batch_size = int(m.integer("batch_size"));
  ens.training.seed = std::stoull(m.at("seed"));
  std::stringstream ss(m.at("members"));
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    const int d = std::stoi(item);
    ens.members[d] = load_checkpoint(dir / m.at("member." + item)).tensors;
    ens.names[d] = m.at("name." + item);
  }
  if (ens.members.empty()) throw InputError("oracle at '" + dir.string() + "' has no members");
  return ens;
}

}  // namespace clseg
