// SPDX-License-Identifier: Apache-2.0
#include "clseg/continual/continual.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

#include "clseg/evaluation/metrics.hpp"
#include "clseg/numerics/losses.hpp"
#include "clseg/numerics/optim.hpp"

namespace clseg {

std::string to_string(ProtocolKind kind) {
  switch (kind) {
    case ProtocolKind::static_joint: return "static";
    case ProtocolKind::naive_sequential: return "naive_sequential";
    case ProtocolKind::multi_model: return "multi_model";
    case ProtocolKind::ewc: return "ewc";
    case ProtocolKind::lwf: return "lwf";
  }
  return "?";
}

ProtocolKind parse_protocol(const std::string& name) {
  if (name == "static") return ProtocolKind::static_joint;
  if (name == "naive_sequential" || name == "naive") return ProtocolKind::naive_sequential;
  if (name == "multi_model") return ProtocolKind::multi_model;
  if (name == "ewc") return ProtocolKind::ewc;
  if (name == "lwf") return ProtocolKind::lwf;
  throw ConfigError("unknown protocol '" + name + "' (expected static, naive_sequential, multi_model, ewc or lwf)");
}

// ---------------------------------------------------------------------------
// ProtocolConfig

void ProtocolConfig::validate() const {
  const bool ewc = kind == ProtocolKind::ewc, lwf = kind == ProtocolKind::lwf;
  if (ewc_lambda.has_value() != ewc) {
    throw ConfigError(std::string("ewc_lambda ") + (ewc ? "is required for" : "is only valid for") + " protocol ewc");
  }
  if (ewc_sum_literal && !ewc) throw ConfigError("ewc_sum_literal is only valid for protocol ewc");
  if (lwf_warmup_epochs.has_value() != lwf || lwf_distill_weight.has_value() != lwf) {
    throw ConfigError(std::string("lwf_warmup_epochs and lwf_distill_weight ") +
                      (lwf ? "are required for" : "are only valid for") + " protocol lwf");
  }
  if (ewc && !(*ewc_lambda >= 0.0)) throw ConfigError("ewc_lambda must be >= 0");
  if (lwf && *lwf_warmup_epochs < 0) throw ConfigError("lwf_warmup_epochs must be >= 0");
  if (lwf && !(*lwf_distill_weight >= 0.0)) throw ConfigError("lwf_distill_weight must be >= 0");
  if (epochs_per_stage < 1) throw ConfigError("epochs_per_stage must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(l2_weight >= 0.0)) throw ConfigError("l2_weight must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (kind == ProtocolKind::static_joint && use_heads) {
    throw ConfigError("static joint training has a single output; set use_heads = false");
  }
  augmentation.validate();
}

ProtocolConfig ProtocolConfig::make(ProtocolKind kind) {
  ProtocolConfig c;
  c.kind = kind;
  if (kind == ProtocolKind::ewc) c.ewc_lambda = 1.0;
  if (kind == ProtocolKind::lwf) {
    c.lwf_warmup_epochs = 2;
    c.lwf_distill_weight = 1.0;
  }
  return c;
}

Manifest ProtocolConfig::to_manifest() const {
  Manifest m;
  m.set("kind", to_string(kind));
  m.set("use_heads", use_heads ? 1 : 0);
  m.set("epochs_per_stage", epochs_per_stage);
  m.set("lr", lr);
  m.set("l2_weight", l2_weight);
  m.set("batch_size", batch_size);
  m.set("seed", std::to_string(seed));
  m.set("aug.flip_prob", augmentation.flip_prob);
  m.set("aug.affine_prob", augmentation.affine_prob);
  m.set("aug.max_rotation_deg", augmentation.max_rotation_deg);
  m.set("aug.max_translation", augmentation.max_translation);
  m.set("aug.noise_prob", augmentation.noise_prob);
  m.set("aug.noise_sigma", augmentation.noise_sigma);
  m.set("aug.bias_prob", augmentation.bias_prob);
  m.set("aug.bias_amplitude", augmentation.bias_amplitude);
  if (ewc_lambda) {
    m.set("ewc_lambda", *ewc_lambda);
    m.set("ewc_sum_literal", ewc_sum_literal ? 1 : 0);
  }
  if (lwf_warmup_epochs) m.set("lwf_warmup_epochs", *lwf_warmup_epochs);
  if (lwf_distill_weight) m.set("lwf_distill_weight", *lwf_distill_weight);
  return m;
}

ProtocolConfig ProtocolConfig::from_manifest(const Manifest& m) {
  ProtocolConfig c;
  c.kind = parse_protocol(m.at("kind"));
  c.use_heads = m.integer("use_heads") != 0;
  c.epochs_per_stage = int(m.integer("epochs_per_stage"));
  c.lr = m.number("lr");
  c.l2_weight = m.number("l2_weight");
  c.batch_size = int(m.integer("batch_size"));
  c.seed = std::stoull(m.at("seed"));
  c.augmentation.flip_prob = m.number("aug.flip_prob");
  c.augmentation.affine_prob = m.number("aug.affine_prob");
  c.augmentation.max_rotation_deg = m.number("aug.max_rotation_deg");
  c.augmentation.max_translation = m.number("aug.max_translation");
  c.augmentation.noise_prob = m.number("aug.noise_prob");
  c.augmentation.noise_sigma = m.number("aug.noise_sigma");
  c.augmentation.bias_prob = m.number("aug.bias_prob");
  c.augmentation.bias_amplitude = m.number("aug.bias_amplitude");
  if (m.contains("ewc_lambda")) c.ewc_lambda = m.number("ewc_lambda");
  if (m.contains("ewc_sum_literal")) c.ewc_sum_literal = m.integer("ewc_sum_literal") != 0;
  if (m.contains("lwf_warmup_epochs")) c.lwf_warmup_epochs = int(m.integer("lwf_warmup_epochs"));
  if (m.contains("lwf_distill_weight")) c.lwf_distill_weight = m.number("lwf_distill_weight");
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// StageRecord

Manifest StageRecord::to_manifest() const {
  Manifest m;
  m.set("stage", stage);
  m.set("domain_id", domain_id);
  m.set("domain_name", domain_name);
  std::string cks;
  for (const auto& c : checkpoints) cks += (cks.empty() ? "" : ",") + c;
  m.set("checkpoints", cks);
  m.set("best_epoch", best_epoch);
  m.set("best_val_loss", best_val_loss);
  for (const auto& [d, v] : val_dice) m.set("val_dice." + std::to_string(d), v);
  return m;
}

StageRecord StageRecord::from_manifest(const Manifest& m) {
  StageRecord r;
  r.stage = int(m.integer("stage"));
  r.domain_id = int(m.integer("domain_id"));
  r.domain_name = m.at("domain_name");
  std::stringstream ss(m.at("checkpoints"));
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) r.checkpoints.push_back(item);
  r.best_epoch = int(m.integer("best_epoch"));
  r.best_val_loss = m.number("best_val_loss");
  for (const auto& [k, v] : m.entries()) {
    if (k.rfind("val_dice.", 0) == 0) r.val_dice[std::stoi(k.substr(9))] = m.number(k);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Routing

int TrainingRun::stage_of(int domain_id) const {
  if (config.kind == ProtocolKind::static_joint) {
    return std::count(ordering.begin(), ordering.end(), domain_id) ? 0 : -1;
  }
  for (std::size_t s = 0; s < ordering.size(); ++s)
    if (ordering[s] == domain_id) return int(s);
  return -1;
}

SegModel<float> TrainingRun::instantiate(const ParameterSet<float>& state) const {
  SegModel<float> model(model_config, num_heads, model_seed);
  model.params().assign(state);
  return model;
}

Route route(const TrainingRun& run, int stage, int domain_id) {
  if (stage < 0 || stage >= int(run.stage_states.size())) {
    throw RoutingError("run has no stage " + std::to_string(stage));
  }
  const int trained = run.stage_of(domain_id);
  const bool seen = trained >= 0 && trained <= stage;
  Route r;
  if (run.config.kind == ProtocolKind::multi_model && seen) {
    auto it = run.store.find(domain_id);
    if (it == run.store.end()) throw RoutingError("multi-model store has no state for domain " + std::to_string(domain_id));
    r.state = &it->second;
  } else {
    r.state = &run.stage_states[std::size_t(stage)];
  }
  if (run.num_heads > 1) {
    r.head = seen ? domain_id : run.ordering[std::size_t(stage)];
    if (r.head < 0 || r.head >= run.num_heads) throw RoutingError("no head for domain " + std::to_string(domain_id));
  }
  return r;
}

TensorF predict_routed(const TrainingRun& run, const Route& r, const TensorF& batch) {
  if (r.state == nullptr) throw RoutingError("route has no state");
  SegModel<float> model = run.instantiate(*r.state);
  return model.predict(batch, r.head);
}

// ---------------------------------------------------------------------------
// Building blocks

std::vector<SliceRef> slice_list(const std::vector<Volume>& volumes) {
  std::vector<SliceRef> out;
  for (const auto& v : volumes)
    for (Index k = 0; k < v.slice_count(); ++k) out.push_back({&v, k});
  return out;
}

std::pair<TensorF, TensorF> make_batch(const std::vector<SliceRef>& refs) {
  if (refs.empty()) throw InputError("empty batch");
  const Index h = refs[0].volume->height(), w = refs[0].volume->width(), plane = h * w;
  const Index n = Index(refs.size());
  TensorF x({n, 1, h, w}), y({n, 1, h, w});
  for (Index i = 0; i < n; ++i) {
    const SliceRef& r = refs[std::size_t(i)];
    if (r.volume->height() != h || r.volume->width() != w) throw InputError("batch mixes slice sizes");
    std::copy_n(r.volume->slices.data() + r.slice * plane, plane, x.data() + i * plane);
    std::copy_n(r.volume->mask.data() + r.slice * plane, plane, y.data() + i * plane);
  }
  return {std::move(x), std::move(y)};
}

ParameterSet<float> compute_importance(SegModel<float>& model, int head, const NameSet& names,
                                       const std::vector<Volume>& data, bool sum_literal) {
  const auto refs = slice_list(data);
  if (refs.empty()) throw InputError("importance needs a nonempty dataset");
  ParameterSet<float> omega;
  std::map<std::string, Eigen::VectorXd> acc;
  for (const auto& n : names) acc[n] = Eigen::VectorXd::Zero(model.params().at(n).size());
  for (const auto& r : refs) {
    auto [x, y] = make_batch({r});
    model.params().zero_grad();
    Tape<float> tape;
    tape.backward(loss_bce(tape, model.forward(tape, tape.constant(std::move(x)), head, &names), y));
    for (const auto& n : names) acc[n].array() += model.params().at(n).grad().cast<double>().array().square();
  }
  model.params().drop_grad();
  const double div = sum_literal ? 1.0 : double(refs.size());
  for (const auto& n : names) {
    const auto& p = model.params().at(n);
    omega.add(n, TensorF(p.shape(), (acc[n] / div).cast<float>()));
  }
  return omega;
}

double ewc_penalty(const ParameterSet<float>& params, const EWCState& state) {
  double total = 0.0;
  for (const auto& a : state.anchors) {
    if (a.anchor.name_set() != a.importance.name_set()) {
      throw SchemaError("EWC anchor and importance for domain " + std::to_string(a.domain_id) + " cover different names");
    }
    for (const auto& n : a.anchor.names()) {
      if (!params.contains(n)) throw SchemaError("EWC anchor names unknown parameter '" + n + "'");
      const auto& cur = params.at(n);
      const auto& anc = a.anchor.at(n);
      const auto& om = a.importance.at(n);
      if (cur.shape() != anc.shape() || cur.shape() != om.shape()) {
        throw SchemaError("EWC shape mismatch for '" + n + "'");
      }
      total += (om.values().cast<double>().array() *
                (anc.values().cast<double>() - cur.values().cast<double>()).array().square())
                   .sum();
    }
  }
  return total;
}

PseudoDataset lwf_generate_pseudo(SegModel<float>& model, int head, int source_domain,
                                  const std::vector<SliceRef>& slices) {
  if (slices.empty()) throw InputError("pseudo-dataset needs current training slices");
  model.partition().head(head);
  PseudoDataset ds;
  ds.source_domain = source_domain;
  ds.head = head;
  for (const auto& r : slices) ds.targets.push_back(model.predict(make_batch({r}).first, head));
  return ds;
}

double validation_loss(SegModel<float>& model, int head, const std::vector<Volume>& volumes) {
  if (volumes.empty()) throw InputError("validation set is empty");
  double total = 0.0;
  for (const auto& v : volumes) {
    Tape<float> tape;
    NameSet none;
    Var pred = model.forward(tape, tape.constant(v.slices), head, &none);
    total += double(tape.value(loss_seg(tape, pred, v.mask))[0]);
  }
  return total / double(volumes.size());
}

// ---------------------------------------------------------------------------
// Protocol driver

namespace {

constexpr std::uint64_t kWarmupStream = 0x1000;

/// Precomputed EWC terms per parameter: ΣΩ_i and ΣΩ_i·a_i over past anchors.
struct EwcPull {
  std::map<std::string, Eigen::VectorXf> omega, omega_anchor;

  void add(const EWCAnchor& a) {
    for (const auto& n : a.anchor.names()) {
      const auto& om = a.importance.at(n).values();
      if (!omega.count(n)) {
        omega[n] = Eigen::VectorXf::Zero(om.size());
        omega_anchor[n] = Eigen::VectorXf::Zero(om.size());
      }
      omega[n] += om;
      omega_anchor[n].array() += om.array() * a.anchor.at(n).values().array();
    }
  }
};

class Trainer {
 public:
  Trainer(const ProtocolConfig& config, SegModel<float>& model, const ProgressFn& progress)
      : config_(config), model_(model), progress_(progress) {}

  EwcPull* ewc = nullptr;
  float ewc_lambda = 0.0f;

  /// One SGD update of `trainable` from the gradients already in params.
  void apply(const NameSet& trainable) {
    const float lr = float(config_.lr), l2 = float(config_.l2_weight);
    for (const auto& n : trainable) {
      auto& p = model_.params().at(n);
      if (!p.has_grad()) continue;
      if (ewc != nullptr && ewc_lambda > 0.0f && ewc->omega.count(n)) {
        // Penalty gradient 2λΩ(θ − a) taken implicitly so large λ·Ω stays stable.
        const float k = 2.0f * lr * ewc_lambda;
        Eigen::VectorXf next = (p.values() - lr * (p.grad() + l2 * p.values()) + k * ewc->omega_anchor.at(n)).array() /
                               (1.0f + k * ewc->omega.at(n).array());
        if (!next.allFinite()) throw NumericError("non-finite update for '" + n + "'");
        p.values() = std::move(next);
      } else {
        sgd_step(p, p.grad(), lr, l2, n);
      }
    }
  }

  /// Forward through `head`, loss from `make_loss`, backward, update.
  template <typename LossFn>
  double step(const TensorF& x, int head, const NameSet& trainable, LossFn make_loss) {
    model_.params().zero_grad();
    Tape<float> tape;
    Var pred = model_.forward(tape, tape.constant(x), head, &trainable);
    Var loss = make_loss(tape, pred);
    const double value = double(tape.value(loss)[0]);
    tape.backward(loss);
    apply(trainable);
    return value;
  }

  /// One epoch over `refs` in the order drawn from the (seed, stage, epoch) stream.
  /// `after_batch` runs extra passes on the same batch indices.
  template <typename AfterBatch>
  void epoch(const std::vector<SliceRef>& refs, int head, const NameSet& trainable, std::uint64_t stage,
             std::uint64_t epoch_key, AfterBatch after_batch) {
    std::vector<std::size_t> order(refs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed({config_.seed, stage, epoch_key, 0}));
    Rng aug_rng(derive_seed({config_.seed, stage, epoch_key, 1}));
    shuffle_rng.shuffle(order);
    const std::size_t bs = std::size_t(config_.batch_size);
    for (std::size_t b = 0, step_no = 0; b < order.size(); b += bs, ++step_no) {
      std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(b),
                                   order.begin() + std::ptrdiff_t(std::min(order.size(), b + bs)));
      std::vector<SliceRef> batch_refs;
      for (std::size_t i : idx) batch_refs.push_back(refs[i]);
      auto [x, y] = make_batch(batch_refs);
      if (config_.augmentation.any()) augment_batch(x, y, aug_rng);
      try {
        step(x, head, trainable, [&](Tape<float>& t, Var p) { return loss_seg(t, p, y); });
        after_batch(idx);
      } catch (const NumericError& e) {
        throw NumericError("stage " + std::to_string(stage) + " epoch " + std::to_string(epoch_key) + " step " +
                           std::to_string(step_no) + ": " + e.what());
      }
    }
  }

  void log(const std::string& msg) const {
    if (progress_) progress_(msg);
  }

 private:
  void augment_batch(TensorF& x, TensorF& y, Rng& rng) {
    const Index h = x.dim(2), w = x.dim(3), plane = h * w;
    for (Index i = 0; i < x.dim(0); ++i) {
      TensorF xs({1, 1, h, w}, x.values().segment(i * plane, plane));
      TensorF ys({1, 1, h, w}, y.values().segment(i * plane, plane));
      augment(xs, ys, config_.augmentation, rng);
      x.values().segment(i * plane, plane) = xs.values();
      y.values().segment(i * plane, plane) = ys.values();
    }
  }

  const ProtocolConfig& config_;
  SegModel<float>& model_;
  ProgressFn progress_;
};

/// Keeps the lowest-validation-loss state seen during a stage.
struct BestTracker {
  double loss = std::numeric_limits<double>::infinity();
  int epoch = -1;
  ParameterSet<float> state;

  void offer(SegModel<float>& model, int head, const std::vector<Volume>& val, int stage, int e) {
    double l = 0;
    try {
      l = validation_loss(model, head, val);
    } catch (const NumericError& err) {
      throw NumericError("stage " + std::to_string(stage) + " epoch " + std::to_string(e) +
                         " validation: " + err.what());
    }
    if (l < loss) {
      loss = l;
      epoch = e;
      state = model.params().snapshot();
    }
  }
};

void check_domains(const std::vector<DomainDataset>& domains, const std::vector<int>& ordering) {
  if (domains.empty()) throw InputError("no domains to train on");
  if (ordering.empty()) throw ConfigError("ordering is empty");
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].spec.domain_id != int(i)) throw ConfigError("domain ids must equal their position in the list");
    if (domains[i].train.empty()) throw InputError("domain " + domains[i].spec.name + " has no training volumes");
    if (domains[i].val.empty()) throw InputError("domain " + domains[i].spec.name + " has no validation volumes");
  }
  std::vector<int> seen;
  for (int d : ordering) {
    if (d < 0 || d >= int(domains.size())) throw ConfigError("ordering names unknown domain " + std::to_string(d));
    if (std::count(seen.begin(), seen.end(), d)) throw ConfigError("ordering repeats domain " + std::to_string(d));
    seen.push_back(d);
  }
}

void record_val_dice(TrainingRun& run, const std::vector<DomainDataset>& domains, StageRecord& rec) {
  for (const auto& ds : domains) {
    const Route r = route(run, rec.stage, ds.spec.domain_id);
    SegModel<float> model = run.instantiate(*r.state);
    double total = 0.0;
    for (const auto& v : ds.val) total += dice_score(model.predict(v.slices, r.head), v.mask);
    rec.val_dice[ds.spec.domain_id] = total / double(ds.val.size());
  }
}

}  // namespace

void lwf_warmup(SegModel<float>& model, int head, const std::vector<SliceRef>& slices, const ProtocolConfig& config,
                int stage) {
  if (!config.lwf_warmup_epochs) throw ConfigError("lwf_warmup_epochs is not set");
  const NameSet head_only = model.partition().head(head);
  Trainer trainer(config, model, nullptr);
  for (int e = 0; e < *config.lwf_warmup_epochs; ++e) {
    trainer.epoch(slices, head, head_only, std::uint64_t(stage), kWarmupStream + std::uint64_t(e),
                  [](const std::vector<std::size_t>&) {});
  }
}

TrainingRun run_protocol(const std::vector<DomainDataset>& domains, const std::vector<int>& ordering,
                         const ProtocolConfig& config, const SegModelConfig& model_config, std::uint64_t model_seed,
                         const ProgressFn& progress) {
  config.validate();
  model_config.validate();
  check_domains(domains, ordering);
  for (const auto& ds : domains) model_config.check_input(ds.train[0].height(), ds.train[0].width());

  TrainingRun run;
  run.config = config;
  run.model_config = model_config;
  run.model_seed = model_seed;
  run.num_heads = config.use_heads ? int(domains.size()) : 1;
  run.ordering = ordering;
  for (const auto& ds : domains) run.domain_names.push_back(ds.spec.name);

  SegModel<float> model(model_config, run.num_heads, model_seed);
  Trainer trainer(config, model, progress);
  const auto& part = model.partition();
  auto no_extra = [](const std::vector<std::size_t>&) {};

  if (config.kind == ProtocolKind::static_joint) {
    std::vector<Volume> train, val;
    std::vector<int> ids = ordering;
    std::sort(ids.begin(), ids.end());
    for (int d : ids) {
      train.insert(train.end(), domains[std::size_t(d)].train.begin(), domains[std::size_t(d)].train.end());
      val.insert(val.end(), domains[std::size_t(d)].val.begin(), domains[std::size_t(d)].val.end());
    }
    const auto refs = slice_list(train);
    const NameSet all = part.all();
    BestTracker best;
    for (int e = 0; e < config.epochs_per_stage; ++e) {
      trainer.epoch(refs, 0, all, 0, std::uint64_t(e), no_extra);
      best.offer(model, 0, val, 0, e);
      trainer.log("static epoch " + std::to_string(e) + " val_loss " + std::to_string(best.loss));
    }
    model.params().assign(best.state);
    run.stage_states.push_back(model.params().snapshot());
    StageRecord rec;
    rec.stage = 0;
    rec.domain_id = -1;
    rec.domain_name = "all";
    rec.best_epoch = best.epoch;
    rec.best_val_loss = best.loss;
    record_val_dice(run, domains, rec);
    run.stages.push_back(std::move(rec));
    return run;
  }

  EwcPull pull;
  if (config.kind == ProtocolKind::ewc) {
    trainer.ewc = &pull;
    trainer.ewc_lambda = float(*config.ewc_lambda);
  }

  for (std::size_t s = 0; s < ordering.size(); ++s) {
    const int d = ordering[s];
    const DomainDataset& ds = domains[std::size_t(d)];
    const int head = config.use_heads ? d : 0;
    const NameSet trainable = config.use_heads ? part.with_head(head) : part.all();
    const auto refs = slice_list(ds.train);
    const auto stage = std::uint64_t(s);

    std::vector<PseudoDataset> pseudo;
    const bool distill = config.kind == ProtocolKind::lwf && s > 0 && *config.lwf_distill_weight > 0.0;
    if (distill) {
      if (config.use_heads) {
        for (std::size_t p = 0; p < s; ++p) pseudo.push_back(lwf_generate_pseudo(model, ordering[p], ordering[p], refs));
      } else {
        pseudo.push_back(lwf_generate_pseudo(model, 0, ordering[s - 1], refs));
      }
    }
    if (config.kind == ProtocolKind::lwf && config.use_heads && s > 0) lwf_warmup(model, head, refs, config, int(s));

    std::vector<NameSet> distill_sets;
    for (const auto& p : pseudo) distill_sets.push_back(config.use_heads ? part.with_head(p.head) : part.all());
    const float w = config.kind == ProtocolKind::lwf ? float(*config.lwf_distill_weight) : 0.0f;
    auto distill_passes = [&](const std::vector<std::size_t>& idx) {
      if (pseudo.empty()) return;
      std::vector<SliceRef> batch_refs;
      for (std::size_t i : idx) batch_refs.push_back(refs[i]);
      const TensorF x = make_batch(batch_refs).first;
      for (std::size_t p = 0; p < pseudo.size(); ++p) {
        TensorF target(x.shape());
        const Index plane = x.dim(2) * x.dim(3);
        for (std::size_t i = 0; i < idx.size(); ++i)
          target.values().segment(Index(i) * plane, plane) = pseudo[p].targets[idx[i]].values();
        trainer.step(x, pseudo[p].head, distill_sets[p],
                     [&](Tape<float>& t, Var pred) { return scale(t, loss_distill(t, pred, target), w); });
      }
    };

    BestTracker best;
    for (int e = 0; e < config.epochs_per_stage; ++e) {
      trainer.epoch(refs, head, trainable, stage, std::uint64_t(e), distill_passes);
      best.offer(model, head, ds.val, int(s), e);
      trainer.log(to_string(config.kind) + " stage " + std::to_string(s) + " (" + ds.spec.name + ") epoch " +
                  std::to_string(e) + " best_val_loss " + std::to_string(best.loss));
    }
    model.params().assign(best.state);
    run.stage_states.push_back(model.params().snapshot());
    if (config.kind == ProtocolKind::multi_model) run.store[d] = model.params().snapshot();

    if (config.kind == ProtocolKind::ewc) {
      const NameSet penalised = config.use_heads ? part.shared : part.all();
      EWCAnchor anchor;
      anchor.domain_id = d;
      anchor.anchor = model.params().subset(penalised);
      anchor.importance = compute_importance(model, head, penalised, ds.train, config.ewc_sum_literal);
      pull.add(anchor);
      run.ewc.anchors.push_back(std::move(anchor));
    }

    StageRecord rec;
    rec.stage = int(s);
    rec.domain_id = d;
    rec.domain_name = ds.spec.name;
    rec.best_epoch = best.epoch;
    rec.best_val_loss = best.loss;
    record_val_dice(run, domains, rec);
    run.stages.push_back(std::move(rec));
  }
  return run;
}

namespace {

ProtocolConfig with_kind(ProtocolConfig c, ProtocolKind kind) {
  if (c.kind != kind) throw ConfigError("protocol config is for " + to_string(c.kind) + ", not " + to_string(kind));
  return c;
}

}  // namespace

TrainingRun train_static(const std::vector<DomainDataset>& domains, ProtocolConfig config,
                         const SegModelConfig& model_config, std::uint64_t model_seed) {
  std::vector<int> ids;
  for (const auto& ds : domains) ids.push_back(ds.spec.domain_id);
  return run_protocol(domains, ids, with_kind(config, ProtocolKind::static_joint), model_config, model_seed);
}

TrainingRun train_naive_sequential(const std::vector<DomainDataset>& domains, const std::vector<int>& ordering,
                                   ProtocolConfig config, const SegModelConfig& model_config,
                                   std::uint64_t model_seed) {
  return run_protocol(domains, ordering, with_kind(config, ProtocolKind::naive_sequential), model_config, model_seed);
}

TrainingRun train_multi_model(const std::vector<DomainDataset>& domains, const std::vector<int>& ordering,
                              ProtocolConfig config, const SegModelConfig& model_config, std::uint64_t model_seed) {
  return run_protocol(domains, ordering, with_kind(config, ProtocolKind::multi_model), model_config, model_seed);
}

TrainingRun train_ewc(const std::vector<DomainDataset>& domains, const std::vector<int>& ordering,
                      ProtocolConfig config, const SegModelConfig& model_config, std::uint64_t model_seed) {
  return run_protocol(domains, ordering, with_kind(config, ProtocolKind::ewc), model_config, model_seed);
}

TrainingRun train_lwf(const std::vector<DomainDataset>& domains, const std::vector<int>& ordering,
                      ProtocolConfig config, const SegModelConfig& model_config, std::uint64_t model_seed) {
  return run_protocol(domains, ordering, with_kind(config, ProtocolKind::lwf), model_config, model_seed);
}

// ---------------------------------------------------------------------------
// Artifacts

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (int x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
  return s;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

Manifest run_manifest(const TrainingRun& run, const std::string& status) {
  Manifest m;
  m.set("format", std::string("clseg-run-1"));
  m.set("status", status);
  m.set("tool_version", std::string(CLSEG_VERSION));
  const Manifest proto = run.config.to_manifest();
  for (const auto& [k, v] : proto.entries()) m.set("protocol." + k, v);
  m.set("model.encoder_blocks", run.model_config.encoder_blocks);
  m.set("model.base_channels", run.model_config.base_channels);
  m.set("model.seed", std::to_string(run.model_seed));
  m.set("model.num_heads", run.num_heads);
  m.set("ordering", join_ints(run.ordering));
  std::string names;
  for (const auto& n : run.domain_names) names += (names.empty() ? "" : ",") + n;
  m.set("domains", names);
  const int expected = run.config.kind == ProtocolKind::static_joint ? 1 : int(run.ordering.size());
  m.set("stages", expected);
  for (std::size_t s = 0; s < run.stages.size(); ++s) {
    m.set("stage." + std::to_string(s) + ".record", "stage" + std::to_string(s) + "/record.txt");
  }
  return m;
}

}  // namespace

void begin_run(const std::filesystem::path& dir, const TrainingRun& header) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "run.manifest", run_manifest(header, "incomplete").to_text());
}

void save_run(const std::filesystem::path& dir, const TrainingRun& run) {
  std::filesystem::create_directories(dir);
  for (std::size_t s = 0; s < run.stages.size(); ++s) {
    const std::string sdir = "stage" + std::to_string(s);
    StageRecord rec = run.stages[s];
    rec.checkpoints = {sdir + "/model.clseg"};
    Manifest meta;
    meta.set("stage", int(s));
    meta.set("domain", rec.domain_name);
    save_checkpoint(run.stage_states[s], meta, dir / sdir / "model.clseg");
    if (run.config.kind == ProtocolKind::ewc && s < run.ewc.anchors.size()) {
      const auto& a = run.ewc.anchors[s];
      save_checkpoint(a.anchor, meta, dir / sdir / "ewc_anchor.clseg");
      save_checkpoint(a.importance, meta, dir / sdir / "ewc_importance.clseg");
      rec.checkpoints.push_back(sdir + "/ewc_anchor.clseg");
      rec.checkpoints.push_back(sdir + "/ewc_importance.clseg");
    }
    write_file_atomic(dir / sdir / "record.txt", rec.to_manifest().to_text());
  }
  write_file_atomic(dir / "run.manifest", run_manifest(run, "complete").to_text());
}

TrainingRun load_run(const std::filesystem::path& dir) {
  const auto mpath = dir / "run.manifest";
  if (!std::filesystem::exists(mpath)) throw InputError("no run manifest at '" + mpath.string() + "'");
  const Manifest m = Manifest::parse(read_file(mpath), mpath.string());
  const int expected = int(m.integer("stages"));
  if (m.at("status") != "complete") {
    std::string missing;
    for (int s = 0; s < expected; ++s)
      if (!std::filesystem::exists(dir / ("stage" + std::to_string(s)) / "record.txt"))
        missing += (missing.empty() ? "" : ", ") + ("stage" + std::to_string(s));
    throw InputError("run '" + dir.string() + "' is incomplete" + (missing.empty() ? "" : "; missing " + missing));
  }
  TrainingRun run;
  Manifest proto;
  for (const auto& [k, v] : m.entries())
    if (k.rfind("protocol.", 0) == 0) proto.set(k.substr(9), v);
  run.config = ProtocolConfig::from_manifest(proto);
  run.model_config.encoder_blocks = int(m.integer("model.encoder_blocks"));
  run.model_config.base_channels = int(m.integer("model.base_channels"));
  run.model_seed = std::stoull(m.at("model.seed"));
  run.num_heads = int(m.integer("model.num_heads"));
  for (const auto& s : split_csv(m.at("ordering"))) run.ordering.push_back(std::stoi(s));
  run.domain_names = split_csv(m.at("domains"));
  for (int s = 0; s < expected; ++s) {
    const auto sdir = dir / ("stage" + std::to_string(s));
    const auto rpath = sdir / "record.txt";
    StageRecord rec = StageRecord::from_manifest(Manifest::parse(read_file(rpath), rpath.string()));
    run.stage_states.push_back(load_checkpoint(sdir / "model.clseg").tensors);
    if (run.config.kind == ProtocolKind::multi_model) run.store[rec.domain_id] = run.stage_states.back();
    if (run.config.kind == ProtocolKind::ewc) {
      EWCAnchor a;
      a.domain_id = rec.domain_id;
      a.anchor = load_checkpoint(sdir / "ewc_anchor.clseg").tensors;
      a.importance = load_checkpoint(sdir / "ewc_importance.clseg").tensors;
      run.ewc.anchors.push_back(std::move(a));
    }
    run.stages.push_back(std::move(rec));
  }
  return run;
}

}  // namespace clseg
