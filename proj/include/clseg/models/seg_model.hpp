// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "clseg/models/params.hpp"
#include "clseg/numerics/ops.hpp"

namespace clseg {

struct SegModelConfig {
  int encoder_blocks = 3;
  int base_channels = 8;
  int in_channels = 1;
  int out_channels = 1;

  void validate() const {
    if (encoder_blocks < 2) throw ConfigError("encoder_blocks must be >= 2, got " + std::to_string(encoder_blocks));
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (in_channels != 1 || out_channels != 1) throw ConfigError("only single-channel input and output are supported");
  }

  /// Spatial dims must survive `encoder_blocks` 2x poolings.
  void check_input(Index height, Index width) const {
    const Index div = Index(1) << encoder_blocks;
    if (height % div != 0 || width % div != 0) {
      throw ConfigError("input " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not divisible by 2^" + std::to_string(encoder_blocks) + " = " + std::to_string(div));
    }
  }

  bool operator==(const SegModelConfig&) const = default;
};

/// Split of stored parameter names into θ^S (shared) and per-domain θ_i^D (heads).
struct ParamPartition {
  NameSet shared;
  std::map<int, NameSet> heads;
  /// Canonical names of the head layers ("up1.weight", ...), identical for every head.
  std::vector<std::string> head_slots;

  static std::string head_name(int head, const std::string& slot) {
    return "head" + std::to_string(head) + "." + slot;
  }

  const NameSet& head(int id) const {
    auto it = heads.find(id);
    if (it == heads.end()) throw RoutingError("no domain head " + std::to_string(id));
    return it->second;
  }

  /// θ^S ∪ θ_head^D: everything a forward pass through `head` touches.
  NameSet with_head(int id) const {
    NameSet out = shared;
    out.insert(head(id).begin(), head(id).end());
    return out;
  }

  NameSet all() const {
    NameSet out = shared;
    for (const auto& [_, h] : heads) out.insert(h.begin(), h.end());
    return out;
  }
};

/// U-Net: `encoder_blocks` down blocks (two 3x3 conv + relu, then 2x2 max-pool),
/// a bottleneck block, and mirrored up blocks (2x2 stride-2 transposed conv,
/// skip concatenation, two 3x3 conv + relu), then a 1x1 conv and sigmoid.
/// Channels double per level. The last two transposed convs are per-domain heads.
template <typename Scalar>
class SegModel {
 public:
  SegModel(SegModelConfig config, int num_heads, std::uint64_t seed) : config_(config), num_heads_(num_heads) {
    config_.validate();
    if (num_heads < 1) throw ConfigError("a segmentation model needs at least one head");
    build(seed);
  }

  const SegModelConfig& config() const { return config_; }
  int num_heads() const { return num_heads_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }
  const ParamPartition& partition() const { return partition_; }

  /// Stored parameter names used by a forward pass through `head`, in canonical layer order.
  std::vector<std::string> layer_names(int head) const {
    partition_.head(head);
    std::vector<std::string> out;
    for (const auto& slot : slots_) out.push_back(resolve(slot, head));
    return out;
  }

  /// Probabilities [N,1,H,W] for a batch [N,1,H,W].
  Var forward(Tape<Scalar>& tape, Var batch, int head, const NameSet* trainable = nullptr,
              std::map<std::string, Var>* registered = nullptr) {
    partition_.head(head);
    const auto& shape = tape.shape(batch);
    if (shape.size() != 4 || shape[1] != config_.in_channels) {
      throw ConfigError("segmentation input must be [N,1,H,W], got " + shape_str(shape));
    }
    config_.check_input(shape[2], shape[3]);
    ParamBinder<Scalar> bind(tape, params_, trainable, registered);
    auto p = [&](const std::string& slot) { return bind(resolve(slot, head)); };
    auto conv_relu = [&](Var x, const std::string& layer) {
      return activation(tape, conv2d(tape, x, p(layer + ".weight"), p(layer + ".bias"), 1, 1), Activation::relu);
    };

    const int blocks = config_.encoder_blocks;
    std::vector<Var> skips;
    Var x = batch;
    for (int b = 0; b < blocks; ++b) {
      const std::string name = "enc" + std::to_string(b);
      x = conv_relu(conv_relu(x, name + ".conv0"), name + ".conv1");
      skips.push_back(x);
      x = pool2(tape, x, PoolMode::max);
    }
    x = conv_relu(conv_relu(x, "bottleneck.conv0"), "bottleneck.conv1");
    for (int l = 0; l < blocks; ++l) {
      const std::string up = "up" + std::to_string(l);
      x = transpose_conv2d(tape, x, p(up + ".weight"), p(up + ".bias"), 2, 0);
      x = concat_channels(tape, x, skips[std::size_t(blocks - 1 - l)]);
      const std::string name = "dec" + std::to_string(l);
      x = conv_relu(conv_relu(x, name + ".conv0"), name + ".conv1");
    }
    x = conv2d(tape, x, p("out.weight"), p("out.bias"), 1, 0);
    return activation(tape, x, Activation::sigmoid);
  }

  /// Inference without gradient bookkeeping.
  Tensor<Scalar> predict(const Tensor<Scalar>& batch, int head) {
    Tape<Scalar> tape;
    NameSet none;
    Var y = forward(tape, tape.constant(Tensor<Scalar>(batch.shape(), batch.values())), head, &none);
    return tape.value(y);
  }

 private:
  void add_conv(const std::string& slot, Index in, Index out, Index k, std::uint64_t seed) {
    add_slot(slot + ".weight", he_normal<Scalar>({out, in, k, k}, in * k * k, seed, slot + ".weight"));
    add_slot(slot + ".bias", Tensor<Scalar>({out}));
  }

  void add_up(const std::string& slot, Index in, Index out, std::uint64_t seed, bool is_head) {
    auto w = he_normal<Scalar>({in, out, 2, 2}, in * 4, seed, slot + ".weight");
    Tensor<Scalar> b({out});
    if (!is_head) {
      add_slot(slot + ".weight", std::move(w));
      add_slot(slot + ".bias", std::move(b));
      return;
    }
    for (const char* part : {".weight", ".bias"}) {
      const std::string canonical = slot + part;
      partition_.head_slots.push_back(canonical);
      head_slot_set_.insert(canonical);
      slots_.push_back(canonical);
      for (int h = 0; h < num_heads_; ++h) {
        const std::string stored = ParamPartition::head_name(h, canonical);
        params_.add(stored, canonical == slot + ".weight" ? w : b);
        partition_.heads[h].insert(stored);
      }
    }
  }

  void add_slot(const std::string& name, Tensor<Scalar> t) {
    slots_.push_back(name);
    params_.add(name, std::move(t));
    partition_.shared.insert(name);
  }

  std::string resolve(const std::string& slot, int head) const {
    return head_slot_set_.count(slot) ? ParamPartition::head_name(head, slot) : slot;
  }

  void build(std::uint64_t seed) {
    const Index c = config_.base_channels;
    const int blocks = config_.encoder_blocks;
    Index in = config_.in_channels;
    for (int b = 0; b < blocks; ++b) {
      const Index ch = c << b;
      add_conv("enc" + std::to_string(b) + ".conv0", in, ch, 3, seed);
      add_conv("enc" + std::to_string(b) + ".conv1", ch, ch, 3, seed);
      in = ch;
    }
    const Index bottom = c << blocks;
    add_conv("bottleneck.conv0", in, bottom, 3, seed);
    add_conv("bottleneck.conv1", bottom, bottom, 3, seed);
    in = bottom;
    for (int l = 0; l < blocks; ++l) {
      const Index ch = c << (blocks - 1 - l);
      add_up("up" + std::to_string(l), in, ch, seed, l >= blocks - 2);
      add_conv("dec" + std::to_string(l) + ".conv0", 2 * ch, ch, 3, seed);
      add_conv("dec" + std::to_string(l) + ".conv1", ch, ch, 3, seed);
      in = ch;
    }
    add_conv("out", in, config_.out_channels, 1, seed);
  }

  SegModelConfig config_;
  int num_heads_;
  ParameterSet<Scalar> params_;
  ParamPartition partition_;
  std::vector<std::string> slots_;
  NameSet head_slot_set_;
};

}  // namespace clseg
