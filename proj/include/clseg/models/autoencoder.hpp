// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>

#include "clseg/models/params.hpp"
#include "clseg/numerics/ops.hpp"

namespace clseg {

enum class AEKind { cnn, linear };

inline std::string to_string(AEKind k) { return k == AEKind::cnn ? "cnn" : "linear"; }

inline AEKind parse_ae_kind(const std::string& s) {
  if (s == "cnn") return AEKind::cnn;
  if (s == "linear") return AEKind::linear;
  throw ConfigError("unknown autoencoder kind '" + s + "' (expected cnn or linear)");
}

/// Oracle autoencoder shapes. Both variants have two encoder and two decoder layers.
struct AEConfig {
  AEKind kind = AEKind::cnn;

  /// cnn: encoder output channels then decoder input channels.
  static constexpr std::array<Index, 4> kCnnChannels{16, 4, 4, 16};
  /// linear: encoder widths; the decoder mirrors them.
  static constexpr std::array<Index, 2> kLinearWidths{128, 64};
};

/// Reconstruction network A: X -> X for [N,1,H,W] slices in [0,1].
///
/// cnn:    conv3x3/s2 (1->16), relu, conv3x3/s2 (16->4), relu,
///         tconv2x2/s2 (4->16), relu, tconv2x2/s2 (16->1), sigmoid.
/// linear: flatten, 128, relu, 64, relu, 128, relu, H*W, sigmoid.
template <typename Scalar>
class Autoencoder {
 public:
  Autoencoder(AEConfig config, Index height, Index width, std::uint64_t seed)
      : config_(config), height_(height), width_(width) {
    if (height <= 0 || width <= 0) throw ConfigError("autoencoder input dims must be positive");
    if (config.kind == AEKind::cnn && (height % 4 != 0 || width % 4 != 0)) {
      throw ConfigError("cnn autoencoder needs spatial dims divisible by 4, got " + std::to_string(height) + "x" +
                        std::to_string(width));
    }
    build(seed);
  }

  const AEConfig& config() const { return config_; }
  Index height() const { return height_; }
  Index width() const { return width_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }

  Var forward(Tape<Scalar>& tape, Var batch, const NameSet* trainable = nullptr) {
    const auto& s = tape.shape(batch);
    if (s.size() != 4 || s[1] != 1 || s[2] != height_ || s[3] != width_) {
      throw ConfigError("autoencoder built for [N,1," + std::to_string(height_) + "," + std::to_string(width_) +
                        "], got " + shape_str(s));
    }
    ParamBinder<Scalar> p(tape, params_, trainable, nullptr);
    const auto relu = [&](Var v) { return activation(tape, v, Activation::relu); };
    if (config_.kind == AEKind::cnn) {
      Var x = relu(conv2d(tape, batch, p("enc0.weight"), p("enc0.bias"), 2, 1));
      x = relu(conv2d(tape, x, p("enc1.weight"), p("enc1.bias"), 2, 1));
      x = relu(transpose_conv2d(tape, x, p("dec0.weight"), p("dec0.bias"), 2, 0));
      x = transpose_conv2d(tape, x, p("dec1.weight"), p("dec1.bias"), 2, 0);
      return activation(tape, x, Activation::sigmoid);
    }
    const Index n = s[0];
    Var x = reshape(tape, batch, {n, height_ * width_});
    x = relu(linear(tape, x, p("enc0.weight"), p("enc0.bias")));
    x = relu(linear(tape, x, p("enc1.weight"), p("enc1.bias")));
    x = relu(linear(tape, x, p("dec0.weight"), p("dec0.bias")));
    x = activation(tape, linear(tape, x, p("dec1.weight"), p("dec1.bias")), Activation::sigmoid);
    return reshape(tape, x, {n, 1, height_, width_});
  }

  Tensor<Scalar> reconstruct(const Tensor<Scalar>& batch) {
    Tape<Scalar> tape;
    NameSet none;
    return tape.value(forward(tape, tape.constant(Tensor<Scalar>(batch.shape(), batch.values())), &none));
  }

 private:
  void build(std::uint64_t seed) {
    auto add = [&](const std::string& name, Shape w_shape, Index fan_in, Index bias) {
      params_.add(name + ".weight", he_normal<Scalar>(w_shape, fan_in, seed, name + ".weight"));
      params_.add(name + ".bias", Tensor<Scalar>({bias}));
    };
    if (config_.kind == AEKind::cnn) {
      const auto& ch = AEConfig::kCnnChannels;
      add("enc0", {ch[0], 1, 3, 3}, 9, ch[0]);
      add("enc1", {ch[1], ch[0], 3, 3}, ch[0] * 9, ch[1]);
      add("dec0", {ch[2], ch[3], 2, 2}, ch[2] * 4, ch[3]);
      add("dec1", {ch[3], 1, 2, 2}, ch[3] * 4, 1);
      return;
    }
    const Index pixels = height_ * width_;
    const auto& wd = AEConfig::kLinearWidths;
    add("enc0", {wd[0], pixels}, pixels, wd[0]);
    add("enc1", {wd[1], wd[0]}, wd[0], wd[1]);
    add("dec0", {wd[0], wd[1]}, wd[1], wd[0]);
    add("dec1", {pixels, wd[0]}, wd[0], pixels);
  }

  AEConfig config_;
  Index height_, width_;
  ParameterSet<Scalar> params_;
};

}  // namespace clseg
