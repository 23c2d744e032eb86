// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>

#include "clseg/models/autoencoder.hpp"
#include "clseg/models/checkpoint.hpp"
#include "clseg/models/seg_model.hpp"
#include "test_support.hpp"

using namespace clseg;
using clseg::testing::random_tensor;

namespace {

TensorF random_batch(std::uint64_t seed, Shape shape) {
  Rng rng(seed);
  TensorF t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = float(rng.uniform());
  return t;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("clseg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("segmentation model shape contract") {
  SegModel<float> model({3, 4, 1, 1}, 2, 1);
  TensorF y = model.predict(random_batch(1, {2, 1, 32, 32}), 0);
  CHECK(y.shape() == Shape{2, 1, 32, 32});
  CHECK(y.values().minCoeff() >= 0.0f);
  CHECK(y.values().maxCoeff() <= 1.0f);
  CHECK_THROWS_AS(model.predict(random_batch(1, {1, 1, 36, 36}), 0), ConfigError);
  CHECK_THROWS_AS(model.predict(random_batch(1, {1, 1, 32, 32}), 2), RoutingError);
  CHECK_THROWS_AS(SegModel<float>({1, 4, 1, 1}, 1, 1), ConfigError);
}

TEST_CASE("same seed builds bit-identical parameters") {
  SegModel<float> a({3, 4, 1, 1}, 3, 42), b({3, 4, 1, 1}, 3, 42), c({3, 4, 1, 1}, 3, 43);
  CHECK(a.params().bit_equal(b.params()));
  CHECK_FALSE(a.params().bit_equal(c.params()));
}

TEST_CASE("heads cover exactly the last two transposed convolutions") {
  for (int blocks : {2, 3, 5}) {
    const Index c = 2;
    SegModel<float> model({blocks, int(c), 1, 1}, 3, 7);
    const auto& part = model.partition();
    CAPTURE(blocks);

    // Enumerate names independently of the partition.
    NameSet head0_by_name;
    for (const auto& n : model.params().names())
      if (n.rfind("head0.", 0) == 0) head0_by_name.insert(n);
    const std::string last = "up" + std::to_string(blocks - 1), second = "up" + std::to_string(blocks - 2);
    CHECK(head0_by_name == NameSet{"head0." + second + ".weight", "head0." + second + ".bias",
                                   "head0." + last + ".weight", "head0." + last + ".bias"});
    CHECK(part.head(0) == head0_by_name);

    // Element count of the two layers from the channel layout: level l maps c·2^(B−l) -> c·2^(B−l−1).
    Index expected = 0;
    for (int l : {blocks - 2, blocks - 1}) {
      const Index in = c << (blocks - l), out = c << (blocks - 1 - l);
      expected += in * out * 4 + out;
    }
    Index counted = 0;
    for (const auto& n : part.head(0)) counted += model.params().at(n).size();
    CHECK(counted == expected);

    // Partition completeness and head interchangeability.
    for (int h = 0; h < 3; ++h) {
      for (const auto& n : part.head(h)) CHECK(part.shared.count(n) == 0);
      const auto used = model.layer_names(h);
      CHECK(part.with_head(h) == NameSet(used.begin(), used.end()));
      for (const auto& slot : part.head_slots)
        CHECK(model.params().at(ParamPartition::head_name(h, slot)).shape() ==
              model.params().at(ParamPartition::head_name(0, slot)).shape());
    }
    CHECK(part.all() == model.params().name_set());
  }
}

TEST_CASE("forward routing through heads") {
  SegModel<float> model({3, 4, 1, 1}, 2, 5);
  TensorF x = random_batch(9, {2, 1, 32, 32});
  const TensorF y0 = model.predict(x, 0);
  CHECK(y0.bit_equal(model.predict(x, 0)));
  CHECK(y0.bit_equal(model.predict(x, 1)));

  TensorF target(x.shape());
  for (Index i = 0; i < target.size(); ++i) target[i] = x[i] > 0.5f ? 1.0f : 0.0f;

  SUBCASE("head isolation: gradients via head 0 never reach head 1") {
    model.params().zero_grad();
    Tape<float> tape;
    tape.backward(loss_seg(tape, model.forward(tape, tape.constant(x), 0), target));
    for (const auto& n : model.partition().head(1)) CHECK(model.params().at(n).grad().isZero());
    bool any = false;
    for (const auto& n : model.partition().head(0)) any = any || !model.params().at(n).grad().isZero();
    CHECK(any);
  }
  SUBCASE("training only head 1 leaves head-0 output unchanged") {
    const NameSet trainable = model.partition().head(1);
    for (int step = 0; step < 3; ++step) {
      model.params().zero_grad();
      Tape<float> tape;
      tape.backward(loss_seg(tape, model.forward(tape, tape.constant(x), 1, &trainable), target));
      for (const auto& n : trainable) sgd_step(model.params().at(n), model.params().at(n).grad(), 0.5f, 0.0f, n);
    }
    CHECK(model.predict(x, 0).bit_equal(y0));
    CHECK_FALSE(model.predict(x, 1).bit_equal(y0));
  }
}

TEST_CASE("full model gradient matches finite differences (f64)") {
  SegModel<double> model({2, 2, 1, 1}, 2, 3);
  Rng rng(17);
  TensorD x = random_tensor(rng, {1, 1, 8, 8}, 0.0, 1.0);
  TensorD target(x.shape());
  for (Index i = 0; i < target.size(); ++i) target[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  model.params().zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss_seg(tape, model.forward(tape, tape.constant(x), 1), target));
  }
  auto loss = [&]() {
    Tape<double> tape;
    NameSet none;
    return tape.value(loss_seg(tape, model.forward(tape, tape.constant(x), 1, &none), target))[0];
  };
  for (const std::string name : {"enc0.conv0.weight", "bottleneck.conv1.bias", "head1.up1.weight", "out.weight"}) {
    std::vector<TensorD*> ptrs{&model.params().at(name)};
    auto numeric = finite_diff_grad<double>(loss, ptrs, 1e-6);
    CAPTURE(name);
    CHECK(clseg::testing::rel_error(model.params().at(name).grad(), numeric[0]) < 1e-4);
  }
}

TEST_CASE("autoencoder architectures") {
  SUBCASE("cnn channel sequence") {
    Autoencoder<float> ae({AEKind::cnn}, 32, 32, 1);
    const auto& p = ae.params();
    CHECK(p.at("enc0.weight").dim(0) == 16);
    CHECK(p.at("enc1.weight").dim(0) == 4);
    CHECK(p.at("dec0.weight").dim(0) == 4);
    CHECK(p.at("dec1.weight").dim(0) == 16);
    CHECK(p.size() == 8);  // two encoder + two decoder layers
    CHECK(AEConfig::kCnnChannels == std::array<Index, 4>{16, 4, 4, 16});
  }
  SUBCASE("linear widths") {
    Autoencoder<float> ae({AEKind::linear}, 16, 16, 1);
    CHECK(ae.params().at("enc0.weight").dim(0) == 128);
    CHECK(ae.params().at("enc1.weight").dim(0) == 64);
    CHECK(ae.params().at("dec0.weight").dim(0) == 128);
    CHECK(ae.params().at("dec1.weight").dim(0) == 256);
  }
  SUBCASE("reconstruction shape equals input shape") {
    Rng rng(2);
    for (int i = 0; i < 4; ++i) {
      const Index h = 4 * (2 + Index(rng.below(6))), w = 4 * (2 + Index(rng.below(6)));
      for (AEKind kind : {AEKind::cnn, AEKind::linear}) {
        Autoencoder<float> ae({kind}, h, w, 3);
        TensorF x = random_batch(std::uint64_t(i), {3, 1, h, w});
        CHECK(ae.reconstruct(x).shape() == x.shape());
      }
    }
  }
  CHECK_THROWS_AS(Autoencoder<float>({AEKind::cnn}, 30, 32, 1), ConfigError);
  CHECK_THROWS_AS(parse_ae_kind("alexnet"), ConfigError);
}

TEST_CASE("checkpoint round trip and corruption") {
  const auto dir = temp_dir("ckpt");
  SegModel<float> model({3, 4, 1, 1}, 2, 11);
  Manifest m;
  m.set("domain", std::string("final"));
  m.set("stage", 2);
  m.set("seed", 11);
  const auto path = dir / "model.clseg";
  save_checkpoint(model.params(), m, path);
  CHECK_FALSE(std::filesystem::exists(dir / "model.clseg.tmp"));

  Checkpoint back = load_checkpoint(path);
  CHECK(back.tensors.bit_equal(model.params()));
  CHECK(back.manifest == m);
  CHECK(back.tensors.names() == model.params().names());

  const std::string raw = read_file(path);
  CHECK(raw.substr(0, 6) == "CLSEG1");
  CHECK(encode_checkpoint(back.tensors, back.manifest) == std::vector<std::uint8_t>(raw.begin(), raw.end()));

  SUBCASE("truncated") {
    write_file_atomic(dir / "trunc.clseg", raw.substr(0, raw.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(dir / "trunc.clseg"), CorruptionError);
  }
  SUBCASE("bit flip") {
    std::string flipped = raw;
    flipped[flipped.size() / 2] ^= 0x01;
    write_file_atomic(dir / "flip.clseg", flipped);
    CHECK_THROWS_AS(load_checkpoint(dir / "flip.clseg"), CorruptionError);
  }
  SUBCASE("head-only checkpoint replaces exactly the head tensors") {
    SegModel<float> donor({3, 4, 1, 1}, 2, 99);
    for (const auto& n : donor.partition().head(1)) donor.params().at(n).values().array() += 1.0f;
    save_checkpoint(donor.params().subset(donor.partition().head(1)), m, dir / "head1.clseg");
    const auto before = model.params().snapshot();
    auto replaced = model.params().assign(load_checkpoint(dir / "head1.clseg").tensors);
    NameSet changed;
    for (const auto& n : model.params().names())
      if (!model.params().at(n).bit_equal(before.at(n))) changed.insert(n);
    CHECK(changed == model.partition().head(1));
    CHECK(NameSet(replaced.begin(), replaced.end()) == model.partition().head(1));
  }
  SUBCASE("unknown tensor name") {
    ParameterSet<float> stray;
    stray.add("nonexistent.weight", TensorF({2}));
    CHECK_THROWS_AS(model.params().assign(stray), SchemaError);
  }
}
