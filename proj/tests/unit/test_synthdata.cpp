// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "clseg/errors.hpp"
#include "clseg/synthdata/synthdata.hpp"

using namespace clseg;

namespace {

std::vector<Volume> ids_only(int n) {
  std::vector<Volume> out;
  for (int i = 0; i < n; ++i) out.push_back({TensorF({1, 1, 4, 4}), TensorF({1, 1, 4, 4}), 0, i});
  return out;
}

bool binary(const TensorF& m) {
  return (m.values().array() == 0.0f || m.values().array() == 1.0f).all();
}

double pooled_separation(const std::vector<double>& a, const std::vector<double>& b) {
  auto stats = [](const std::vector<double>& v) {
    double m = 0, s = 0;
    for (double x : v) m += x;
    m /= double(v.size());
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, s / double(v.size())};
  };
  const auto [ma, va] = stats(a);
  const auto [mb, vb] = stats(b);
  return std::abs(ma - mb) / std::sqrt(0.5 * (va + vb));
}

}  // namespace

TEST_CASE("degenerate spec yields exactly the two base intensities") {
  DomainSpec spec;
  spec.seed = 3;
  const Volume v = generate_volume(spec, 0, 4, 32, 32);
  CHECK(binary(v.mask));
  for (Index i = 0; i < v.slices.size(); ++i) {
    const float expect = v.mask[i] == 1.0f ? float(spec.foreground_intensity) : float(spec.background_intensity);
    REQUIRE(v.slices[i] == expect);
  }
}

TEST_CASE("generation is deterministic per (spec, volume, slice)") {
  const auto specs = domain_preset("three_domain", 11);
  for (const auto& s : specs) {
    const Volume a = generate_volume(s, 5, 3, 32, 32), b = generate_volume(s, 5, 3, 32, 32);
    CHECK(a.slices.bit_equal(b.slices));
    CHECK(a.mask.bit_equal(b.mask));
    // A longer volume shares its leading slices.
    const Volume c = generate_volume(s, 5, 5, 32, 32);
    CHECK(std::equal(a.slices.data(), a.slices.data() + a.slices.size(), c.slices.data()));
    CHECK_FALSE(a.slices.bit_equal(generate_volume(s, 6, 3, 32, 32).slices));
  }
  const auto other = domain_preset("three_domain", 12);
  CHECK_FALSE(generate_volume(specs[0], 0, 1, 32, 32).slices.bit_equal(generate_volume(other[0], 0, 1, 32, 32).slices));
}

TEST_CASE("foreground area stays within the ellipse bounds") {
  for (const auto& spec : domain_preset("three_domain", 5)) {
    CAPTURE(spec.name);
    const double lo = std::numbers::pi * (spec.radius_min - 1.0) * (spec.radius_min - 1.0);
    const double hi = std::numbers::pi * (spec.blob_extent() + 1.0) * (spec.blob_extent() + 1.0);
    const auto vols = generate_domain(spec, 100, 1, 32, 32);
    for (const auto& v : vols) {
      const double count = v.mask.values().cast<double>().sum();
      CHECK(count >= lo);
      CHECK(count <= hi);
      CHECK(binary(v.mask));
    }
  }
}

TEST_CASE("blob that cannot fit is a configuration error") {
  DomainSpec spec;
  spec.radius_min = 10;
  spec.radius_max = 14;
  CHECK_THROWS_AS(generate_volume(spec, 0, 1, 32, 32), ConfigError);
  spec.radius_min = -1;
  CHECK_THROWS_AS(generate_volume(spec, 0, 1, 64, 64), ConfigError);
  DomainSpec noisy;
  noisy.noise_sigma = -0.1;
  CHECK_THROWS_AS(generate_volume(noisy, 0, 1, 32, 32), ConfigError);
}

TEST_CASE("split sizes use floor and stay disjoint") {
  auto [tr, te] = split_dataset(ids_only(20), 0.65, 1);
  CHECK(tr.size() == 13);
  CHECK(te.size() == 7);
  std::set<int> all;
  for (const auto& v : tr) all.insert(v.volume_id);
  for (const auto& v : te) CHECK(all.insert(v.volume_id).second);
  CHECK(all.size() == 20);
  CHECK(std::is_sorted(tr.begin(), tr.end(), [](auto& a, auto& b) { return a.volume_id < b.volume_id; }));

  auto [tr3, te3] = split_dataset(ids_only(3), 0.65, 1);
  CHECK(tr3.size() == 1);
  CHECK(te3.size() == 2);

  auto [a, _a] = split_dataset(ids_only(20), 0.65, 9);
  auto [b, _b] = split_dataset(ids_only(20), 0.65, 9);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].volume_id == b[i].volume_id);

  CHECK_THROWS_AS(split_dataset(ids_only(1), 0.65, 1), InputError);
  CHECK_THROWS_AS(split_dataset(ids_only(10), 1.0, 1), ConfigError);
  CHECK_THROWS_AS(split_dataset(ids_only(10), 0.0, 1), ConfigError);
}

TEST_CASE("domain dataset carves validation from the training share") {
  const auto spec = domain_preset("mini2", 1)[0];
  DatasetSizes sizes;
  const auto ds = make_domain_dataset(spec, sizes, 4);
  CHECK(ds.train.size() == 8);
  CHECK(ds.val.size() == 2);
  CHECK(ds.test.size() == 6);
  std::set<int> ids;
  for (const auto* part : {&ds.train, &ds.val, &ds.test})
    for (const auto& v : *part) CHECK(ids.insert(v.volume_id).second);

  sizes.volumes_per_domain = 3;
  const auto tiny = make_domain_dataset(spec, sizes, 4);
  CHECK(tiny.train.size() == 1);
  CHECK(tiny.val.size() == 1);
  CHECK(tiny.val[0].volume_id == tiny.train[0].volume_id);
}

TEST_CASE("augmentation") {
  const auto spec = domain_preset("three_domain", 2)[1];
  const Volume v = generate_volume(spec, 0, 1, 32, 32);

  SUBCASE("all probabilities zero is the identity") {
    TensorF s = v.slices, m = v.mask;
    Rng rng(1);
    augment(s, m, AugmentConfig{}, rng);
    CHECK(s.bit_equal(v.slices));
    CHECK(m.bit_equal(v.mask));
  }
  SUBCASE("flips are involutions") {
    TensorF s = v.slices;
    flip_horizontal(s);
    CHECK_FALSE(s.bit_equal(v.slices));
    flip_horizontal(s);
    CHECK(s.bit_equal(v.slices));
    flip_vertical(s);
    flip_vertical(s);
    CHECK(s.bit_equal(v.slices));
  }
  SUBCASE("geometric transforms keep the mask count within 5%") {
    AugmentConfig cfg;
    cfg.flip_prob = 0.5;
    cfg.affine_prob = 1.0;
    cfg.noise_prob = 0.5;
    cfg.bias_prob = 0.5;
    const auto centred = domain_preset("three_domain", 2)[0];
    Rng rng(8);
    for (int i = 0; i < 50; ++i) {
      const Volume c = generate_volume(centred, i, 1, 32, 32);
      TensorF s = c.slices, m = c.mask;
      augment(s, m, cfg, rng);
      const double before = c.mask.values().sum(), after = m.values().sum();
      CHECK(std::abs(after - before) <= 0.05 * before);
      CHECK(binary(m));
      CHECK(s.values().minCoeff() >= 0.0f);
      CHECK(s.values().maxCoeff() <= 1.0f);
    }
  }
  SUBCASE("intensity transforms leave the mask alone") {
    AugmentConfig cfg;
    cfg.noise_prob = 1.0;
    cfg.bias_prob = 1.0;
    TensorF s = v.slices, m = v.mask;
    Rng rng(3);
    augment(s, m, cfg, rng);
    CHECK(m.bit_equal(v.mask));
    CHECK_FALSE(s.bit_equal(v.slices));
  }
  SUBCASE("zero affine is the identity for both interpolators") {
    CHECK(affine_resample(v.slices, 0, 0, 0, false).bit_equal(v.slices));
    CHECK(affine_resample(v.mask, 0, 0, 0, true).bit_equal(v.mask));
  }
  SUBCASE("bad probability") {
    AugmentConfig cfg;
    cfg.flip_prob = 1.5;
    TensorF s = v.slices, m = v.mask;
    Rng rng(1);
    CHECK_THROWS_AS(augment(s, m, cfg, rng), ConfigError);
  }
}

TEST_CASE("orderings") {
  const auto three = orderings({2, 0, 1});
  CHECK(three.size() == 6);
  CHECK(three.front() == std::vector<int>{0, 1, 2});
  CHECK(three.back() == std::vector<int>{2, 1, 0});
  CHECK(std::is_sorted(three.begin(), three.end()));
  CHECK(orderings({7}).size() == 1);

  // Brute force: every 4-tuple over 4 ids with no repeats.
  std::set<std::vector<int>> brute;
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      for (int c = 0; c < 4; ++c)
        for (int d = 0; d < 4; ++d)
          if (std::set<int>{a, b, c, d}.size() == 4) brute.insert({a, b, c, d});
  const auto four = orderings({0, 1, 2, 3});
  CHECK(four.size() == brute.size());
  CHECK(std::set<std::vector<int>>(four.begin(), four.end()) == brute);

  CHECK(orderings({0, 1, 2, 3, 4}).size() == 120);
  CHECK_THROWS_AS(orderings({0, 1, 2, 3, 4, 5}), ConfigError);
  CHECK_THROWS_AS(orderings({}), ConfigError);
}

TEST_CASE("three-domain preset is separable by intensity and noise") {
  const auto specs = domain_preset("three_domain", 0);
  REQUIRE(specs.size() == 3);
  std::vector<std::vector<double>> means(3), noise(3);
  for (std::size_t d = 0; d < 3; ++d) {
    for (const auto& v : generate_domain(specs[d], 16, 6, 32, 32)) {
      for (Index k = 0; k < v.slice_count(); ++k) {
        means[d].push_back(slice_mean_intensity(v.slices, k));
        noise[d].push_back(slice_noise_estimate(v.slices, v.mask, k));
      }
    }
  }
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) {
      CAPTURE(i);
      CAPTURE(j);
      CHECK(pooled_separation(means[i], means[j]) > 3.0);
      CHECK(pooled_separation(noise[i], noise[j]) > 3.0);
    }
  CHECK_THROWS_AS(domain_preset("nine_domain", 0), ConfigError);
}

TEST_CASE("noise estimate recovers the injected sigma") {
  DomainSpec spec;
  spec.noise_sigma = 0.05;
  spec.foreground_intensity = 0.6;
  spec.background_intensity = 0.4;
  spec.seed = 1;
  const Volume v = generate_volume(spec, 0, 4, 32, 32);
  for (Index k = 0; k < 4; ++k) CHECK(slice_noise_estimate(v.slices, v.mask, k) == doctest::Approx(0.05).epsilon(0.15));
}

TEST_CASE("dataset export round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "clseg_test_dataset";
  std::filesystem::remove_all(dir);
  DatasetSizes sizes;
  sizes.volumes_per_domain = 5;
  sizes.slices_per_volume = 2;
  std::vector<DomainDataset> data;
  for (const auto& s : domain_preset("mini2", 3)) data.push_back(make_domain_dataset(s, sizes, 3));
  save_datasets(dir, data);
  const auto back = load_datasets(dir);
  REQUIRE(back.size() == data.size());
  for (std::size_t d = 0; d < data.size(); ++d) {
    CHECK(back[d].spec.name == data[d].spec.name);
    CHECK(back[d].spec.seed == data[d].spec.seed);
    CHECK(back[d].spec.intensity_gain == data[d].spec.intensity_gain);
    REQUIRE(back[d].test.size() == data[d].test.size());
    REQUIRE(back[d].train.size() == data[d].train.size());
    for (std::size_t i = 0; i < data[d].test.size(); ++i) {
      CHECK(back[d].test[i].volume_id == data[d].test[i].volume_id);
      CHECK(back[d].test[i].slices.bit_equal(data[d].test[i].slices));
      CHECK(back[d].test[i].mask.bit_equal(data[d].test[i].mask));
    }
  }
  CHECK_THROWS_AS(load_datasets(dir / "missing"), InputError);
}
