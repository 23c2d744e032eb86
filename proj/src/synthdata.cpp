// SPDX-License-Identifier: Apache-2.0
#include "clseg/synthdata/synthdata.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <numbers>

#include "clseg/kv_text.hpp"
#include "clseg/models/checkpoint.hpp"

namespace clseg {

namespace {

constexpr double kPi = std::numbers::pi;

struct Ellipse {
  double cx, cy, a, b, angle;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
    return u * u + v * v <= 1.0;
  }
};

}  // namespace

void DomainSpec::validate(Index height, Index width) const {
  if (!(radius_min > 0.0) || !(radius_max >= radius_min)) {
    throw ConfigError("domain " + name + ": blob radius range must satisfy 0 < min <= max");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("domain " + name + ": noise_sigma must be >= 0");
  if (!(center_concentration >= 0.0 && center_concentration <= 1.0)) {
    throw ConfigError("domain " + name + ": center_concentration must lie in [0,1]");
  }
  if (!(bias_field_amplitude >= 0.0)) throw ConfigError("domain " + name + ": bias_field_amplitude must be >= 0");
  const double half = 0.5 * double(std::min(height, width));
  if (blob_extent() + 1.0 > half) {
    throw ConfigError("domain " + name + ": blob of extent " + std::to_string(blob_extent()) +
                      " px cannot fit a " + std::to_string(height) + "x" + std::to_string(width) + " slice");
  }
}

Volume generate_volume(const DomainSpec& spec, int volume_id, Index slices, Index height, Index width) {
  spec.validate(height, width);
  if (slices < 1) throw ConfigError("a volume needs at least one slice");
  Volume vol{TensorF({slices, 1, height, width}), TensorF({slices, 1, height, width}), spec.domain_id, volume_id};

  const auto vid = static_cast<std::uint64_t>(volume_id);
  const auto did = static_cast<std::uint64_t>(spec.domain_id);
  Rng vrng(derive_seed({spec.seed, did, vid}));
  const double reach = 0.5 * double(std::min(height, width)) - spec.blob_extent() - 1.0;
  const double spread = (1.0 - spec.center_concentration) * reach;
  const double bx = 0.5 * double(width) + spread * vrng.uniform(-1.0, 1.0);
  const double by = 0.5 * double(height) + spread * vrng.uniform(-1.0, 1.0);
  // Low-frequency multiplicative-looking field, shared by all slices of the volume.
  const double fx = vrng.uniform(0.3, 0.8), fy = vrng.uniform(0.3, 0.8);
  const double px = vrng.uniform(0.0, 2.0 * kPi), py = vrng.uniform(0.0, 2.0 * kPi);

  const Index plane = height * width;
  for (Index k = 0; k < slices; ++k) {
    Rng srng(derive_seed({spec.seed, did, vid, static_cast<std::uint64_t>(k) + 1}));
    const int count = 2 + int(srng.below(3));
    std::vector<Ellipse> blob;
    for (int e = 0; e < count; ++e) {
      Ellipse el{};
      el.cx = bx + srng.uniform(-0.5, 0.5) * spec.radius_min;
      el.cy = by + srng.uniform(-0.5, 0.5) * spec.radius_min;
      el.a = srng.uniform(spec.radius_min, spec.radius_max);
      el.b = srng.uniform(spec.radius_min, spec.radius_max);
      el.angle = srng.uniform(0.0, kPi);
      blob.push_back(el);
    }
    float* img = vol.slices.data() + k * plane;
    float* msk = vol.mask.data() + k * plane;
    for (Index y = 0; y < height; ++y) {
      for (Index x = 0; x < width; ++x) {
        const double cx = double(x) + 0.5, cy = double(y) + 0.5;
        const bool inside = std::any_of(blob.begin(), blob.end(), [&](const Ellipse& el) { return el.contains(cx, cy); });
        const double base = inside ? spec.foreground_intensity : spec.background_intensity;
        double v = spec.intensity_gain * base + spec.intensity_offset;
        if (spec.bias_field_amplitude > 0.0) {
          v += spec.bias_field_amplitude * std::cos(2.0 * kPi * fx * cx / double(width) + px) *
               std::cos(2.0 * kPi * fy * cy / double(height) + py);
        }
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * srng.normal();
        img[y * width + x] = float(std::clamp(v, 0.0, 1.0));
        msk[y * width + x] = inside ? 1.0f : 0.0f;
      }
    }
  }
  return vol;
}

std::vector<Volume> generate_domain(const DomainSpec& spec, int n_volumes, Index slices_per_volume, Index height,
                                    Index width) {
  if (n_volumes < 1) throw ConfigError("generate_domain needs n_volumes >= 1");
  std::vector<Volume> out;
  out.reserve(std::size_t(n_volumes));
  for (int v = 0; v < n_volumes; ++v) out.push_back(generate_volume(spec, v, slices_per_volume, height, width));
  return out;
}

std::pair<std::vector<Volume>, std::vector<Volume>> split_dataset(std::vector<Volume> volumes, double train_frac,
                                                                  std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("train fraction must lie in (0,1)");
  const std::size_t n = volumes.size();
  if (n < 2) throw InputError("cannot split fewer than 2 volumes");
  const auto n_train = static_cast<std::size_t>(std::floor(train_frac * double(n) + 1e-9));
  if (n_train == 0 || n_train == n) {
    throw InputError("split of " + std::to_string(n) + " volumes at " + std::to_string(train_frac) +
                     " leaves one side empty");
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<Volume> train, test;
  for (std::size_t i = 0; i < n; ++i) (i < n_train ? train : test).push_back(std::move(volumes[order[i]]));
  auto by_id = [](const Volume& a, const Volume& b) { return a.volume_id < b.volume_id; };
  std::sort(train.begin(), train.end(), by_id);
  std::sort(test.begin(), test.end(), by_id);
  return {std::move(train), std::move(test)};
}

DomainDataset make_domain_dataset(const DomainSpec& spec, const DatasetSizes& sizes, std::uint64_t split_seed) {
  DomainDataset ds;
  ds.spec = spec;
  auto volumes = generate_domain(spec, sizes.volumes_per_domain, sizes.slices_per_volume, sizes.height, sizes.width);
  const auto did = static_cast<std::uint64_t>(spec.domain_id);
  auto [train, test] = split_dataset(std::move(volumes), sizes.train_fraction, derive_seed({split_seed, did, 1}));
  ds.test = std::move(test);
  if (train.size() >= 2 && sizes.val_fraction > 0.0) {
    auto [fit, val] = split_dataset(std::move(train), 1.0 - sizes.val_fraction, derive_seed({split_seed, did, 2}));
    ds.train = std::move(fit);
    ds.val = std::move(val);
  } else {
    ds.val = train;  // a single training volume doubles as its own validation set
    ds.train = std::move(train);
  }
  return ds;
}

// ---------------------------------------------------------------------------

void AugmentConfig::validate() const {
  for (double p : {flip_prob, affine_prob, noise_prob, bias_prob}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augmentation probabilities must lie in [0,1]");
  }
}

void flip_horizontal(TensorF& plane) {
  const Index h = plane.dim(plane.rank() - 2), w = plane.dim(plane.rank() - 1);
  for (Index p = 0; p < plane.size() / (h * w); ++p)
    for (Index y = 0; y < h; ++y) {
      float* row = plane.data() + (p * h + y) * w;
      std::reverse(row, row + w);
    }
}

void flip_vertical(TensorF& plane) {
  const Index h = plane.dim(plane.rank() - 2), w = plane.dim(plane.rank() - 1);
  for (Index p = 0; p < plane.size() / (h * w); ++p) {
    float* base = plane.data() + p * h * w;
    for (Index y = 0; y < h / 2; ++y) std::swap_ranges(base + y * w, base + (y + 1) * w, base + (h - 1 - y) * w);
  }
}

TensorF affine_resample(const TensorF& plane, double rotation_deg, double tx, double ty, bool nearest) {
  const Index h = plane.dim(plane.rank() - 2), w = plane.dim(plane.rank() - 1);
  TensorF out(plane.shape());
  const double th = rotation_deg * kPi / 180.0, c = std::cos(th), s = std::sin(th);
  const double cx = 0.5 * double(w), cy = 0.5 * double(h);
  for (Index p = 0; p < plane.size() / (h * w); ++p) {
    const float* src = plane.data() + p * h * w;
    float* dst = out.data() + p * h * w;
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        // Inverse map the output pixel centre into the source.
        const double ox = double(x) + 0.5 - cx - tx, oy = double(y) + 0.5 - cy - ty;
        const double sx = c * ox + s * oy + cx - 0.5, sy = -s * ox + c * oy + cy - 0.5;
        if (nearest) {
          const auto ix = static_cast<Index>(std::lround(sx)), iy = static_cast<Index>(std::lround(sy));
          dst[y * w + x] = (ix >= 0 && ix < w && iy >= 0 && iy < h) ? src[iy * w + ix] : 0.0f;
          continue;
        }
        const double fx = std::clamp(sx, 0.0, double(w - 1)), fy = std::clamp(sy, 0.0, double(h - 1));
        const auto x0 = static_cast<Index>(std::floor(fx)), y0 = static_cast<Index>(std::floor(fy));
        const Index x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
        const double ax = fx - double(x0), ay = fy - double(y0);
        const double top = (1 - ax) * src[y0 * w + x0] + ax * src[y0 * w + x1];
        const double bot = (1 - ax) * src[y1 * w + x0] + ax * src[y1 * w + x1];
        dst[y * w + x] = float((1 - ay) * top + ay * bot);
      }
    }
  }
  return out;
}

void augment(TensorF& slice, TensorF& mask, const AugmentConfig& config, Rng& rng) {
  config.validate();
  if (slice.shape() != mask.shape()) throw ConfigError("augment: slice and mask shapes differ");
  if (rng.bernoulli(config.flip_prob)) {
    flip_horizontal(slice);
    flip_horizontal(mask);
  }
  if (rng.bernoulli(config.flip_prob)) {
    flip_vertical(slice);
    flip_vertical(mask);
  }
  if (rng.bernoulli(config.affine_prob)) {
    const double rot = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg);
    const double tx = rng.uniform(-config.max_translation, config.max_translation);
    const double ty = rng.uniform(-config.max_translation, config.max_translation);
    slice = affine_resample(slice, rot, tx, ty, false);
    mask = affine_resample(mask, rot, tx, ty, true);
  }
  if (rng.bernoulli(config.noise_prob)) {
    for (Index i = 0; i < slice.size(); ++i)
      slice[i] = float(std::clamp(double(slice[i]) + config.noise_sigma * rng.normal(), 0.0, 1.0));
  }
  if (rng.bernoulli(config.bias_prob)) {
    const Index h = slice.dim(slice.rank() - 2), w = slice.dim(slice.rank() - 1);
    const double dir = rng.uniform(0.0, 2.0 * kPi), amp = config.bias_amplitude;
    for (Index i = 0; i < slice.size(); ++i) {
      const Index y = (i / w) % h, x = i % w;
      const double ramp = (std::cos(dir) * (double(x) / double(w) - 0.5) + std::sin(dir) * (double(y) / double(h) - 0.5));
      slice[i] = float(std::clamp(double(slice[i]) + 2.0 * amp * ramp, 0.0, 1.0));
    }
  }
}

// ---------------------------------------------------------------------------

std::vector<std::vector<int>> orderings(std::vector<int> ids) {
  if (ids.empty()) throw ConfigError("orderings need at least one domain");
  if (ids.size() > 5) {
    throw ConfigError("refusing to enumerate " + std::to_string(ids.size()) +
                      "! orderings; pass an explicit sample of orderings instead");
  }
  std::sort(ids.begin(), ids.end());
  std::vector<std::vector<int>> out;
  do {
    out.push_back(ids);
  } while (std::next_permutation(ids.begin(), ids.end()));
  return out;
}

std::vector<DomainSpec> domain_preset(const std::string& name, std::uint64_t seed) {
  // A: small centred bright blobs, clean. B: large off-centre blobs, inverted
  // high-gain contrast. C: medium blobs, low contrast with strong bias field and noise.
  DomainSpec a;
  a.domain_id = 0;
  a.name = "A";
  a.radius_min = 3.5;
  a.radius_max = 5.5;
  a.center_concentration = 1.0;
  a.intensity_gain = 1.0;
  a.intensity_offset = 0.0;
  a.noise_sigma = 0.02;
  a.bias_field_amplitude = 0.0;

  DomainSpec b;
  b.domain_id = 1;
  b.name = "B";
  b.radius_min = 6.0;
  b.radius_max = 8.5;
  b.center_concentration = 0.2;
  b.intensity_gain = -1.2;
  b.intensity_offset = 1.05;
  b.noise_sigma = 0.05;
  b.bias_field_amplitude = 0.02;

  DomainSpec c;
  c.domain_id = 2;
  c.name = "C";
  c.radius_min = 4.5;
  c.radius_max = 7.0;
  c.center_concentration = 0.6;
  c.intensity_gain = 0.6;
  c.intensity_offset = 0.33;
  c.noise_sigma = 0.09;
  c.bias_field_amplitude = 0.12;

  std::vector<DomainSpec> out;
  if (name == "three_domain") {
    out = {a, b, c};
  } else if (name == "mini2") {
    out = {a, b};
  } else {
    throw ConfigError("unknown data preset '" + name + "' (expected three_domain or mini2)");
  }
  for (auto& s : out) s.seed = derive_seed({seed, static_cast<std::uint64_t>(s.domain_id), 0x5eed});
  return out;
}

double slice_mean_intensity(const TensorF& volume_slices, Index k) {
  const Index plane = volume_slices.dim(2) * volume_slices.dim(3);
  return double(volume_slices.values().segment(k * plane, plane).cast<double>().mean());
}

double slice_noise_estimate(const TensorF& volume_slices, const TensorF& mask, Index k) {
  const Index h = volume_slices.dim(2), w = volume_slices.dim(3), plane = h * w;
  const float* img = volume_slices.data() + k * plane;
  const float* msk = mask.data() + k * plane;
  double sum = 0, sum2 = 0;
  long n = 0;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x + 1 < w; ++x) {
      if (msk[y * w + x] != msk[y * w + x + 1]) continue;
      const double d = double(img[y * w + x + 1]) - double(img[y * w + x]);
      sum += d;
      sum2 += d * d;
      ++n;
    }
  if (n < 2) return 0.0;
  const double mean = sum / double(n);
  return std::sqrt(std::max(0.0, sum2 / double(n) - mean * mean) / 2.0);
}

// ---------------------------------------------------------------------------

namespace {

std::string key_name(std::string name) {
  for (auto& ch : name) ch = char(std::tolower(static_cast<unsigned char>(ch)));
  return name;
}

void put_spec(KeyValueText& kv, const DomainSpec& s) {
  const std::string p = "domain." + key_name(s.name) + ".";
  kv.set(p + "id", s.domain_id);
  kv.set(p + "radius_min", s.radius_min);
  kv.set(p + "radius_max", s.radius_max);
  kv.set(p + "center_concentration", s.center_concentration);
  kv.set(p + "intensity_gain", s.intensity_gain);
  kv.set(p + "intensity_offset", s.intensity_offset);
  kv.set(p + "noise_sigma", s.noise_sigma);
  kv.set(p + "bias_field_amplitude", s.bias_field_amplitude);
  kv.set(p + "foreground_intensity", s.foreground_intensity);
  kv.set(p + "background_intensity", s.background_intensity);
  kv.set(p + "seed", std::to_string(s.seed));
}

DomainSpec get_spec(const KeyValueText& kv, const std::string& name) {
  const std::string p = "domain." + key_name(name) + ".";
  DomainSpec s;
  s.name = name;
  s.domain_id = int(kv.integer(p + "id"));
  s.radius_min = kv.number(p + "radius_min");
  s.radius_max = kv.number(p + "radius_max");
  s.center_concentration = kv.number(p + "center_concentration");
  s.intensity_gain = kv.number(p + "intensity_gain");
  s.intensity_offset = kv.number(p + "intensity_offset");
  s.noise_sigma = kv.number(p + "noise_sigma");
  s.bias_field_amplitude = kv.number(p + "bias_field_amplitude");
  s.foreground_intensity = kv.number(p + "foreground_intensity");
  s.background_intensity = kv.number(p + "background_intensity");
  s.seed = std::stoull(kv.at(p + "seed"));
  return s;
}

std::string volume_file(const std::string& domain, int volume_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%03d", volume_id);
  return "volumes/" + domain + "_" + buf + ".clseg";
}

}  // namespace

void save_datasets(const std::filesystem::path& dir, const std::vector<DomainDataset>& datasets) {
  KeyValueText manifest;
  std::string names;
  for (const auto& ds : datasets) names += (names.empty() ? "" : ",") + ds.spec.name;
  manifest.set("format", std::string("clseg-dataset-1"));
  manifest.set("domains", names);
  for (const auto& ds : datasets) {
    put_spec(manifest, ds.spec);
    const std::pair<const char*, const std::vector<Volume>*> parts[] = {
        {"train", &ds.train}, {"val", &ds.val}, {"test", &ds.test}};
    for (const auto& [split, vols] : parts) {
      std::string ids;
      for (const auto& v : *vols) {
        ids += (ids.empty() ? "" : ",") + std::to_string(v.volume_id);
        ParameterSet<float> tensors;
        tensors.add("slices", v.slices);
        tensors.add("mask", v.mask);
        Manifest m;
        m.set("domain", ds.spec.name);
        m.set("domain_id", v.domain_id);
        m.set("volume_id", v.volume_id);
        m.set("split", std::string(split));
        const auto path = dir / volume_file(ds.spec.name, v.volume_id);
        // A single training volume doubles as validation; write it once.
        if (!std::filesystem::exists(path) || std::string(split) != "val") save_checkpoint(tensors, m, path);
      }
      manifest.set("split." + key_name(ds.spec.name) + "." + split, ids);
    }
  }
  write_file_atomic(dir / "dataset.manifest", manifest.to_text());
}

std::vector<DomainDataset> load_datasets(const std::filesystem::path& dir) {
  const auto mpath = dir / "dataset.manifest";
  if (!std::filesystem::exists(mpath)) throw InputError("no dataset manifest at '" + mpath.string() + "'");
  const KeyValueText manifest = KeyValueText::parse(read_file(mpath), mpath.string());
  std::vector<DomainDataset> out;
  std::string names = manifest.at("domains");
  std::size_t pos = 0;
  while (pos <= names.size()) {
    const auto comma = names.find(',', pos);
    const std::string name = names.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    pos = comma == std::string::npos ? names.size() + 1 : comma + 1;
    if (name.empty()) continue;
    DomainDataset ds;
    ds.spec = get_spec(manifest, name);
    const std::pair<const char*, std::vector<Volume>*> parts[] = {{"train", &ds.train}, {"val", &ds.val}, {"test", &ds.test}};
    for (const auto& [split, vols] : parts) {
      const std::string ids = manifest.at("split." + key_name(name) + "." + split);
      std::size_t p = 0;
      while (p < ids.size()) {
        const auto c = ids.find(',', p);
        const int id = std::stoi(ids.substr(p, c == std::string::npos ? std::string::npos : c - p));
        p = c == std::string::npos ? ids.size() : c + 1;
        Checkpoint ck = load_checkpoint(dir / volume_file(name, id));
        Volume v{ck.tensors.at("slices"), ck.tensors.at("mask"), ds.spec.domain_id, id};
        for (Index i = 0; i < v.mask.size(); ++i)
          if (v.mask[i] != 0.0f && v.mask[i] != 1.0f) throw InputError("non-binary mask in " + volume_file(name, id));
        vols->push_back(std::move(v));
      }
    }
    out.push_back(std::move(ds));
  }
  return out;
}

}  // namespace clseg
