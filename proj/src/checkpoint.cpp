// SPDX-License-Identifier: Apache-2.0
#include "clseg/models/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace clseg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
static_assert(sizeof(float) == 4);

namespace {

constexpr std::size_t kMagicLen = 6;

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t end, std::string source)
      : bytes_(bytes), end_(end), source_(std::move(source)) {}

  template <typename T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what), sizeof(T));
    return v;
  }

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (n > end_ - pos_) throw CorruptionError(source_ + ": truncated while reading " + what);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t remaining() const { return end_ - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string source_;
};

}  // namespace

Sha256 sha256(const std::uint8_t* data, std::size_t size) {
  Sha256 out{};
  unsigned int len = 0;
  if (EVP_Digest(data, size, out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size()) {
    throw Error("SHA-256 computation failed");
  }
  return out;
}

std::string to_hex(const Sha256& digest) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  for (std::uint8_t b : digest) {
    s += kHex[b >> 4];
    s += kHex[b & 15];
  }
  return s;
}

std::vector<std::uint8_t> encode_checkpoint(const ParameterSet<float>& tensors, const Manifest& manifest) {
  Writer w;
  w.put_bytes(kCheckpointMagic, kMagicLen);
  const std::string text = manifest.to_text();
  w.put<std::uint64_t>(text.size());
  w.put_bytes(text.data(), text.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& name : tensors.names()) {
    const auto& t = tensors.at(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    w.put_bytes(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float));
  }
  const Sha256 digest = sha256(w.bytes.data(), w.bytes.size());
  w.put_bytes(digest.data(), digest.size());
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  if (bytes.size() < kMagicLen + 32 || std::memcmp(bytes.data(), kCheckpointMagic, kMagicLen) != 0) {
    throw CorruptionError(source + ": not a checkpoint (bad magic or too short)");
  }
  const std::size_t body = bytes.size() - 32;
  const Sha256 digest = sha256(bytes.data(), body);
  if (std::memcmp(digest.data(), bytes.data() + body, 32) != 0) {
    throw CorruptionError(source + ": integrity hash mismatch");
  }

  Reader r(bytes, body, source);
  r.take(kMagicLen, "magic");
  const auto manifest_len = r.get<std::uint64_t>("manifest length");
  if (manifest_len > r.remaining()) throw CorruptionError(source + ": manifest length exceeds file");
  const auto* mtext = r.take(manifest_len, "manifest");
  Checkpoint out;
  out.manifest = Manifest::parse(std::string(reinterpret_cast<const char*>(mtext), manifest_len), source);

  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("name length");
    const auto* name = r.take(name_len, "tensor name");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank == 0 || rank > 8) throw CorruptionError(source + ": implausible tensor rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t elems = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto dim = r.get<std::uint64_t>("dims");
      if (dim == 0 || dim > r.remaining()) throw CorruptionError(source + ": implausible tensor dim");
      elems *= dim;
      shape.push_back(static_cast<Index>(dim));
    }
    if (elems * sizeof(float) > r.remaining()) throw CorruptionError(source + ": tensor payload exceeds file");
    Tensor<float> t(shape);
    std::memcpy(t.data(), r.take(elems * sizeof(float), "payload"), elems * sizeof(float));
    try {
      out.tensors.add(std::string(reinterpret_cast<const char*>(name), name_len), std::move(t));
    } catch (const SchemaError& e) {
      throw CorruptionError(source + ": " + e.what());
    }
  }
  if (r.remaining() != 0) throw CorruptionError(source + ": trailing bytes before hash");
  return out;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_checkpoint(const ParameterSet<float>& tensors, const Manifest& manifest, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(tensors, manifest);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  return decode_checkpoint(std::vector<std::uint8_t>(raw.begin(), raw.end()), path.string());
}

}  // namespace clseg
