// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container.
//
//   "CLSEG1"                      6-byte magic
//   u64 manifest_len, bytes       manifest as `key = value` UTF-8 text
//   u32 tensor_count
//   per tensor:
//     u32 name_len, name bytes
//     u32 rank, rank x u64 dims
//     f32 payload, row-major
//   32-byte SHA-256 over every preceding byte
//
// All integers and floats are little-endian. Files are written to a temporary
// sibling and renamed into place.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clseg/kv_text.hpp"
#include "clseg/models/params.hpp"

namespace clseg {

inline constexpr char kCheckpointMagic[] = "CLSEG1";

using Manifest = KeyValueText;

struct Checkpoint {
  Manifest manifest;
  ParameterSet<float> tensors;
};

using Sha256 = std::array<std::uint8_t, 32>;

Sha256 sha256(const std::uint8_t* data, std::size_t size);
std::string to_hex(const Sha256& digest);

std::vector<std::uint8_t> encode_checkpoint(const ParameterSet<float>& tensors, const Manifest& manifest);
/// Throws CorruptionError on bad magic, truncation or hash mismatch.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");

void save_checkpoint(const ParameterSet<float>& tensors, const Manifest& manifest, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes bytes via a temporary sibling and an atomic rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace clseg
