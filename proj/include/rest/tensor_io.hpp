#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

#include "rest/tensor.hpp"

// Binary formats, all little-endian:
//
//   RESTTNSR  "RESTTNSR" | version u32 | rank u32 | dims u64[rank] | f32[numel]
//   RESTCKPT  "RESTCKPT" | version u32 | count u32 |
//             count x ( name_len u16 | name utf-8 | rank u32 | dims u64[rank] | f32[numel] )
//
// Checkpoint entries are written sorted by name.

namespace rest {

inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

using NamedTensors = std::map<std::string, Tensor>;

void write_checkpoint(std::ostream& os, const NamedTensors& tensors);
NamedTensors read_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over dims and raw payload bytes; used for bit-identity checks.
std::uint64_t content_hash(const Tensor& t);

}  // namespace rest
