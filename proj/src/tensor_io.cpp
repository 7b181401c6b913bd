#include "rest/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "rest/error.hpp"

namespace rest {

namespace {

constexpr std::array<char, 8> kTensorMagic{'R', 'E', 'S', 'T', 'T', 'N', 'S', 'R'};
constexpr std::array<char, 8> kCheckpointMagic{'R', 'E', 'S', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint64_t kMaxRank = 16;

template <class T>
void put_le(std::ostream& os, T value) {
  std::array<unsigned char, sizeof(T)> bytes{};
  std::uint64_t bits = 0;
  if constexpr (std::is_same_v<T, float>) {
    bits = std::bit_cast<std::uint32_t>(value);
  } else {
    bits = static_cast<std::uint64_t>(value);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) throw IoError("unexpected end of stream");
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  if constexpr (std::is_same_v<T, float>) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits));
  } else {
    return static_cast<T>(bits);
  }
}

void write_body(std::ostream& os, const Tensor& t) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.dims()) put_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  if constexpr (std::endian::native == std::endian::little) {
    const auto v = t.values();
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  } else {
    for (float v : t.values()) put_le<float>(os, v);
  }
}

Tensor read_body(std::istream& is) {
  const auto rank = get_le<std::uint32_t>(is);
  if (rank > kMaxRank) throw IoError("tensor rank " + std::to_string(rank) + " exceeds limit");
  Dims dims;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = get_le<std::uint64_t>(is);
    if (d > (1ULL << 40)) throw IoError("implausible tensor dimension " + std::to_string(d));
    dims.push_back(static_cast<std::int64_t>(d));
  }
  std::vector<float> values(static_cast<std::size_t>(product(dims)));
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float))))
      throw IoError("truncated tensor payload");
  } else {
    for (auto& v : values) v = get_le<float>(is);
  }
  return Tensor(std::move(dims), std::move(values));
}

void expect_magic(std::istream& is, const std::array<char, 8>& magic, const char* what) {
  std::array<char, 8> got{};
  if (!is.read(got.data(), 8) || got != magic) throw IoError(std::string("bad magic: not a ") + what + " stream");
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  return os;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string() + " for reading");
  return is;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), 8);
  put_le<std::uint32_t>(os, kTensorFormatVersion);
  write_body(os, t);
  if (!os) throw IoError("write failed");
}

Tensor read_tensor(std::istream& is) {
  expect_magic(is, kTensorMagic, "RESTTNSR");
  const auto version = get_le<std::uint32_t>(is);
  if (version != kTensorFormatVersion) throw IoError("unsupported RESTTNSR version " + std::to_string(version));
  return read_body(is);
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  auto os = open_out(path);
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  auto is = open_in(path);
  return read_tensor(is);
}

void write_checkpoint(std::ostream& os, const NamedTensors& tensors) {
  os.write(kCheckpointMagic.data(), 8);
  put_le<std::uint32_t>(os, kCheckpointFormatVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw IoError("tensor name too long: " + name.substr(0, 32) + "...");
    put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_body(os, t);
  }
  if (!os) throw IoError("checkpoint write failed");
}

NamedTensors read_checkpoint(std::istream& is) {
  expect_magic(is, kCheckpointMagic, "RESTCKPT");
  const auto version = get_le<std::uint32_t>(is);
  if (version != kCheckpointFormatVersion) throw IoError("unsupported RESTCKPT version " + std::to_string(version));
  const auto count = get_le<std::uint32_t>(is);
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint16_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("truncated checkpoint entry name");
    if (!out.emplace(name, read_body(is)).second) throw IoError("duplicate checkpoint entry " + name);
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  auto os = open_out(path);
  write_checkpoint(os, tensors);
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  auto is = open_in(path);
  return read_checkpoint(is);
}

std::uint64_t content_hash(const Tensor& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (auto d : t.dims()) feed(&d, sizeof d);
  const auto v = t.values();
  feed(v.data(), v.size() * sizeof(float));
  return h;
}

}  // namespace rest
