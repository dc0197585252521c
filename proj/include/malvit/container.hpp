#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "malvit/tensor.hpp"

namespace malvit {

enum class DType : std::uint8_t { f32, f64, u8 };

std::string_view dtype_name(DType t);
std::size_t dtype_size(DType t);

struct ContainerEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian payload
};

/// Versioned binary container shared by checkpoints, datasets and perturbations.
///
/// Layout (all integers little-endian):
///   magic "MVITCKPT" | u32 version | u32 content hash | u64 header length |
///   header JSON | tensor payloads | u32 crc32 of every preceding byte
///
/// The header JSON holds `kind`, free-form `metadata` and a `tensors` manifest
/// of {name, dtype, shape, offset, nbytes}, offsets relative to the payload
/// start. The content hash is crc32 over the metadata dump and the payload.
struct Container {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<ContainerEntry> entries;

  void add_f32(const std::string& name, const Shape& shape, std::span<const float> values);
  void add_f64(const std::string& name, const Shape& shape, std::span<const double> values);
  void add_u8(const std::string& name, const Shape& shape, std::span<const std::uint8_t> values);

  bool contains(std::string_view name) const;
  const ContainerEntry& at(std::string_view name) const;
  std::vector<float> f32(std::string_view name) const;
  std::vector<double> f64(std::string_view name) const;
  std::vector<std::uint8_t> u8(std::string_view name) const;

  std::uint32_t content_hash() const;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes, std::uint32_t seed = 0);
std::string hash_hex(std::uint32_t h);

std::vector<std::uint8_t> encode_container(const Container& c);
/// Throws CorruptionError (bad magic, truncation, malformed header),
/// VersionError, or IntegrityError (checksum or content hash mismatch).
Container decode_container(std::span<const std::uint8_t> bytes);

/// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

void save_container(const std::filesystem::path& path, const Container& c);
/// Loads and checks `kind` when non-empty (mismatch is a CorruptionError).
Container load_container(const std::filesystem::path& path, std::string_view expected_kind = {});

}  // namespace malvit
