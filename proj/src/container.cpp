#include "malvit/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <zlib.h>

#include "malvit/error.hpp"

namespace malvit {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'V', 'I', 'T', 'C', 'K', 'P', 'T'};

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  const std::size_t at = out.size();
  out.resize(at + sizeof(U));
  std::memcpy(out.data() + at, &v, sizeof(U));
}

template <typename U>
U get(std::span<const std::uint8_t> bytes, std::size_t pos) {
  U v;
  std::memcpy(&v, bytes.data() + pos, sizeof(U));
  return v;
}

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  if (s == "u8") return DType::u8;
  throw CorruptionError("unknown dtype '" + s + "' in container manifest");
}

template <typename V>
void add_entry(Container& c, const std::string& name, DType dtype, const Shape& shape,
               std::span<const V> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("container entry '" + name + "': shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  if (c.contains(name)) throw ContractError("duplicate container entry '" + name + "'");
  ContainerEntry e{name, dtype, shape, {}};
  e.bytes.resize(values.size_bytes());
  if (!values.empty()) std::memcpy(e.bytes.data(), values.data(), values.size_bytes());
  c.entries.push_back(std::move(e));
}

template <typename V>
std::vector<V> read_entry(const Container& c, std::string_view name, DType want) {
  const auto& e = c.at(name);
  if (e.dtype != want) {
    throw DataError("container entry '" + e.name + "' has dtype " + std::string(dtype_name(e.dtype)) +
                    ", expected " + std::string(dtype_name(want)));
  }
  std::vector<V> out(e.bytes.size() / sizeof(V));
  if (!out.empty()) std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
  return out;
}

}  // namespace

std::string_view dtype_name(DType t) {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::u8: return "u8";
  }
  return "?";
}

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  return 0;
}

void Container::add_f32(const std::string& name, const Shape& shape, std::span<const float> values) {
  add_entry(*this, name, DType::f32, shape, values);
}
void Container::add_f64(const std::string& name, const Shape& shape, std::span<const double> values) {
  add_entry(*this, name, DType::f64, shape, values);
}
void Container::add_u8(const std::string& name, const Shape& shape,
                       std::span<const std::uint8_t> values) {
  add_entry(*this, name, DType::u8, shape, values);
}

bool Container::contains(std::string_view name) const {
  for (const auto& e : entries) {
    if (e.name == name) return true;
  }
  return false;
}

const ContainerEntry& Container::at(std::string_view name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw DataError("container has no entry '" + std::string(name) + "'");
}

std::vector<float> Container::f32(std::string_view name) const { return read_entry<float>(*this, name, DType::f32); }
std::vector<double> Container::f64(std::string_view name) const { return read_entry<double>(*this, name, DType::f64); }
std::vector<std::uint8_t> Container::u8(std::string_view name) const {
  return read_entry<std::uint8_t>(*this, name, DType::u8);
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes, std::uint32_t seed) {
  uLong crc = seed;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = ::crc32(crc, bytes.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string hash_hex(std::uint32_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << h;
  return os.str();
}

std::uint32_t Container::content_hash() const {
  const std::string meta = metadata.dump();
  std::uint32_t h = crc32_of({reinterpret_cast<const std::uint8_t*>(meta.data()), meta.size()});
  for (const auto& e : entries) h = crc32_of(e.bytes, h);
  return h;
}

std::vector<std::uint8_t> encode_container(const Container& c) {
  nlohmann::json header;
  header["kind"] = c.kind;
  header["metadata"] = c.metadata;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : c.entries) {
    header["tensors"].push_back({{"name", e.name},
                                 {"dtype", dtype_name(e.dtype)},
                                 {"shape", e.shape},
                                 {"offset", offset},
                                 {"nbytes", e.bytes.size()}});
    offset += e.bytes.size();
  }
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(sizeof(kMagic) + 16 + text.size() + offset + 4);
  out.resize(sizeof(kMagic));
  std::memcpy(out.data(), kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, Container::kVersion);
  put<std::uint32_t>(out, c.content_hash());
  put<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& e : c.entries) out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  put<std::uint32_t>(out, crc32_of(out));
  return out;
}

Container decode_container(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t fixed = sizeof(kMagic) + 4 + 4 + 8;
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CorruptionError("not a malvit container (bad magic)");
  }
  if (bytes.size() < fixed) throw CorruptionError("container truncated inside the fixed header");
  const auto version = get<std::uint32_t>(bytes, 8);
  if (version != Container::kVersion) {
    throw VersionError("container version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(Container::kVersion) + ")");
  }
  const auto stored_hash = get<std::uint32_t>(bytes, 12);
  const auto header_len = get<std::uint64_t>(bytes, 16);
  if (header_len > bytes.size() - fixed) throw CorruptionError("container truncated inside the header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + fixed, bytes.begin() + fixed + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("container header is not valid JSON: ") + e.what());
  }

  Container c;
  std::uint64_t payload_len = 0;
  try {
    c.kind = header.at("kind").get<std::string>();
    c.metadata = header.at("metadata");
    for (const auto& t : header.at("tensors")) {
      ContainerEntry e;
      e.name = t.at("name").get<std::string>();
      e.dtype = parse_dtype(t.at("dtype").get<std::string>());
      e.shape = t.at("shape").get<Shape>();
      const auto off = t.at("offset").get<std::uint64_t>();
      const auto nbytes = t.at("nbytes").get<std::uint64_t>();
      if (off != payload_len || nbytes != shape_numel(e.shape) * dtype_size(e.dtype)) {
        throw CorruptionError("manifest entry '" + e.name + "' has inconsistent offset or size");
      }
      payload_len += nbytes;
      e.bytes.resize(nbytes);
      c.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("container header is malformed: ") + e.what());
  }

  const std::size_t payload_start = fixed + header_len;
  if (bytes.size() < payload_start + payload_len + 4) {
    throw CorruptionError("container truncated: expected " + std::to_string(payload_start + payload_len + 4) +
                          " bytes, found " + std::to_string(bytes.size()));
  }
  if (bytes.size() != payload_start + payload_len + 4) {
    throw CorruptionError("container has trailing bytes");
  }
  const auto stored_crc = get<std::uint32_t>(bytes, payload_start + payload_len);
  if (crc32_of(bytes.first(payload_start + payload_len)) != stored_crc) {
    throw IntegrityError("container checksum mismatch");
  }
  std::size_t pos = payload_start;
  for (auto& e : c.entries) {
    if (!e.bytes.empty()) std::memcpy(e.bytes.data(), bytes.data() + pos, e.bytes.size());
    pos += e.bytes.size();
  }
  if (c.content_hash() != stored_hash) throw IntegrityError("container content hash mismatch");
  return c;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return out;
}

void save_container(const std::filesystem::path& path, const Container& c) {
  write_file_atomic(path, encode_container(c));
}

Container load_container(const std::filesystem::path& path, std::string_view expected_kind) {
  const auto bytes = read_file(path);
  Container c = decode_container(bytes);
  if (!expected_kind.empty() && c.kind != expected_kind) {
    throw CorruptionError(path.string() + " holds a '" + c.kind + "' container, expected '" +
                          std::string(expected_kind) + "'");
  }
  return c;
}

}  // namespace malvit
