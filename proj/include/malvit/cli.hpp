#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace malvit {

inline constexpr const char* kVersion = "0.1.0";

/// Flat "key = value" configuration text. Blank lines and lines starting with
/// '#' are ignored; keys are option names without the leading dashes. Throws
/// ConfigError with source:line on a malformed or duplicated key.
std::map<std::string, std::string> parse_kv_config(std::istream& in, const std::string& source = "<stream>");
std::map<std::string, std::string> read_kv_config(const std::filesystem::path& path);
/// Sorted "key = value" lines, readable by parse_kv_config.
std::string format_kv_config(const std::map<std::string, std::string>& kv, const std::string& header = {});

struct FileRecord {
  std::string path;
  std::string crc32;
  std::size_t bytes = 0;
};

/// Written as run_manifest.json next to every command's outputs.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::map<std::string, std::string> resolved;  // also written as resolved.cfg
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  nlohmann::json versions;
  std::vector<FileRecord> inputs;
  std::vector<FileRecord> outputs;
  std::string started_at;  // UTC, ISO 8601
  double wall_clock_seconds = 0.0;
  std::string source_revision;

  nlohmann::json to_json() const;
};

FileRecord file_record(const std::filesystem::path& path);

/// Runs one command line; args[0] is the program name. Returns 0 when every
/// output was written, 2 on a usage error and 1 on any other failure. Failures
/// are reported on `err` as one line: "error: <category>: <message>".
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace malvit
