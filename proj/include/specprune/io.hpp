#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace specprune {

/// Raw little-endian f64 blob.
void write_blob(const std::filesystem::path& path, std::span<const double> values);
/// Reads exactly `expected` doubles; a length mismatch is CorruptManifest.
std::vector<double> read_blob(const std::filesystem::path& path, std::size_t expected);

/// Keys come out sorted (nlohmann::json objects are ordered maps).
void write_json(const std::filesystem::path& path, const nlohmann::json& value);
nlohmann::json read_json(const std::filesystem::path& path);

/// Minimal RFC-4180 writer: fields containing comma, quote, CR or LF are
/// quoted and embedded quotes doubled; lines end with CRLF.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);

  void add_row(std::vector<std::string> fields);
  std::string str() const;
  void save(const std::filesystem::path& path) const;

  static std::string escape(const std::string& field);

 private:
  std::vector<std::vector<std::string>> rows_;
};

/// Shortest round-trip decimal representation.
std::string format_double(double value);

}  // namespace specprune
