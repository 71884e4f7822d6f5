#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

namespace ksm {

using Json = nlohmann::json;

// Decimal text for a double with 17 significant digits ("%.17g").
std::string format_double(double value);

// Serializes like Json::dump(indent) but prints every floating point number
// with 17 significant digits so that files round-trip bit-exactly.
std::string to_text(const Json& value, int indent = 2);

Json read_json_file(const std::filesystem::path& path);

// Writes through a temporary file and renames, so readers never see a
// partially written document.
void write_text_file(const std::filesystem::path& path, const std::string& text);
void write_json_file(const std::filesystem::path& path, const Json& value);

// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

}  // namespace ksm
