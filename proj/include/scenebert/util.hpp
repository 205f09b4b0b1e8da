#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace scenebert {

// FNV-1a over the raw bytes of a file, for input fingerprints in run manifests.
std::uint64_t fnv1a64_file(const std::string& path);

std::string read_file(const std::string& path);

// Shortest decimal form that round-trips the double (via std::to_chars).
std::string format_double(double x);

// "RxC" -> GridSpec-style pair, e.g. "3x3".
std::pair<int, int> parse_grid_string(const std::string& text);

}  // namespace scenebert
