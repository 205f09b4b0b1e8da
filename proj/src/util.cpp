#include "scenebert/util.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace scenebert {

std::uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("io: cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("io: cannot open " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  if (res.ec != std::errc()) throw std::runtime_error("io: double formatting failed");
  return std::string(buf, res.ptr);
}

std::pair<int, int> parse_grid_string(const std::string& text) {
  const std::size_t x = text.find('x');
  if (x == std::string::npos || x == 0 || x + 1 >= text.size())
    throw std::invalid_argument("cli: grid must look like RxC, got '" + text + "'");
  int rows = 0, cols = 0;
  const auto r1 = std::from_chars(text.data(), text.data() + x, rows);
  const auto r2 = std::from_chars(text.data() + x + 1, text.data() + text.size(), cols);
  if (r1.ec != std::errc() || r1.ptr != text.data() + x || r2.ec != std::errc() ||
      r2.ptr != text.data() + text.size() || rows < 1 || cols < 1)
    throw std::invalid_argument("cli: grid must look like RxC with positive sides, got '" + text +
                                "'");
  return {rows, cols};
}

}  // namespace scenebert
