#include "metadvfs/common.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace metadvfs {

std::string content_hash(std::string_view bytes) {
  const std::uint64_t a = fnv1a(bytes);
  const std::uint64_t b = splitmix64(fnv1a(bytes, 0x84222325cbf29ce4ULL) ^ a);
  char buf[33];
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(a),
                static_cast<unsigned long long>(b));
  return buf;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_hexfloat(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str()) throw ParseError("bad number '" + s + "'");
  return v;
}

}  // namespace metadvfs
