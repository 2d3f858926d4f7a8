#include "iip/binio.hpp"

#include <cstdio>
#include <filesystem>

namespace iip::io {

std::vector<uint8_t> read_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw FormatError("cannot open " + path);
  std::fseek(f, 0, SEEK_END);
  const long n = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<uint8_t> out(static_cast<size_t>(n < 0 ? 0 : n));
  if (!out.empty() && std::fread(out.data(), 1, out.size(), f) != out.size()) {
    std::fclose(f);
    throw FormatError("short read on " + path);
  }
  std::fclose(f);
  return out;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw FormatError("cannot write " + path);
  if (!bytes.empty() && std::fwrite(bytes.data(), 1, bytes.size(), f) != bytes.size()) {
    std::fclose(f);
    throw FormatError("short write on " + path);
  }
  std::fclose(f);
}

void write_file(const std::string& path, const std::string& text) {
  std::vector<uint8_t> b(text.begin(), text.end());
  write_file(path, b);
}

}  // namespace iip::io
