#include <cctype>
#include <fstream>
#include <sstream>

#include "tokenhier/color.hpp"

namespace tokenhier {

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(const std::string& bytes, std::size_t& pos) {
  for (;;) {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
  return bytes.substr(start, pos - start);
}

int parse_dim(const std::string& tok, const char* what) {
  if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos || tok.size() > 9) {
    throw DataError(std::string("ppm: bad ") + what + " '" + tok + "'");
  }
  return std::stoi(tok);
}

}  // namespace

Raster decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  if (next_token(bytes, pos) != "P6") throw DataError("ppm: missing P6 magic");
  const int w = parse_dim(next_token(bytes, pos), "width");
  const int h = parse_dim(next_token(bytes, pos), "height");
  const int maxval = parse_dim(next_token(bytes, pos), "maxval");
  if (maxval != 255) throw DataError("ppm: only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw DataError("ppm: truncated header");
  }
  ++pos;  // single whitespace before the raster
  Raster r(w, h);
  if (bytes.size() - pos < r.pixels.size()) throw DataError("ppm: truncated pixel data");
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), r.pixels.size(), r.pixels.begin());
  return r;
}

std::string encode_ppm(const Raster& r) {
  r.validate();
  std::string out = "P6\n" + std::to_string(r.width) + " " + std::to_string(r.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(r.pixels.data()), r.pixels.size());
  return out;
}

Raster read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_ppm(ss.str());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_ppm(const std::filesystem::path& path, const Raster& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const std::string bytes = encode_ppm(r);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace tokenhier
