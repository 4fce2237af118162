#include "oatr/image.hpp"

#include <cctype>
#include <fstream>
#include <stdexcept>
#include <string>

#include "oatr/errors.hpp"

namespace oatr {

void write_ppm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3 && image.channels != 1) {
    throw InputError("write_ppm: unsupported channel count " + std::to_string(image.channels));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()),
           static_cast<std::streamsize>(image.pixels.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string header_token(std::istream& is) {
  std::string tok;
  char ch;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string ignored;
      std::getline(is, ignored);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open image " + path.string());
  const std::string magic = header_token(is);
  int channels = 0;
  if (magic == "P6") {
    channels = 3;
  } else if (magic == "P5") {
    channels = 1;
  } else {
    throw ParseError(path.string() + ": not a binary PPM/PGM file");
  }
  int width = 0, height = 0, maxval = 0;
  try {
    width = std::stoi(header_token(is));
    height = std::stoi(header_token(is));
    maxval = std::stoi(header_token(is));
  } catch (const std::exception&) {
    throw ParseError(path.string() + ": malformed header");
  }
  if (width <= 0 || height <= 0 || maxval != 255) {
    throw ParseError(path.string() + ": unsupported dimensions or maxval");
  }
  Image image(height, width, channels);
  is.read(reinterpret_cast<char*>(image.pixels.data()),
          static_cast<std::streamsize>(image.pixels.size()));
  if (static_cast<std::size_t>(is.gcount()) != image.pixels.size()) {
    throw ParseError(path.string() + ": truncated pixel data");
  }
  return image;
}

}  // namespace oatr
