#include "mmgen/image.hpp"

#include "mmgen/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

namespace mmgen {

void Image::clamp() {
  for (float& v : pixels) v = std::clamp(v, 0.0f, 1.0f);
}

double psnr(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width) {
    throw Error(ErrorCode::kInputShape, "psnr on images of different size",
                std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                    std::to_string(b.height) + "x" + std::to_string(b.width));
  }
  double sum = 0.0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    sum += d * d;
  }
  if (a.pixels.empty()) return kPsnrCap;
  double mse = sum / static_cast<double>(a.pixels.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace {

uint8_t to_byte(float v) {
  return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Reads a whitespace-delimited header integer, skipping '#' comments.
int read_header_int(std::istream& in, const std::string& path) {
  int c = in.peek();
  while (in && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else {
      in.get();
    }
    c = in.peek();
  }
  int value = 0;
  if (!(in >> value)) throw Error(ErrorCode::kIo, "malformed PPM header", path);
  return value;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open for writing", path.string());
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  std::vector<char> bytes(image.pixels.size());
  for (size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<char>(to_byte(image.pixels[i]));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed", path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open image", path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw Error(ErrorCode::kIo, "not a binary PPM (P6)", path.string());
  int width = read_header_int(in, path.string());
  int height = read_header_int(in, path.string());
  int maxval = read_header_int(in, path.string());
  if (width <= 0 || height <= 0 || maxval != 255) {
    throw Error(ErrorCode::kIo, "unsupported PPM geometry or maxval", path.string());
  }
  in.get();  // single whitespace before the raster
  Image image(height, width);
  std::vector<unsigned char> bytes(image.pixels.size());
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw Error(ErrorCode::kIo, "truncated PPM raster", path.string());
  }
  for (size_t i = 0; i < bytes.size(); ++i) image.pixels[i] = bytes[i] / 255.0f;
  return image;
}

Image quantize_8bit(const Image& image) {
  Image out = image;
  for (float& v : out.pixels) v = to_byte(v) / 255.0f;
  return out;
}

}  // namespace mmgen
