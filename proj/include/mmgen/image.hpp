#pragma once

#include <filesystem>
#include <vector>

namespace mmgen {

// H x W x 3 image, channels interleaved, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float value = 0.0f)
      : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, value) {}

  float& at(int y, int x, int c) {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
  }

  void clamp();

  friend bool operator==(const Image& a, const Image& b) {
    return a.height == b.height && a.width == b.width && a.pixels == b.pixels;
  }
};

inline constexpr double kPsnrCap = 99.0;

// 10*log10(1/MSE). Identical images report kPsnrCap.
double psnr(const Image& a, const Image& b);

// Binary P6, maxval 255. Reading converts each channel to value/255.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

// Quantizes to the 8-bit values a PPM round trip would produce.
Image quantize_8bit(const Image& image);

}  // namespace mmgen
