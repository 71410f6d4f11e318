#pragma once

#include "mmgen/image.hpp"
#include "mmgen/rng.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

namespace mmgen {

enum class Shape2D { kCircle, kSquare, kTriangle };

inline constexpr std::array<std::string_view, 3> kShapeNames = {"circle", "square", "triangle"};
inline constexpr std::array<std::string_view, 6> kColorNames = {"red",  "yellow", "green",
                                                                "cyan", "blue",   "magenta"};
inline constexpr int kLabelCount = 18;

struct Rgb {
  float r, g, b;
};

Rgb palette_color(int color);
Rgb background_color();

struct Label {
  int color = 0;  // index into kColorNames
  Shape2D shape = Shape2D::kCircle;

  int index() const { return color * 3 + static_cast<int>(shape); }
  friend bool operator==(const Label&, const Label&) = default;
};

std::string caption_for(const Label& label);  // "a {color} {shape}"
std::optional<Label> label_from_caption(const std::string& caption);

struct SynthSample {
  Image image;
  Label label;
  std::string caption;
};

// One anti-aliased shape of random size and position on the plain
// background.
SynthSample render_sample(Rng& rng, int size = 32);

// Inverts the generator: foreground colour by nearest palette entry, shape
// by bounding-box fill ratio and vertical centroid. nullopt when no
// foreground is found.
std::optional<Label> check_label(const Image& image);

}  // namespace mmgen
