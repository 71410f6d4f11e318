#include "mmgen/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace mmgen {

namespace {

constexpr std::array<Rgb, 6> kPalette = {{
    {0.90f, 0.10f, 0.10f},  // red
    {0.90f, 0.85f, 0.10f},  // yellow
    {0.10f, 0.75f, 0.15f},  // green
    {0.10f, 0.80f, 0.85f},  // cyan
    {0.15f, 0.20f, 0.90f},  // blue
    {0.85f, 0.15f, 0.85f},  // magenta
}};

bool inside(Shape2D shape, double x, double y, double cx, double cy, double s) {
  switch (shape) {
    case Shape2D::kCircle:
      return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= s * s;
    case Shape2D::kSquare:
      return std::abs(x - cx) <= 0.9 * s && std::abs(y - cy) <= 0.9 * s;
    case Shape2D::kTriangle: {
      const double top = cy - s;
      const double bottom = cy + s;
      if (y < top || y > bottom) return false;
      return std::abs(x - cx) <= s * (y - top) / (2.0 * s);
    }
  }
  return false;
}

}  // namespace

Rgb palette_color(int color) { return kPalette.at(static_cast<size_t>(color)); }
Rgb background_color() { return {0.12f, 0.12f, 0.14f}; }

std::string caption_for(const Label& label) {
  return "a " + std::string(kColorNames.at(static_cast<size_t>(label.color))) + " " +
         std::string(kShapeNames.at(static_cast<size_t>(label.shape)));
}

std::optional<Label> label_from_caption(const std::string& caption) {
  for (int c = 0; c < 6; ++c) {
    for (int s = 0; s < 3; ++s) {
      Label l{c, static_cast<Shape2D>(s)};
      if (caption_for(l) == caption) return l;
    }
  }
  return std::nullopt;
}

SynthSample render_sample(Rng& rng, int size) {
  SynthSample out;
  out.label.color = static_cast<int>(rng.below(6));
  out.label.shape = static_cast<Shape2D>(rng.below(3));
  out.caption = caption_for(out.label);
  const double s = 7.0 + rng.uniform() * 5.0;
  const double lo = s + 1.0;
  const double hi = size - s - 1.0;
  const double cx = lo + rng.uniform() * (hi - lo);
  const double cy = lo + rng.uniform() * (hi - lo);
  const Rgb fg = palette_color(out.label.color);
  const Rgb bg = background_color();
  out.image = Image(size, size);
  constexpr int kSub = 4;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          hits += inside(out.label.shape, x + (sx + 0.5) / kSub, y + (sy + 0.5) / kSub, cx, cy, s);
        }
      }
      const float cov = static_cast<float>(hits) / (kSub * kSub);
      out.image.at(y, x, 0) = bg.r + (fg.r - bg.r) * cov;
      out.image.at(y, x, 1) = bg.g + (fg.g - bg.g) * cov;
      out.image.at(y, x, 2) = bg.b + (fg.b - bg.b) * cov;
    }
  }
  return out;
}

std::optional<Label> check_label(const Image& image) {
  const int H = image.height, W = image.width;
  if (H < 3 || W < 3) return std::nullopt;
  // Background from the one-pixel border.
  double bg[3] = {0, 0, 0};
  int border = 0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      if (y != 0 && y != H - 1 && x != 0 && x != W - 1) continue;
      for (int c = 0; c < 3; ++c) bg[c] += image.at(y, x, c);
      ++border;
    }
  }
  for (double& v : bg) v /= border;

  std::vector<uint8_t> fg(static_cast<size_t>(H) * W, 0);
  double sum[3] = {0, 0, 0};
  int count = 0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      double diff = 0.0;
      for (int c = 0; c < 3; ++c) diff = std::max(diff, std::abs(image.at(y, x, c) - bg[c]));
      if (diff > 0.3) {
        fg[static_cast<size_t>(y) * W + x] = 1;
        for (int c = 0; c < 3; ++c) sum[c] += image.at(y, x, c);
        ++count;
      }
    }
  }
  if (count < 8) return std::nullopt;

  Label label;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 6; ++i) {
    const Rgb p = palette_color(i);
    const double dr = sum[0] / count - p.r, dg = sum[1] / count - p.g, db = sum[2] / count - p.b;
    const double d = dr * dr + dg * dg + db * db;
    if (d < best) {
      best = d;
      label.color = i;
    }
  }

  // Bounding box over rows/columns holding at least two foreground pixels,
  // which ignores isolated speckles.
  auto span_of = [&](bool rows) {
    int lo = -1, hi = -1;
    const int outer = rows ? H : W, inner = rows ? W : H;
    for (int i = 0; i < outer; ++i) {
      int n = 0;
      for (int j = 0; j < inner; ++j) {
        n += rows ? fg[static_cast<size_t>(i) * W + j] : fg[static_cast<size_t>(j) * W + i];
      }
      if (n >= 2) {
        if (lo < 0) lo = i;
        hi = i;
      }
    }
    return std::pair<int, int>{lo, hi};
  };
  const auto [top, bottom] = span_of(true);
  const auto [left, right] = span_of(false);
  if (top < 0 || left < 0) return std::nullopt;
  const int bw = right - left + 1, bh = bottom - top + 1;
  int inside_count = 0;
  double cy = 0.0;
  for (int y = top; y <= bottom; ++y) {
    for (int x = left; x <= right; ++x) {
      if (fg[static_cast<size_t>(y) * W + x]) {
        ++inside_count;
        cy += y;
      }
    }
  }
  if (inside_count == 0) return std::nullopt;
  const double fill = static_cast<double>(inside_count) / (bw * bh);
  const double rel_cy = (cy / inside_count - top + 0.5) / bh;
  if (fill > 0.88) {
    label.shape = Shape2D::kSquare;
  } else if (fill > 0.64 && rel_cy < 0.57) {
    label.shape = Shape2D::kCircle;
  } else {
    label.shape = Shape2D::kTriangle;
  }
  return label;
}

}  // namespace mmgen
