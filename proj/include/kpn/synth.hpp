#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <vector>

#include "kpn/data.hpp"

namespace kpn {

// Stroke-rendered 28x28 handwritten-style digits. Each class has a few glyph
// variants made of polylines in the unit box; every sample gets a random
// affine warp, point jitter, stroke width, background noise and sometimes a
// stray stroke. Used when no real digit corpus is
// available on disk.
namespace synth {

struct Point {
  double x, y;
};
using Stroke = std::vector<Point>;

inline Stroke arc(double cx, double cy, double rx, double ry, double from_deg, double to_deg, int steps = 16) {
  Stroke s;
  for (int i = 0; i <= steps; ++i) {
    const double t = (from_deg + (to_deg - from_deg) * i / steps) * std::numbers::pi / 180.0;
    s.push_back({cx + rx * std::cos(t), cy - ry * std::sin(t)});
  }
  return s;
}

inline Stroke join(Stroke a, const Stroke& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Glyph variants per digit; y grows downwards and the glyph box is
// [0.2, 0.8] x [0.1, 0.9].
inline const std::array<std::vector<std::vector<Stroke>>, 10>& glyphs() {
  static const std::array<std::vector<std::vector<Stroke>>, 10> g = {{
      {{arc(0.5, 0.5, 0.24, 0.38, 0, 360, 28)},
       {arc(0.5, 0.5, 0.2, 0.4, 80, 440, 28)},
       {arc(0.5, 0.5, 0.26, 0.36, 0, 360, 28), {{0.62, 0.2}, {0.38, 0.8}}}},
      {{{{0.52, 0.1}, {0.52, 0.9}}},
       {{{0.38, 0.25}, {0.52, 0.1}, {0.52, 0.9}}},
       {{{0.38, 0.25}, {0.52, 0.1}, {0.52, 0.9}}, {{0.36, 0.9}, {0.68, 0.9}}}},
      {{join(arc(0.5, 0.32, 0.24, 0.2, 160, -30, 12), {{0.25, 0.9}, {0.78, 0.9}})},
       {join(arc(0.5, 0.3, 0.24, 0.2, 170, -20, 12), join({{0.3, 0.85}}, arc(0.3, 0.82, 0.06, 0.06, 90, 450, 8)))},
       {join(arc(0.5, 0.32, 0.22, 0.2, 150, -45, 12), {{0.22, 0.88}, {0.5, 0.84}, {0.8, 0.9}})}},
      {{arc(0.48, 0.3, 0.24, 0.2, 150, -90, 12), arc(0.48, 0.7, 0.27, 0.2, 90, -150, 12)},
       {{{0.25, 0.1}, {0.72, 0.1}, {0.45, 0.45}}, arc(0.46, 0.68, 0.27, 0.22, 110, -150, 12)}},
      {{{{0.62, 0.9}, {0.62, 0.1}, {0.22, 0.64}, {0.8, 0.64}}},
       {{{0.3, 0.1}, {0.24, 0.55}, {0.8, 0.55}}, {{0.64, 0.25}, {0.64, 0.9}}}},
      {{join({{0.75, 0.1}, {0.3, 0.1}, {0.27, 0.45}}, arc(0.48, 0.66, 0.27, 0.24, 130, -150, 14))},
       {{{0.3, 0.12}, {0.27, 0.45}}, arc(0.48, 0.66, 0.27, 0.24, 130, -150, 14), {{0.3, 0.12}, {0.76, 0.1}}}},
      {{join(arc(0.62, 0.45, 0.34, 0.36, 70, 180, 8), arc(0.5, 0.68, 0.22, 0.22, 180, 540, 20))},
       {join({{0.66, 0.1}, {0.32, 0.62}}, arc(0.5, 0.7, 0.2, 0.2, 200, 560, 20))}},
      {{{{0.22, 0.1}, {0.78, 0.1}, {0.42, 0.9}}},
       {{{0.22, 0.1}, {0.78, 0.1}, {0.42, 0.9}}, {{0.35, 0.5}, {0.68, 0.5}}},
       {{{0.22, 0.2}, {0.3, 0.1}, {0.78, 0.12}, {0.5, 0.9}}}},
      {{arc(0.5, 0.29, 0.2, 0.19, 0, 360, 20), arc(0.5, 0.7, 0.25, 0.21, 0, 360, 22)},
       {arc(0.53, 0.27, 0.16, 0.16, 0, 360, 18), arc(0.47, 0.68, 0.27, 0.24, 0, 360, 22)}},
      {{join(arc(0.5, 0.32, 0.23, 0.22, 0, 360, 20), {{0.73, 0.32}, {0.6, 0.9}})},
       {join(arc(0.5, 0.32, 0.23, 0.22, 0, 360, 20), arc(0.4, 0.4, 0.33, 0.5, 0, -80, 10))}},
  }};
  return g;
}

inline double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

// Renders one sample of `digit` into 28*28 bytes.
inline std::vector<std::uint8_t> render(int digit, std::mt19937_64& rng, std::size_t size = 28) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto range = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const double angle = range(-20.0, 20.0) * std::numbers::pi / 180.0;
  const double scale = range(0.75, 1.15) * 20.0;
  const double aspect = range(0.7, 1.25);
  const double shear = range(-0.35, 0.35);
  const double tx = range(-3.0, 3.0), ty = range(-3.0, 3.0);
  const double width = range(1.2, 3.2);
  std::normal_distribution<double> jitter(0.0, 0.03);
  const auto& variants = glyphs()[static_cast<std::size_t>(digit)];
  const auto& glyph = variants[std::uniform_int_distribution<std::size_t>(0, variants.size() - 1)(rng)];

  const double c = std::cos(angle), s = std::sin(angle);
  const double mid = static_cast<double>(size) / 2.0;
  std::vector<Stroke> strokes;
  for (const auto& stroke : glyph) {
    Stroke out;
    for (auto p : stroke) {
      double x = (p.x - 0.5 + jitter(rng)) * aspect, y = p.y - 0.5 + jitter(rng);
      x += shear * y;
      out.push_back({mid + tx + scale * (c * x - s * y), mid + ty + scale * (s * x + c * y)});
    }
    strokes.push_back(std::move(out));
  }
  // Occasional stray stroke.
  if (u(rng) < 0.3) {
    const Point a{range(2.0, 26.0), range(2.0, 26.0)};
    const double len = range(3.0, 8.0), dir = range(0.0, 2.0 * std::numbers::pi);
    strokes.push_back({a, {a.x + len * std::cos(dir), a.y + len * std::sin(dir)}});
  }

  std::normal_distribution<double> noise(0.0, 12.0);
  std::vector<std::uint8_t> img(size * size);
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t col = 0; col < size; ++col) {
      const Point p{static_cast<double>(col) + 0.5, static_cast<double>(r) + 0.5};
      double d = 1e9;
      for (const auto& stroke : strokes) {
        for (std::size_t k = 1; k < stroke.size(); ++k) d = std::min(d, segment_distance(p, stroke[k - 1], stroke[k]));
      }
      const double ink = std::clamp(width / 2.0 + 0.5 - d, 0.0, 1.0);
      const double v = 255.0 * ink + (ink > 0 ? noise(rng) : std::max(0.0, noise(rng)) * 0.5);
      img[r * size + col] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return img;
}

// Balanced labels (i % 10) in shuffled order.
inline std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>> generate(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint8_t>(i % 10);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::vector<std::uint8_t> pixels;
  pixels.reserve(n * 28 * 28);
  for (auto label : labels) {
    const auto img = render(label, rng);
    pixels.insert(pixels.end(), img.begin(), img.end());
  }
  return {std::move(pixels), std::move(labels)};
}

}  // namespace synth

// Writes a train/t10k IDX directory with the file names load_idx_dir expects.
inline void write_synthetic_digits(const std::filesystem::path& dir, std::size_t train_count, std::size_t test_count,
                                   std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  const auto [train_px, train_lb] = synth::generate(train_count, seed);
  write_idx_images(dir / "train-images-idx3-ubyte", train_px, train_count, 1, 28, 28);
  write_idx_labels(dir / "train-labels-idx1-ubyte", train_lb);
  const auto [test_px, test_lb] = synth::generate(test_count, seed ^ 0x5eed5eed5eedULL);
  write_idx_images(dir / "t10k-images-idx3-ubyte", test_px, test_count, 1, 28, 28);
  write_idx_labels(dir / "t10k-labels-idx1-ubyte", test_lb);
}

}  // namespace kpn
