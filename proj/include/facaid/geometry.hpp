#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace facaid {

enum class TerminalLabel : std::uint8_t { Wall = 0, Window, Door, Balcony, Shop };

inline constexpr std::size_t kLabelCount = 5;
inline constexpr std::array<TerminalLabel, kLabelCount> kAllLabels = {
    TerminalLabel::Wall, TerminalLabel::Window, TerminalLabel::Door,
    TerminalLabel::Balcony, TerminalLabel::Shop};

inline constexpr std::string_view label_name(TerminalLabel label) {
  constexpr std::array<std::string_view, kLabelCount> names = {
      "Wall", "Window", "Door", "Balcony", "Shop"};
  return names[static_cast<std::size_t>(label)];
}

inline std::optional<TerminalLabel> parse_label(std::string_view name) {
  for (auto label : kAllLabels)
    if (label_name(label) == name) return label;
  return std::nullopt;
}

inline constexpr std::size_t label_index(TerminalLabel label) {
  return static_cast<std::size_t>(label);
}

/// Axis-aligned region in normalized facade coordinates, origin bottom-left.
struct Extent {
  double x = 0.0;
  double y = 0.0;
  double w = 1.0;
  double h = 1.0;

  friend bool operator==(const Extent&, const Extent&) = default;
};

inline constexpr Extent kUnitSquare{0.0, 0.0, 1.0, 1.0};

struct Rect {
  TerminalLabel label = TerminalLabel::Wall;
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  friend bool operator==(const Rect&, const Rect&) = default;
};

struct RectLayout {
  std::vector<Rect> rects;

  friend bool operator==(const RectLayout&, const RectLayout&) = default;
};

inline double total_area(const RectLayout& layout) {
  double sum = 0.0;
  for (const auto& r : layout.rects) sum += r.w * r.h;
  return sum;
}

inline double intersection_area(const Rect& a, const Rect& b) {
  const double ix = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double iy = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  return ix * iy;
}

struct TilingAudit {
  double area = 0.0;
  std::size_t overlapping_pairs = 0;
  bool out_of_bounds = false;

  bool ok(double tol = 1e-9) const {
    return std::abs(area - 1.0) <= tol && overlapping_pairs == 0 && !out_of_bounds;
  }
};

/// Sweeps rects sorted by x so the pair scan stays near-linear for grid layouts.
inline TilingAudit audit_tiling(const RectLayout& layout, double tol = 1e-9) {
  TilingAudit audit;
  audit.area = total_area(layout);
  std::vector<const Rect*> order;
  order.reserve(layout.rects.size());
  for (const auto& r : layout.rects) {
    if (r.x < -tol || r.y < -tol || r.x + r.w > 1.0 + tol || r.y + r.h > 1.0 + tol)
      audit.out_of_bounds = true;
    order.push_back(&r);
  }
  std::sort(order.begin(), order.end(),
            [](const Rect* a, const Rect* b) { return a->x < b->x; });
  for (std::size_t i = 0; i < order.size(); ++i) {
    const double right = order[i]->x + order[i]->w;
    for (std::size_t j = i + 1; j < order.size() && order[j]->x < right; ++j)
      if (intersection_area(*order[i], *order[j]) > tol) ++audit.overlapping_pairs;
  }
  return audit;
}

/// One label per pixel, row-major with row 0 at the bottom (y up).
struct LabelImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> labels;

  TerminalLabel at(int row, int col) const {
    return static_cast<TerminalLabel>(labels[static_cast<std::size_t>(row) * width + col]);
  }
};

/// Hard rasterization by pixel-center sampling. Rects paint in list order, so
/// later rects win where a perturbed layout overlaps; uncovered pixels are Wall.
inline LabelImage hard_rasterize(const RectLayout& layout, int width, int height) {
  LabelImage img{width, height,
                 std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height,
                                           static_cast<std::uint8_t>(TerminalLabel::Wall))};
  for (const auto& r : layout.rects) {
    // pixel c is covered when x0 <= (c + 0.5) / W < x1
    const auto first = [](double lo, int n) {
      return std::clamp(static_cast<int>(std::ceil(lo * n - 0.5)), 0, n);
    };
    const int c0 = first(r.x, width), c1 = first(r.x + r.w, width);
    const int r0 = first(r.y, height), r1 = first(r.y + r.h, height);
    for (int row = r0; row < r1; ++row)
      std::fill_n(img.labels.begin() + static_cast<std::ptrdiff_t>(row) * width + c0,
                  std::max(0, c1 - c0), static_cast<std::uint8_t>(r.label));
  }
  return img;
}

inline double pixel_difference(const LabelImage& a, const LabelImage& b) {
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) diff += a.labels[i] != b.labels[i];
  return a.labels.empty() ? 0.0 : static_cast<double>(diff) / static_cast<double>(a.labels.size());
}

}  // namespace facaid
