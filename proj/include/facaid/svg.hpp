#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <string>
#include <tuple>

#include "facaid/geometry.hpp"

namespace facaid {

using Palette = std::array<std::string, kLabelCount>;

inline const Palette& default_palette() {
  static const Palette p{"#d9d2c5", "#4a6fa5", "#8c5a3c", "#7aa36f", "#c9a227"};
  return p;
}

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// One <rect> per layout rect in canonical order, y flipped into SVG space.
inline std::string render_svg(const RectLayout& layout, const Palette& palette = default_palette()) {
  std::string out =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1\" preserveAspectRatio=\"none\" "
      "shape-rendering=\"crispEdges\">\n";
  auto rects = layout.rects;
  std::sort(rects.begin(), rects.end(), [](const Rect& a, const Rect& b) {
    return std::tuple(a.y, a.x, a.label, a.w, a.h) < std::tuple(b.y, b.x, b.label, b.w, b.h);
  });
  for (const auto& r : rects) {
    out += "  <rect x=\"" + detail::num(r.x) + "\" y=\"" + detail::num(1.0 - r.y - r.h) + "\" width=\"" +
           detail::num(r.w) + "\" height=\"" + detail::num(r.h) + "\" fill=\"" + palette[label_index(r.label)] +
           "\" data-label=\"" + std::string(label_name(r.label)) + "\"/>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace facaid
