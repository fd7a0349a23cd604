#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "llbb/errors.hpp"

namespace llbb::png {

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major RGB

  Image() = default;
  Image(int w, int h, std::array<std::uint8_t, 3> fill = {255, 255, 255}) : width(w), height(h) {
    rgb.resize(static_cast<std::size_t>(w) * h * 3);
    for (std::size_t i = 0; i < rgb.size(); i += 3) std::copy(fill.begin(), fill.end(), rgb.begin() + i);
  }

  void set(int x, int y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    std::copy(c.begin(), c.end(), rgb.begin() + (static_cast<std::size_t>(y) * width + x) * 3);
  }
};

namespace detail {

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void chunk(std::vector<std::uint8_t>& out, const char* type, std::span<const std::uint8_t> data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

// 8-bit RGB, no interlace, filter 0 on every row. Text pairs go into tEXt chunks.
inline std::vector<std::uint8_t> encode(const Image& img, const std::vector<std::pair<std::string, std::string>>& text = {}) {
  if (img.width <= 0 || img.height <= 0) throw ContractError("png: empty image");
  std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<std::uint8_t> ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(img.width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});
  detail::chunk(out, "IHDR", ihdr);
  for (const auto& [k, v] : text) {
    std::vector<std::uint8_t> t(k.begin(), k.end());
    t.push_back(0);
    t.insert(t.end(), v.begin(), v.end());
    detail::chunk(out, "tEXt", t);
  }
  const std::size_t stride = static_cast<std::size_t>(img.width) * 3;
  std::vector<std::uint8_t> raw;
  raw.reserve((stride + 1) * img.height);
  for (int y = 0; y < img.height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), img.rgb.begin() + y * stride, img.rgb.begin() + (y + 1) * stride);
  }
  uLongf len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(len);
  if (compress2(z.data(), &len, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw IoError("png: zlib compression failed");
  }
  z.resize(len);
  detail::chunk(out, "IDAT", z);
  detail::chunk(out, "IEND", {});
  return out;
}

inline void write(const std::filesystem::path& path, const Image& img,
                  const std::vector<std::pair<std::string, std::string>>& text = {}) {
  const auto bytes = encode(img, text);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError(path.string() + ": write failed");
}

// Tiles frames (HWC u8) in a grid, each upscaled by `scale` with a 1-pixel gray gutter.
inline Image contact_sheet(const std::vector<std::vector<std::vector<std::uint8_t>>>& rows, int resolution, int scale = 4) {
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  if (rows.empty() || cols == 0) throw ContractError("contact sheet: no frames");
  const int cell = resolution * scale + 1;
  Image img(static_cast<int>(cols) * cell + 1, static_cast<int>(rows.size()) * cell + 1, {96, 96, 96});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const auto& f = rows[r][c];
      if (f.size() != static_cast<std::size_t>(resolution) * resolution * 3) throw ContractError("contact sheet: bad frame size");
      for (int y = 0; y < resolution * scale; ++y)
        for (int x = 0; x < resolution * scale; ++x) {
          const std::size_t p = (static_cast<std::size_t>(y / scale) * resolution + x / scale) * 3;
          img.set(1 + static_cast<int>(c) * cell + x, 1 + static_cast<int>(r) * cell + y, {f[p], f[p + 1], f[p + 2]});
        }
    }
  }
  return img;
}

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

inline std::array<std::uint8_t, 3> series_color(std::size_t i) {
  static const std::array<std::array<std::uint8_t, 3>, 6> palette = {
      {{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {255, 127, 14}, {148, 103, 189}, {140, 86, 75}}};
  return palette[i % palette.size()];
}

// Line plot with axes and a light grid; series colors follow series_color().
// Axis ranges are stored in the returned text pairs for the PNG metadata.
inline std::pair<Image, std::vector<std::pair<std::string, std::string>>> line_plot(const std::vector<Series>& series,
                                                                                     const std::string& title,
                                                                                     int width = 640, int height = 400) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;

  Image img(width, height);
  const int left = 40, right = width - 16, top = 16, bottom = height - 32;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (right - left); };
  auto py = [&](double y) { return bottom - (y - y0) / (y1 - y0) * (bottom - top); };
  for (int g = 0; g <= 4; ++g) {
    const int gy = top + g * (bottom - top) / 4;
    const int gx = left + g * (right - left) / 4;
    for (int x = left; x <= right; ++x) img.set(x, gy, {225, 225, 225});
    for (int y = top; y <= bottom; ++y) img.set(gx, y, {225, 225, 225});
  }
  for (int x = left; x <= right; ++x) img.set(x, bottom, {0, 0, 0});
  for (int y = top; y <= bottom; ++y) img.set(left, y, {0, 0, 0});

  auto line = [&](double ax, double ay, double bx, double by, std::array<std::uint8_t, 3> c) {
    const int steps = static_cast<int>(std::max(std::abs(bx - ax), std::abs(by - ay))) + 1;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      const int x = static_cast<int>(std::lround(ax + t * (bx - ax)));
      const int y = static_cast<int>(std::lround(ay + t * (by - ay)));
      for (int d = 0; d < 2; ++d) img.set(x, y + d, c);
    }
  };
  std::string legend;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto c = series_color(i);
    const auto& pts = series[i].points;
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const double ax = px(pts[k].first), ay = py(pts[k].second);
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) img.set(static_cast<int>(ax) + dx, static_cast<int>(ay) + dy, c);
      if (k + 1 < pts.size()) line(ax, ay, px(pts[k + 1].first), py(pts[k + 1].second), c);
    }
    // Legend swatch in the top-right corner.
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 16; ++x) img.set(right - 20 + x, top + 4 + static_cast<int>(i) * 12 + y, c);
    legend += (legend.empty() ? "" : "; ") + series[i].name + "=rgb(" + std::to_string(c[0]) + "," +
              std::to_string(c[1]) + "," + std::to_string(c[2]) + ")";
  }
  std::vector<std::pair<std::string, std::string>> text = {
      {"Title", title},
      {"Comment", "x in [" + std::to_string(x0) + ", " + std::to_string(x1) + "], y in [" + std::to_string(y0) +
                      ", " + std::to_string(y1) + "]; " + legend}};
  return {std::move(img), std::move(text)};
}

}  // namespace llbb::png
