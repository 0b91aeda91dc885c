#pragma once

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "neuroenc/common.hpp"
#include "neuroenc/dataset.hpp"

namespace neuroenc {

/// 8-bit RGB raster with simple drawing primitives; enough for heatmaps,
/// scatter plots and salience overlays.
class Canvas {
 public:
  Canvas(Index height, Index width, unsigned char r = 255, unsigned char g = 255,
         unsigned char b = 255)
      : h_(height), w_(width), data_(static_cast<std::size_t>(height * width * 3)) {
    fill(r, g, b);
  }

  Index height() const { return h_; }
  Index width() const { return w_; }

  void fill(unsigned char r, unsigned char g, unsigned char b) {
    for (std::size_t i = 0; i < data_.size(); i += 3) {
      data_[i] = r;
      data_[i + 1] = g;
      data_[i + 2] = b;
    }
  }

  void set(Index y, Index x, unsigned char r, unsigned char g, unsigned char b) {
    if (y < 0 || y >= h_ || x < 0 || x >= w_) return;
    const std::size_t i = static_cast<std::size_t>((y * w_ + x) * 3);
    data_[i] = r;
    data_[i + 1] = g;
    data_[i + 2] = b;
  }

  void rect(Index y0, Index x0, Index y1, Index x1, unsigned char r,
            unsigned char g, unsigned char b) {
    for (Index y = std::max<Index>(y0, 0); y < std::min(y1, h_); ++y)
      for (Index x = std::max<Index>(x0, 0); x < std::min(x1, w_); ++x)
        set(y, x, r, g, b);
  }

  void disk(Index cy, Index cx, Index radius, unsigned char r, unsigned char g,
            unsigned char b) {
    for (Index y = cy - radius; y <= cy + radius; ++y)
      for (Index x = cx - radius; x <= cx + radius; ++x)
        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= radius * radius)
          set(y, x, r, g, b);
  }

  const unsigned char* data() const { return data_.data(); }

 private:
  Index h_, w_;
  std::vector<unsigned char> data_;
};

struct PngText {
  std::string key;
  std::string value;
};

inline void write_png(const std::filesystem::path& path, const Canvas& canvas,
                      const std::vector<PngText>& texts = {}) {
  const auto dir = path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw IoError("cannot open PNG for writing: " + path.string());
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("PNG write failure: " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(canvas.width()),
               static_cast<png_uint_32>(canvas.height()), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_text> chunks;
  for (const auto& t : texts) {
    png_text txt{};
    txt.compression = PNG_TEXT_COMPRESSION_NONE;
    txt.key = const_cast<char*>(t.key.c_str());
    txt.text = const_cast<char*>(t.value.c_str());
    txt.text_length = t.value.size();
    chunks.push_back(txt);
  }
  if (!chunks.empty())
    png_set_text(png, info, chunks.data(), static_cast<int>(chunks.size()));
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<std::size_t>(canvas.height()));
  for (Index y = 0; y < canvas.height(); ++y)
    rows[static_cast<std::size_t>(y)] =
        const_cast<png_bytep>(canvas.data() + y * canvas.width() * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

// Compact viridis-style colormap (sampled control points, linear blend).
inline void colormap_viridis(double t, unsigned char* rgb) {
  static const unsigned char stops[][3] = {
      {68, 1, 84},   {59, 82, 139},  {33, 145, 140},
      {94, 201, 98}, {253, 231, 37},
  };
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  for (int c = 0; c < 3; ++c)
    rgb[c] = static_cast<unsigned char>((1.0 - f) * stops[i][c] +
                                        f * stops[i + 1][c]);
}

/// Matrix heatmap with per-cell viridis coloring over the value range.
inline void save_heatmap_png(const std::filesystem::path& path, const MatD& values,
                             int cell = 24,
                             const std::vector<PngText>& texts = {}) {
  const double lo = values.minCoeff(), hi = values.maxCoeff();
  const double span = hi > lo ? hi - lo : 1.0;
  Canvas canvas(values.rows() * cell + 2, values.cols() * cell + 2, 255, 255, 255);
  for (Index i = 0; i < values.rows(); ++i)
    for (Index j = 0; j < values.cols(); ++j) {
      unsigned char rgb[3];
      colormap_viridis((values(i, j) - lo) / span, rgb);
      canvas.rect(1 + i * cell, 1 + j * cell, 1 + (i + 1) * cell - 1,
                  1 + (j + 1) * cell - 1, rgb[0], rgb[1], rgb[2]);
    }
  write_png(path, canvas, texts);
}

/// Scatter plot of 2-D points with integer group coloring.
inline void save_scatter_png(const std::filesystem::path& path, const MatD& coords,
                             const std::vector<int>& groups, Index size = 420,
                             const std::vector<PngText>& texts = {}) {
  require(coords.cols() >= 2, "save_scatter_png: need 2-D coordinates");
  static const unsigned char palette[][3] = {
      {31, 119, 180}, {255, 127, 14}, {44, 160, 44},  {214, 39, 40},
      {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127},
  };
  const double x_lo = coords.col(0).minCoeff(), x_hi = coords.col(0).maxCoeff();
  const double y_lo = coords.col(1).minCoeff(), y_hi = coords.col(1).maxCoeff();
  const double xs = x_hi > x_lo ? x_hi - x_lo : 1.0;
  const double ys = y_hi > y_lo ? y_hi - y_lo : 1.0;
  Canvas canvas(size, size, 250, 250, 250);
  const Index margin = 24;
  for (Index i = 0; i < coords.rows(); ++i) {
    const Index px = margin + static_cast<Index>((coords(i, 0) - x_lo) / xs *
                                                 static_cast<double>(size - 2 * margin));
    const Index py = size - margin -
                     static_cast<Index>((coords(i, 1) - y_lo) / ys *
                                        static_cast<double>(size - 2 * margin));
    const auto& c = palette[static_cast<std::size_t>(
        groups.empty() ? 0 : groups[static_cast<std::size_t>(i)] % 8)];
    canvas.disk(py, px, 6, c[0], c[1], c[2]);
  }
  write_png(path, canvas, texts);
}

/// Stimulus image with a salience overlay (red channel boost).
inline void save_salience_overlay_png(const std::filesystem::path& path,
                                      const StimulusSet& stim, Index image_index,
                                      const MatD& overlay,
                                      const std::vector<PngText>& texts = {}) {
  const Index h = stim.height, w = stim.width;
  require(overlay.rows() == h && overlay.cols() == w,
          "save_salience_overlay_png: overlay size mismatch");
  const Index plane = h * w;
  Canvas canvas(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double rgb[3];
      for (int c = 0; c < 3; ++c)
        rgb[c] = stim.images(image_index, c * plane + y * w + x);
      const double a = 0.55 * overlay(y, x);
      rgb[0] = (1 - a) * rgb[0] + a * 1.0;
      rgb[1] = (1 - a) * rgb[1];
      rgb[2] = (1 - a) * rgb[2];
      canvas.set(y, x, static_cast<unsigned char>(255 * std::clamp(rgb[0], 0.0, 1.0)),
                 static_cast<unsigned char>(255 * std::clamp(rgb[1], 0.0, 1.0)),
                 static_cast<unsigned char>(255 * std::clamp(rgb[2], 0.0, 1.0)));
    }
  write_png(path, canvas, texts);
}

}  // namespace neuroenc
