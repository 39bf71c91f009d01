// Copyright 2026 The pnloc Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "pnloc/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace pnloc {

/// Dense H x W x C image, row-major with interleaved channels. Pixel centers
/// sit at integer coordinates, origin top-left, x to the right, y down.
template <typename T>
class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels, T fill = T{})
      : width_(width), height_(height), channels_(channels),
        data_(static_cast<std::size_t>(width) * height * channels, fill) {
    require(width >= 0 && height >= 0 && channels >= 1, "image dimensions must be non-negative");
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(width_) * height_; }
  bool empty() const noexcept { return data_.empty(); }

  T& at(int x, int y, int c = 0) noexcept { return data_[index(x, y, c)]; }
  const T& at(int x, int y, int c = 0) const noexcept { return data_[index(x, y, c)]; }

  T* pixel(int x, int y) noexcept { return data_.data() + index(x, y, 0); }
  const T* pixel(int x, int y) const noexcept { return data_.data() + index(x, y, 0); }

  std::vector<T>& data() noexcept { return data_; }
  const std::vector<T>& data() const noexcept { return data_; }

  bool same_shape(int w, int h) const noexcept { return w == width_ && h == height_; }

  bool operator==(const Image& other) const = default;

 private:
  std::size_t index(int x, int y, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

using ImageD = Image<double>;
using ImageF = Image<float>;
using Mask = Image<std::uint8_t>;

/// True when the pixel lies in [0, W-1] x [0, H-1].
template <typename T>
bool in_sample_bounds(const Image<T>& image, const Vec2& pixel) noexcept {
  return pixel.x() >= 0.0 && pixel.y() >= 0.0 && pixel.x() <= image.width() - 1 &&
         pixel.y() <= image.height() - 1 && std::isfinite(pixel.x()) && std::isfinite(pixel.y());
}

namespace detail {

struct BilinearCell {
  int x0, y0;
  double fx, fy;  // fractional offsets in [0, 1]
};

// Cell containing `pixel`; the last row/column maps onto the final cell with
// fraction 1 so that gradients stay defined on the far border.
inline BilinearCell bilinear_cell(int width, int height, const Vec2& pixel) noexcept {
  int x0 = width > 1 ? std::min(static_cast<int>(std::floor(pixel.x())), width - 2) : 0;
  int y0 = height > 1 ? std::min(static_cast<int>(std::floor(pixel.y())), height - 2) : 0;
  return {x0, y0, pixel.x() - x0, pixel.y() - y0};
}

}  // namespace detail

/// Bilinear lookup into `out[0..C)`. Returns false (and leaves `out`
/// untouched) when the pixel is out of bounds.
template <typename T>
bool try_bilinear_sample(const Image<T>& image, const Vec2& pixel, double* out) noexcept {
  if (!in_sample_bounds(image, pixel)) return false;
  const int c_count = image.channels();
  if (image.width() == 1 || image.height() == 1) {
    // Degenerate one-row / one-column images interpolate along the other axis.
    const auto cell = detail::bilinear_cell(image.width(), image.height(), pixel);
    const int x1 = image.width() > 1 ? cell.x0 + 1 : cell.x0;
    const int y1 = image.height() > 1 ? cell.y0 + 1 : cell.y0;
    const double fx = image.width() > 1 ? cell.fx : 0.0;
    const double fy = image.height() > 1 ? cell.fy : 0.0;
    for (int c = 0; c < c_count; ++c) {
      const double top = (1 - fx) * image.at(cell.x0, cell.y0, c) + fx * image.at(x1, cell.y0, c);
      const double bottom = (1 - fx) * image.at(cell.x0, y1, c) + fx * image.at(x1, y1, c);
      out[c] = (1 - fy) * top + fy * bottom;
    }
    return true;
  }
  const auto cell = detail::bilinear_cell(image.width(), image.height(), pixel);
  const T* p00 = image.pixel(cell.x0, cell.y0);
  const T* p10 = image.pixel(cell.x0 + 1, cell.y0);
  const T* p01 = image.pixel(cell.x0, cell.y0 + 1);
  const T* p11 = image.pixel(cell.x0 + 1, cell.y0 + 1);
  const double w00 = (1 - cell.fx) * (1 - cell.fy);
  const double w10 = cell.fx * (1 - cell.fy);
  const double w01 = (1 - cell.fx) * cell.fy;
  const double w11 = cell.fx * cell.fy;
  for (int c = 0; c < c_count; ++c) {
    out[c] = w00 * p00[c] + w10 * p10[c] + w01 * p01[c] + w11 * p11[c];
  }
  return true;
}

/// Bilinear lookup plus the exact partial derivatives of the bilinear
/// interpolant with respect to x and y. Requires W, H >= 2.
template <typename T>
bool try_bilinear_sample_with_gradient(const Image<T>& image, const Vec2& pixel, double* value,
                                       double* d_dx, double* d_dy) noexcept {
  if (!in_sample_bounds(image, pixel) || image.width() < 2 || image.height() < 2) return false;
  const auto cell = detail::bilinear_cell(image.width(), image.height(), pixel);
  const T* p00 = image.pixel(cell.x0, cell.y0);
  const T* p10 = image.pixel(cell.x0 + 1, cell.y0);
  const T* p01 = image.pixel(cell.x0, cell.y0 + 1);
  const T* p11 = image.pixel(cell.x0 + 1, cell.y0 + 1);
  const double fx = cell.fx, fy = cell.fy;
  for (int c = 0; c < image.channels(); ++c) {
    const double a = p00[c], b = p10[c], d = p01[c], e = p11[c];
    value[c] = (1 - fx) * (1 - fy) * a + fx * (1 - fy) * b + (1 - fx) * fy * d + fx * fy * e;
    d_dx[c] = (1 - fy) * (b - a) + fy * (e - d);
    d_dy[c] = (1 - fx) * (d - a) + fx * (e - b);
  }
  return true;
}

/// Throwing convenience wrapper returning all channels.
template <typename T>
VecX bilinear_sample(const Image<T>& image, const Vec2& pixel) {
  VecX out(image.channels());
  if (!try_bilinear_sample(image, pixel, out.data())) {
    throw Error(ErrorCode::OutOfBounds, "bilinear sample outside image");
  }
  return out;
}

}  // namespace pnloc
