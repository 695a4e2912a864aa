#pragma once

#include <string>
#include <vector>

#include "spi/common.hpp"

namespace spi {

/// Row-major H x W x C image of doubles, row 0 at the top. RGB data lives in
/// [0,1] unless a caller deliberately keeps an unclamped render.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * h * c, fill) {}

    double& at(int x, int y, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double at(int x, int y, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

/// Horizontal flip (column 0 swaps with column W-1). Involution.
Image fliplr(const Image& img);

/// Factor-2 area downsampling; odd trailing rows/columns are dropped.
Image downsample2(const Image& img);

Image clamp01(const Image& img);

/// Bilinear resize with half-pixel center alignment.
Image resize_bilinear(const Image& img, int out_w, int out_h);

double max_abs_diff(const Image& a, const Image& b);

/// 8-bit PNG I/O (RGB for 3 channels, grayscale for 1).
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

/// Single-channel float PFM ("Pf", little-endian, bottom-up rows).
void write_pfm(const std::string& path, const Image& img);
Image read_pfm(const std::string& path);

/// Side-by-side composition helpers for contact sheets.
Image hconcat(const std::vector<Image>& imgs, int pad = 2, double pad_value = 1.0);
Image vconcat(const std::vector<Image>& imgs, int pad = 2, double pad_value = 1.0);

} // namespace spi
