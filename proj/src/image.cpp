#include "spi/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include <png.h>

namespace spi {

Image fliplr(const Image& img) {
    Image out(img.width, img.height, img.channels);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < img.channels; ++c) {
                out.at(x, y, c) = img.at(img.width - 1 - x, y, c);
            }
        }
    }
    return out;
}

Image downsample2(const Image& img) {
    int ow = img.width / 2;
    int oh = img.height / 2;
    SPI_CHECK(ow >= 1 && oh >= 1, "image too small to downsample");
    Image out(ow, oh, img.channels);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            for (int c = 0; c < img.channels; ++c) {
                out.at(x, y, c) = 0.25 * (img.at(2 * x, 2 * y, c) + img.at(2 * x + 1, 2 * y, c) +
                                          img.at(2 * x, 2 * y + 1, c) +
                                          img.at(2 * x + 1, 2 * y + 1, c));
            }
        }
    }
    return out;
}

Image clamp01(const Image& img) {
    Image out = img;
    for (auto& v : out.data) v = std::min(1.0, std::max(0.0, v));
    return out;
}

Image resize_bilinear(const Image& img, int out_w, int out_h) {
    SPI_CHECK(out_w >= 1 && out_h >= 1, "bad resize target");
    Image out(out_w, out_h, img.channels);
    double sx = static_cast<double>(img.width) / out_w;
    double sy = static_cast<double>(img.height) / out_h;
    for (int y = 0; y < out_h; ++y) {
        double src_y = (y + 0.5) * sy - 0.5;
        double cy = std::min(std::max(src_y, 0.0), static_cast<double>(img.height - 1));
        int y0 = static_cast<int>(std::floor(cy));
        int y1 = std::min(y0 + 1, img.height - 1);
        double fy = cy - y0;
        for (int x = 0; x < out_w; ++x) {
            double src_x = (x + 0.5) * sx - 0.5;
            double cx = std::min(std::max(src_x, 0.0), static_cast<double>(img.width - 1));
            int x0 = static_cast<int>(std::floor(cx));
            int x1 = std::min(x0 + 1, img.width - 1);
            double fx = cx - x0;
            for (int c = 0; c < img.channels; ++c) {
                double v = (1 - fy) * ((1 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c)) +
                           fy * ((1 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c));
                out.at(x, y, c) = v;
            }
        }
    }
    return out;
}

double max_abs_diff(const Image& a, const Image& b) {
    SPI_CHECK(a.same_shape(b), "shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    }
    return m;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

unsigned char to_byte(double v) {
    double c = std::min(1.0, std::max(0.0, v));
    return static_cast<unsigned char>(std::lround(c * 255.0));
}

} // namespace

void write_png(const std::string& path, const Image& img) {
    SPI_CHECK(img.channels == 1 || img.channels == 3, "png supports 1 or 3 channels");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    SPI_CHECK(fp != nullptr, "cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    SPI_CHECK(png, "png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        SPI_CHECK(false, "png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("png write error: " + path);
    }
    png_init_io(png, fp.get());
    int color = img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * img.channels);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < img.channels; ++c) {
                row[static_cast<std::size_t>(x) * img.channels + c] = to_byte(img.at(x, y, c));
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    SPI_CHECK(fp != nullptr, "cannot open: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    SPI_CHECK(png, "png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        SPI_CHECK(false, "png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("png read error: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);

    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    int channels = static_cast<int>(png_get_channels(png, info));
    SPI_CHECK(channels == 1 || channels == 3, "unsupported png channel count");

    Image img(static_cast<int>(w), static_cast<int>(h), channels);
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * channels);
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x) {
            for (int c = 0; c < channels; ++c) {
                img.at(static_cast<int>(x), static_cast<int>(y), c) =
                    row[static_cast<std::size_t>(x) * channels + c] / 255.0;
            }
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_pfm(const std::string& path, const Image& img) {
    SPI_CHECK(img.channels == 1, "pfm writer handles single-channel maps");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    SPI_CHECK(fp != nullptr, "cannot open for writing: " + path);
    std::fprintf(fp.get(), "Pf\n%d %d\n-1.0\n", img.width, img.height);
    // PFM rows run bottom-to-top.
    std::vector<float> row(static_cast<std::size_t>(img.width));
    for (int y = img.height - 1; y >= 0; --y) {
        for (int x = 0; x < img.width; ++x) row[static_cast<std::size_t>(x)] =
            static_cast<float>(img.at(x, y, 0));
        std::fwrite(row.data(), sizeof(float), row.size(), fp.get());
    }
}

Image read_pfm(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    SPI_CHECK(fp != nullptr, "cannot open: " + path);
    char magic[3] = {};
    int w = 0, h = 0;
    double scale = 0.0;
    SPI_CHECK(std::fscanf(fp.get(), "%2s %d %d %lf", magic, &w, &h, &scale) == 4,
              "malformed pfm header: " + path);
    SPI_CHECK(std::string(magic) == "Pf", "expected grayscale pfm: " + path);
    SPI_CHECK(scale < 0, "big-endian pfm not supported: " + path);
    SPI_CHECK(w > 0 && h > 0, "bad pfm dimensions: " + path);
    int sep = std::fgetc(fp.get()); // single whitespace byte before raster
    SPI_CHECK(sep == '\n' || sep == ' ' || sep == '\r', "malformed pfm header: " + path);
    Image img(w, h, 1);
    std::vector<float> row(static_cast<std::size_t>(w));
    for (int y = h - 1; y >= 0; --y) {
        SPI_CHECK(std::fread(row.data(), sizeof(float), row.size(), fp.get()) == row.size(),
                  "truncated pfm: " + path);
        for (int x = 0; x < w; ++x) img.at(x, y, 0) = static_cast<double>(row[static_cast<std::size_t>(x)]);
    }
    return img;
}

Image hconcat(const std::vector<Image>& imgs, int pad, double pad_value) {
    SPI_CHECK(!imgs.empty(), "hconcat of nothing");
    int h = imgs[0].height, c = imgs[0].channels;
    int w = -pad;
    for (const auto& im : imgs) {
        SPI_CHECK(im.height == h && im.channels == c, "hconcat shape mismatch");
        w += im.width + pad;
    }
    Image out(w, h, c, pad_value);
    int xoff = 0;
    for (const auto& im : imgs) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < im.width; ++x)
                for (int ch = 0; ch < c; ++ch) out.at(xoff + x, y, ch) = im.at(x, y, ch);
        xoff += im.width + pad;
    }
    return out;
}

Image vconcat(const std::vector<Image>& imgs, int pad, double pad_value) {
    SPI_CHECK(!imgs.empty(), "vconcat of nothing");
    int w = imgs[0].width, c = imgs[0].channels;
    int h = -pad;
    for (const auto& im : imgs) {
        SPI_CHECK(im.width == w && im.channels == c, "vconcat shape mismatch");
        h += im.height + pad;
    }
    Image out(w, h, c, pad_value);
    int yoff = 0;
    for (const auto& im : imgs) {
        for (int y = 0; y < im.height; ++y)
            for (int x = 0; x < w; ++x)
                for (int ch = 0; ch < c; ++ch) out.at(x, yoff + y, ch) = im.at(x, y, ch);
        yoff += im.height + pad;
    }
    return out;
}

} // namespace spi
