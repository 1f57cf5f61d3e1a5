#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "receler/core/tensor.hpp"

namespace receler {

// RGB byte image, row-major.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;  // height*width*3

    uint8_t* pixel(int y, int x) { return rgb.data() + (static_cast<size_t>(y) * width + x) * 3; }
};

inline uint8_t to_byte(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

// Tensor (H,W,3) in [-1,1] -> bytes.
inline ImageU8 tensor_to_image(const Tensor& t) {
    if (t.ndim() != 3 || t.dim(2) != 3) throw std::invalid_argument("tensor_to_image: want (H,W,3)");
    ImageU8 img;
    img.height = t.dim(0);
    img.width = t.dim(1);
    img.rgb.resize(t.size());
    for (size_t i = 0; i < t.size(); ++i) img.rgb[i] = to_byte((t[i] + 1.0) * 0.5);
    return img;
}

inline void write_png(const std::filesystem::path& path, const ImageU8& img) {
    FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot open for writing: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw std::runtime_error("libpng failure writing " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] = const_cast<png_bytep>(img.rgb.data() + static_cast<size_t>(y) * img.width * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

// Assemble (N,H,W,3) samples into a grid with a 2px gutter.
inline ImageU8 make_grid(const Tensor& batch, int columns) {
    if (batch.ndim() != 4 || batch.dim(3) != 3) throw std::invalid_argument("make_grid: want (N,H,W,3)");
    const int n = batch.dim(0), h = batch.dim(1), w = batch.dim(2);
    const int cols = std::max(1, std::min(columns, n));
    const int rows = (n + cols - 1) / cols;
    const int gap = 2;
    ImageU8 grid;
    grid.width = cols * w + (cols + 1) * gap;
    grid.height = rows * h + (rows + 1) * gap;
    grid.rgb.assign(static_cast<size_t>(grid.width) * grid.height * 3, 24);
    for (int i = 0; i < n; ++i) {
        const int r = i / cols, c = i % cols;
        const int oy = gap + r * (h + gap), ox = gap + c * (w + gap);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double* src = batch.data() + ((static_cast<int64_t>(i) * h + y) * w + x) * 3;
                uint8_t* dst = grid.pixel(oy + y, ox + x);
                for (int ch = 0; ch < 3; ++ch) dst[ch] = to_byte((src[ch] + 1.0) * 0.5);
            }
    }
    return grid;
}

// Simple grouped bar chart; values in [0,100].
inline void write_bar_chart(const std::filesystem::path& path, const std::vector<std::string>& labels,
                            const std::vector<double>& values) {
    const int n = static_cast<int>(values.size());
    if (n == 0) return;
    const int bar_w = 48, gap = 16, chart_h = 220, pad = 20;
    ImageU8 img;
    img.width = pad * 2 + n * bar_w + (n - 1) * gap;
    img.height = chart_h + pad * 2;
    img.rgb.assign(static_cast<size_t>(img.width) * img.height * 3, 245);
    const uint8_t palette[6][3] = {{66, 133, 244}, {219, 68, 55},  {244, 180, 0},
                                   {15, 157, 88},  {171, 71, 188}, {0, 172, 193}};
    for (int i = 0; i < n; ++i) {
        const double v = std::clamp(values[static_cast<size_t>(i)], 0.0, 100.0);
        const int bh = static_cast<int>(std::lround(v / 100.0 * chart_h));
        const int x0 = pad + i * (bar_w + gap);
        for (int y = 0; y < bh; ++y)
            for (int x = 0; x < bar_w; ++x) {
                uint8_t* p = img.pixel(pad + chart_h - 1 - y, x0 + x);
                for (int c = 0; c < 3; ++c) p[c] = palette[i % 6][c];
            }
    }
    // baseline
    for (int x = pad / 2; x < img.width - pad / 2; ++x) {
        uint8_t* p = img.pixel(pad + chart_h, x);
        p[0] = p[1] = p[2] = 60;
    }
    (void)labels;
    write_png(path, img);
}

}  // namespace receler
