#include "protoverse/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "protoverse/errors.hpp"

namespace protoverse {

BBox intersect(const BBox& a, const BBox& b) {
    BBox r{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
    if (r.empty()) return BBox{};
    return r;
}

double iou(const BBox& a, const BBox& b) {
    const long inter = intersect(a, b).area();
    const long uni = a.area() + b.area() - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

Image resize_bilinear(const Image& src, int out_height, int out_width) {
    if (src.empty() || out_height <= 0 || out_width <= 0) {
        throw ShapeError("resize_bilinear: empty source or non-positive target size");
    }
    Image out(out_height, out_width);
    const double sy = static_cast<double>(src.height) / out_height;
    const double sx = static_cast<double>(src.width) / out_width;
    for (int y = 0; y < out_height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - x0;
            const double top = (1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1);
            const double bottom = (1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1);
            out.at(y, x) = static_cast<float>((1 - wy) * top + wy * bottom);
        }
    }
    return out;
}

std::array<int, 2> argmax(const Image& img) {
    if (img.empty()) throw ShapeError("argmax of empty image");
    const auto it = std::max_element(img.pixels.begin(), img.pixels.end());
    const auto idx = static_cast<int>(it - img.pixels.begin());
    return {idx / img.width, idx % img.width};
}

float min_value(const Image& img) { return *std::min_element(img.pixels.begin(), img.pixels.end()); }
float max_value(const Image& img) { return *std::max_element(img.pixels.begin(), img.pixels.end()); }

Image minmax_normalize(const Image& img) {
    Image out(img.height, img.width);
    if (img.empty()) return out;
    const float lo = min_value(img);
    const float hi = max_value(img);
    if (!(hi > lo)) return out;
    for (std::size_t i = 0; i < img.size(); ++i) out.pixels[i] = (img.pixels[i] - lo) / (hi - lo);
    return out;
}

Rgb jet_color(float t) {
    t = std::clamp(t, 0.0f, 1.0f);
    auto channel = [](float v) {
        return static_cast<std::uint8_t>(std::lround(255.0f * std::clamp(1.5f - std::fabs(v), 0.0f, 1.0f)));
    };
    return {channel(4.0f * t - 3.0f), channel(4.0f * t - 2.0f), channel(4.0f * t - 1.0f)};
}

static std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(255.0f * std::clamp(v, 0.0f, 1.0f)));
}

RgbImage to_rgb(const Image& gray) {
    RgbImage out(gray.height, gray.width);
    for (std::size_t i = 0; i < gray.size(); ++i) {
        const auto v = to_byte(gray.pixels[i]);
        out.pixels[i] = {v, v, v};
    }
    return out;
}

RgbImage overlay_heatmap(const Image& base, const Image& heatmap, float alpha) {
    if (base.height != heatmap.height || base.width != heatmap.width) {
        throw ShapeError("overlay_heatmap: base and heatmap sizes differ");
    }
    RgbImage out(base.height, base.width);
    for (std::size_t i = 0; i < base.size(); ++i) {
        const float g = std::clamp(base.pixels[i], 0.0f, 1.0f);
        const Rgb c = jet_color(heatmap.pixels[i]);
        auto blend = [&](std::uint8_t col) {
            return to_byte((1.0f - alpha) * g + alpha * (static_cast<float>(col) / 255.0f));
        };
        out.pixels[i] = {blend(c.r), blend(c.g), blend(c.b)};
    }
    return out;
}

void draw_bbox(RgbImage& img, const BBox& box, Rgb color) {
    if (box.empty()) return;
    const int x0 = std::clamp(box.x0, 0, img.width - 1);
    const int x1 = std::clamp(box.x1 - 1, 0, img.width - 1);
    const int y0 = std::clamp(box.y0, 0, img.height - 1);
    const int y1 = std::clamp(box.y1 - 1, 0, img.height - 1);
    for (int x = x0; x <= x1; ++x) {
        img.at(y0, x) = color;
        img.at(y1, x) = color;
    }
    for (int y = y0; y <= y1; ++y) {
        img.at(y, x0) = color;
        img.at(y, x1) = color;
    }
}

RgbImage crop(const RgbImage& img, const BBox& box) {
    const BBox clipped = intersect(box, BBox{0, 0, img.width, img.height});
    if (clipped.empty()) throw ShapeError("crop: box outside image");
    RgbImage out(clipped.height(), clipped.width());
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            out.at(y, x) = img.pixels[static_cast<std::size_t>(y + clipped.y0) * img.width + x + clipped.x0];
        }
    }
    return out;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};

void write_png_rows(const std::filesystem::path& path, int width, int height, int bit_depth, int color_type,
                    const std::vector<png_bytep>& rows) {
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("libpng failed writing " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, const_cast<png_bytepp>(rows.data()));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png(const std::filesystem::path& path, const RgbImage& img) {
    std::vector<std::uint8_t> buffer(static_cast<std::size_t>(img.width) * img.height * 3);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        buffer[3 * i] = img.pixels[i].r;
        buffer[3 * i + 1] = img.pixels[i].g;
        buffer[3 * i + 2] = img.pixels[i].b;
    }
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + static_cast<std::size_t>(y) * img.width * 3;
    write_png_rows(path, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, rows);
}

void write_png16(const std::filesystem::path& path, const Image& img) {
    std::vector<std::uint8_t> buffer(img.size() * 2);
    for (std::size_t i = 0; i < img.size(); ++i) {
        const auto v = static_cast<std::uint16_t>(std::lround(65535.0f * std::clamp(img.pixels[i], 0.0f, 1.0f)));
        buffer[2 * i] = static_cast<std::uint8_t>(v >> 8);  // PNG is big-endian
        buffer[2 * i + 1] = static_cast<std::uint8_t>(v & 0xFF);
    }
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + static_cast<std::size_t>(y) * img.width * 2;
    write_png_rows(path, img.width, img.height, 16, PNG_COLOR_TYPE_GRAY, rows);
}

}  // namespace protoverse
