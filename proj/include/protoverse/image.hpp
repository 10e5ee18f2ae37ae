#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace protoverse {

/// Single-channel float image, row-major.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, float fill = 0.0f) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

    float& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    bool empty() const { return pixels.empty(); }
    std::size_t size() const { return pixels.size(); }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Axis-aligned pixel rectangle, half-open: [x0, x1) x [y0, y1).
struct BBox {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;
    int y1 = 0;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    bool empty() const { return x1 <= x0 || y1 <= y0; }
    long area() const { return empty() ? 0L : static_cast<long>(width()) * height(); }
    bool contains(int y, int x) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }

    friend bool operator==(const BBox&, const BBox&) = default;
};

BBox intersect(const BBox& a, const BBox& b);
double iou(const BBox& a, const BBox& b);

/// Bilinear resampling with half-pixel centres and edge clamping.
Image resize_bilinear(const Image& src, int out_height, int out_width);

/// Location of the first maximum in row-major order.
std::array<int, 2> argmax(const Image& img);

float min_value(const Image& img);
float max_value(const Image& img);

/// Rescales to [0,1]; a constant image becomes all zeros.
Image minmax_normalize(const Image& img);

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
};

/// 8-bit RGB raster used for exported overlays.
struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<Rgb> pixels;

    RgbImage(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w) {}
    Rgb& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

Rgb jet_color(float t);

/// Grayscale base blended with a jet-coloured heatmap (both expected in [0,1]).
RgbImage overlay_heatmap(const Image& base, const Image& heatmap, float alpha = 0.45f);
RgbImage to_rgb(const Image& gray);
void draw_bbox(RgbImage& img, const BBox& box, Rgb color);
RgbImage crop(const RgbImage& img, const BBox& box);

void write_png(const std::filesystem::path& path, const RgbImage& img);
/// Writes a 16-bit grayscale PNG from values clamped to [0,1].
void write_png16(const std::filesystem::path& path, const Image& img);

}  // namespace protoverse
