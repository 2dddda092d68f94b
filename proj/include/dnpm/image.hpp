#pragma once

// Single-channel displacement maps: container, 16-bit grayscale PNG I/O,
// bilinear sampling, and the resampling/blur kernels used for degradation
// and baseline comparisons.
//
// Conventions (used consistently across the library):
//  - Map values are stored as doubles in [0, 1] ("unit scale"); losses and
//    metrics operate on this scale. Physical displacement in model units is
//    decode_displacement(v, d_max) = (v - 0.5) * 2 * d_max.
//  - UV origin is at the bottom-left; row y of `values` holds the texel row
//    whose centers have v = (y + 0.5-free pixel-center convention below).
//  - Sampling uses pixel centers: u = 0 maps to the center of the first
//    texel column, u = 1 to the center of the last (x = u * (W - 1)).
//  - PNG scanline 0 is the visual top, i.e. the row with the highest v.

#include <cstdint>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "dnpm/common.hpp"
#include "dnpm/tensor.hpp"

namespace dnpm {

struct DisplacementMap {
    int width = 0;
    int height = 0;
    std::vector<double> values;  // row-major, index (y * width + x), y = 0 is v = 0

    DisplacementMap() = default;
    DisplacementMap(int w, int h, double fill = 0.5) : width(w), height(h) {
        require(w > 0 && h > 0, "DisplacementMap dimensions must be positive");
        values.assign(static_cast<std::size_t>(w) * h, fill);
    }

    double& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }

    bool same_shape(const DisplacementMap& o) const {
        return width == o.width && height == o.height;
    }
};

inline double decode_displacement(double unit_value, double d_max) {
    return (unit_value - 0.5) * 2.0 * d_max;
}

inline double encode_displacement(double model_units, double d_max) {
    require(d_max > 0.0, "d_max must be positive");
    return model_units / (2.0 * d_max) + 0.5;
}

inline std::uint16_t quantize_unit16(double v) {
    double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return static_cast<std::uint16_t>(std::lround(c * 65535.0));
}

inline double dequantize_unit16(std::uint16_t q) { return q / 65535.0; }

// Bilinear interpolation at uv in [0,1]^2, pixel-center convention.
inline double sample_map(const DisplacementMap& map, double u, double v) {
    require(map.width > 0 && map.height > 0, "sample_map: empty map");
    if (!(u >= 0.0 && u <= 1.0 && v >= 0.0 && v <= 1.0))
        throw RangeError("sample_map: uv outside [0,1]^2");
    double x = u * (map.width - 1);
    double y = v * (map.height - 1);
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    if (x0 > map.width - 2) x0 = map.width - 2;
    if (y0 > map.height - 2) y0 = map.height - 2;
    if (x0 < 0) x0 = 0;  // width == 1
    if (y0 < 0) y0 = 0;  // height == 1
    int x1 = std::min(x0 + 1, map.width - 1);
    int y1 = std::min(y0 + 1, map.height - 1);
    double fx = x - x0;
    double fy = y - y0;
    double a = map.at(x0, y0) * (1.0 - fx) + map.at(x1, y0) * fx;
    double b = map.at(x0, y1) * (1.0 - fx) + map.at(x1, y1) * fx;
    return a * (1.0 - fy) + b * fy;
}

inline Tensor to_tensor(const DisplacementMap& map) {
    return Tensor({map.height, map.width}, map.values);
}

inline DisplacementMap map_from_tensor(const Tensor& t) {
    require(t.rank() == 2, "map_from_tensor expects a rank-2 tensor, got " + shape_str(t.shape()));
    require(t.all_finite(), "map_from_tensor: non-finite values");
    DisplacementMap m(t.dim(1), t.dim(0));
    for (std::size_t i = 0; i < m.values.size(); ++i) {
        double v = t[static_cast<std::int64_t>(i)];
        m.values[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }
    return m;
}

// ---------------------------------------------------------------------------
// 16-bit grayscale PNG I/O (lossless round trip of the quantized payload).
// ---------------------------------------------------------------------------

inline void save_png16(const DisplacementMap& map, const std::filesystem::path& path) {
    require(map.width > 0 && map.height > 0, "save_png16: empty map");
    FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw IoError("cannot open for writing: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    std::vector<unsigned char> row(static_cast<std::size_t>(map.width) * 2);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw IoError("PNG write failed: " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(map.width),
                 static_cast<png_uint_32>(map.height), 16, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int sy = 0; sy < map.height; ++sy) {
        int y = map.height - 1 - sy;  // scanline 0 = top = highest v
        for (int x = 0; x < map.width; ++x) {
            std::uint16_t q = quantize_unit16(map.at(x, y));
            row[2 * x] = static_cast<unsigned char>(q >> 8);  // big-endian per PNG spec
            row[2 * x + 1] = static_cast<unsigned char>(q & 0xff);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline DisplacementMap load_png16(const std::filesystem::path& path) {
    FILE* fp = std::fopen(path.string().c_str(), "rb");
    if (!fp) throw IoError("cannot open for reading: " + path.string());
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        std::fclose(fp);
        throw IoError("not a PNG file: " + path.string());
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    std::vector<unsigned char> row;
    DisplacementMap map;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw IoError("PNG read failed: " + path.string());
    }
    png_init_io(png, fp);
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    int w = static_cast<int>(png_get_image_width(png, info));
    int h = static_cast<int>(png_get_image_height(png, info));
    int depth = png_get_bit_depth(png, info);
    int color = png_get_color_type(png, info);
    if (depth != 16 || color != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("expected 16-bit grayscale PNG: " + path.string());
    }
    map = DisplacementMap(w, h, 0.0);
    row.resize(static_cast<std::size_t>(w) * 2);
    for (int sy = 0; sy < h; ++sy) {
        png_read_row(png, row.data(), nullptr);
        int y = h - 1 - sy;
        for (int x = 0; x < w; ++x) {
            std::uint16_t q = static_cast<std::uint16_t>((row[2 * x] << 8) | row[2 * x + 1]);
            map.at(x, y) = dequantize_unit16(q);
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return map;
}

// ---------------------------------------------------------------------------
// Resampling and filtering.
// ---------------------------------------------------------------------------

// Box average over factor x factor blocks; factor must divide both dimensions.
inline DisplacementMap area_downsample(const DisplacementMap& m, int factor) {
    require(factor >= 1, "area_downsample: factor must be >= 1");
    if (m.width % factor != 0 || m.height % factor != 0)
        throw ConfigError("area_downsample: factor " + std::to_string(factor) +
                          " does not divide " + std::to_string(m.width) + "x" +
                          std::to_string(m.height));
    DisplacementMap out(m.width / factor, m.height / factor, 0.0);
    double inv = 1.0 / (static_cast<double>(factor) * factor);
    for (int oy = 0; oy < out.height; ++oy)
        for (int ox = 0; ox < out.width; ++ox) {
            double s = 0.0;
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx)
                    s += m.at(ox * factor + dx, oy * factor + dy);
            out.at(ox, oy) = s * inv;
        }
    return out;
}

// Exact fractional-coverage area average; requires out <= in per axis.
inline DisplacementMap resize_area(const DisplacementMap& m, int out_w, int out_h) {
    require(out_w >= 1 && out_h >= 1, "resize_area: output dims must be positive");
    if (out_w > m.width || out_h > m.height)
        throw ConfigError("resize_area only reduces: " + std::to_string(m.width) + "x" +
                          std::to_string(m.height) + " -> " + std::to_string(out_w) + "x" +
                          std::to_string(out_h));
    if (out_w == m.width && out_h == m.height) return m;
    DisplacementMap out(out_w, out_h, 0.0);
    double sx = static_cast<double>(m.width) / out_w;
    double sy = static_cast<double>(m.height) / out_h;
    for (int oy = 0; oy < out_h; ++oy) {
        double y0 = oy * sy, y1 = (oy + 1) * sy;
        for (int ox = 0; ox < out_w; ++ox) {
            double x0 = ox * sx, x1 = (ox + 1) * sx;
            double acc = 0.0;
            for (int iy = static_cast<int>(std::floor(y0)); iy < y1 - 1e-12 && iy < m.height; ++iy) {
                double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
                if (wy <= 0.0) continue;
                for (int ix = static_cast<int>(std::floor(x0)); ix < x1 - 1e-12 && ix < m.width; ++ix) {
                    double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
                    if (wx <= 0.0) continue;
                    acc += wx * wy * m.at(ix, iy);
                }
            }
            out.at(ox, oy) = acc / (sx * sy);
        }
    }
    return out;
}

// Separable Gaussian blur, replicate padding, kernel radius ceil(3*sigma).
inline DisplacementMap gaussian_blur(const DisplacementMap& m, double sigma) {
    require(sigma > 0.0, "gaussian_blur: sigma must be positive");
    int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += k[i + radius];
    }
    for (double& w : k) w /= sum;
    auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
    DisplacementMap tmp(m.width, m.height, 0.0);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[i + radius] * m.at(clampi(x + i, 0, m.width - 1), y);
            tmp.at(x, y) = acc;
        }
    DisplacementMap out(m.width, m.height, 0.0);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[i + radius] * tmp.at(x, clampi(y + i, 0, m.height - 1));
            out.at(x, y) = acc;
        }
    return out;
}

// Catmull-Rom bicubic resize (a = -0.5), clamp-to-edge, output clamped to [0,1].
inline DisplacementMap bicubic_resize(const DisplacementMap& m, int out_w, int out_h) {
    require(out_w >= 1 && out_h >= 1, "bicubic_resize: output dims must be positive");
    auto kernel = [](double x) {
        x = std::fabs(x);
        constexpr double a = -0.5;
        if (x <= 1.0) return (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0;
        if (x < 2.0) return a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a;
        return 0.0;
    };
    auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
    DisplacementMap out(out_w, out_h, 0.0);
    double sx = static_cast<double>(m.width) / out_w;
    double sy = static_cast<double>(m.height) / out_h;
    for (int oy = 0; oy < out_h; ++oy) {
        double fy = (oy + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        for (int ox = 0; ox < out_w; ++ox) {
            double fx = (ox + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            double acc = 0.0, wsum = 0.0;
            for (int j = -1; j <= 2; ++j) {
                double wy = kernel(fy - (y0 + j));
                for (int i = -1; i <= 2; ++i) {
                    double w = wy * kernel(fx - (x0 + i));
                    acc += w * m.at(clampi(x0 + i, 0, m.width - 1), clampi(y0 + j, 0, m.height - 1));
                    wsum += w;
                }
            }
            double v = acc / wsum;
            out.at(ox, oy) = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        }
    }
    return out;
}

}  // namespace dnpm
