#pragma once

// RGB float images and the few geometric/photometric operations the data
// pipeline needs. Frames on disk are binary PPM (P6) or PGM (P5).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "peadapt/core/error.hpp"

namespace peadapt {

/// Interleaved RGB, row-major, values nominally in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, float fill = 0.0f) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

    float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    bool empty() const { return data.empty(); }
    bool operator==(const Image& o) const { return height == o.height && width == o.width && data == o.data; }
};

using Video = std::vector<Image>;

namespace detail {

inline void skip_ws_and_comments(std::istream& in) {
    while (true) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

}  // namespace detail

/// Reads binary P6 or P5 (grey replicated to RGB), maxval <= 255.
inline Image read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open image '" + path + "'");
    }
    std::string magic;
    in >> magic;
    if (magic != "P6" && magic != "P5") {
        throw IoError("'" + path + "' is not a binary PPM/PGM image");
    }
    int w = 0, h = 0, maxval = 0;
    detail::skip_ws_and_comments(in);
    in >> w;
    detail::skip_ws_and_comments(in);
    in >> h;
    detail::skip_ws_and_comments(in);
    in >> maxval;
    if (!in || w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
        throw IoError("corrupt image header in '" + path + "'");
    }
    in.get();
    const int channels = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
        throw IoError("truncated image data in '" + path + "'");
    }
    Image img(h, w);
    for (std::size_t i = 0; i < static_cast<std::size_t>(w) * h; ++i) {
        for (int c = 0; c < 3; ++c) {
            img.data[i * 3 + c] = static_cast<float>(raw[i * channels + (channels == 3 ? c : 0)]) / maxval;
        }
    }
    return img;
}

inline unsigned char to_byte(float v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline void write_ppm(const std::string& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write image '" + path + "'");
    }
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.data.size());
    std::transform(img.data.begin(), img.data.end(), raw.begin(), to_byte);
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

/// Writes a single-channel map (values in [0, 1]) as binary PGM.
inline void write_pgm(const std::string& path, const std::vector<float>& values, int height, int width) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write image '" + path + "'");
    }
    out << "P5\n" << width << " " << height << "\n255\n";
    std::vector<unsigned char> raw(values.size());
    std::transform(values.begin(), values.end(), raw.begin(), to_byte);
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

/// Bilinear resample of the window [y0, y0+h) x [x0, x0+w) to out_h x out_w
/// (half-pixel centres). An unscaled window reproduces its source pixels exactly.
inline Image resample(const Image& src, double y0, double x0, double h, double w, int out_h, int out_w) {
    Image out(out_h, out_w);
    const double sy = h / out_h;
    const double sx = w / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp(y0 + (y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
        const int iy = static_cast<int>(std::floor(fy));
        const int iy1 = std::min(iy + 1, src.height - 1);
        const double ay = fy - iy;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp(x0 + (x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const int ix = static_cast<int>(std::floor(fx));
            const int ix1 = std::min(ix + 1, src.width - 1);
            const double ax = fx - ix;
            for (int c = 0; c < 3; ++c) {
                double v = src.at(iy, ix, c);
                if (ay != 0.0 || ax != 0.0) {
                    v = (1 - ay) * ((1 - ax) * src.at(iy, ix, c) + ax * src.at(iy, ix1, c)) +
                        ay * ((1 - ax) * src.at(iy1, ix, c) + ax * src.at(iy1, ix1, c));
                }
                out.at(y, x, c) = static_cast<float>(v);
            }
        }
    }
    return out;
}

/// Resize so the short side equals `size`, then take the centred size x size crop.
inline Image resize_center_crop(const Image& src, int size) {
    if (src.height == size && src.width == size) {
        return src;
    }
    const double side = std::min(src.height, src.width);
    const double y0 = (src.height - side) / 2.0;
    const double x0 = (src.width - side) / 2.0;
    return resample(src, y0, x0, side, side, size, size);
}

inline Image flip_horizontal(const Image& src) {
    Image out(src.height, src.width);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                out.at(y, x, c) = src.at(y, src.width - 1 - x, c);
            }
        }
    }
    return out;
}

/// Brightness, contrast and saturation factors (1 = unchanged), clamped to [0, 1].
inline Image color_jitter(const Image& src, float brightness, float contrast, float saturation) {
    Image out = src;
    double mean_grey = 0.0;
    for (std::size_t i = 0; i < out.data.size(); i += 3) {
        for (int c = 0; c < 3; ++c) {
            out.data[i + c] = std::clamp(out.data[i + c] * brightness, 0.0f, 1.0f);
        }
        mean_grey += 0.299 * out.data[i] + 0.587 * out.data[i + 1] + 0.114 * out.data[i + 2];
    }
    mean_grey /= std::max<std::size_t>(1, out.data.size() / 3);
    for (std::size_t i = 0; i < out.data.size(); i += 3) {
        for (int c = 0; c < 3; ++c) {
            out.data[i + c] = std::clamp(static_cast<float>((out.data[i + c] - mean_grey) * contrast + mean_grey),
                                         0.0f, 1.0f);
        }
        const float grey = 0.299f * out.data[i] + 0.587f * out.data[i + 1] + 0.114f * out.data[i + 2];
        for (int c = 0; c < 3; ++c) {
            out.data[i + c] = std::clamp((out.data[i + c] - grey) * saturation + grey, 0.0f, 1.0f);
        }
    }
    return out;
}

}  // namespace peadapt
