// image.hpp - RGB float images in [0,1] and binary PPM (P6) I/O
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "templet/errors.hpp"
#include "templet/tensor.hpp"

namespace templet {

// Interleaved RGB, row-major, values in [0,1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> data;  // height * width * 3

    Image() = default;
    Image(int w, int h, float fill = 0.0f)
        : width(w), height(h), data(static_cast<size_t>(w) * h * 3, fill) {}

    float& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    float at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * 3 + c];
    }

    Tensor to_tensor() const { return Tensor({height, width, 3}, data); }
    static Image from_tensor(const Tensor& t) {
        if (t.shape.size() != 3 || t.shape[2] != 3)
            throw ShapeError("image: expected (h,w,3), got " + t.shape_str());
        Image img(t.shape[1], t.shape[0]);
        img.data = t.data;
        return img;
    }

    Image clamped() const {
        Image out = *this;
        for (float& v : out.data) v = std::clamp(v, 0.0f, 1.0f);
        return out;
    }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// float -> 8-bit with round-half-up; 8-bit -> float as p/255.
inline uint8_t float_to_byte(float v) {
    int b = static_cast<int>(std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f);
    return static_cast<uint8_t>(std::clamp(b, 0, 255));
}

inline std::vector<uint8_t> encode_ppm(const Image& img) {
    std::string header = "P6\n" + std::to_string(img.width) + " " +
                         std::to_string(img.height) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.data.size());
    for (float v : img.data) out.push_back(float_to_byte(v));
    return out;
}

inline Image decode_ppm(const std::vector<uint8_t>& bytes) {
    size_t pos = 0;
    auto token = [&]() -> std::string {
        while (pos < bytes.size()) {
            char c = static_cast<char>(bytes[pos]);
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos;
            } else {
                break;
            }
        }
        std::string t;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])))
            t.push_back(static_cast<char>(bytes[pos++]));
        return t;
    };
    if (token() != "P6") throw ParseError("ppm: not a P6 file");
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(token());
        h = std::stoi(token());
        maxval = std::stoi(token());
    } catch (const std::exception&) {
        throw ParseError("ppm: malformed header");
    }
    if (w <= 0 || h <= 0 || maxval != 255) throw ParseError("ppm: unsupported header");
    ++pos;  // single whitespace after maxval
    size_t need = static_cast<size_t>(w) * h * 3;
    if (bytes.size() - pos < need) throw ParseError("ppm: truncated pixel data");
    Image img(w, h);
    for (size_t i = 0; i < need; ++i)
        img.data[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
    return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
    std::vector<uint8_t> bytes = encode_ppm(img);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return decode_ppm(bytes);
}

// Rec.601 luma.
inline std::vector<float> luminance(const Image& img) {
    std::vector<float> y(static_cast<size_t>(img.width) * img.height);
    for (int i = 0; i < img.height; ++i)
        for (int j = 0; j < img.width; ++j)
            y[static_cast<size_t>(i) * img.width + j] =
                0.299f * img.at(i, j, 0) + 0.587f * img.at(i, j, 1) + 0.114f * img.at(i, j, 2);
    return y;
}

// Sobel gradient magnitude on luminance, edge-clamped.
inline std::vector<float> sobel_magnitude(const Image& img) {
    std::vector<float> y = luminance(img);
    std::vector<float> mag(y.size());
    const int h = img.height, w = img.width;
    auto Y = [&](int i, int j) {
        i = std::clamp(i, 0, h - 1);
        j = std::clamp(j, 0, w - 1);
        return y[static_cast<size_t>(i) * w + j];
    };
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            float gx = -Y(i - 1, j - 1) - 2 * Y(i, j - 1) - Y(i + 1, j - 1) +
                       Y(i - 1, j + 1) + 2 * Y(i, j + 1) + Y(i + 1, j + 1);
            float gy = -Y(i - 1, j - 1) - 2 * Y(i - 1, j) - Y(i - 1, j + 1) +
                       Y(i + 1, j - 1) + 2 * Y(i + 1, j) + Y(i + 1, j + 1);
            mag[static_cast<size_t>(i) * w + j] = std::sqrt(gx * gx + gy * gy);
        }
    return mag;
}

// Separable Gaussian blur; sigma 0 is a no-op. Kernel radius 3*sigma.
inline Image gaussian_blur(const Image& img, float sigma) {
    if (sigma <= 0.0f) return img;
    int radius = std::max(1, static_cast<int>(std::ceil(3.0f * sigma)));
    std::vector<float> k(static_cast<size_t>(2 * radius + 1));
    float sum = 0.0f;
    for (int i = -radius; i <= radius; ++i) {
        float v = std::exp(-0.5f * (i * i) / (sigma * sigma));
        k[static_cast<size_t>(i + radius)] = v;
        sum += v;
    }
    for (float& v : k) v /= sum;

    Image tmp(img.width, img.height), out(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                float acc = 0.0f;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[static_cast<size_t>(i + radius)] *
                           img.at(y, std::clamp(x + i, 0, img.width - 1), c);
                tmp.at(y, x, c) = acc;
            }
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                float acc = 0.0f;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[static_cast<size_t>(i + radius)] *
                           tmp.at(std::clamp(y + i, 0, img.height - 1), x, c);
                out.at(y, x, c) = acc;
            }
    return out;
}

// Bilinear resize with half-pixel sample centers.
inline Image bilinear_resize(const Image& img, int out_w, int out_h) {
    Image out(out_w, out_h);
    const float sx = static_cast<float>(img.width) / out_w;
    const float sy = static_cast<float>(img.height) / out_h;
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            float fy = (y + 0.5f) * sy - 0.5f;
            float fx = (x + 0.5f) * sx - 0.5f;
            int y0 = static_cast<int>(std::floor(fy));
            int x0 = static_cast<int>(std::floor(fx));
            float wy = fy - y0, wx = fx - x0;
            int y1 = std::clamp(y0 + 1, 0, img.height - 1);
            int x1 = std::clamp(x0 + 1, 0, img.width - 1);
            y0 = std::clamp(y0, 0, img.height - 1);
            x0 = std::clamp(x0, 0, img.width - 1);
            for (int c = 0; c < 3; ++c) {
                float top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
                float bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
                out.at(y, x, c) = top * (1 - wy) + bot * wy;
            }
        }
    return out;
}

// Box downsample by an integer factor (average of each factor x factor block).
inline Image box_downsample(const Image& img, int factor) {
    if (img.width % factor || img.height % factor)
        throw ShapeError("box_downsample: " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + " not divisible by " +
                         std::to_string(factor));
    Image out(img.width / factor, img.height / factor);
    const float inv = 1.0f / static_cast<float>(factor * factor);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < 3; ++c) {
                float acc = 0.0f;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx)
                        acc += img.at(y * factor + dy, x * factor + dx, c);
                out.at(y, x, c) = acc * inv;
            }
    return out;
}

}  // namespace templet
