// SPDX-License-Identifier: Apache-2.0
//
// Binary PPM (P6) / PGM (P5) writers, maxval 255, plus layout shuffles
// between the storage convention [H,W,3] and the model convention [3,H,W].

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include "tensor.hpp"

namespace codiff::io {

inline uint8_t to_byte(float v) {
    float c = std::clamp(v, 0.0f, 1.0f);
    int b = static_cast<int>(c * 255.0f + 0.5f);
    return static_cast<uint8_t>(std::clamp(b, 0, 255));
}

// image: [H,W,3], values in [0,1] (clamped on write).
inline void write_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw std::invalid_argument("ppm: expected [H,W,3], got " + shape_str(image.shape));
    int h = image.dim(0), w = image.dim(1);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("ppm: cannot open '" + path + "' for writing");
    f << "P6\n" << w << " " << h << "\n255\n";
    const float* p = image.ptr();
    for (size_t i = 0; i < image.numel(); i++) f.put(static_cast<char>(to_byte(p[i])));
    if (!f) throw std::runtime_error("ppm: short write to '" + path + "'");
}

// map: [H,W], values in [0,1] (clamped on write).
inline void write_pgm(const std::string& path, const Tensor& map) {
    if (map.rank() != 2)
        throw std::invalid_argument("pgm: expected [H,W], got " + shape_str(map.shape));
    int h = map.dim(0), w = map.dim(1);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("pgm: cannot open '" + path + "' for writing");
    f << "P5\n" << w << " " << h << "\n255\n";
    const float* p = map.ptr();
    for (size_t i = 0; i < map.numel(); i++) f.put(static_cast<char>(to_byte(p[i])));
    if (!f) throw std::runtime_error("pgm: short write to '" + path + "'");
}

inline Tensor hwc_to_chw(const Tensor& img) {
    if (img.rank() != 3) throw std::invalid_argument("hwc_to_chw: expected rank 3");
    int h = img.dim(0), w = img.dim(1), c = img.dim(2);
    Tensor out = Tensor::zeros({c, h, w});
    const float* src = img.ptr();
    float* dst = out.ptr();
    for (int y = 0; y < h; y++)
        for (int x = 0; x < w; x++)
            for (int k = 0; k < c; k++) dst[(k * h + y) * w + x] = src[(y * w + x) * c + k];
    return out;
}

inline Tensor chw_to_hwc(const Tensor& img) {
    if (img.rank() != 3) throw std::invalid_argument("chw_to_hwc: expected rank 3");
    int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor out = Tensor::zeros({h, w, c});
    const float* src = img.ptr();
    float* dst = out.ptr();
    for (int k = 0; k < c; k++)
        for (int y = 0; y < h; y++)
            for (int x = 0; x < w; x++) dst[(y * w + x) * c + k] = src[(k * h + y) * w + x];
    return out;
}

}  // namespace codiff::io
