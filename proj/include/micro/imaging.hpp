#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "micro/rng.hpp"

namespace micro {

// 8-bit single-channel raster, row-major.
struct GreyImage {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> data;

    GreyImage() = default;
    GreyImage(int w, int h, uint8_t fill = 0)
        : width(w), height(h), data(static_cast<size_t>(w) * h, fill) {}

    uint8_t& at(int x, int y) { return data[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int x, int y) const { return data[static_cast<size_t>(y) * width + x]; }

    bool in_bounds(int x, int y) const {
        return x >= 0 && x < width && y >= 0 && y < height;
    }

    bool operator==(const GreyImage& o) const {
        return width == o.width && height == o.height && data == o.data;
    }
};

namespace detail {

inline int pgm_get(std::istream& in, long& offset) {
    int c = in.get();
    if (c != EOF) ++offset;
    return c;
}

// PGM token reader: skips whitespace and '#' comments, returns a
// non-negative integer; reports the byte offset of any malformation.
inline long pgm_read_int(std::istream& in, long& offset, const std::string& path,
                         const char* what) {
    int c = pgm_get(in, offset);
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = pgm_get(in, offset);
        }
        c = pgm_get(in, offset);
    }
    if (c == EOF || !std::isdigit(c))
        throw std::runtime_error(path + ": malformed PGM header, expected " +
                                 std::string(what) + " at byte " + std::to_string(offset - 1));
    long v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = pgm_get(in, offset);
    }
    if (c == EOF)
        throw std::runtime_error(path + ": truncated PGM header at byte " +
                                 std::to_string(offset));
    return v;
}

} // namespace detail

// Binary PGM (P5, maxval 255) loader.
inline GreyImage load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open file");
    long offset = 0;
    int m0 = detail::pgm_get(in, offset);
    int m1 = detail::pgm_get(in, offset);
    if (m0 != 'P' || m1 != '5')
        throw std::runtime_error(path + ": bad magic at byte 0, want 'P5'");
    long w = detail::pgm_read_int(in, offset, path, "width");
    long h = detail::pgm_read_int(in, offset, path, "height");
    long maxval = detail::pgm_read_int(in, offset, path, "maxval");
    // pgm_read_int consumed exactly one whitespace byte after the maxval.
    if (maxval != 255)
        throw std::runtime_error(path + ": unsupported maxval " + std::to_string(maxval) +
                                 " at byte " + std::to_string(offset - 1) + ", want 255");
    if (w <= 0 || h <= 0)
        throw std::runtime_error(path + ": non-positive dimensions in header");
    GreyImage img(static_cast<int>(w), static_cast<int>(h));
    in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.data.size()))
        throw std::runtime_error(path + ": truncated payload at byte " +
                                 std::to_string(offset + in.gcount()) + ", want " +
                                 std::to_string(img.data.size()) + " pixel bytes");
    return img;
}

inline void save_pgm(const GreyImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data.data()),
              static_cast<std::streamsize>(img.data.size()));
    if (!out) throw std::runtime_error(path + ": write failed");
}

// Additive i.i.d. Gaussian pixel noise; round half away from zero, then clamp.
inline GreyImage add_gaussian_noise(const GreyImage& img, double sigma, Rng& rng) {
    if (!(sigma >= 0.0) || !std::isfinite(sigma))
        throw std::invalid_argument("add_gaussian_noise: sigma must be finite and >= 0");
    GreyImage out(img.width, img.height);
    if (sigma == 0.0) {
        out.data = img.data;
        return out;
    }
    for (size_t i = 0; i < img.data.size(); ++i) {
        const double v = static_cast<double>(img.data[i]) + sigma * rng.normal();
        const long r = std::lround(v); // lround: half away from zero
        out.data[i] = static_cast<uint8_t>(std::clamp(r, 0l, 255l));
    }
    return out;
}

// Random-walk noise level: sigma steps by X in {-1, 0, +1}, clamped to [0, limit].
struct NoiseWalkState {
    double sigma = 0.0;
    double limit = 0.0;
    Rng rng;

    NoiseWalkState(double limit_, uint64_t seed, double sigma0 = 0.0)
        : sigma(sigma0), limit(limit_), rng(seed) {
        if (!(limit_ > 0.0)) throw std::invalid_argument("NoiseWalkState: limit must be > 0");
        sigma = std::clamp(sigma, 0.0, limit);
    }
};

inline void advance_noise_walk(NoiseWalkState& state) {
    const double x = static_cast<double>(state.rng.randint(3)) - 1.0;
    state.sigma = std::clamp(state.sigma + x, 0.0, state.limit);
}

} // namespace micro
