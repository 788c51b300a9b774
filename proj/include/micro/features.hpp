#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "micro/imaging.hpp"

namespace micro {

struct Keypoint {
    int x = 0;
    int y = 0;
    double score = 0.0;
};

struct FastConfig {
    double threshold = 50.0; // in [1, 255]
    int arc_length = 9;      // in [9, 12]
    int nms_radius = 3;      // Chebyshev radius
};

// The feedback-controlled detector threshold. The same controller regulates
// FAST (clamp [1, 255]) and the learned detector's tau (clamp [0.1, 10]).
struct DynThreshState {
    double threshold = 50.0;
    double up_rate = 1.1;
    double down_rate = 0.9;
    int min_count = 1000;
    int max_count = 2000;
    double clamp_lo = 1.0;
    double clamp_hi = 255.0;
};

inline DynThreshState dyn_thresh_update(const DynThreshState& state, int observed_count) {
    if (observed_count < 0) throw std::invalid_argument("dyn_thresh_update: negative count");
    DynThreshState next = state;
    if (observed_count > state.max_count)
        next.threshold = state.threshold * state.up_rate;
    else if (observed_count < state.min_count)
        next.threshold = state.threshold * state.down_rate;
    next.threshold = std::clamp(next.threshold, state.clamp_lo, state.clamp_hi);
    return next;
}

// 16-pixel Bresenham circle of radius 3, clockwise from 12 o'clock.
inline const int (&fast_circle())[16][2] {
    static const int offsets[16][2] = {
        {0, -3}, {1, -3}, {2, -2}, {3, -1}, {3, 0},  {3, 1},  {2, 2},  {1, 3},
        {0, 3},  {-1, 3}, {-2, 2}, {-3, 1}, {-3, 0}, {-3, -1}, {-2, -2}, {-1, -3}};
    return offsets;
}

struct CornerDecision {
    bool is_corner = false;
    double score = 0.0;
};

// Segment test: a contiguous circular arc of >= arc_length pixels, all
// brighter than p + t or all darker than p - t. Score = sum of |c - p| - t
// over the qualifying maximal arc (largest such sum when several qualify).
inline CornerDecision fast_segment_test(const GreyImage& img, int x, int y,
                                        const FastConfig& cfg) {
    if (x < 3 || y < 3 || x >= img.width - 3 || y >= img.height - 3)
        throw std::domain_error("fast_segment_test: point within 3 px of border");
    const auto& circle = fast_circle();
    const double p = static_cast<double>(img.at(x, y));
    const double t = cfg.threshold;

    double diff[16];
    int state[16]; // +1 bright, -1 dark, 0 neither
    for (int i = 0; i < 16; ++i) {
        const double c = static_cast<double>(img.at(x + circle[i][0], y + circle[i][1]));
        diff[i] = c - p;
        state[i] = diff[i] > t ? 1 : (diff[i] < -t ? -1 : 0);
    }

    CornerDecision out;
    for (int side = -1; side <= 1; side += 2) {
        // anchor at a non-`side` position and walk maximal circular runs of `side`
        int anchor = -1;
        for (int j = 0; j < 16; ++j)
            if (state[j] != side) { anchor = j; break; }
        if (anchor < 0) {
            // entire circle qualifies: one run of 16
            double s = 0.0;
            for (int j = 0; j < 16; ++j) s += std::abs(diff[j]) - t;
            if (16 >= cfg.arc_length && (!out.is_corner || s > out.score))
                out = {true, s};
            continue;
        }
        for (int step = 0; step < 16;) {
            const int idx = (anchor + step) % 16;
            if (state[idx] != side) { ++step; continue; }
            int len = 0;
            double s = 0.0;
            while (len < 16 && state[(idx + len) % 16] == side) {
                s += std::abs(diff[(idx + len) % 16]) - t;
                ++len;
            }
            if (len >= cfg.arc_length && (!out.is_corner || s > out.score))
                out = {true, s};
            step += len;
        }
    }
    return out;
}

namespace detail {

// Priority order for non-maximum suppression: higher score wins; ties go to
// the smaller (y, x) so results are deterministic.
inline bool nms_beats(const Keypoint& a, const Keypoint& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
}

inline std::vector<Keypoint> nms(const std::vector<Keypoint>& raw, int radius,
                                 int width, int height) {
    if (raw.empty()) return {};
    // score grid for neighborhood lookups
    std::vector<int> grid(static_cast<size_t>(width) * height, -1);
    for (size_t i = 0; i < raw.size(); ++i)
        grid[static_cast<size_t>(raw[i].y) * width + raw[i].x] = static_cast<int>(i);
    std::vector<Keypoint> kept;
    for (const Keypoint& kp : raw) {
        bool is_max = true;
        for (int dy = -radius; dy <= radius && is_max; ++dy) {
            const int ny = kp.y + dy;
            if (ny < 0 || ny >= height) continue;
            for (int dx = -radius; dx <= radius; ++dx) {
                const int nx = kp.x + dx;
                if (nx < 0 || nx >= width || (dx == 0 && dy == 0)) continue;
                const int j = grid[static_cast<size_t>(ny) * width + nx];
                if (j >= 0 && nms_beats(raw[static_cast<size_t>(j)], kp)) {
                    is_max = false;
                    break;
                }
            }
        }
        if (is_max) kept.push_back(kp);
    }
    return kept; // raw is scanned in (y, x) order, so kept stays sorted
}

} // namespace detail

// Full-frame FAST with score-based non-maximum suppression; output sorted by (y, x).
inline std::vector<Keypoint> fast_detect(const GreyImage& img, const FastConfig& cfg) {
    if (img.width < 7 || img.height < 7)
        throw std::invalid_argument("fast_detect: image must be at least 7x7");
    std::vector<Keypoint> raw;
    for (int y = 3; y < img.height - 3; ++y) {
        for (int x = 3; x < img.width - 3; ++x) {
            CornerDecision d = fast_segment_test(img, x, y, cfg);
            if (d.is_corner) raw.push_back({x, y, d.score});
        }
    }
    return detail::nms(raw, cfg.nms_radius, img.width, img.height);
}

} // namespace micro
