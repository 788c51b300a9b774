#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "micro/features.hpp"
#include "micro/imaging.hpp"
#include "micro/scenes.hpp"

using micro::FastConfig;
using micro::GreyImage;
using micro::Keypoint;
using micro::Rng;

namespace {

// Naive oracle for the segment test: doubled-array scan over maximal runs,
// written independently of the library's anchor-walk implementation.
bool oracle_segment_test(const GreyImage& img, int x, int y, double t, int arc_len,
                         double* score_out) {
    const auto& circle = micro::fast_circle();
    const double p = img.at(x, y);
    double diff[32];
    int st[32];
    for (int i = 0; i < 16; ++i) {
        const double c = img.at(x + circle[i][0], y + circle[i][1]);
        diff[i] = diff[i + 16] = c - p;
        st[i] = st[i + 16] = (c - p > t) ? 1 : ((c - p < -t) ? -1 : 0);
    }
    bool corner = false;
    double best = 0.0;
    for (int side = -1; side <= 1; side += 2) {
        int total_side = 0;
        for (int i = 0; i < 16; ++i) total_side += (st[i] == side);
        if (total_side == 16) {
            double s = 0.0;
            for (int i = 0; i < 16; ++i) s += std::abs(diff[i]) - t;
            if (!corner || s > best) best = s;
            corner = true;
            continue;
        }
        for (int start = 0; start < 16; ++start) {
            const bool run_start = st[start] == side && st[(start + 15) % 16] != side;
            if (!run_start) continue;
            int len = 0;
            double s = 0.0;
            while (len < 16 && st[start + len] == side) {
                s += std::abs(diff[start + len]) - t;
                ++len;
            }
            if (len >= arc_len) {
                if (!corner || s > best) best = s;
                corner = true;
            }
        }
    }
    if (score_out) *score_out = corner ? best : 0.0;
    return corner;
}

// Exhaustive all-pairs NMS oracle.
std::vector<Keypoint> oracle_detect(const GreyImage& img, const FastConfig& cfg) {
    std::vector<Keypoint> raw;
    for (int y = 3; y < img.height - 3; ++y)
        for (int x = 3; x < img.width - 3; ++x) {
            double s = 0.0;
            if (oracle_segment_test(img, x, y, cfg.threshold, cfg.arc_length, &s))
                raw.push_back({x, y, s});
        }
    std::vector<Keypoint> kept;
    for (const Keypoint& a : raw) {
        bool is_max = true;
        for (const Keypoint& b : raw) {
            if (&a == &b) continue;
            if (std::abs(a.x - b.x) <= cfg.nms_radius && std::abs(a.y - b.y) <= cfg.nms_radius) {
                const bool b_beats = (b.score > a.score) ||
                                     (b.score == a.score &&
                                      (b.y < a.y || (b.y == a.y && b.x < a.x)));
                if (b_beats) {
                    is_max = false;
                    break;
                }
            }
        }
        if (is_max) kept.push_back(a);
    }
    return kept;
}

GreyImage random_image(int w, int h, Rng& rng) {
    GreyImage img(w, h);
    for (auto& p : img.data) p = static_cast<uint8_t>(rng.randint(256));
    return img;
}

GreyImage blob_image(int w, int h, int n_blobs, Rng& rng) {
    GreyImage img(w, h, 30);
    for (int b = 0; b < n_blobs; ++b) {
        const double cx = rng.uniform(4.0, w - 4.0);
        const double cy = rng.uniform(4.0, h - 4.0);
        const double amp = rng.uniform(60.0, 200.0);
        for (int y = std::max(0, int(cy) - 4); y < std::min(h, int(cy) + 5); ++y)
            for (int x = std::max(0, int(cx) - 4); x < std::min(w, int(cx) + 5); ++x) {
                const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                const double v = img.at(x, y) + amp * std::exp(-r2 / 2.0);
                img.at(x, y) = static_cast<uint8_t>(std::clamp(std::lround(v), 0l, 255l));
            }
    }
    return img;
}

bool same_keypoints(const std::vector<Keypoint>& a, const std::vector<Keypoint>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].x != b[i].x || a[i].y != b[i].y ||
            std::abs(a[i].score - b[i].score) > 1e-9)
            return false;
    return true;
}

} // namespace

TEST_CASE("segment test: constant image has no corners") {
    GreyImage img(16, 16, 100);
    FastConfig cfg;
    auto d = micro::fast_segment_test(img, 8, 8, cfg);
    REQUIRE_FALSE(d.is_corner);
    REQUIRE(d.score == 0.0);
}

TEST_CASE("segment test: explicit 12-pixel bright arc") {
    GreyImage img(9, 9, 0);
    const auto& circle = micro::fast_circle();
    for (int i = 0; i < 12; ++i) img.at(4 + circle[i][0], 4 + circle[i][1]) = 255;
    FastConfig cfg;
    cfg.threshold = 50.0;
    auto d = micro::fast_segment_test(img, 4, 4, cfg);
    REQUIRE(d.is_corner);
    REQUIRE(d.score == Catch::Approx(12 * (255.0 - 50.0)));

    cfg.threshold = 255.0; // contrast can no longer exceed the threshold
    REQUIRE_FALSE(micro::fast_segment_test(img, 4, 4, cfg).is_corner);
}

TEST_CASE("segment test: border pixels rejected") {
    GreyImage img(16, 16, 0);
    FastConfig cfg;
    REQUIRE_THROWS_AS(micro::fast_segment_test(img, 2, 8, cfg), std::domain_error);
    REQUIRE_THROWS_AS(micro::fast_segment_test(img, 8, 13, cfg), std::domain_error);
    REQUIRE_NOTHROW(micro::fast_segment_test(img, 3, 12, cfg));
}

TEST_CASE("fast_detect: constant image yields nothing, tiny image rejected") {
    GreyImage img(32, 32, 77);
    REQUIRE(micro::fast_detect(img, FastConfig{}).empty());
    GreyImage tiny(6, 8, 0);
    REQUIRE_THROWS_AS(micro::fast_detect(tiny, FastConfig{}), std::invalid_argument);
}

TEST_CASE("fast_detect equals the naive oracle on random images") {
    Rng rng(2024);
    for (int trial = 0; trial < 50; ++trial) {
        GreyImage img = (trial % 2 == 0) ? random_image(64, 64, rng)
                                         : blob_image(64, 64, 25, rng);
        FastConfig cfg;
        cfg.threshold = (trial % 3 == 0) ? 25.0 : 50.0;
        cfg.arc_length = (trial % 5 == 0) ? 12 : 9;
        auto got = micro::fast_detect(img, cfg);
        auto want = oracle_detect(img, cfg);
        REQUIRE(same_keypoints(got, want));
    }
}

TEST_CASE("fast_detect output respects border invariant and (y,x) order") {
    Rng rng(99);
    GreyImage img = blob_image(96, 80, 60, rng);
    FastConfig cfg;
    cfg.threshold = 20.0;
    auto kps = micro::fast_detect(img, cfg);
    REQUIRE_FALSE(kps.empty());
    for (size_t i = 0; i < kps.size(); ++i) {
        REQUIRE(kps[i].x >= 3);
        REQUIRE(kps[i].y >= 3);
        REQUIRE(kps[i].x < img.width - 3);
        REQUIRE(kps[i].y < img.height - 3);
        if (i > 0)
            REQUIRE((kps[i - 1].y < kps[i].y ||
                     (kps[i - 1].y == kps[i].y && kps[i - 1].x < kps[i].x)));
    }
}

TEST_CASE("fast_detect count is non-increasing in threshold") {
    Rng rng(5);
    GreyImage img = blob_image(128, 128, 80, rng);
    size_t prev = SIZE_MAX;
    for (double t : {10.0, 20.0, 40.0, 80.0, 160.0}) {
        FastConfig cfg;
        cfg.threshold = t;
        const size_t n = micro::fast_detect(img, cfg).size();
        REQUIRE(n <= prev);
        prev = n;
    }
}

TEST_CASE("dyn_thresh_update anchors") {
    micro::DynThreshState st;
    st.threshold = 50.0;
    REQUIRE(micro::dyn_thresh_update(st, 2500).threshold == Catch::Approx(55.0));
    REQUIRE(micro::dyn_thresh_update(st, 1500).threshold == Catch::Approx(50.0));
    REQUIRE(micro::dyn_thresh_update(st, 1000).threshold == Catch::Approx(50.0));
    REQUIRE(micro::dyn_thresh_update(st, 2000).threshold == Catch::Approx(50.0));
    REQUIRE(micro::dyn_thresh_update(st, 500).threshold == Catch::Approx(45.0));
}

TEST_CASE("dyn_thresh_update stays clamped forever") {
    micro::DynThreshState st;
    st.threshold = 128.0;
    for (int i = 0; i < 500; ++i) {
        st = micro::dyn_thresh_update(st, 1 << 20); // force up
        REQUIRE(st.threshold <= 255.0);
        REQUIRE(st.threshold >= 1.0);
    }
    REQUIRE(st.threshold == Catch::Approx(255.0));
    for (int i = 0; i < 500; ++i) {
        st = micro::dyn_thresh_update(st, 0); // force down
        REQUIRE(st.threshold >= 1.0);
    }
    REQUIRE(st.threshold == Catch::Approx(1.0));

    micro::DynThreshState slipd;
    slipd.threshold = 2.0;
    slipd.clamp_lo = 0.1;
    slipd.clamp_hi = 10.0;
    for (int i = 0; i < 200; ++i) slipd = micro::dyn_thresh_update(slipd, 0);
    REQUIRE(slipd.threshold == Catch::Approx(0.1));
    for (int i = 0; i < 200; ++i) slipd = micro::dyn_thresh_update(slipd, 1 << 20);
    REQUIRE(slipd.threshold == Catch::Approx(10.0));
}

TEST_CASE("dyn_thresh_update is pure") {
    micro::DynThreshState st;
    st.threshold = 50.0;
    auto a = micro::dyn_thresh_update(st, 2500);
    auto b = micro::dyn_thresh_update(st, 2500);
    REQUIRE(a.threshold == b.threshold);
    REQUIRE(st.threshold == 50.0);
}

TEST_CASE("dynamic thresholding holds the keypoint count in band on a noisy sequence") {
    // Static sensor noise at sigma = 40 on a sparse blob scene: a fixed
    // threshold of 50 sees mostly blob rims and sits just under the band,
    // while the controller walks the threshold down until the count settles
    // inside [min_count, max_count] and keeps it there.
    micro::SceneSpec spec = micro::bundled_scene_spec();
    spec.n_points = 800;
    micro::Rng scene_rng(micro::kBundledSceneSeed);
    micro::SceneData scene = micro::generate_scene(spec, scene_rng);

    micro::Rng noise_rng(33);
    std::vector<micro::GreyImage> noisy;
    noisy.reserve(scene.frames.size());
    for (const micro::GreyImage& f : scene.frames)
        noisy.push_back(micro::add_gaussian_noise(f, 40.0, noise_rng));
    REQUIRE(noisy.size() == 100);

    micro::DynThreshState dt;
    dt.threshold = 50.0;
    const int burn_in = 10;
    int in_band_dynamic = 0;
    int in_band_fixed = 0;
    for (size_t k = 0; k < noisy.size(); ++k) {
        FastConfig cfg;
        cfg.threshold = dt.threshold;
        const int count = static_cast<int>(micro::fast_detect(noisy[k], cfg).size());

        FastConfig fixed;
        fixed.threshold = 50.0;
        const int fixed_count = static_cast<int>(micro::fast_detect(noisy[k], fixed).size());

        if (k >= burn_in) {
            in_band_dynamic += count >= dt.min_count && count <= dt.max_count;
            in_band_fixed += fixed_count >= dt.min_count && fixed_count <= dt.max_count;
        }
        dt = micro::dyn_thresh_update(dt, count);
    }
    const int scored_frames = static_cast<int>(noisy.size()) - burn_in;
    CAPTURE(in_band_dynamic, in_band_fixed, scored_frames);
    CHECK(in_band_dynamic * 5 >= scored_frames * 4); // >= 80%
    CHECK(in_band_fixed < in_band_dynamic);
}
