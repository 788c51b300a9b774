#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "micro/geometry.hpp"
#include "micro/imaging.hpp"
#include "micro/rng.hpp"

namespace micro {

// One leg of a camera path: yaw by turn_deg, then advance `frames` steps of
// `step` scene units along the new heading.
struct PathSegment {
    int frames = 0;
    double step = 0.0;
    double turn_deg = 0.0;
};

struct SceneSpec {
    int n_points = 5000;
    Eigen::Vector3d box_min{-30.0, -30.0, 4.0};
    Eigen::Vector3d box_max{30.0, 30.0, 70.0};
    std::vector<PathSegment> path{{99, 0.25, 0.0}};
    double blob_sigma = 1.0;
    double amplitude_lo = 60.0, amplitude_hi = 200.0;
    // Skew of the amplitude distribution: amplitude = lo + (hi-lo)*u^gamma for
    // u ~ U[0,1). 1 = uniform; >1 concentrates mass toward amplitude_lo, the
    // "many weak features, few strong ones" shape of natural imagery.
    double amplitude_gamma = 1.0;
    // Camera-carried light: when > 0, the rendered amplitude of a point at
    // camera depth z is amplitude * (headlamp_z0 / z)^2, capped at
    // kHeadlampMax. Inverse-square falloff from onboard illumination keeps
    // the detectable region a bubble that travels with the camera, so feature
    // counts stay stationary along arbitrarily long paths and every visible
    // feature carries usable parallax. 0 renders distance-independent
    // amplitudes.
    double headlamp_z0 = 0.0;
    int background = 30;
    int width = 256, height = 256;
    CameraIntrinsics intrinsics;
};

// Brightness cap under headlamp falloff, below saturation so a near feature
// still renders as a peak over the background rather than a clipped plateau.
constexpr double kHeadlampMax = 220.0;

struct SceneData {
    std::vector<GreyImage> frames;
    std::vector<PoseSE3> poses; // camera-to-world, one per frame
    Trajectory gt;              // translation column of each pose
    CameraIntrinsics intrinsics;
    std::vector<Eigen::Vector3d> points;
    // exact projected positions: indexed [frame][point], valid where vis is set
    std::vector<std::vector<double>> u, v;
    std::vector<std::vector<uint8_t>> vis;
    bool empty_frame_warning = false;
};

struct CorrespondencePair {
    int n = 0;                  // patch side length
    std::vector<double> x1, x2; // row-major n*n patches, values in [0,1]
    int frame = 0, point = 0;   // provenance within the scene
};

namespace detail {

constexpr double kZNear = 0.5;

inline Eigen::Matrix3d yaw_rotation(double radians) {
    return Eigen::AngleAxisd(radians, Eigen::Vector3d::UnitY()).toRotationMatrix();
}

inline bool project(const CameraIntrinsics& K, const Eigen::Vector3d& x_cam, double& u,
                    double& v) {
    if (x_cam.z() < kZNear) return false;
    u = K.fx * x_cam.x() / x_cam.z() + K.cx;
    v = K.fy * x_cam.y() / x_cam.z() + K.cy;
    return true;
}

} // namespace detail

inline std::vector<PoseSE3> path_poses(const SceneSpec& spec) {
    std::vector<PoseSE3> poses;
    Eigen::Vector3d pos = Eigen::Vector3d::Zero();
    double heading = 0.0;
    poses.push_back({detail::yaw_rotation(heading), pos});
    for (const PathSegment& seg : spec.path) {
        heading += seg.turn_deg * M_PI / 180.0;
        const Eigen::Matrix3d R = detail::yaw_rotation(heading);
        const Eigen::Vector3d dir = R * Eigen::Vector3d::UnitZ();
        for (int i = 0; i < seg.frames; ++i) {
            pos += seg.step * dir;
            poses.push_back({R, pos});
        }
    }
    return poses;
}

// Random point field in a box, rendered per frame through a pinhole camera as
// additive Gaussian blobs over a flat background. Projections are recorded
// exactly so downstream consumers get noise-free correspondences.
inline SceneData generate_scene(const SceneSpec& spec, Rng& rng, int jobs = 1) {
    if (spec.n_points <= 0) throw std::invalid_argument("generate_scene: n_points must be > 0");
    if (spec.width < 64 || spec.height < 64)
        throw std::invalid_argument("generate_scene: image must be at least 64x64");
    if (jobs < 1) jobs = 1;

    SceneData scene;
    scene.intrinsics = spec.intrinsics;
    scene.poses = path_poses(spec);
    for (const PoseSE3& p : scene.poses) scene.gt.positions.push_back(p.t);

    scene.points.reserve(spec.n_points);
    for (int i = 0; i < spec.n_points; ++i)
        scene.points.emplace_back(rng.uniform(spec.box_min.x(), spec.box_max.x()),
                                  rng.uniform(spec.box_min.y(), spec.box_max.y()),
                                  rng.uniform(spec.box_min.z(), spec.box_max.z()));
    std::vector<double> amplitude(spec.n_points);
    for (double& a : amplitude)
        a = spec.amplitude_lo + (spec.amplitude_hi - spec.amplitude_lo) *
                                    std::pow(rng.uniform(), spec.amplitude_gamma);

    const int nf = static_cast<int>(scene.poses.size());
    scene.frames.assign(nf, GreyImage{});
    scene.u.assign(nf, std::vector<double>(spec.n_points, 0.0));
    scene.v.assign(nf, std::vector<double>(spec.n_points, 0.0));
    scene.vis.assign(nf, std::vector<uint8_t>(spec.n_points, 0));

    const int radius = std::max(2, static_cast<int>(std::ceil(4.0 * spec.blob_sigma)));
    const double inv2s2 = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);

    auto render_frame = [&](int f) {
        const PoseSE3& pose = scene.poses[f];
        const Eigen::Matrix3d Rcw = pose.R.transpose(); // world-to-camera
        std::vector<double> acc(size_t(spec.width) * spec.height,
                                static_cast<double>(spec.background));
        for (int p = 0; p < spec.n_points; ++p) {
            const Eigen::Vector3d x_cam = Rcw * (scene.points[p] - pose.t);
            double uu, vv;
            if (!detail::project(spec.intrinsics, x_cam, uu, vv)) continue;
            if (uu < 0.0 || uu >= spec.width || vv < 0.0 || vv >= spec.height) continue;
            scene.u[f][p] = uu;
            scene.v[f][p] = vv;
            scene.vis[f][p] = 1;
            double amp = amplitude[p];
            if (spec.headlamp_z0 > 0.0) {
                const double r = spec.headlamp_z0 / x_cam.z();
                amp = std::min(amp * r * r, kHeadlampMax);
                if (amp < 0.5) continue; // below quantization; skip the stamp
            }
            const int x0 = std::max(0, static_cast<int>(std::floor(uu)) - radius);
            const int x1 = std::min(spec.width - 1, static_cast<int>(std::floor(uu)) + radius);
            const int y0 = std::max(0, static_cast<int>(std::floor(vv)) - radius);
            const int y1 = std::min(spec.height - 1, static_cast<int>(std::floor(vv)) + radius);
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const double dx = x - uu, dy = y - vv;
                    acc[size_t(y) * spec.width + x] +=
                        amp * std::exp(-(dx * dx + dy * dy) * inv2s2);
                }
        }
        GreyImage img;
        img.width = spec.width;
        img.height = spec.height;
        img.data.resize(acc.size());
        for (size_t i = 0; i < acc.size(); ++i)
            img.data[i] = static_cast<uint8_t>(std::clamp(std::lround(acc[i]), 0l, 255l));
        scene.frames[f] = std::move(img);
    };

    if (jobs == 1) {
        for (int f = 0; f < nf; ++f) render_frame(f);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t)
            pool.emplace_back([&, t] {
                for (int f = t; f < nf; f += jobs) render_frame(f);
            });
        for (std::thread& th : pool) th.join();
    }

    for (int f = 0; f < nf; ++f) {
        bool any = false;
        for (int p = 0; p < spec.n_points && !any; ++p) any = scene.vis[f][p] != 0;
        if (!any) scene.empty_frame_warning = true;
    }
    return scene;
}

// Patch pairs around the same world point observed in consecutive frames;
// inputs for the learned-detector objective. Patches are n x n, fully inside
// both images, normalized to [0,1].
inline std::vector<CorrespondencePair> mine_pairs(const SceneData& scene, int n,
                                                  int max_pairs, Rng& rng) {
    if (n < 3 || n % 2 == 0)
        throw std::invalid_argument("mine_pairs: patch side must be odd and >= 3");
    if (scene.frames.size() < 2)
        throw std::invalid_argument("mine_pairs: need at least two frames");

    const int half = n / 2;
    const int w = scene.frames.front().width, h = scene.frames.front().height;
    auto patch_center = [&](double u, double v, int& cx, int& cy) {
        cx = static_cast<int>(std::lround(u));
        cy = static_cast<int>(std::lround(v));
        return cx - half >= 0 && cx + half < w && cy - half >= 0 && cy + half < h;
    };

    struct Candidate {
        int frame, point;
        int cx1, cy1, cx2, cy2;
    };
    std::vector<Candidate> cands;
    const int npts = static_cast<int>(scene.points.size());
    for (size_t f = 0; f + 1 < scene.frames.size(); ++f) {
        for (int p = 0; p < npts; ++p) {
            if (!scene.vis[f][p] || !scene.vis[f + 1][p]) continue;
            int cx1, cy1, cx2, cy2;
            if (!patch_center(scene.u[f][p], scene.v[f][p], cx1, cy1)) continue;
            if (!patch_center(scene.u[f + 1][p], scene.v[f + 1][p], cx2, cy2)) continue;
            cands.push_back({static_cast<int>(f), p, cx1, cy1, cx2, cy2});
        }
    }

    std::vector<size_t> order(cands.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    const size_t take = std::min<size_t>(max_pairs, cands.size());

    auto extract = [&](const GreyImage& img, int cx, int cy) {
        std::vector<double> patch;
        patch.reserve(size_t(n) * n);
        for (int y = cy - half; y <= cy + half; ++y)
            for (int x = cx - half; x <= cx + half; ++x)
                patch.push_back(img.at(x, y) / 255.0);
        return patch;
    };

    std::vector<CorrespondencePair> pairs;
    pairs.reserve(take);
    for (size_t i = 0; i < take; ++i) {
        const Candidate& c = cands[order[i]];
        CorrespondencePair pr;
        pr.n = n;
        pr.frame = c.frame;
        pr.point = c.point;
        pr.x1 = extract(scene.frames[c.frame], c.cx1, c.cy1);
        pr.x2 = extract(scene.frames[c.frame + 1], c.cx2, c.cy2);
        pairs.push_back(std::move(pr));
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Odometry-benchmark directory format: image_0/*.pgm + poses.txt + calib.txt
// ---------------------------------------------------------------------------

struct KittiSequence {
    std::vector<std::string> frame_paths;
    std::vector<PoseSE3> poses;
    CameraIntrinsics intrinsics;

    Trajectory gt_trajectory() const {
        Trajectory t;
        for (const PoseSE3& p : poses) t.positions.push_back(p.t);
        return t;
    }
};

inline KittiSequence load_kitti(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error(dir + ": not a directory");

    // frames live in an image subdirectory; prefer the conventional image_0
    fs::path image_dir;
    if (fs::is_directory(fs::path(dir) / "image_0")) {
        image_dir = fs::path(dir) / "image_0";
    } else {
        std::vector<fs::path> subdirs;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_directory()) subdirs.push_back(e.path());
        std::sort(subdirs.begin(), subdirs.end());
        for (const fs::path& s : subdirs) {
            for (const auto& e : fs::directory_iterator(s))
                if (e.path().extension() == ".pgm") {
                    image_dir = s;
                    break;
                }
            if (!image_dir.empty()) break;
        }
        if (image_dir.empty())
            throw std::runtime_error(dir + ": no image subdirectory with .pgm frames");
    }

    KittiSequence seq;
    for (const auto& e : fs::directory_iterator(image_dir))
        if (e.path().extension() == ".pgm") seq.frame_paths.push_back(e.path().string());
    std::sort(seq.frame_paths.begin(), seq.frame_paths.end());

    const fs::path poses_path = fs::path(dir) / "poses.txt";
    std::ifstream poses(poses_path);
    if (!poses) throw std::runtime_error(poses_path.string() + ": cannot open");
    std::string line;
    int lineno = 0;
    while (std::getline(poses, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ss(line);
        double m[12];
        int got = 0;
        while (got < 12 && (ss >> m[got])) ++got;
        double extra;
        if (got != 12 || (ss >> extra))
            throw std::runtime_error(poses_path.string() + ":" + std::to_string(lineno) +
                                     ": expected 12 numbers per pose row");
        PoseSE3 p;
        p.R << m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10];
        p.t << m[3], m[7], m[11];
        if (!is_rotation(p.R, 1e-4))
            throw std::runtime_error(poses_path.string() + ":" + std::to_string(lineno) +
                                     ": rotation is not orthonormal");
        seq.poses.push_back(p);
    }
    if (seq.poses.size() != seq.frame_paths.size())
        throw std::runtime_error(dir + ": pose count (" + std::to_string(seq.poses.size()) +
                                 ") does not match frame count (" +
                                 std::to_string(seq.frame_paths.size()) + ")");

    const fs::path calib_path = fs::path(dir) / "calib.txt";
    std::ifstream calib(calib_path);
    if (!calib) throw std::runtime_error(calib_path.string() + ": cannot open");
    bool found = false;
    while (std::getline(calib, line)) {
        std::istringstream ss(line);
        std::string label;
        if (!(ss >> label) || label.empty() || label[0] != 'P') continue;
        double p[12];
        int got = 0;
        while (got < 12 && (ss >> p[got])) ++got;
        if (got != 12) throw std::runtime_error(calib_path.string() + ": projection line needs 12 numbers");
        seq.intrinsics.fx = p[0];
        seq.intrinsics.cx = p[2];
        seq.intrinsics.fy = p[5];
        seq.intrinsics.cy = p[6];
        found = true;
        break;
    }
    if (!found) throw std::runtime_error(calib_path.string() + ": no projection line found");
    if (seq.intrinsics.fx <= 0.0 || seq.intrinsics.fy <= 0.0)
        throw std::runtime_error(calib_path.string() + ": focal lengths must be positive");
    return seq;
}

// Write a generated scene in the loader's directory layout.
inline void export_scene(const SceneData& scene, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "image_0");
    char name[32];
    for (size_t f = 0; f < scene.frames.size(); ++f) {
        std::snprintf(name, sizeof(name), "%06zu.pgm", f);
        save_pgm(scene.frames[f], (fs::path(dir) / "image_0" / name).string());
    }
    std::ofstream poses(fs::path(dir) / "poses.txt");
    poses.precision(17);
    for (const PoseSE3& p : scene.poses) {
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) poses << p.R(r, c) << " ";
            poses << p.t(r) << (r == 2 ? "" : " ");
        }
        poses << "\n";
    }
    std::ofstream calib(fs::path(dir) / "calib.txt");
    calib.precision(17);
    calib << "P0: " << scene.intrinsics.fx << " 0 " << scene.intrinsics.cx << " 0 0 "
          << scene.intrinsics.fy << " " << scene.intrinsics.cy << " 0 0 0 1 0\n";
}

// Fixed spec + seed for the self-contained demonstration sequence used by the
// command-line tools and the end-to-end checks.
inline SceneSpec bundled_scene_spec() {
    SceneSpec spec;
    spec.n_points = 2200;
    spec.box_min = {-30.0, -30.0, 4.0};
    spec.box_max = {30.0, 30.0, 70.0};
    spec.path = {{99, 0.25, 0.0}};
    return spec;
}

constexpr uint64_t kBundledSceneSeed = 7;

} // namespace micro
