#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "micro/features.hpp"
#include "micro/imaging.hpp"
#include "micro/rng.hpp"
#include "micro/scenes.hpp"

namespace micro {

// Learned sparse keypoint detector: a single n x n mask w scoring patches via
// sum_i leakyrelu(w_i * x_i), trained so that scores agree across views of the
// same point, stay sparse (L1 + top-k), and distribute like a unit Gaussian
// (KL penalty). Detection thresholds |score| like FAST thresholds contrast.
struct SlipdModel {
    int block = 5;                // odd patch side n
    std::vector<double> weights;  // n*n, row-major
    double leaky_slope = 0.01;
    double lambda = 1e-3;         // L1 weight
    double kl_weight = 0.1;       // beta
    int target_k = 8;             // max nonzero weights after export
    double score_threshold = 2.0; // tau

    int n2() const { return block * block; }
};

namespace detail {

inline double leaky(double z, double slope) { return z > 0.0 ? z : slope * z; }
inline double leaky_grad(double z, double slope) { return z > 0.0 ? 1.0 : slope; }

// score = sum_i leakyrelu(w_i x_i); optional exact gradient in w.
inline double score_patch(const std::vector<double>& w, const double* x, double slope,
                          double* grad = nullptr) {
    double s = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        const double z = w[i] * x[i];
        s += leaky(z, slope);
        if (grad) grad[i] = leaky_grad(z, slope) * x[i];
    }
    return s;
}

} // namespace detail

// Dense score map; entries within block/2 of the border stay 0.
inline std::vector<double> slipd_score_map(const SlipdModel& model, const GreyImage& img) {
    if (img.width <= model.block || img.height <= model.block)
        throw std::invalid_argument("slipd_score_map: image smaller than the block");
    if (static_cast<int>(model.weights.size()) != model.n2())
        throw std::invalid_argument("slipd_score_map: weight count does not match block");
    const int half = model.block / 2;
    std::vector<double> map(size_t(img.width) * img.height, 0.0);
    std::vector<double> patch(model.n2());
    for (int y = half; y < img.height - half; ++y)
        for (int x = half; x < img.width - half; ++x) {
            int idx = 0;
            for (int dy = -half; dy <= half; ++dy)
                for (int dx = -half; dx <= half; ++dx)
                    patch[idx++] = img.at(x + dx, y + dy) / 255.0;
            map[size_t(y) * img.width + x] =
                detail::score_patch(model.weights, patch.data(), model.leaky_slope);
        }
    return map;
}

struct SlipdLoss {
    double loss = 0.0;
    std::vector<double> grad;
    bool variance_clamped = false;
};

// loss = lambda*||w||_1 + (1/N) sum_i (s1_i - s2_i)^2
//        + beta * KL(N(mu, var) || N(0,1)),  KL = (var + mu^2 - 1 - ln var)/2
// with (mu, var) the population moments of the 2N pooled patch scores.
inline SlipdLoss slipd_loss(const SlipdModel& model, const std::vector<CorrespondencePair>& batch) {
    if (batch.empty()) throw std::invalid_argument("slipd_loss: empty batch");
    const int d = model.n2();
    if (static_cast<int>(model.weights.size()) != d)
        throw std::invalid_argument("slipd_loss: weight count does not match block");
    for (const CorrespondencePair& pr : batch)
        if (static_cast<int>(pr.x1.size()) != d || static_cast<int>(pr.x2.size()) != d)
            throw std::invalid_argument("slipd_loss: patch size does not match block");

    const size_t n = batch.size();
    SlipdLoss out;
    out.grad.assign(d, 0.0);

    std::vector<double> scores(2 * n);
    std::vector<double> grads(2 * n * d); // per-score gradient rows
    double pair_term = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double* g1 = grads.data() + (2 * i) * d;
        double* g2 = grads.data() + (2 * i + 1) * d;
        const double s1 = detail::score_patch(model.weights, batch[i].x1.data(),
                                              model.leaky_slope, g1);
        const double s2 = detail::score_patch(model.weights, batch[i].x2.data(),
                                              model.leaky_slope, g2);
        scores[2 * i] = s1;
        scores[2 * i + 1] = s2;
        const double diff = s1 - s2;
        pair_term += diff * diff;
        const double c = 2.0 * diff / static_cast<double>(n);
        for (int k = 0; k < d; ++k) out.grad[k] += c * (g1[k] - g2[k]);
    }
    pair_term /= static_cast<double>(n);

    const double m = 2.0 * static_cast<double>(n);
    const double mu = std::accumulate(scores.begin(), scores.end(), 0.0) / m;
    double var = 0.0;
    for (double s : scores) var += (s - mu) * (s - mu);
    var /= m;
    constexpr double kVarEps = 1e-12;
    double var_c = var;
    if (!(var_c >= kVarEps)) {
        var_c = kVarEps;
        out.variance_clamped = true;
    }
    const double kl = 0.5 * (var_c + mu * mu - 1.0 - std::log(var_c));
    // d(kl)/dmu = mu; d(kl)/dvar = (1 - 1/var)/2; clamped variance contributes 0
    const double dkl_dvar = out.variance_clamped ? 0.0 : 0.5 * (1.0 - 1.0 / var_c);
    for (size_t j = 0; j < scores.size(); ++j) {
        const double coeff =
            model.kl_weight * (mu / m + dkl_dvar * 2.0 * (scores[j] - mu) / m);
        const double* gj = grads.data() + j * d;
        for (int k = 0; k < d; ++k) out.grad[k] += coeff * gj[k];
    }

    double l1 = 0.0;
    for (int k = 0; k < d; ++k) {
        l1 += std::abs(model.weights[k]);
        if (model.weights[k] > 0.0)
            out.grad[k] += model.lambda;
        else if (model.weights[k] < 0.0)
            out.grad[k] -= model.lambda; // subgradient 0 at exactly 0
    }

    out.loss = model.lambda * l1 + pair_term + model.kl_weight * kl;
    return out;
}

// Keep the k largest-magnitude entries (ties to the lowest index), optionally
// rescale to unit L2 norm.
inline std::vector<double> slipd_project(const std::vector<double>& w, int k, bool unit) {
    if (k < 1) throw std::invalid_argument("slipd_project: k must be >= 1");
    std::vector<size_t> idx(w.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
        return std::abs(w[a]) > std::abs(w[b]);
    });
    std::vector<double> out(w.size(), 0.0);
    for (size_t i = 0; i < std::min<size_t>(k, w.size()); ++i) out[idx[i]] = w[idx[i]];
    if (unit) {
        double norm = 0.0;
        for (double v : out) norm += v * v;
        norm = std::sqrt(norm);
        if (norm == 0.0)
            throw std::invalid_argument("slipd_project: cannot unit-normalize the zero vector");
        // Leave already-unit inputs untouched so the projection is exactly
        // idempotent instead of drifting by one ulp per application.
        if (std::abs(norm - 1.0) > 1e-12)
            for (double& v : out) v /= norm;
    }
    return out;
}

struct SlipdTrainConfig {
    SlipdModel init;           // hyper-parameters; weights may be preset for tests
    double learning_rate = 1e-2;
    int batch = 256;
};

// Plain SGD over shuffled minibatches with a unit-norm projection after every
// step; the top-k projection joins for the final 10% of steps and at export.
inline SlipdModel slipd_train(const std::vector<CorrespondencePair>& pairs,
                              const SlipdTrainConfig& cfg, int steps, Rng& rng) {
    if (pairs.empty()) throw std::invalid_argument("slipd_train: no training pairs");
    if (steps < 1) throw std::invalid_argument("slipd_train: steps must be >= 1");

    SlipdModel model = cfg.init;
    const int d = model.n2();
    if (static_cast<int>(model.weights.size()) != d) {
        model.weights.assign(d, 0.0);
        for (double& w : model.weights) w = rng.normal();
    }
    auto unit_norm = [&]() {
        double norm = 0.0;
        for (double v : model.weights) norm += v * v;
        norm = std::sqrt(norm);
        if (norm > 0.0)
            for (double& v : model.weights) v /= norm;
    };
    unit_norm();

    std::vector<size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    rng.shuffle(order);
    size_t cursor = 0;
    const size_t bsz = std::min<size_t>(cfg.batch, pairs.size());
    const int sparse_from = steps - steps / 10; // final 10% of steps

    std::vector<CorrespondencePair> batch(bsz);
    for (int step = 0; step < steps; ++step) {
        for (size_t i = 0; i < bsz; ++i) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch[i] = pairs[order[cursor++]];
        }
        SlipdLoss l = slipd_loss(model, batch);
        if (!std::isfinite(l.loss))
            throw std::runtime_error("slipd_train: non-finite loss at step " +
                                     std::to_string(step));
        for (int k = 0; k < d; ++k) model.weights[k] -= cfg.learning_rate * l.grad[k];
        unit_norm();
        if (step >= sparse_from)
            model.weights = slipd_project(model.weights, model.target_k, true);
    }
    model.weights = slipd_project(model.weights, model.target_k, true);
    return model;
}

// Keypoints where |score| >= tau, suppressed exactly like fast_detect; the
// border margin honors both the patch extent and the keypoint invariant.
inline std::vector<Keypoint> slipd_detect(const SlipdModel& model, const GreyImage& img,
                                          double tau, int nms_radius = 3) {
    if (!(tau > 0.0)) throw std::invalid_argument("slipd_detect: tau must be > 0");
    const std::vector<double> map = slipd_score_map(model, img);
    const int margin = std::max(3, model.block / 2);
    std::vector<Keypoint> raw;
    for (int y = margin; y < img.height - margin; ++y)
        for (int x = margin; x < img.width - margin; ++x) {
            const double s = std::abs(map[size_t(y) * img.width + x]);
            if (s >= tau) raw.push_back({x, y, s});
        }
    return detail::nms(raw, nms_radius, img.width, img.height);
}

inline void save_slipd(const SlipdModel& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    char buf[64];
    out << "block " << model.block << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", model.leaky_slope);
    out << "slope " << buf << "\n";
    out << "weights";
    for (double w : model.weights) {
        std::snprintf(buf, sizeof(buf), "%.17g", w);
        out << " " << buf;
    }
    out << "\n";
    if (!out) throw std::runtime_error(path + ": write failed");
}

inline SlipdModel load_slipd(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open file");
    SlipdModel model;
    std::string key;
    if (!(in >> key >> model.block) || key != "block" || model.block < 3 ||
        model.block % 2 == 0)
        throw std::runtime_error(path + ": malformed block line");
    if (!(in >> key >> model.leaky_slope) || key != "slope")
        throw std::runtime_error(path + ": malformed slope line");
    if (!(in >> key) || key != "weights")
        throw std::runtime_error(path + ": missing weights line");
    model.weights.resize(model.n2());
    for (int i = 0; i < model.n2(); ++i)
        if (!(in >> model.weights[i]))
            throw std::runtime_error(path + ": expected " + std::to_string(model.n2()) +
                                     " weights");
    return model;
}

} // namespace micro
