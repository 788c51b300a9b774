#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "micro/rng.hpp"

namespace micro {

// Hard activations. h_sigmoid(x) = clamp(x+3, 0, 6)/6, h_swish(x) = x*h_sigmoid(x).
inline double h_sigmoid(double x) { return std::min(std::max(x + 3.0, 0.0), 6.0) / 6.0; }
inline double h_swish(double x) { return x * h_sigmoid(x); }

struct LayerSpec {
    enum class Kind { conv, bneck, pool, pointwise_conv };
    Kind kind = Kind::conv;
    int kernel = 1;
    int exp_size = 0; // bneck only
    int out_channels = 0;
    bool use_se = false;
    int stride = 1;
    int in_h = 0, in_w = 0, in_c = 0;

    int out_h() const { return kind == Kind::pool ? 1 : in_h / stride; }
    int out_w() const { return kind == Kind::pool ? 1 : in_w / stride; }
    int out_c() const { return kind == Kind::pool ? in_c : out_channels; }
    bool residual() const {
        return kind == Kind::bneck && stride == 1 && in_c == out_channels;
    }
};

struct NetworkSpec {
    double alpha = 1.0;
    int classes = 10;
    int divisor = 8;
    std::vector<LayerSpec> layers;
};

// Channel rounding under a width multiplier: nearest multiple of the divisor,
// never below it, bumped up when rounding would lose more than 10%.
inline int make_divisible(double v, int divisor = 8) {
    int n = std::max(divisor, static_cast<int>(std::floor(v + divisor / 2.0)) / divisor * divisor);
    if (n < 0.9 * v) n += divisor;
    return n;
}

// The 15-row architecture table: stem conv, ten 5x5/3x3 bottlenecks, a 1x1
// expansion conv, global average pool, 1x1 head conv, k-way classifier.
inline NetworkSpec build_microbotnet(double alpha, int classes) {
    if (!(alpha > 0.0)) throw std::invalid_argument("build_microbotnet: alpha must be > 0");
    if (classes < 1) throw std::invalid_argument("build_microbotnet: classes must be >= 1");
    struct BneckRow {
        int kernel, exp, out;
        bool se;
        int stride;
    };
    static const BneckRow table[10] = {
        {3, 72, 24, false, 2}, {5, 96, 40, true, 2},  {5, 240, 40, true, 1},
        {5, 120, 48, true, 1}, {5, 144, 48, true, 1}, {5, 288, 96, true, 2},
        {5, 576, 96, true, 1}, {5, 576, 96, true, 1}, {5, 576, 96, true, 1},
        {5, 576, 96, true, 1}};

    NetworkSpec spec;
    spec.alpha = alpha;
    spec.classes = classes;
    auto ch = [&](int c) { return make_divisible(c * alpha, spec.divisor); };

    int h = 32, w = 32, c = 3;
    auto push = [&](LayerSpec l) {
        l.in_h = h;
        l.in_w = w;
        l.in_c = c;
        h = l.out_h();
        w = l.out_w();
        c = l.out_c();
        spec.layers.push_back(l);
    };

    push({LayerSpec::Kind::conv, 3, 0, ch(16), false, 2});
    for (const BneckRow& r : table)
        push({LayerSpec::Kind::bneck, r.kernel, ch(r.exp), ch(r.out), r.se, r.stride});
    push({LayerSpec::Kind::pointwise_conv, 1, 0, ch(576), false, 1});
    push({LayerSpec::Kind::pool, 2, 0, 0, false, 1});
    push({LayerSpec::Kind::pointwise_conv, 1, 0, ch(1024), false, 1});
    push({LayerSpec::Kind::pointwise_conv, 1, 0, classes, false, 1});
    return spec;
}

struct MacRow {
    std::string name;
    int in_shape[3];  // H, W, C
    int out_shape[3]; // H, W, C
    long long macs = 0;
    long long params = 0;
};

struct MacReport {
    double alpha = 1.0;
    int classes = 10;
    std::vector<MacRow> rows;
    long long total_macs = 0;
    long long total_params = 0;
};

namespace detail {

// Counting convention (chosen to reproduce the reference profiling numbers):
//   conv2d:     H_out*W_out*C_out*(K*K*C_in/groups) MACs (+out numel if biased;
//               all convolutions here are bias-free), params = weight count
//   batch-norm: 2*numel(output) MACs, 2 learnable params per channel
//   avg pool:   (kernel_area + 1)*numel(output) MACs
//   SE FCs:     bias-free dot products, (2*C_in - 1)*C_out MACs, C_in*C_out params
//   classifier: dense with bias, 2*C_in*C_out MACs, C_in*C_out + C_out params
//   hard activations and residual adds: 0
struct MacCounter {
    std::vector<MacRow>& rows;

    void row(const std::string& name, int ih, int iw, int ic, int oh, int ow, int oc,
             long long macs, long long params) {
        rows.push_back({name, {ih, iw, ic}, {oh, ow, oc}, macs, params});
    }
    void conv(const std::string& name, int ih, int iw, int ic, int oh, int ow, int oc,
              int k, int groups) {
        const long long macs =
            1ll * oh * ow * oc * (1ll * k * k * ic / groups);
        const long long params = 1ll * k * k * (ic / groups) * oc;
        row(name, ih, iw, ic, oh, ow, oc, macs, params);
    }
    void bn(const std::string& name, int h, int w, int c) {
        row(name, h, w, c, h, w, c, 2ll * h * w * c, 2ll * c);
    }
    void act(const std::string& name, int h, int w, int c) {
        row(name, h, w, c, h, w, c, 0, 0);
    }
    void se(const std::string& prefix, int h, int w, int c) {
        const int mid = c / 4;
        row(prefix + ".pool", h, w, c, 1, 1, c, 1ll * (h * w + 1) * c, 0);
        row(prefix + ".fc1", 1, 1, c, 1, 1, mid, (2ll * c - 1) * mid, 1ll * c * mid);
        row(prefix + ".fc2", 1, 1, mid, 1, 1, c, (2ll * mid - 1) * c, 1ll * mid * c);
    }
};

} // namespace detail

inline MacReport count_macs(const NetworkSpec& spec) {
    MacReport rep;
    rep.alpha = spec.alpha;
    rep.classes = spec.classes;
    detail::MacCounter cnt{rep.rows};

    const size_t last = spec.layers.size() - 1;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        const int ih = l.in_h, iw = l.in_w, ic = l.in_c;
        const int oh = l.out_h(), ow = l.out_w(), oc = l.out_c();
        switch (l.kind) {
        case LayerSpec::Kind::conv:
            cnt.conv("stem.conv", ih, iw, ic, oh, ow, oc, l.kernel, 1);
            cnt.bn("stem.bn", oh, ow, oc);
            cnt.act("stem.act", oh, ow, oc);
            break;
        case LayerSpec::Kind::bneck: {
            const std::string p = "bneck" + std::to_string(i);
            const int e = l.exp_size;
            cnt.conv(p + ".expand.conv", ih, iw, ic, ih, iw, e, 1, 1);
            cnt.bn(p + ".expand.bn", ih, iw, e);
            cnt.act(p + ".expand.act", ih, iw, e);
            cnt.conv(p + ".dw.conv", ih, iw, e, oh, ow, e, l.kernel, e);
            cnt.bn(p + ".dw.bn", oh, ow, e);
            if (l.use_se) cnt.se(p + ".se", oh, ow, e);
            cnt.act(p + ".act", oh, ow, e);
            cnt.conv(p + ".project.conv", oh, ow, e, oh, ow, oc, 1, 1);
            cnt.bn(p + ".project.bn", oh, ow, oc);
            break;
        }
        case LayerSpec::Kind::pool:
            cnt.row("pool", ih, iw, ic, 1, 1, ic, 1ll * (ih * iw + 1) * ic, 0);
            break;
        case LayerSpec::Kind::pointwise_conv:
            if (i == last) {
                // k-way classifier: dense layer on the 1x1 map, bias included
                cnt.row("classifier", ih, iw, ic, 1, 1, oc, 2ll * ic * oc,
                        1ll * ic * oc + oc);
            } else if (ih > 1) {
                cnt.conv("conv2.conv", ih, iw, ic, oh, ow, oc, 1, 1);
                cnt.bn("conv2.bn", oh, ow, oc);
                cnt.act("conv2.act", oh, ow, oc);
            } else {
                cnt.conv("head.conv", ih, iw, ic, oh, ow, oc, 1, 1);
                cnt.act("head.act", oh, ow, oc);
            }
            break;
        }
    }
    for (const MacRow& r : rep.rows) {
        rep.total_macs += r.macs;
        rep.total_params += r.params;
    }
    return rep;
}

inline std::string mac_report_json(const MacReport& rep) {
    nlohmann::ordered_json j;
    j["alpha"] = rep.alpha;
    j["classes"] = rep.classes;
    j["layers"] = nlohmann::ordered_json::array();
    for (const MacRow& r : rep.rows) {
        nlohmann::ordered_json row;
        row["name"] = r.name;
        row["in"] = {r.in_shape[0], r.in_shape[1], r.in_shape[2]};
        row["out"] = {r.out_shape[0], r.out_shape[1], r.out_shape[2]};
        row["macs"] = r.macs;
        row["params"] = r.params;
        j["layers"].push_back(row);
    }
    j["total_macs"] = rep.total_macs;
    j["total_params"] = rep.total_params;
    return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Weights and inference
// ---------------------------------------------------------------------------

struct Tensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;

    size_t numel() const {
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(d);
        return n;
    }
};

struct WeightBundle {
    std::vector<Tensor> tensors;
};

// Canonical tensor enumeration for a spec: names and shapes, in order.
inline std::vector<Tensor> enumerate_tensors(const NetworkSpec& spec) {
    std::vector<Tensor> out;
    auto add = [&](const std::string& name, std::vector<int> shape) {
        Tensor t;
        t.name = name;
        t.shape = std::move(shape);
        t.data.assign(t.numel(), 0.0f);
        out.push_back(std::move(t));
    };
    auto add_bn = [&](const std::string& p, int c) {
        add(p + ".gamma", {c});
        add(p + ".beta", {c});
        add(p + ".mean", {c});
        add(p + ".var", {c});
    };
    const size_t last = spec.layers.size() - 1;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        switch (l.kind) {
        case LayerSpec::Kind::conv:
            add("stem.conv.weight", {l.out_c(), l.in_c, l.kernel, l.kernel});
            add_bn("stem.bn", l.out_c());
            break;
        case LayerSpec::Kind::bneck: {
            const std::string p = "bneck" + std::to_string(i);
            const int e = l.exp_size;
            add(p + ".expand.conv.weight", {e, l.in_c, 1, 1});
            add_bn(p + ".expand.bn", e);
            add(p + ".dw.conv.weight", {e, 1, l.kernel, l.kernel});
            add_bn(p + ".dw.bn", e);
            if (l.use_se) {
                add(p + ".se.fc1.weight", {e / 4, e});
                add(p + ".se.fc2.weight", {e, e / 4});
            }
            add(p + ".project.conv.weight", {l.out_c(), e, 1, 1});
            add_bn(p + ".project.bn", l.out_c());
            break;
        }
        case LayerSpec::Kind::pool:
            break;
        case LayerSpec::Kind::pointwise_conv:
            if (i == last) {
                add("classifier.weight", {l.out_c(), l.in_c});
                add("classifier.bias", {l.out_c()});
            } else if (l.in_h > 1) {
                add("conv2.conv.weight", {l.out_c(), l.in_c, 1, 1});
                add_bn("conv2.bn", l.out_c());
            } else {
                add("head.conv.weight", {l.out_c(), l.in_c, 1, 1});
            }
            break;
        }
    }
    return out;
}

// Random bundle for tests and smoke inference: small uniform conv weights,
// identity-like batch-norm.
inline WeightBundle random_bundle(const NetworkSpec& spec, Rng& rng) {
    WeightBundle b;
    b.tensors = enumerate_tensors(spec);
    for (Tensor& t : b.tensors) {
        const bool is_gamma = t.name.size() > 6 && t.name.rfind(".gamma") == t.name.size() - 6;
        const bool is_var = t.name.size() > 4 && t.name.rfind(".var") == t.name.size() - 4;
        const bool is_beta = t.name.size() > 5 && t.name.rfind(".beta") == t.name.size() - 5;
        const bool is_mean = t.name.size() > 5 && t.name.rfind(".mean") == t.name.size() - 5;
        for (float& v : t.data) {
            if (is_gamma || is_var)
                v = 1.0f;
            else if (is_beta || is_mean)
                v = 0.0f;
            else
                v = static_cast<float>(rng.uniform(-0.1, 0.1));
        }
    }
    return b;
}

inline void save_weights(const WeightBundle& bundle, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << "tensors " << bundle.tensors.size() << "\n";
    for (const Tensor& t : bundle.tensors) {
        out << t.name << " " << t.shape.size();
        for (int d : t.shape) out << " " << d;
        out << "\n";
    }
    out << "data\n";
    // raw little-endian float32 payload, tensors in manifest order
    for (const Tensor& t : bundle.tensors)
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!out) throw std::runtime_error(path + ": write failed");
}

inline WeightBundle load_weights(const NetworkSpec& spec, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open file");
    std::string word;
    size_t count = 0;
    if (!(in >> word >> count) || word != "tensors")
        throw std::runtime_error(path + ": malformed manifest header");
    std::vector<Tensor> expected = enumerate_tensors(spec);
    if (count != expected.size())
        throw std::runtime_error(path + ": manifest lists " + std::to_string(count) +
                                 " tensors, spec enumerates " + std::to_string(expected.size()));
    for (Tensor& want : expected) {
        std::string name;
        size_t ndim = 0;
        if (!(in >> name >> ndim))
            throw std::runtime_error(path + ": truncated manifest at tensor '" + want.name + "'");
        std::vector<int> shape(ndim);
        for (size_t d = 0; d < ndim; ++d)
            if (!(in >> shape[d]))
                throw std::runtime_error(path + ": truncated shape for tensor '" + name + "'");
        if (name != want.name || shape != want.shape) {
            std::ostringstream msg;
            msg << path << ": tensor mismatch at '" << want.name << "' (manifest has '"
                << name << "')";
            throw std::runtime_error(msg.str());
        }
    }
    if (!(in >> word) || word != "data")
        throw std::runtime_error(path + ": missing data marker");
    in.get(); // the newline after "data"
    for (Tensor& t : expected) {
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (in.gcount() != static_cast<std::streamsize>(t.data.size() * sizeof(float)))
            throw std::runtime_error(path + ": truncated blob at tensor '" + t.name + "'");
    }
    WeightBundle b;
    b.tensors = std::move(expected);
    return b;
}

// ---------------------------------------------------------------------------

namespace detail {

struct Map {
    int c = 0, h = 0, w = 0;
    std::vector<float> v; // CHW

    Map() = default;
    Map(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(size_t(c_) * h_ * w_, 0.0f) {}
    float& at(int ch, int y, int x) { return v[(size_t(ch) * h + y) * w + x]; }
    float at(int ch, int y, int x) const { return v[(size_t(ch) * h + y) * w + x]; }
};

inline void check_shape(const Tensor& t, const std::vector<int>& want,
                        const std::string& layer) {
    if (t.shape != want)
        throw std::runtime_error("forward: weight shape mismatch at layer '" + layer + "'");
}

inline Map conv2d(const Map& in, const Tensor& w, int stride, int pad, int groups,
                  const std::string& layer) {
    const int co = w.shape[0], cig = w.shape[1], k = w.shape[2];
    if (in.c != cig * groups)
        throw std::runtime_error("forward: input channel mismatch at layer '" + layer + "'");
    const int oh = (in.h + 2 * pad - k) / stride + 1;
    const int ow = (in.w + 2 * pad - k) / stride + 1;
    Map out(co, oh, ow);
    const int co_per_g = co / groups;
    for (int oc = 0; oc < co; ++oc) {
        const int g = oc / co_per_g;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                float acc = 0.0f;
                for (int icg = 0; icg < cig; ++icg) {
                    const int ic = g * cig + icg;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= in.h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= in.w) continue;
                            acc += in.at(ic, iy, ix) *
                                   w.data[((size_t(oc) * cig + icg) * k + ky) * k + kx];
                        }
                    }
                }
                out.at(oc, oy, ox) = acc;
            }
    }
    return out;
}

inline void batch_norm(Map& m, const Tensor& gamma, const Tensor& beta,
                       const Tensor& mean, const Tensor& var) {
    constexpr float eps = 1e-5f;
    for (int c = 0; c < m.c; ++c) {
        const float scale = gamma.data[c] / std::sqrt(var.data[c] + eps);
        const float shift = beta.data[c] - mean.data[c] * scale;
        for (int y = 0; y < m.h; ++y)
            for (int x = 0; x < m.w; ++x) m.at(c, y, x) = m.at(c, y, x) * scale + shift;
    }
}

inline void hswish_inplace(Map& m) {
    for (float& v : m.v) v = static_cast<float>(h_swish(v));
}

} // namespace detail

// Inference over one 32x32x3 image (HWC, row-major, arbitrary real range).
inline std::vector<double> forward(const NetworkSpec& spec, const WeightBundle& weights,
                                   const std::vector<double>& image) {
    using detail::Map;
    const LayerSpec& first = spec.layers.front();
    if (static_cast<int>(image.size()) != first.in_h * first.in_w * first.in_c)
        throw std::runtime_error("forward: input shape mismatch at layer 'stem'");

    const std::vector<Tensor> expected = enumerate_tensors(spec);
    if (weights.tensors.size() != expected.size())
        throw std::runtime_error("forward: weight bundle has wrong tensor count");
    for (size_t i = 0; i < expected.size(); ++i) {
        if (weights.tensors[i].name != expected[i].name)
            throw std::runtime_error("forward: unexpected tensor '" + weights.tensors[i].name +
                                     "', want '" + expected[i].name + "'");
        detail::check_shape(weights.tensors[i], expected[i].shape, expected[i].name);
        if (weights.tensors[i].data.size() != expected[i].numel())
            throw std::runtime_error("forward: tensor data size mismatch at '" +
                                     expected[i].name + "'");
    }

    Map x(first.in_c, first.in_h, first.in_w);
    for (int y = 0; y < first.in_h; ++y)
        for (int xx = 0; xx < first.in_w; ++xx)
            for (int c = 0; c < first.in_c; ++c)
                x.at(c, y, xx) =
                    static_cast<float>(image[(size_t(y) * first.in_w + xx) * first.in_c + c]);

    size_t cursor = 0;
    auto next = [&](const char* suffix_hint) -> const Tensor& {
        (void)suffix_hint;
        return weights.tensors[cursor++];
    };
    auto apply_bn = [&](Map& m) {
        const Tensor& g = next("gamma");
        const Tensor& b = next("beta");
        const Tensor& mu = next("mean");
        const Tensor& var = next("var");
        detail::batch_norm(m, g, b, mu, var);
    };

    const size_t last = spec.layers.size() - 1;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        const std::string lname =
            l.kind == LayerSpec::Kind::bneck ? "bneck" + std::to_string(i) : "layer" + std::to_string(i);
        switch (l.kind) {
        case LayerSpec::Kind::conv: {
            x = detail::conv2d(x, next("stem"), l.stride, l.kernel / 2, 1, "stem");
            apply_bn(x);
            detail::hswish_inplace(x);
            break;
        }
        case LayerSpec::Kind::bneck: {
            Map identity = x;
            Map e = detail::conv2d(x, next("expand"), 1, 0, 1, lname + ".expand");
            apply_bn(e);
            detail::hswish_inplace(e);
            Map d = detail::conv2d(e, next("dw"), l.stride, l.kernel / 2, e.c, lname + ".dw");
            apply_bn(d);
            if (l.use_se) {
                const Tensor& fc1 = next("se.fc1");
                const Tensor& fc2 = next("se.fc2");
                const int mid = fc1.shape[0];
                std::vector<float> pooled(d.c, 0.0f);
                for (int c = 0; c < d.c; ++c) {
                    float s = 0.0f;
                    for (int y = 0; y < d.h; ++y)
                        for (int xx = 0; xx < d.w; ++xx) s += d.at(c, y, xx);
                    pooled[c] = s / static_cast<float>(d.h * d.w);
                }
                std::vector<float> hidden(mid, 0.0f);
                for (int m = 0; m < mid; ++m) {
                    float s = 0.0f;
                    for (int c = 0; c < d.c; ++c) s += fc1.data[size_t(m) * d.c + c] * pooled[c];
                    hidden[m] = std::max(s, 0.0f); // ReLU between the SE projections
                }
                for (int c = 0; c < d.c; ++c) {
                    float s = 0.0f;
                    for (int m = 0; m < mid; ++m) s += fc2.data[size_t(c) * mid + m] * hidden[m];
                    const float gate = static_cast<float>(h_sigmoid(s));
                    for (int y = 0; y < d.h; ++y)
                        for (int xx = 0; xx < d.w; ++xx) d.at(c, y, xx) *= gate;
                }
            }
            detail::hswish_inplace(d);
            Map p = detail::conv2d(d, next("project"), 1, 0, 1, lname + ".project");
            apply_bn(p);
            if (l.residual()) {
                for (size_t k = 0; k < p.v.size(); ++k) p.v[k] += identity.v[k];
            }
            x = std::move(p);
            break;
        }
        case LayerSpec::Kind::pool: {
            Map out(x.c, 1, 1);
            for (int c = 0; c < x.c; ++c) {
                float s = 0.0f;
                for (int y = 0; y < x.h; ++y)
                    for (int xx = 0; xx < x.w; ++xx) s += x.at(c, y, xx);
                out.at(c, 0, 0) = s / static_cast<float>(x.h * x.w);
            }
            x = std::move(out);
            break;
        }
        case LayerSpec::Kind::pointwise_conv: {
            if (i == last) {
                const Tensor& w = next("classifier.weight");
                const Tensor& b = next("classifier.bias");
                detail::check_shape(w, {l.out_c(), l.in_c}, "classifier");
                std::vector<double> logits(l.out_c(), 0.0);
                for (int o = 0; o < l.out_c(); ++o) {
                    double s = b.data[o];
                    for (int c = 0; c < l.in_c; ++c) s += double(w.data[size_t(o) * l.in_c + c]) * x.at(c, 0, 0);
                    logits[o] = s;
                }
                return logits;
            }
            const bool has_bn = l.in_h > 1;
            x = detail::conv2d(x, next("pw"), 1, 0, 1, has_bn ? "conv2" : "head");
            if (has_bn) apply_bn(x);
            detail::hswish_inplace(x);
            break;
        }
        }
    }
    throw std::logic_error("forward: spec has no classifier layer");
}

// Batched inference: independent per item (permutation-equivariant).
inline std::vector<std::vector<double>> forward_batch(
    const NetworkSpec& spec, const WeightBundle& weights,
    const std::vector<std::vector<double>>& images) {
    std::vector<std::vector<double>> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(forward(spec, weights, img));
    return out;
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    std::vector<double> p(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - m));
    for (double& v : p) v /= z;
    return p;
}

} // namespace micro
