#pragma once

// Trainable layer wrappers on top of the raw ops: linear, convolution and
// group-norm layers that own their parameters, know how to initialize them,
// and register them by name for the optimizer and for checkpointing.

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "cdm/adam.hpp"
#include "cdm/ops.hpp"
#include "cdm/rng.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

// He-style initialization: zero-mean normal with std sqrt(2 / fan_in).
inline Tensor kaiming_normal(Rng& rng, const Shape& shape, int64_t fan_in) {
    if (fan_in < 1) throw std::invalid_argument("kaiming_normal: fan_in must be positive");
    Tensor w = Tensor::randn(rng, shape);
    const float s = std::sqrt(2.0f / static_cast<float>(fan_in));
    float* p = w.data();
    for (int64_t i = 0; i < w.size(); ++i) p[i] *= s;
    return w;
}

struct Linear {
    Tensor w; // [in, out]
    Tensor b; // [1, out]

    static Linear init(int in, int out, Rng& rng) {
        Linear l;
        l.w = kaiming_normal(rng, {in, out}, in);
        l.b = Tensor::zeros({1, out});
        return l;
    }

    int in_features() const { return w.shape()[0]; }
    int out_features() const { return w.shape()[1]; }

    Tensor operator()(const Tensor& x) const { return add(matmul(x, w), b); }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) {
        out.push_back({prefix + ".w", &w});
        out.push_back({prefix + ".b", &b});
    }
};

struct Conv2dLayer {
    Tensor w; // [cout, cin, k, k]
    Tensor b; // [1, cout, 1, 1]; empty when the layer is bias-free
    int stride = 1;
    int pad = 0;

    // pad < 0 selects "same" padding (k-1)/2 for odd k. Layers feeding a
    // normalization should pass bias=false: a per-channel constant is
    // (nearly) cancelled by the following norm and just wastes a parameter.
    static Conv2dLayer init(int cin, int cout, int k, Rng& rng, int stride = 1, int pad = -1,
                            bool bias = true) {
        Conv2dLayer c;
        c.w = kaiming_normal(rng, {cout, cin, k, k}, static_cast<int64_t>(cin) * k * k);
        if (bias) c.b = Tensor::zeros({1, cout, 1, 1});
        c.stride = stride;
        c.pad = pad < 0 ? (k - 1) / 2 : pad;
        return c;
    }

    int in_channels() const { return w.shape()[1]; }
    int out_channels() const { return w.shape()[0]; }
    bool has_bias() const { return b.size() > 0; }

    void zero_init() {
        std::fill(w.data(), w.data() + w.size(), 0.0f);
        if (has_bias()) std::fill(b.data(), b.data() + b.size(), 0.0f);
    }

    Tensor operator()(const Tensor& x) const {
        Tensor h = conv2d(x, w, stride, pad);
        return has_bias() ? add(h, b) : h;
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) {
        out.push_back({prefix + ".w", &w});
        if (has_bias()) out.push_back({prefix + ".b", &b});
    }
};

struct GroupNormLayer {
    Tensor gamma; // [c]
    Tensor beta;  // [c]
    int groups = 1;

    // Uses the largest divisor of `channels` not exceeding the requested
    // group count, so narrow blocks normalize correctly without per-call
    // configuration.
    static GroupNormLayer init(int channels, int groups) {
        GroupNormLayer g;
        g.gamma = Tensor::ones({channels});
        g.beta = Tensor::zeros({channels});
        g.groups = std::gcd(groups, channels);
        return g;
    }

    Tensor operator()(const Tensor& x) const { return group_norm(x, groups, gamma, beta); }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) {
        out.push_back({prefix + ".gamma", &gamma});
        out.push_back({prefix + ".beta", &beta});
    }
};

// Sinusoidal position/timestep basis of even dimension: the first half holds
// sin(t * w_i), the second half cos(t * w_i), with w_i = base^(-i / half).
inline Tensor sinusoidal_embedding(int t, int dim, double base = 10000.0) {
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be even and >= 2");
    const int half = dim / 2;
    Tensor out({1, dim});
    float* p = out.data();
    for (int i = 0; i < half; ++i) {
        const double w = std::pow(base, -static_cast<double>(i) / half);
        p[i] = static_cast<float>(std::sin(t * w));
        p[half + i] = static_cast<float>(std::cos(t * w));
    }
    return out;
}

} // namespace cdm
