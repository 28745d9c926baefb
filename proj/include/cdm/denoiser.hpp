#pragma once

// Conditional noise-prediction network eps_theta(z_t, t, c): a small U-Net
// over latent maps with two stride-2 down blocks, a bottleneck, and two up
// blocks whose inputs concatenate the matching down-path activations (the
// skip connections are structural: the up convolutions are sized for the
// concatenated channel count). Timestep and condition information enter every
// block as an additive per-channel bias (FiLM-style) projected from a shared
// 64-dimensional embedding onto the block's normalized activations.

#include <span>
#include <string>
#include <vector>

#include "cdm/diffusion.hpp"
#include "cdm/nn.hpp"
#include "cdm/phantom.hpp"

namespace cdm {

struct DenoiserConfig {
    int latent_channels = 4;
    int stem_channels = 16;
    int down_channels[2] = {32, 64};
    int emb_dim = 64;
    int time_basis_dim = 32;
    int norm_groups = 8;
    int T = 256;                // accepted timestep range [1, T]
    bool zero_init_head = true; // start as the zero predictor

    // Single-channel 8x8 configuration, small enough for finite-difference
    // probing of every parameter.
    static DenoiserConfig toy() {
        DenoiserConfig c;
        c.latent_channels = 1;
        c.stem_channels = 4;
        c.down_channels[0] = 4;
        c.down_channels[1] = 8;
        c.emb_dim = 16;
        c.time_basis_dim = 8;
        c.norm_groups = 4;
        c.T = 8;
        c.zero_init_head = false;
        return c;
    }
};

// norm -> +film(emb) -> silu -> conv. The embedding projection lands on the
// normalized activations so the convolution mixes it spatially; the
// convolution itself is bias-free because every block output feeds another
// normalization (the film shift already plays the bias role).
struct FilmBlock {
    GroupNormLayer norm;
    Conv2dLayer conv;
    Linear film;

    static FilmBlock init(int cin, int cout, int stride, int emb_dim, int norm_groups, Rng& rng) {
        FilmBlock blk;
        blk.norm = GroupNormLayer::init(cin, norm_groups);
        blk.conv = Conv2dLayer::init(cin, cout, 3, rng, stride, -1, /*bias=*/false);
        blk.film = Linear::init(emb_dim, cin, rng);
        return blk;
    }

    Tensor operator()(const Tensor& x, const Tensor& emb) const {
        Tensor f = film(emb); // [rows, cin]
        f = reshape(f, {f.shape()[0], f.shape()[1], 1, 1});
        return conv(silu(add(norm(x), f)));
    }

    void collect(const std::string& prefix, std::vector<NamedParam>& out) {
        norm.collect(prefix + ".norm", out);
        conv.collect(prefix + ".conv", out);
        film.collect(prefix + ".film", out);
    }
};

class Denoiser {
public:
    DenoiserConfig config;

    Linear time_fc1, time_fc2; // basis -> emb -> emb
    Linear cond_fc1, cond_fc2; // (age/100, one-hot sex) -> emb -> emb
    Conv2dLayer stem;          // latent -> stem, full resolution
    FilmBlock down1;           // stem -> d0, stride 2
    FilmBlock down2;           // d0 -> d1, stride 2
    FilmBlock mid;             // d1 -> d1
    FilmBlock up1;             // (d1 + d0 skip) -> d0, after upsample
    FilmBlock up2;             // (d0 + stem skip) -> stem, after upsample
    GroupNormLayer head_norm;
    Conv2dLayer head;          // stem -> latent

    explicit Denoiser(const DenoiserConfig& cfg, Rng& rng) : config(cfg) {
        const int e = cfg.emb_dim;
        const int s = cfg.stem_channels;
        const int d0 = cfg.down_channels[0];
        const int d1 = cfg.down_channels[1];
        time_fc1 = Linear::init(cfg.time_basis_dim, e, rng);
        time_fc2 = Linear::init(e, e, rng);
        cond_fc1 = Linear::init(3, e, rng);
        cond_fc2 = Linear::init(e, e, rng);
        stem = Conv2dLayer::init(cfg.latent_channels, s, 3, rng);
        down1 = FilmBlock::init(s, d0, 2, e, cfg.norm_groups, rng);
        down2 = FilmBlock::init(d0, d1, 2, e, cfg.norm_groups, rng);
        mid = FilmBlock::init(d1, d1, 1, e, cfg.norm_groups, rng);
        up1 = FilmBlock::init(d1 + d0, d0, 1, e, cfg.norm_groups, rng);
        up2 = FilmBlock::init(d0 + s, s, 1, e, cfg.norm_groups, rng);
        head_norm = GroupNormLayer::init(s, cfg.norm_groups);
        head = Conv2dLayer::init(s, cfg.latent_channels, 3, rng);
        if (cfg.zero_init_head) head.zero_init();
    }

    // Embedding of the timestep index, shape [1, emb_dim].
    Tensor time_embedding(int t) const {
        return time_fc2(silu(time_fc1(sinusoidal_embedding(t, config.time_basis_dim))));
    }

    // Embedding of a batch of conditions, shape [n, emb_dim]. Each row is
    // computed from (age/100, one_hot(sex)).
    Tensor condition_embedding(std::span<const Condition> cs) const {
        if (cs.empty()) throw std::invalid_argument("condition_embedding: empty condition list");
        Tensor x({static_cast<int>(cs.size()), 3});
        float* p = x.data();
        for (size_t i = 0; i < cs.size(); ++i) {
            if (!cs[i].valid()) throw std::invalid_argument("condition_embedding: invalid condition");
            p[3 * i + 0] = static_cast<float>(cs[i].age / 100.0);
            p[3 * i + 1] = cs[i].sex == Sex::female ? 1.0f : 0.0f;
            p[3 * i + 2] = cs[i].sex == Sex::male ? 1.0f : 0.0f;
        }
        return cond_fc2(silu(cond_fc1(x)));
    }

    Tensor predict_noise(const Tensor& z_t, int t, std::span<const Condition> c) const {
        if (z_t.rank() != 4 || z_t.shape()[1] != config.latent_channels)
            throw std::invalid_argument("predict_noise: expected [b," + std::to_string(config.latent_channels) + ",h,w] input");
        if (t < 1 || t > config.T)
            throw std::invalid_argument("predict_noise: t=" + std::to_string(t) + " outside [1," + std::to_string(config.T) + "]");
        if (static_cast<int>(c.size()) != z_t.shape()[0])
            throw std::invalid_argument("predict_noise: need one condition per batch element");
        if (!z_t.all_finite()) throw std::invalid_argument("predict_noise: non-finite input latent");

        Tensor emb = add(condition_embedding(c), time_embedding(t)); // [b, e] via broadcast

        Tensor h0 = stem(z_t);
        Tensor h1 = down1(h0, emb);
        Tensor h2 = down2(h1, emb);
        Tensor m = mid(h2, emb);
        Tensor u1 = up1(concat_channels(upsample2x(m), h1), emb);
        Tensor u2 = up2(concat_channels(upsample2x(u1), h0), emb);
        return head(silu(head_norm(u2)));
    }

    std::vector<NamedParam> parameters() {
        std::vector<NamedParam> out;
        time_fc1.collect("time_fc1", out);
        time_fc2.collect("time_fc2", out);
        cond_fc1.collect("cond_fc1", out);
        cond_fc2.collect("cond_fc2", out);
        stem.collect("stem", out);
        down1.collect("down1", out);
        down2.collect("down2", out);
        mid.collect("mid", out);
        up1.collect("up1", out);
        up2.collect("up2", out);
        head_norm.collect("head_norm", out);
        head.collect("head", out);
        return out;
    }

    int64_t parameter_count() {
        int64_t n = 0;
        for (const auto& p : parameters()) n += p.value->size();
        return n;
    }

    // Adapter for the diffusion routines. The denoiser must outlive the
    // returned closure.
    NoisePredictor predictor() const {
        return [this](const Tensor& z, int t, std::span<const Condition> c) {
            return predict_noise(z, t, c);
        };
    }
};

} // namespace cdm
