#pragma once

// KL-regularized convolutional autoencoder between image space [b,1,h,w] and
// a latent space [b,4,h/4,w/4]: two stride-2 encoder levels (channels 16 then
// 32), mean and log-variance heads, and a mirrored decoder ending in a
// sigmoid. An identity mode (latent = image, no parameters) lets the
// diffusion stack run directly in pixel space.

#include <string>
#include <utility>
#include <vector>

#include "cdm/nn.hpp"

namespace cdm {

struct AutoencoderConfig {
    bool identity = false; // latent = image; encode/decode become pass-through
    int latent_channels = 4;
    int level_channels[2] = {16, 32};
    int norm_groups = 8;
    float logvar_clamp = 10.0f;
    float kl_weight = 1e-7f;

    static AutoencoderConfig toy() {
        AutoencoderConfig c;
        c.latent_channels = 2;
        c.level_channels[0] = 4;
        c.level_channels[1] = 8;
        c.norm_groups = 4;
        return c;
    }

    static AutoencoderConfig make_identity() {
        AutoencoderConfig c;
        c.identity = true;
        c.latent_channels = 1;
        return c;
    }
};

// Mean-reduced loss: L1 reconstruction plus kl_weight times the closed-form
// per-element KL divergence to the unit Gaussian, 0.5*(mu^2 + e^lv - 1 - lv).
inline Tensor ae_loss(const Tensor& x, const Tensor& recon, const Tensor& mu,
                      const Tensor& logvar, float kl_weight) {
    if (x.shape() != recon.shape()) throw std::invalid_argument("ae_loss: image/reconstruction shape mismatch");
    if (mu.shape() != logvar.shape()) throw std::invalid_argument("ae_loss: mean/log-variance shape mismatch");
    if (!x.all_finite() || !recon.all_finite() || !mu.all_finite() || !logvar.all_finite())
        throw std::invalid_argument("ae_loss: non-finite input");
    Tensor kl_elem = scale(sub(add(mul(mu, mu), cdm::exp(logvar)), offset(logvar, 1.0f)), 0.5f);
    return add(l1_loss(recon, x), scale(mean(kl_elem), kl_weight));
}

class Autoencoder {
public:
    AutoencoderConfig config;

    // Encoder: stem, two stride-2 levels, a mixing layer, then the heads.
    Conv2dLayer enc_in;               // 1 -> c0, full resolution
    GroupNormLayer enc_n1; Conv2dLayer enc_d1; // c0 -> c0, stride 2
    GroupNormLayer enc_n2; Conv2dLayer enc_d2; // c0 -> c1, stride 2
    GroupNormLayer enc_n3; Conv2dLayer enc_mix; // c1 -> c1
    GroupNormLayer enc_n4;
    Conv2dLayer mu_head, logvar_head; // c1 -> latent

    // Decoder mirror.
    Conv2dLayer dec_in;               // latent -> c1
    GroupNormLayer dec_n1; Conv2dLayer dec_u1; // c1 -> c0 after upsample
    GroupNormLayer dec_n2; Conv2dLayer dec_u2; // c0 -> c0 after upsample
    GroupNormLayer dec_n3; Conv2dLayer dec_out; // c0 -> 1, then sigmoid

    explicit Autoencoder(const AutoencoderConfig& cfg, Rng& rng) : config(cfg) {
        if (cfg.identity) return;
        const int c0 = cfg.level_channels[0];
        const int c1 = cfg.level_channels[1];
        const int g = cfg.norm_groups;
        enc_in = Conv2dLayer::init(1, c0, 3, rng, 1, -1, false); // bias-free: feeds a norm
        enc_n1 = GroupNormLayer::init(c0, g);
        enc_d1 = Conv2dLayer::init(c0, c0, 3, rng, 2, -1, false);
        enc_n2 = GroupNormLayer::init(c0, g);
        enc_d2 = Conv2dLayer::init(c0, c1, 3, rng, 2, -1, false);
        enc_n3 = GroupNormLayer::init(c1, g);
        enc_mix = Conv2dLayer::init(c1, c1, 3, rng, 1, -1, false);
        enc_n4 = GroupNormLayer::init(c1, g);
        mu_head = Conv2dLayer::init(c1, cfg.latent_channels, 3, rng);
        logvar_head = Conv2dLayer::init(c1, cfg.latent_channels, 3, rng);
        dec_in = Conv2dLayer::init(cfg.latent_channels, c1, 3, rng, 1, -1, false);
        dec_n1 = GroupNormLayer::init(c1, g);
        dec_u1 = Conv2dLayer::init(c1, c0, 3, rng, 1, -1, false);
        dec_n2 = GroupNormLayer::init(c0, g);
        dec_u2 = Conv2dLayer::init(c0, c0, 3, rng, 1, -1, false);
        dec_n3 = GroupNormLayer::init(c0, g);
        dec_out = Conv2dLayer::init(c0, 1, 3, rng);
    }

    bool identity() const { return config.identity; }

    // Latent shape produced for a [b,1,h,w] input.
    Shape latent_shape(int b, int h, int w) const {
        if (config.identity) return {b, 1, h, w};
        return {b, config.latent_channels, h / 4, w / 4};
    }

    std::pair<Tensor, Tensor> encode(const Tensor& x) const {
        check_image(x, "encode");
        if (config.identity)
            return {x, Tensor::full(x.shape(), -20.0f)}; // sigma ~ 4.5e-5: reparameterization is a no-op
        Tensor h = enc_in(x);
        h = enc_d1(silu(enc_n1(h)));
        h = enc_d2(silu(enc_n2(h)));
        h = enc_mix(silu(enc_n3(h)));
        h = silu(enc_n4(h));
        Tensor mu = mu_head(h);
        Tensor logvar = clamp(logvar_head(h), -config.logvar_clamp, config.logvar_clamp);
        return {mu, logvar};
    }

    // z = mu + exp(logvar/2) * eps with eps drawn from `rng`; differentiable
    // in mu and logvar (eps is a constant).
    Tensor reparameterize(const Tensor& mu, const Tensor& logvar, Rng& rng) const {
        if (mu.shape() != logvar.shape())
            throw std::invalid_argument("reparameterize: mean/log-variance shape mismatch");
        Tensor eps = Tensor::randn(rng, mu.shape());
        return add(mu, mul(cdm::exp(scale(logvar, 0.5f)), eps));
    }

    Tensor decode(const Tensor& z) const {
        if (config.identity) {
            check_image(z, "decode");
            return z;
        }
        if (z.rank() != 4 || z.shape()[1] != config.latent_channels)
            throw std::invalid_argument("decode: expected [b," + std::to_string(config.latent_channels) + ",h,w] latent");
        Tensor h = dec_in(z);
        h = dec_u1(upsample2x(silu(dec_n1(h))));
        h = dec_u2(upsample2x(silu(dec_n2(h))));
        return sigmoid(dec_out(silu(dec_n3(h))));
    }

    std::vector<NamedParam> parameters() {
        std::vector<NamedParam> out;
        if (config.identity) return out;
        enc_in.collect("enc_in", out);
        enc_n1.collect("enc_n1", out);
        enc_d1.collect("enc_d1", out);
        enc_n2.collect("enc_n2", out);
        enc_d2.collect("enc_d2", out);
        enc_n3.collect("enc_n3", out);
        enc_mix.collect("enc_mix", out);
        enc_n4.collect("enc_n4", out);
        mu_head.collect("mu_head", out);
        logvar_head.collect("logvar_head", out);
        dec_in.collect("dec_in", out);
        dec_n1.collect("dec_n1", out);
        dec_u1.collect("dec_u1", out);
        dec_n2.collect("dec_n2", out);
        dec_u2.collect("dec_u2", out);
        dec_n3.collect("dec_n3", out);
        dec_out.collect("dec_out", out);
        return out;
    }

    int64_t parameter_count() {
        int64_t n = 0;
        for (const auto& p : parameters()) n += p.value->size();
        return n;
    }

private:
    void check_image(const Tensor& x, const char* who) const {
        if (x.rank() != 4 || x.shape()[1] != 1)
            throw std::invalid_argument(std::string(who) + ": expected [b,1,h,w] input");
        if (!config.identity && (x.shape()[2] % 4 != 0 || x.shape()[3] % 4 != 0 || x.shape()[2] < 8 || x.shape()[3] < 8))
            throw std::invalid_argument(std::string(who) + ": spatial extent must be a multiple of 4 and at least 8");
    }
};

} // namespace cdm
