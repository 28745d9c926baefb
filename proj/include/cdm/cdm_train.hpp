#pragma once

// Cycle-consistent counterfactual training: counterfactual condition
// sampling, the cycle-consistency loss, the composite objective (two
// epsilon-prediction terms plus a weighted cycle term), decade-balanced
// batching, and the two-phase training driver (LDM pretraining followed by
// cycle fine-tuning).

#include <array>
#include <cmath>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cdm/adam.hpp"
#include "cdm/autoencoder.hpp"
#include "cdm/denoiser.hpp"
#include "cdm/diffusion.hpp"
#include "cdm/phantom.hpp"

namespace cdm {

enum class CycleNorm { l1, l2 };
enum class Phase { pretrain, finetune };

inline const char* phase_name(Phase p) { return p == Phase::pretrain ? "pretrain" : "finetune"; }

struct CdmConfig {
    float lambda = 1.0f;                    // cycle-loss weight
    CycleNorm cycle_norm = CycleNorm::l1;
    bool renoise_for_cycle = false;         // false: feed z~0 straight back at the same t
    int pretrain_steps = 5000;
    int finetune_steps = 500;
    int batch_size = 8;
    float lr_pretrain = 1e-3f;
    float lr_finetune = 1e-4f;
    int log_every = 50;
    // Timesteps are drawn uniformly from [1, T] in both phases.

    void validate() const {
        if (!(lambda >= 0.0f)) throw std::invalid_argument("CdmConfig: lambda must be >= 0");
        if (pretrain_steps < 0 || finetune_steps < 0)
            throw std::invalid_argument("CdmConfig: step counts must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("CdmConfig: batch_size must be >= 1");
        if (log_every < 1) throw std::invalid_argument("CdmConfig: log_every must be >= 1");
    }
};

// Draws c' given c: an age delta uniform over {+-10, +-30, +-60} with
// out-of-range results rejected and redrawn, and an independent fair coin
// deciding whether the sex flips. The age always moves, so c' != c.
inline Condition sample_counterfactual_condition(const Condition& c, Rng& rng) {
    if (!c.valid()) throw std::invalid_argument("sample_counterfactual_condition: invalid condition");
    static constexpr std::array<double, 6> kDeltas{+10.0, -10.0, +30.0, -30.0, +60.0, -60.0};
    Condition cp = c;
    for (;;) {
        const double age = c.age + kDeltas[rng.below(kDeltas.size())];
        if (age >= 0.0 && age <= 100.0) {
            cp.age = age;
            break;
        }
    }
    if (rng.coin()) cp.sex = c.sex == Sex::male ? Sex::female : Sex::male;
    return cp;
}

namespace detail {

inline Tensor norm_loss(const Tensor& target, const Tensor& value, CycleNorm norm) {
    return norm == CycleNorm::l1 ? l1_loss(value, target) : mse_loss(value, target);
}

} // namespace detail

// ||z0 - z^0(z^0(z_t, t, c'), t, c)||, mean-reduced under the configured
// norm. The inner estimate runs under the counterfactual condition, the
// outer one under the original. By default (renoise_for_cycle=false) the
// inner estimate is fed straight back as the noisy input at the same t;
// with renoising enabled the caller supplies a fresh eps used to re-noise
// the inner estimate first.
inline Tensor cycle_loss(const NoisePredictor& pred, const Tensor& z0, int t,
                         std::span<const Condition> c, std::span<const Condition> cp,
                         const Tensor& eps, const NoiseSchedule& sched, const CdmConfig& cfg,
                         const Tensor* renoise_eps = nullptr) {
    Tensor z_t = forward_noise(z0, t, eps, sched);
    Tensor z0_cf = estimate_z0(pred, z_t, t, cp, sched);
    Tensor outer;
    if (cfg.renoise_for_cycle) {
        if (renoise_eps == nullptr)
            throw std::invalid_argument("cycle_loss: renoise_for_cycle needs a fresh eps");
        outer = estimate_z0(pred, forward_noise(z0_cf, t, *renoise_eps, sched), t, c, sched);
    } else {
        outer = estimate_z0(pred, z0_cf, t, c, sched);
    }
    return detail::norm_loss(z0, outer, cfg.cycle_norm);
}

struct CdmLossTerms {
    Tensor total;    // ldm_cf + ldm_fact + lambda * cycle
    Tensor ldm_cf;   // eps-prediction loss on z_t under c'
    Tensor ldm_fact; // eps-prediction loss on z~_t (z~0 re-noised with the same eps) under c
    Tensor cycle;
};

// The composite objective. One eps and one t are drawn per step and reused
// by all three terms; the counterfactual prediction at z_t is evaluated once
// and shared between the first LDM term and the cycle estimate.
inline CdmLossTerms cdm_loss(const NoisePredictor& pred, const Tensor& z0, int t,
                             std::span<const Condition> c, std::span<const Condition> cp,
                             const Tensor& eps, const NoiseSchedule& sched, const CdmConfig& cfg,
                             const Tensor* renoise_eps = nullptr) {
    Tensor z_t = forward_noise(z0, t, eps, sched);
    Tensor eps_cf = pred(z_t, t, cp);
    Tensor ldm_cf = mse_loss(eps, eps_cf);

    Tensor z0_cf = estimate_z0_from_eps(z_t, t, eps_cf, sched);
    Tensor zt_fact = forward_noise(z0_cf, t, eps, sched);
    Tensor ldm_fact = mse_loss(eps, pred(zt_fact, t, c));

    Tensor outer;
    if (cfg.renoise_for_cycle) {
        if (renoise_eps == nullptr)
            throw std::invalid_argument("cdm_loss: renoise_for_cycle needs a fresh eps");
        outer = estimate_z0(pred, forward_noise(z0_cf, t, *renoise_eps, sched), t, c, sched);
    } else {
        outer = estimate_z0(pred, z0_cf, t, c, sched);
    }
    Tensor cycle = detail::norm_loss(z0, outer, cfg.cycle_norm);

    Tensor total = add(add(ldm_cf, ldm_fact), scale(cycle, cfg.lambda));
    return {total, ldm_cf, ldm_fact, cycle};
}

// Uniform over non-empty decade bins (0-9, ..., 90-100), then uniform within
// the bin, with replacement.
inline std::vector<int> balanced_batch(std::span<const PhantomSpec> specs, int batch_size, Rng& rng) {
    if (specs.empty()) throw std::invalid_argument("balanced_batch: empty dataset");
    if (batch_size < 1) throw std::invalid_argument("balanced_batch: batch_size must be >= 1");
    std::array<std::vector<int>, 10> bins;
    for (size_t i = 0; i < specs.size(); ++i) {
        const int b = std::min(9, static_cast<int>(specs[i].condition.age / 10.0));
        bins[b].push_back(static_cast<int>(i));
    }
    std::vector<int> nonempty;
    for (int b = 0; b < 10; ++b)
        if (!bins[b].empty()) nonempty.push_back(b);
    std::vector<int> out;
    out.reserve(batch_size);
    for (int n = 0; n < batch_size; ++n) {
        const auto& bin = bins[nonempty[rng.below(nonempty.size())]];
        out.push_back(bin[rng.below(bin.size())]);
    }
    return out;
}

struct TrainData {
    std::span<const PhantomSpec> specs;
    const Autoencoder* autoencoder = nullptr; // frozen; encodes images to latents
};

struct TrainState {
    Denoiser denoiser;
    Adam opt;
    int64_t step = 0;
    Phase phase = Phase::pretrain;
    Rng rng;
    uint64_t seed = 0; // run seed, echoed into the log
    // Most recent per-step components, kept for logging and error reports.
    double last_ldm_cf = 0.0, last_ldm_fact = 0.0, last_cycle = 0.0;

    TrainState(const DenoiserConfig& dc, uint64_t run_seed)
        : denoiser(make_denoiser(dc, run_seed)), rng(run_seed), seed(run_seed) {
        (void)rng.split(); // mirror the child stream consumed by make_denoiser
    }

private:
    // Parameter initialization consumes a dedicated child stream so that the
    // training stream itself starts identically however the model was built.
    static Denoiser make_denoiser(const DenoiserConfig& dc, uint64_t run_seed) {
        Rng r(run_seed);
        Rng init = r.split();
        return Denoiser(dc, init);
    }
};

inline const char* train_log_header() { return "step,phase,loss_total,ldm_cf,ldm_fact,cycle,lr,seed"; }

// Runs one training phase. Pretraining minimizes the eps-prediction loss
// under the original condition; fine-tuning minimizes the composite
// objective with a freshly sampled counterfactual condition per batch
// element. Each step draws a balanced batch, encodes it (sampled latent),
// draws one t uniform in [1,T] and one eps, and applies one optimizer step.
// Components are appended to `log` as CSV every cfg.log_every steps.
inline void train(Phase phase, TrainState& st, const CdmConfig& cfg, const TrainData& data,
                  const NoiseSchedule& sched, std::ostream* log = nullptr, bool force = false) {
    cfg.validate();
    if (data.specs.empty()) throw std::invalid_argument("train: empty dataset");
    if (data.autoencoder == nullptr) throw std::invalid_argument("train: no autoencoder configured");
    if (phase == Phase::finetune && st.step == 0 && !force)
        throw std::logic_error("train: refusing to finetune from random initialization (force to override)");

    const int steps = phase == Phase::pretrain ? cfg.pretrain_steps : cfg.finetune_steps;
    st.phase = phase;
    st.opt.set_lr(phase == Phase::pretrain ? cfg.lr_pretrain : cfg.lr_finetune);
    auto params = st.denoiser.parameters();
    const Autoencoder& ae = *data.autoencoder;

    for (int k = 0; k < steps; ++k) {
        // Draw order is fixed; bit-exact resume depends on it.
        const auto ids = balanced_batch(data.specs, cfg.batch_size, st.rng);
        std::vector<PhantomSpec> batch;
        std::vector<Condition> conds;
        batch.reserve(ids.size());
        for (int id : ids) {
            batch.push_back(data.specs[id]);
            conds.push_back(data.specs[id].condition);
        }
        Tensor x = render_batch(batch);
        auto [mu, logvar] = ae.encode(x);
        Tensor z0 = ae.reparameterize(mu, logvar, st.rng);
        const int t = 1 + static_cast<int>(st.rng.below(static_cast<uint64_t>(sched.T)));
        Tensor eps = Tensor::randn(st.rng, z0.shape());

        Tensor loss;
        GradientTape tape;
        for (auto& p : params) tape.watch(*p.value);
        if (phase == Phase::pretrain) {
            loss = ldm_loss(st.denoiser.predictor(), z0, t, conds, eps, sched);
            st.last_ldm_cf = 0.0;
            st.last_ldm_fact = loss.item();
            st.last_cycle = 0.0;
        } else {
            std::vector<Condition> cps;
            cps.reserve(conds.size());
            for (const auto& c : conds) cps.push_back(sample_counterfactual_condition(c, st.rng));
            std::optional<Tensor> renoise_eps;
            if (cfg.renoise_for_cycle) renoise_eps = Tensor::randn(st.rng, z0.shape());
            auto terms = cdm_loss(st.denoiser.predictor(), z0, t, conds, cps, eps, sched, cfg,
                                  renoise_eps ? &*renoise_eps : nullptr);
            loss = terms.total;
            st.last_ldm_cf = terms.ldm_cf.item();
            st.last_ldm_fact = terms.ldm_fact.item();
            st.last_cycle = terms.cycle.item();
        }

        const float loss_value = loss.item();
        if (!std::isfinite(loss_value))
            throw std::runtime_error(
                "train: non-finite loss at step " + std::to_string(st.step + 1) +
                " (ldm_cf=" + std::to_string(st.last_ldm_cf) +
                ", ldm_fact=" + std::to_string(st.last_ldm_fact) +
                ", cycle=" + std::to_string(st.last_cycle) + ")");

        tape.backward(loss);
        st.opt.step(params, tape);
        ++st.step;

        if (log != nullptr && st.step % cfg.log_every == 0) {
            *log << st.step << ',' << phase_name(phase) << ',' << loss_value << ','
                 << st.last_ldm_cf << ',' << st.last_ldm_fact << ',' << st.last_cycle << ','
                 << st.opt.lr() << ',' << st.seed << '\n';
        }
    }
}

// --------------------------------------------------------------------------
// Stage-one training: the autoencoder is fit on its own (L1 reconstruction
// plus the KL penalty) and then frozen for both diffusion phases.

// Mean absolute pixel error of decode(encode-mean(x)) over a phantom set.
// Uses the latent mean, not a sample, so the result is deterministic.
inline double reconstruction_l1(const Autoencoder& ae, std::span<const PhantomSpec> specs) {
    if (specs.empty()) throw std::invalid_argument("reconstruction_l1: empty dataset");
    Tensor x = render_batch(std::vector<PhantomSpec>(specs.begin(), specs.end()));
    Tensor recon = ae.decode(ae.encode(x).first);
    return static_cast<double>(l1_loss(recon, x).item());
}

inline const char* ae_train_log_header() { return "step,loss,lr"; }

// Trains the autoencoder in place on decade-balanced batches with Adam.
// `rng` drives batch selection and the reparameterization noise. Loss rows
// are appended to `log` as CSV every log_every steps. No-op for the
// identity autoencoder (it has no parameters).
inline void train_autoencoder(Autoencoder& ae, std::span<const PhantomSpec> specs, int steps,
                              int batch_size, float lr, float kl_weight, Rng& rng,
                              std::ostream* log = nullptr, int log_every = 50) {
    if (specs.empty()) throw std::invalid_argument("train_autoencoder: empty dataset");
    if (steps < 0) throw std::invalid_argument("train_autoencoder: negative step count");
    auto params = ae.parameters();
    if (params.empty()) return;
    Adam opt(lr);
    for (int step = 1; step <= steps; ++step) {
        const auto ids = balanced_batch(specs, batch_size, rng);
        std::vector<PhantomSpec> batch;
        batch.reserve(ids.size());
        for (int id : ids) batch.push_back(specs[id]);
        Tensor x = render_batch(batch);

        float loss_value = 0.0f;
        {
            // Scoped so the consumed tape is gone before the next forward pass.
            GradientTape tape;
            for (auto& p : params) tape.watch(*p.value);
            auto [mu, logvar] = ae.encode(x);
            Tensor z = ae.reparameterize(mu, logvar, rng);
            Tensor loss = ae_loss(x, ae.decode(z), mu, logvar, kl_weight);
            loss_value = loss.item();
            if (!std::isfinite(loss_value))
                throw std::runtime_error("train_autoencoder: non-finite loss at step " +
                                         std::to_string(step));
            tape.backward(loss);
            opt.step(params, tape);
        }
        if (log != nullptr && step % log_every == 0)
            *log << step << ',' << loss_value << ',' << opt.lr() << '\n';
    }
}

} // namespace cdm
