#pragma once

// Diffusion mathematics: noise schedule, forward noising, epsilon-prediction
// loss, z0 estimation, deterministic DDIM sampling, and DDIM inversion.
//
// Everything is built from taped tensor ops, so a loss composed of these
// functions backpropagates into whatever noise predictor is plugged in.
// Timesteps are indexed t in [1, T]; alpha_bar(0) is defined as 1 so the
// final DDIM step returns the z0 estimate exactly.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cdm/ops.hpp"
#include "cdm/phantom.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

// Noise prediction hook: eps_theta(z_t, t, c). `c` holds one Condition per
// batch sample. Tests substitute closed-form mocks; training plugs in the
// denoiser network.
using NoisePredictor = std::function<Tensor(const Tensor& z_t, int t, std::span<const Condition> c)>;

enum class ScheduleKind { linear_beta, cosine };

struct NoiseSchedule {
    int T = 0;
    std::vector<double> alpha_bar; // alpha_bar[t-1] for t in [1, T]

    // alpha_bar with the t=0 convention baked in.
    double alpha_bar_at(int t) const {
        if (t == 0) return 1.0;
        check_t(t);
        return alpha_bar[static_cast<size_t>(t - 1)];
    }
    double sqrt_ab(int t) const { return std::sqrt(alpha_bar_at(t)); }
    double sqrt_1mab(int t) const { return std::sqrt(1.0 - alpha_bar_at(t)); }

    void check_t(int t) const {
        if (t < 1 || t > T)
            throw std::invalid_argument("timestep " + std::to_string(t) + " outside [1," + std::to_string(T) + "]");
    }

    // Validating factory used by make_schedule and by tests that pin exact
    // alpha_bar values.
    static NoiseSchedule from_alpha_bar(std::vector<double> ab) {
        if (ab.size() < 2) throw std::invalid_argument("NoiseSchedule: need T >= 2");
        double prev = 1.0 + 1e-12;
        for (double v : ab) {
            if (!(v > 0.0 && v <= 1.0)) throw std::invalid_argument("NoiseSchedule: alpha_bar outside (0,1]");
            if (!(v < prev)) throw std::invalid_argument("NoiseSchedule: alpha_bar not strictly decreasing");
            prev = v;
        }
        NoiseSchedule s;
        s.T = static_cast<int>(ab.size());
        s.alpha_bar = std::move(ab);
        return s;
    }
};

inline NoiseSchedule make_schedule(ScheduleKind kind, int T) {
    if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
    std::vector<double> ab(static_cast<size_t>(T));
    if (kind == ScheduleKind::linear_beta) {
        // beta_t linear from 1e-4 to 2e-2 across t = 1..T.
        double prod = 1.0;
        for (int t = 1; t <= T; ++t) {
            const double beta = 1e-4 + (2e-2 - 1e-4) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
            prod *= 1.0 - beta;
            ab[static_cast<size_t>(t - 1)] = prod;
        }
    } else {
        // Squared-cosine schedule: alpha_bar(t) = f(t)/f(0) with
        // f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2), s = 0.008, per-step beta
        // clamped to 0.999 to keep alpha_bar strictly positive.
        constexpr double s = 0.008;
        constexpr double pi = 3.14159265358979323846;
        auto f = [&](double t) {
            const double u = (t / T + s) / (1.0 + s) * pi / 2.0;
            const double c = std::cos(u);
            return c * c;
        };
        const double f0 = f(0.0);
        double prod = 1.0;
        double prev = 1.0;
        for (int t = 1; t <= T; ++t) {
            const double target = f(static_cast<double>(t)) / f0;
            double beta = 1.0 - target / prev;
            beta = std::min(beta, 0.999);
            prod *= 1.0 - beta;
            ab[static_cast<size_t>(t - 1)] = prod;
            prev = target;
        }
    }
    return NoiseSchedule::from_alpha_bar(std::move(ab));
}

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps. Differentiable in
// both z0 and eps.
inline Tensor forward_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    sched.check_t(t);
    if (z0.shape() != eps.shape())
        throw std::invalid_argument("forward_noise: z0 " + shape_str(z0.shape()) + " vs eps " + shape_str(eps.shape()));
    return add(scale(z0, static_cast<float>(sched.sqrt_ab(t))),
               scale(eps, static_cast<float>(sched.sqrt_1mab(t))));
}

// zhat0 = (z_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t), with the
// noise prediction supplied by the caller (lets one prediction be shared
// between several loss terms).
inline Tensor estimate_z0_from_eps(const Tensor& z_t, int t, const Tensor& eps_hat, const NoiseSchedule& sched) {
    sched.check_t(t);
    return scale(sub(z_t, scale(eps_hat, static_cast<float>(sched.sqrt_1mab(t)))),
                 static_cast<float>(1.0 / sched.sqrt_ab(t)));
}

inline Tensor estimate_z0(const NoisePredictor& eps_theta, const Tensor& z_t, int t,
                          std::span<const Condition> c, const NoiseSchedule& sched) {
    sched.check_t(t);
    return estimate_z0_from_eps(z_t, t, eps_theta(z_t, t, c), sched);
}

// Epsilon-prediction loss: mean squared error between the injected noise and
// the prediction at the noised latent.
inline Tensor ldm_loss(const NoisePredictor& eps_theta, const Tensor& z0, int t,
                       std::span<const Condition> c, const Tensor& eps, const NoiseSchedule& sched) {
    Tensor z_t = forward_noise(z0, t, eps, sched);
    return mse_loss(eps, eps_theta(z_t, t, c));
}

// One deterministic DDIM step:
// z_{t-1} = sqrt(alpha_bar_{t-1}) zhat0 + sqrt(1 - alpha_bar_{t-1}) eps_hat.
// At t = 1 this returns zhat0 exactly (alpha_bar_0 = 1).
inline Tensor ddim_step_from_eps(const Tensor& z_t, int t, const Tensor& eps_hat, const NoiseSchedule& sched) {
    sched.check_t(t);
    Tensor z0_hat = estimate_z0_from_eps(z_t, t, eps_hat, sched);
    return add(scale(z0_hat, static_cast<float>(sched.sqrt_ab(t - 1))),
               scale(eps_hat, static_cast<float>(sched.sqrt_1mab(t - 1))));
}

inline Tensor ddim_step(const NoisePredictor& eps_theta, const Tensor& z_t, int t,
                        std::span<const Condition> c, const NoiseSchedule& sched) {
    sched.check_t(t);
    return ddim_step_from_eps(z_t, t, eps_theta(z_t, t, c), sched);
}

struct SamplerTrace {
    struct Step {
        int t;
        Tensor z_t;     // latent entering this step
        Tensor z0_hat;  // clean estimate formed at this step
    };
    std::vector<Step> steps;
};

// Full deterministic sampling from z_T down to t = 1.
inline Tensor ddim_sample(const NoisePredictor& eps_theta, const Tensor& z_T,
                          std::span<const Condition> c, const NoiseSchedule& sched,
                          SamplerTrace* trace = nullptr) {
    if (!z_T.all_finite()) throw std::invalid_argument("ddim_sample: z_T is not finite");
    Tensor z = z_T;
    for (int t = sched.T; t >= 1; --t) {
        Tensor eps_hat = eps_theta(z, t, c);
        Tensor z0_hat = estimate_z0_from_eps(z, t, eps_hat, sched);
        if (trace) trace->steps.push_back({t, z, z0_hat});
        z = add(scale(z0_hat, static_cast<float>(sched.sqrt_ab(t - 1))),
                scale(eps_hat, static_cast<float>(sched.sqrt_1mab(t - 1))));
        if (!z.all_finite())
            throw std::runtime_error("ddim_sample: non-finite latent after step t=" + std::to_string(t));
    }
    return z;
}

enum class InversionMode { approx, fixed_point };

// The DDIM recurrence solved for z_t given z_{t-1}:
//   z_t = sqrt(ab_t/ab_{t-1}) z_{t-1} + eta_t eps_theta(z_t, t, c)
//   eta_t = sqrt(1-ab_t) - sqrt(ab_t/ab_{t-1}) sqrt(1-ab_{t-1}),
// implicit in z_t. `approx` evaluates eps_theta at z_{t-1}; `fixed_point`
// refines with k damped iterations starting from the approx value.
struct InvertStepResult {
    Tensor z_t;
    // Residual ||z - RHS(z)|| after the approx initialization (index 0) and
    // after each refinement iteration.
    std::vector<double> residuals;
};

namespace detail {

inline double l2_norm(const Tensor& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.at(i)) * a.at(i);
    return std::sqrt(s);
}

inline double l2_diff(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a.at(i)) - b.at(i);
        s += d * d;
    }
    return std::sqrt(s);
}

} // namespace detail

inline InvertStepResult ddim_invert_step(const NoisePredictor& eps_theta, const Tensor& z_prev, int t,
                                         std::span<const Condition> c, const NoiseSchedule& sched,
                                         InversionMode mode, int k = 3, double damping = 1.0) {
    sched.check_t(t);
    if (mode == InversionMode::fixed_point && k < 1)
        throw std::invalid_argument("ddim_invert_step: fixed-point mode needs k >= 1");
    const double ratio = std::sqrt(sched.alpha_bar_at(t) / sched.alpha_bar_at(t - 1));
    const double eta = sched.sqrt_1mab(t) - ratio * sched.sqrt_1mab(t - 1);
    auto rhs = [&](const Tensor& z) {
        return add(scale(z_prev, static_cast<float>(ratio)),
                   scale(eps_theta(z, t, c), static_cast<float>(eta)));
    };

    InvertStepResult out;
    Tensor z = rhs(z_prev); // approx: eps evaluated at z_{t-1}
    if (mode == InversionMode::approx) {
        out.z_t = z;
        return out;
    }
    out.residuals.push_back(detail::l2_diff(z, rhs(z)));
    for (int i = 0; i < k; ++i) {
        Tensor next = rhs(z);
        if (damping != 1.0) next = add(scale(z, static_cast<float>(1.0 - damping)),
                                       scale(next, static_cast<float>(damping)));
        z = next;
        if (!z.all_finite())
            throw std::runtime_error("ddim_invert_step: non-finite iterate at t=" + std::to_string(t));
        out.residuals.push_back(detail::l2_diff(z, rhs(z)));
    }
    out.z_t = z;
    return out;
}

// Full inversion z0 -> z_T by iterating t = 1..T.
inline Tensor ddim_invert(const NoisePredictor& eps_theta, const Tensor& z0,
                          std::span<const Condition> c, const NoiseSchedule& sched,
                          InversionMode mode, int k = 3, double damping = 1.0) {
    if (!z0.all_finite()) throw std::invalid_argument("ddim_invert: z0 is not finite");
    Tensor z = z0;
    for (int t = 1; t <= sched.T; ++t) {
        z = ddim_invert_step(eps_theta, z, t, c, sched, mode, k, damping).z_t;
        if (!z.all_finite())
            throw std::runtime_error("ddim_invert: non-finite latent after step t=" + std::to_string(t));
    }
    return z;
}

// Latent-space counterfactual: invert under the factual condition, then
// sample under the target condition. Image decode, when an autoencoder is in
// play, happens at the pipeline layer.
inline Tensor counterfactual_latent(const NoisePredictor& eps_theta, const Tensor& z0,
                                    std::span<const Condition> c, std::span<const Condition> c_prime,
                                    const NoiseSchedule& sched, InversionMode mode, int k = 3,
                                    double damping = 1.0, SamplerTrace* trace = nullptr) {
    Tensor z_T = ddim_invert(eps_theta, z0, c, sched, mode, k, damping);
    return ddim_sample(eps_theta, z_T, c_prime, sched, trace);
}

} // namespace cdm
