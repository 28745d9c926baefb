#pragma once

#include <cmath>
#include <cstdint>

namespace cdm {

// Splittable counter-based generator built on the SplitMix64 mix function
// (Steele et al., "Fast splittable pseudorandom number generators").
// Every source of randomness in this project draws from an Rng so that runs
// are bit-reproducible from a single 64-bit seed.
//
// State is (counter, gamma): next() mixes counter += gamma. split() derives
// an independent child stream from the parent's next output.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t gamma = kDefaultGamma)
        : state_(seed), gamma_(gamma | 1) {}

    uint64_t next_u64() {
        state_ += gamma_;
        return mix64(state_);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n), n > 0.
    uint64_t below(uint64_t n) { return next_u64() % n; }

    bool coin() { return (next_u64() & 1u) != 0; }

    // Standard normal via Box-Muller. Hand-rolled (not std::normal_distribution)
    // because libstdc++ distributions are implementation-defined and would not
    // be reproducible across standard libraries.
    float normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * kPi * u2;
        spare_ = static_cast<float>(r * std::sin(theta));
        have_spare_ = true;
        return static_cast<float>(r * std::cos(theta));
    }

    // Independent child stream. Parent advances by two draws.
    Rng split() {
        const uint64_t seed = next_u64();
        const uint64_t gamma = next_u64() | 1;
        return Rng(seed, gamma);
    }

    // Serialization for bit-exact training resume. The Box-Muller spare is
    // deliberately not persisted; callers must checkpoint at draw boundaries
    // (Rng streams in this repo are split per step, so this holds).
    uint64_t state() const { return state_; }
    uint64_t gamma() const { return gamma_; }
    static Rng restore(uint64_t state, uint64_t gamma) {
        return Rng(state, gamma);
    }

    static uint64_t mix64(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ULL;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebULL;
        z ^= z >> 31;
        return z;
    }

    static constexpr uint64_t kDefaultGamma = 0x9e3779b97f4a7c15ULL;

private:
    static constexpr double kPi = 3.14159265358979323846;

    uint64_t state_;
    uint64_t gamma_;
    bool have_spare_ = false;
    float spare_ = 0.0f;
};

} // namespace cdm
