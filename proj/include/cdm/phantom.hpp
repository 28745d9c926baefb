#pragma once

// Procedural "phantom brain" generator: 64x64 single-channel images whose
// anatomy encodes age and sex analytically, so condition adherence of
// generated images can be measured without a learned predictor.
//
// Anatomy model (ellipses with soft 1-px edges):
//   - head ellipse, semi-axes jittered per subject; male heads 5% wider
//   - cortical ring along the head boundary, thickness tau(age) with a
//     sinusoidal fold modulation
//   - interior tissue with a smooth per-subject texture (the identity cue)
//   - two dark ventricle lobes whose total area is v(age) * head area
//   - male subjects additionally get a brighter midline band
//
// Age cues: v(age) = 2% + 10% * age/100 of head area (ventricles grow),
//           tau(age) = 8 - 5 * age/100 px (cortex thins).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "cdm/rng.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

enum class Sex : int { female = 0, male = 1 };

struct Condition {
    double age = 50.0; // years, in [0,100]
    Sex sex = Sex::female;

    bool valid() const { return age >= 0.0 && age <= 100.0; }
};

// Per-subject anatomy offsets, all derived deterministically from
// identity_seed and bounded so ventricles stay inside cortex inside head.
struct Jitter {
    double ecc_a = 0.0;       // head semi-axis scale, +-4%
    double ecc_b = 0.0;
    double fold_phase = 0.0;  // cortical fold phase, [0, 2pi)
    double vent_dy = 0.0;     // ventricle lobe vertical asymmetry, +-1.5 px
    double vent_split = 0.0;  // left/right lobe area imbalance, +-10%
    double tex_kx = 0.0;      // tissue texture frequencies and phases
    double tex_ky = 0.0;
    double tex_px = 0.0;
    double tex_py = 0.0;
};

struct PhantomSpec {
    Condition condition;
    uint64_t identity_seed = 0;

    Jitter jitter() const {
        Rng rng(identity_seed);
        Jitter j;
        j.ecc_a = rng.uniform(-0.04, 0.04);
        j.ecc_b = rng.uniform(-0.04, 0.04);
        j.fold_phase = rng.uniform(0.0, 2.0 * kPi);
        j.vent_dy = rng.uniform(-1.5, 1.5);
        j.vent_split = rng.uniform(-0.10, 0.10);
        j.tex_kx = rng.uniform(2.0, 4.0) * 2.0 * kPi / 64.0;
        j.tex_ky = rng.uniform(2.0, 4.0) * 2.0 * kPi / 64.0;
        j.tex_px = rng.uniform(0.0, 2.0 * kPi);
        j.tex_py = rng.uniform(0.0, 2.0 * kPi);
        return j;
    }

    static constexpr double kPi = 3.14159265358979323846;
};

struct PhantomImage {
    Tensor pixels; // [1,1,H,W], values in [0,1], background exactly 0
    PhantomSpec spec;
};

namespace phantom_detail {

constexpr int kSize = 64;
constexpr double kBaseA = 23.0, kBaseB = 27.0; // head semi-axes at 64x64
constexpr double kMaleWiden = 1.05;
constexpr double kVMin = 0.02, kVMax = 0.12;   // ventricle area fraction
constexpr double kTauMax = 8.0, kTauMin = 3.0; // cortical thickness, px
constexpr double kFoldAmp = 0.20;              // fold modulation of tau
constexpr int kFoldCount = 6;
constexpr double kLobeAspect = 1.6; // ventricle lobes taller than wide
constexpr double kLobeGap = 1.5;    // half-gap between lobes, px
constexpr double kEdge = 1.2;       // soft edge width, px

constexpr float kRingVal = 0.85f;
constexpr float kTissueVal = 0.55f;
constexpr float kTexAmp = 0.06f;
constexpr float kVentVal = 0.08f;
constexpr float kBandVal = 0.15f;   // male midline brightening
constexpr double kBandHalfWidth = 2.0;

// Resolved per-subject geometry.
struct Geometry {
    double a, b;      // head semi-axes
    double cx, cy;
    Jitter j;
    bool male;
};

inline Geometry geometry(const PhantomSpec& spec) {
    Geometry g;
    g.j = spec.jitter();
    g.male = spec.condition.sex == Sex::male;
    g.a = kBaseA * (1.0 + g.j.ecc_a) * (g.male ? kMaleWiden : 1.0);
    g.b = kBaseB * (1.0 + g.j.ecc_b);
    g.cx = kSize / 2.0 - 0.5;
    g.cy = kSize / 2.0 - 0.5;
    return g;
}

// Smooth 0..1 coverage from a signed inside-distance in pixels.
inline double soft_in(double d, double w = kEdge) {
    const double t = d / w + 0.5;
    if (t <= 0.0) return 0.0;
    if (t >= 1.0) return 1.0;
    return t * t * (3.0 - 2.0 * t);
}

// Signed pixel distance to an axis-aligned ellipse boundary (+ inside),
// measured along the ray from the center: exact on that ray, accurate to the
// sub-pixel level needed for 1-px soft edges.
inline double ellipse_inside_px(double dx, double dy, double a, double b) {
    const double rho = std::sqrt((dx / a) * (dx / a) + (dy / b) * (dy / b));
    if (rho < 1e-9) return std::min(a, b);
    const double r = std::sqrt(dx * dx + dy * dy);
    return r * (1.0 / rho - 1.0);
}

struct Ventricles {
    // Lobe ellipses: centers (+-ox, cy + dy_l/r), semi-axes (ax_*, ay_*).
    double ox, dy_l, dy_r, ax_l, ay_l, ax_r, ay_r;
};

inline Ventricles ventricles(const Geometry& g, double age) {
    const double head_area = PhantomSpec::kPi * g.a * g.b;
    const double frac = kVMin + (kVMax - kVMin) * age / 100.0;
    const double total = frac * head_area;
    const double area_l = 0.5 * total * (1.0 + g.j.vent_split);
    const double area_r = 0.5 * total * (1.0 - g.j.vent_split);
    Ventricles v;
    v.ax_l = std::sqrt(area_l / (PhantomSpec::kPi * kLobeAspect));
    v.ay_l = v.ax_l * kLobeAspect;
    v.ax_r = std::sqrt(area_r / (PhantomSpec::kPi * kLobeAspect));
    v.ay_r = v.ax_r * kLobeAspect;
    v.ox = kLobeGap + std::max(v.ax_l, v.ax_r);
    v.dy_l = g.j.vent_dy;
    v.dy_r = -g.j.vent_dy;
    return v;
}

} // namespace phantom_detail

inline PhantomImage render(const PhantomSpec& spec) {
    using namespace phantom_detail;
    if (!spec.condition.valid())
        throw std::invalid_argument("render: age outside [0,100]");

    const Geometry g = geometry(spec);
    const double age = spec.condition.age;
    const double tau = kTauMax - (kTauMax - kTauMin) * age / 100.0;
    const Ventricles v = ventricles(g, age);

    Tensor img({1, 1, kSize, kSize});
    float* px = img.data();
    for (int y = 0; y < kSize; ++y) {
        for (int x = 0; x < kSize; ++x) {
            const double dx = x - g.cx;
            const double dy = y - g.cy;
            const double d_head = ellipse_inside_px(dx, dy, g.a, g.b);
            const double head_cov = soft_in(d_head);
            if (head_cov <= 0.0) {
                px[y * kSize + x] = 0.0f; // background exactly 0
                continue;
            }
            // Cortical ring: within tau_eff px of the head boundary.
            const double theta = std::atan2(dy, dx);
            const double tau_eff = tau * (1.0 + kFoldAmp * std::sin(kFoldCount * theta + g.j.fold_phase));
            const double inner_cov = soft_in(d_head - tau_eff);

            float tissue = kTissueVal +
                           kTexAmp * static_cast<float>(std::sin(g.j.tex_kx * x + g.j.tex_px) *
                                                        std::sin(g.j.tex_ky * y + g.j.tex_py));
            if (g.male) tissue += kBandVal * static_cast<float>(soft_in(kBandHalfWidth - std::fabs(dx)));

            float val = kRingVal + (tissue - kRingVal) * static_cast<float>(inner_cov);

            const double d_l = ellipse_inside_px(dx + v.ox, dy - v.dy_l, v.ax_l, v.ay_l);
            const double d_r = ellipse_inside_px(dx - v.ox, dy - v.dy_r, v.ax_r, v.ay_r);
            const double vent_cov = std::max(soft_in(d_l), soft_in(d_r));
            val += (kVentVal - val) * static_cast<float>(vent_cov);

            px[y * kSize + x] = val * static_cast<float>(head_cov);
        }
    }
    return PhantomImage{std::move(img), spec};
}

// Conservative age-independent mask of "identity" pixels: interior tissue
// that no cortical ring (at any age/fold) and no ventricle (at any age)
// can reach. Depends on identity_seed and sex only.
inline std::vector<uint8_t> identity_mask(const PhantomSpec& spec) {
    using namespace phantom_detail;
    const Geometry g = geometry(spec);
    // Worst-case ring depth and ventricle extents at age 100.
    const double ring_margin = kTauMax * (1.0 + kFoldAmp) + 2.0 * kEdge;
    const Ventricles v = ventricles(g, 100.0);
    const double pad = 2.0 + kEdge;

    std::vector<uint8_t> mask(kSize * kSize, 0);
    for (int y = 0; y < kSize; ++y)
        for (int x = 0; x < kSize; ++x) {
            const double dx = x - g.cx;
            const double dy = y - g.cy;
            if (ellipse_inside_px(dx, dy, g.a, g.b) <= ring_margin) continue;
            if (ellipse_inside_px(dx + v.ox, dy - v.dy_l, v.ax_l + pad, v.ay_l + pad) > 0) continue;
            if (ellipse_inside_px(dx - v.ox, dy - v.dy_r, v.ax_r + pad, v.ay_r + pad) > 0) continue;
            mask[y * kSize + x] = 1;
        }
    return mask;
}

// Maximal ventricle reach: pixels inside either age-100 ventricle ellipse
// (plus the soft-edge pad) — the region where aging adds or removes dark
// fluid. Depends on identity_seed and sex only.
inline std::vector<uint8_t> ventricle_region_mask(const PhantomSpec& spec) {
    using namespace phantom_detail;
    const Geometry g = geometry(spec);
    const Ventricles v = ventricles(g, 100.0);
    const double pad = kEdge;
    std::vector<uint8_t> mask(kSize * kSize, 0);
    for (int y = 0; y < kSize; ++y)
        for (int x = 0; x < kSize; ++x) {
            const double dx = x - g.cx;
            const double dy = y - g.cy;
            if (ellipse_inside_px(dx + v.ox, dy - v.dy_l, v.ax_l + pad, v.ay_l + pad) > 0 ||
                ellipse_inside_px(dx - v.ox, dy - v.dy_r, v.ax_r + pad, v.ay_r + pad) > 0)
                mask[y * kSize + x] = 1;
        }
    return mask;
}

// Inverts v(age) from pixel statistics. Bright tissue is anything >= 0.25;
// ventricle pixels are dark pixels inside the central box (which is always
// interior to the head). Returns nullopt when the image has no head or no
// detectable ventricle region.
inline std::optional<double> oracle_age(const Tensor& image) {
    using namespace phantom_detail;
    if (image.size() != kSize * kSize)
        throw std::invalid_argument("oracle_age: expected a 64x64 image, got " + shape_str(image.shape()));
    const float* px = image.data();
    // Midpoint of the ventricle->tissue transition, so soft boundary pixels
    // split evenly between the two classes.
    constexpr float kBright = 0.5f * (kVentVal + kTissueVal);
    constexpr int kBox = 16; // central +-16 px window, interior to any head
    int64_t bright = 0, dark_central = 0;
    const double c = kSize / 2.0 - 0.5;
    for (int y = 0; y < kSize; ++y)
        for (int x = 0; x < kSize; ++x) {
            const float v = px[y * kSize + x];
            if (v >= kBright) {
                ++bright;
            } else if (std::fabs(x - c) <= kBox && std::fabs(y - c) <= kBox) {
                ++dark_central;
            }
        }
    if (bright < 200 || dark_central == 0) return std::nullopt;
    const double vhat = static_cast<double>(dark_central) / static_cast<double>(bright + dark_central);
    const double age = 100.0 * (vhat - kVMin) / (kVMax - kVMin);
    return std::min(100.0, std::max(0.0, age));
}

enum class AgeDistribution { uniform, skewed };

// Deterministic dataset of phantom specs. `skewed` mimics a clinical age
// imbalance with a bimodal mixture 0.65*N(70,10^2) + 0.35*N(25,8^2), clamped
// to [0,100]; it leaves some decade bins under 5% so balanced sampling has
// something to correct.
inline std::vector<PhantomSpec> sample_dataset(int n, uint64_t seed, AgeDistribution dist) {
    if (n <= 0) throw std::invalid_argument("sample_dataset: n must be positive");
    Rng rng(seed);
    std::vector<PhantomSpec> specs;
    specs.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        PhantomSpec s;
        if (dist == AgeDistribution::uniform) {
            s.condition.age = rng.uniform(0.0, 100.0);
        } else {
            const bool old_mode = rng.uniform() < 0.65;
            const double mu = old_mode ? 70.0 : 25.0;
            const double sigma = old_mode ? 10.0 : 8.0;
            double age = mu + sigma * rng.normal();
            s.condition.age = std::min(100.0, std::max(0.0, age));
        }
        s.condition.sex = rng.coin() ? Sex::male : Sex::female;
        s.identity_seed = rng.next_u64();
        specs.push_back(s);
    }
    return specs;
}

// Stacks renders into a batch tensor [n,1,64,64].
inline Tensor render_batch(const std::vector<PhantomSpec>& specs) {
    using phantom_detail::kSize;
    if (specs.empty()) throw std::invalid_argument("render_batch: empty spec list");
    Tensor batch({static_cast<int>(specs.size()), 1, kSize, kSize});
    for (size_t i = 0; i < specs.size(); ++i) {
        Tensor img = render(specs[i]).pixels;
        std::copy(img.data(), img.data() + img.size(), batch.data() + static_cast<int64_t>(i) * kSize * kSize);
    }
    return batch;
}

} // namespace cdm
