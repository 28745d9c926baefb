#pragma once

// Evaluation suite: learned age/sex predictors with quality gates, age MAE
// and sex accuracy, multi-scale SSIM diversity, Fréchet feature distance,
// and the per-delta counterfactual error tables. All metrics are pure
// functions over frozen models; generation-side evaluation batches every
// spec through one inversion pass and one sampling pass per delta.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdm/adam.hpp"
#include "cdm/autoencoder.hpp"
#include "cdm/cdm_train.hpp"
#include "cdm/diffusion.hpp"
#include "cdm/nn.hpp"
#include "cdm/ops.hpp"
#include "cdm/phantom.hpp"
#include "cdm/rng.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

// Thrown when the learned predictors miss their quality gates; callers can
// distinguish "the measuring stick is bad" from numerical failures.
struct GateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// --- MS-SSIM -----------------------------------------------------------------

namespace detail {

// Normalized 11-tap Gaussian, sigma 1.5 — the standard SSIM window.
inline const std::vector<double>& ssim_window() {
    static const std::vector<double> w = [] {
        std::vector<double> v(11);
        double sum = 0.0;
        for (int i = 0; i < 11; ++i) {
            const double d = i - 5.0;
            v[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
            sum += v[static_cast<size_t>(i)];
        }
        for (double& x : v) x /= sum;
        return v;
    }();
    return w;
}

// Valid-mode separable Gaussian filter; input h*w doubles, output
// (h-10)*(w-10).
inline std::vector<double> gauss_filter(const std::vector<double>& img, int h, int w) {
    const auto& win = ssim_window();
    const int oh = h - 10, ow = w - 10;
    std::vector<double> rows(static_cast<size_t>(h) * ow);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int k = 0; k < 11; ++k) s += win[static_cast<size_t>(k)] * img[static_cast<size_t>(y) * w + x + k];
            rows[static_cast<size_t>(y) * ow + x] = s;
        }
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int k = 0; k < 11; ++k) s += win[static_cast<size_t>(k)] * rows[static_cast<size_t>(y + k) * ow + x];
            out[static_cast<size_t>(y) * ow + x] = s;
        }
    return out;
}

// Mean contrast-structure term and mean full SSIM over the valid region.
struct SsimScale {
    double cs;
    double ssim;
};

inline SsimScale ssim_scale(const std::vector<double>& a, const std::vector<double>& b, int h, int w) {
    constexpr double kC1 = 0.01 * 0.01; // (K1 * L)^2, L = 1
    constexpr double kC2 = 0.03 * 0.03;
    const size_t n = static_cast<size_t>(h) * w;
    std::vector<double> aa(n), bb(n), ab(n);
    for (size_t i = 0; i < n; ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto mu_a = gauss_filter(a, h, w);
    const auto mu_b = gauss_filter(b, h, w);
    const auto m_aa = gauss_filter(aa, h, w);
    const auto m_bb = gauss_filter(bb, h, w);
    const auto m_ab = gauss_filter(ab, h, w);
    double cs_sum = 0.0, ssim_sum = 0.0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
        const double va = m_aa[i] - mu_a[i] * mu_a[i];
        const double vb = m_bb[i] - mu_b[i] * mu_b[i];
        const double cov = m_ab[i] - mu_a[i] * mu_b[i];
        const double cs = (2.0 * cov + kC2) / (va + vb + kC2);
        const double lum = (2.0 * mu_a[i] * mu_b[i] + kC1) / (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1);
        cs_sum += cs;
        ssim_sum += lum * cs;
    }
    const double m = static_cast<double>(mu_a.size());
    return {cs_sum / m, ssim_sum / m};
}

inline std::vector<double> downsample2x(const std::vector<double>& img, int h, int w) {
    const int oh = h / 2, ow = w / 2;
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
            out[static_cast<size_t>(y) * ow + x] =
                0.25 * (img[static_cast<size_t>(2 * y) * w + 2 * x] + img[static_cast<size_t>(2 * y) * w + 2 * x + 1] +
                        img[static_cast<size_t>(2 * y + 1) * w + 2 * x] +
                        img[static_cast<size_t>(2 * y + 1) * w + 2 * x + 1]);
    return out;
}

// Accepts [h,w] or any rank with leading extents 1 (e.g. [1,1,h,w]).
inline std::pair<int, int> image_extents(const Tensor& t) {
    const Shape& s = t.shape();
    if (s.size() < 2) throw std::invalid_argument("ms_ssim: image must have at least 2 dimensions");
    for (size_t i = 0; i + 2 < s.size(); ++i)
        if (s[i] != 1) throw std::invalid_argument("ms_ssim: expected a single image, got " + shape_str(s));
    return {s[s.size() - 2], s[s.size() - 1]};
}

} // namespace detail

// Standard MS-SSIM with the 3-scale truncation of the canonical weights
// (renormalized); contrast-structure at every scale, luminance folded in at
// the coarsest, geometric combination. Inputs are expected in [0,1].
inline double ms_ssim(const Tensor& a, const Tensor& b, int scales = 3) {
    const auto [ha, wa] = detail::image_extents(a);
    const auto [hb, wb] = detail::image_extents(b);
    if (ha != hb || wa != wb) throw std::invalid_argument("ms_ssim: image shapes differ");
    if (scales < 1 || scales > 5) throw std::invalid_argument("ms_ssim: scales must be in [1,5]");
    const int min_side = 11 << (scales - 1);
    if (ha < min_side || wa < min_side)
        throw std::invalid_argument("ms_ssim: " + std::to_string(ha) + "x" + std::to_string(wa) +
                                    " too small for " + std::to_string(scales) + " scales (need " +
                                    std::to_string(min_side) + ")");

    static constexpr double kCanonical[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
    double wsum = 0.0;
    for (int j = 0; j < scales; ++j) wsum += kCanonical[j];

    std::vector<double> xa(static_cast<size_t>(ha) * wa), xb(xa.size());
    for (size_t i = 0; i < xa.size(); ++i) {
        xa[i] = a.data()[i];
        xb[i] = b.data()[i];
    }
    int h = ha, w = wa;
    double value = 1.0;
    for (int j = 0; j < scales; ++j) {
        const auto s = detail::ssim_scale(xa, xb, h, w);
        // Negative cs is possible for anti-correlated patches; clamp so the
        // fractional power stays real (standard practice).
        const double base = std::max(0.0, j + 1 == scales ? s.ssim : s.cs);
        value *= std::pow(base, kCanonical[j] / wsum);
        if (j + 1 < scales) {
            xa = detail::downsample2x(xa, h, w);
            xb = detail::downsample2x(xb, h, w);
            h /= 2;
            w /= 2;
        }
    }
    return value;
}

// Mean MS-SSIM over all unordered pairs of a sample stack [n,1,h,w]; the
// paper uses this as a diversity score (lower = more diverse).
inline double ms_ssim_pairwise_mean(const Tensor& images, int scales = 3) {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != 1)
        throw std::invalid_argument("ms_ssim_pairwise_mean: expected [n,1,h,w], got " + shape_str(s));
    const int n = s[0];
    if (n < 2) throw std::invalid_argument("ms_ssim_pairwise_mean: need at least 2 images");
    const int64_t px = static_cast<int64_t>(s[2]) * s[3];
    double sum = 0.0;
    int64_t pairs = 0;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            Tensor a = Tensor::zeros({1, 1, s[2], s[3]});
            Tensor b = Tensor::zeros({1, 1, s[2], s[3]});
            std::copy_n(images.data() + i * px, px, a.data());
            std::copy_n(images.data() + j * px, px, b.data());
            sum += ms_ssim(a, b, scales);
            ++pairs;
        }
    return sum / static_cast<double>(pairs);
}

// --- Fréchet feature distance --------------------------------------------------

// Fréchet distance between Gaussians fitted to two feature sets [n,d]:
// ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), computed in f64 via the
// eigendecomposition of sqrt(S1) S2 sqrt(S1) (same trace, symmetric so the
// solver is stable). Covariances use ddof = 1.
inline double frechet_distance(const Tensor& fa, const Tensor& fb) {
    const Shape& sa = fa.shape();
    const Shape& sb = fb.shape();
    if (sa.size() != 2 || sb.size() != 2)
        throw std::invalid_argument("frechet_distance: features must be [n,d]");
    if (sa[1] != sb[1]) throw std::invalid_argument("frechet_distance: feature dimensions differ");
    const int d = sa[1];
    if (sa[0] <= d || sb[0] <= d)
        throw std::invalid_argument("frechet_distance: need more samples than feature dimensions (d=" +
                                    std::to_string(d) + ")");

    auto moments = [](const Tensor& f) {
        const int n = f.shape()[0], dd = f.shape()[1];
        Eigen::MatrixXd x(n, dd);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dd; ++j) x(i, j) = f.data()[static_cast<int64_t>(i) * dd + j];
        Eigen::VectorXd mu = x.colwise().mean();
        x.rowwise() -= mu.transpose();
        Eigen::MatrixXd sigma = (x.transpose() * x) / static_cast<double>(n - 1);
        return std::make_pair(mu, sigma);
    };
    const auto [mu1, s1] = moments(fa);
    const auto [mu2, s2] = moments(fb);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(s1);
    Eigen::VectorXd l1 = es1.eigenvalues().cwiseMax(0.0); // covariance is PSD up to rounding
    Eigen::MatrixXd s1_half =
        es1.eigenvectors() * l1.cwiseSqrt().asDiagonal() * es1.eigenvectors().transpose();

    Eigen::MatrixXd prod = s1_half * s2 * s1_half;
    prod = 0.5 * (prod + prod.transpose().eval());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> esp(prod);
    const Eigen::VectorXd lp = esp.eigenvalues();
    const double lmax = std::max(lp.maxCoeff(), 0.0);
    const double tol = 1e-6 * std::max(1.0, lmax);
    double trace_sqrt = 0.0;
    double lmin_pos = lmax;
    for (int i = 0; i < lp.size(); ++i) {
        if (lp(i) < -tol) {
            for (int j = 0; j < lp.size(); ++j)
                if (lp(j) > 0.0) lmin_pos = std::min(lmin_pos, lp(j));
            std::ostringstream msg;
            msg << "frechet_distance: product matrix indefinite beyond tolerance (eigenvalue " << lp(i)
                << ", condition " << (lmin_pos > 0.0 ? lmax / lmin_pos : std::numeric_limits<double>::infinity())
                << "); covariance too rank-deficient";
            throw std::runtime_error(msg.str());
        }
        trace_sqrt += std::sqrt(std::max(lp(i), 0.0));
    }
    return (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * trace_sqrt;
}

// --- Learned predictors ----------------------------------------------------------

struct PredictorConfig {
    int channels[4] = {16, 32, 64, 64}; // four downsampling levels
    int norm_groups = 8;

    static PredictorConfig toy() {
        PredictorConfig c;
        c.channels[0] = 4;
        c.channels[1] = 4;
        c.channels[2] = 8;
        c.channels[3] = 8;
        c.norm_groups = 4;
        return c;
    }
};

// CNN shared by the age regressor and the sex classifier: four downsampling
// levels of two (conv, norm, ReLU) blocks, global average pooling, and a
// linear head to one scalar. The pooled vector doubles as the feature
// embedding for the Fréchet distance.
class Predictor {
public:
    PredictorConfig config;
    Conv2dLayer entry[4]; // stride-2 first block of each level
    GroupNormLayer entry_norm[4];
    Conv2dLayer inner[4]; // stride-1 second block
    GroupNormLayer inner_norm[4];
    Linear head;

    Predictor(const PredictorConfig& cfg, Rng& rng) : config(cfg) {
        int cin = 1;
        for (int l = 0; l < 4; ++l) {
            const int cout = cfg.channels[l];
            entry[l] = Conv2dLayer::init(cin, cout, 3, rng, /*stride=*/2, /*pad=*/1, /*bias=*/false);
            entry_norm[l] = GroupNormLayer::init(cout, cfg.norm_groups);
            inner[l] = Conv2dLayer::init(cout, cout, 3, rng, /*stride=*/1, /*pad=*/1, /*bias=*/false);
            inner_norm[l] = GroupNormLayer::init(cout, cfg.norm_groups);
            cin = cout;
        }
        head = Linear::init(cin, 1, rng);
    }

    // Pooled penultimate features [n, channels[3]].
    Tensor features(const Tensor& x) const {
        const Shape& s = x.shape();
        if (s.size() != 4 || s[1] != 1)
            throw std::invalid_argument("predictor: expected [n,1,h,w], got " + shape_str(s));
        Tensor h = x;
        for (int l = 0; l < 4; ++l) {
            h = relu(entry_norm[l](entry[l](h)));
            h = relu(inner_norm[l](inner[l](h)));
        }
        Tensor pooled = global_avg_pool(h); // [n, c, 1, 1]
        return reshape(pooled, {s[0], config.channels[3]});
    }

    // Raw scalar output [n, 1]: normalized age for the regressor, a logit
    // for the classifier.
    Tensor operator()(const Tensor& x) const { return head(features(x)); }

    std::vector<NamedParam> parameters() {
        std::vector<NamedParam> out;
        for (int l = 0; l < 4; ++l) {
            const std::string p = "level" + std::to_string(l) + ".";
            entry[l].collect(p + "entry", out);
            entry_norm[l].collect(p + "entry_norm", out);
            inner[l].collect(p + "inner", out);
            inner_norm[l].collect(p + "inner_norm", out);
        }
        head.collect("head", out);
        return out;
    }
};

// Ages are regressed on a [0,1] scale; helpers convert to years.
inline std::vector<double> predict_ages(const Predictor& age_model, const Tensor& images) {
    Tensor out = age_model(images);
    std::vector<double> ages(static_cast<size_t>(out.shape()[0]));
    for (size_t i = 0; i < ages.size(); ++i) ages[i] = 100.0 * static_cast<double>(out.data()[i]);
    return ages;
}

inline std::vector<Sex> predict_sexes(const Predictor& sex_model, const Tensor& images) {
    Tensor out = sex_model(images);
    std::vector<Sex> sexes(static_cast<size_t>(out.shape()[0]));
    for (size_t i = 0; i < sexes.size(); ++i) sexes[i] = out.data()[i] > 0.0f ? Sex::male : Sex::female;
    return sexes;
}

inline double age_mae(const Predictor& age_model, const Tensor& images, std::span<const double> target_ages) {
    const auto pred = predict_ages(age_model, images);
    if (pred.empty()) throw std::invalid_argument("age_mae: empty image set");
    if (pred.size() != target_ages.size()) throw std::invalid_argument("age_mae: image/target count mismatch");
    double sum = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) sum += std::fabs(pred[i] - target_ages[i]);
    return sum / static_cast<double>(pred.size());
}

inline double sex_accuracy(const Predictor& sex_model, const Tensor& images, std::span<const Sex> targets) {
    const auto pred = predict_sexes(sex_model, images);
    if (pred.empty()) throw std::invalid_argument("sex_accuracy: empty image set");
    if (pred.size() != targets.size()) throw std::invalid_argument("sex_accuracy: image/target count mismatch");
    int64_t hits = 0;
    for (size_t i = 0; i < pred.size(); ++i) hits += pred[i] == targets[i];
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// --- Predictor training ------------------------------------------------------------

struct PredictorTrainConfig {
    PredictorConfig arch;
    int max_steps = 1500;
    int batch_size = 8;
    float lr = 1e-3f;
    int check_every = 100;
    // Quality gates: evaluation refuses to run with weaker predictors.
    double gate_age_mae = 5.0;
    double gate_sex_accuracy = 0.9;
};

struct Predictors {
    Predictor age;
    Predictor sex;
    double train_age_mae = 0.0, heldout_age_mae = 0.0;
    double train_sex_accuracy = 0.0, heldout_sex_accuracy = 0.0;
    double gate_age_mae = 5.0, gate_sex_accuracy = 0.9;
    uint64_t seed = 0;

    bool gates_met() const {
        return heldout_age_mae < gate_age_mae && heldout_sex_accuracy > gate_sex_accuracy;
    }
    void require_gates() const {
        if (!gates_met()) {
            std::ostringstream msg;
            msg << "predictors below quality gates: held-out age MAE " << heldout_age_mae << " (need < "
                << gate_age_mae << "), sex accuracy " << heldout_sex_accuracy << " (need > "
                << gate_sex_accuracy << ")";
            throw GateError(msg.str());
        }
    }
};

namespace detail {

inline std::vector<double> spec_ages(std::span<const PhantomSpec> specs) {
    std::vector<double> ages(specs.size());
    for (size_t i = 0; i < specs.size(); ++i) ages[i] = specs[i].condition.age;
    return ages;
}

inline std::vector<Sex> spec_sexes(std::span<const PhantomSpec> specs) {
    std::vector<Sex> sexes(specs.size());
    for (size_t i = 0; i < specs.size(); ++i) sexes[i] = specs[i].condition.sex;
    return sexes;
}

} // namespace detail

// Trains the age regressor (MSE on age/100) and sex classifier (BCE on
// logits) jointly on rendered phantoms with decade-balanced batches. Stops
// early once both held-out gates pass; throws with diagnostics if the step
// budget ends with either gate unmet.
inline Predictors train_predictors(std::span<const PhantomSpec> train_specs,
                                   std::span<const PhantomSpec> heldout_specs,
                                   const PredictorTrainConfig& cfg, uint64_t seed,
                                   std::ostream* log = nullptr) {
    if (train_specs.empty() || heldout_specs.empty())
        throw std::invalid_argument("train_predictors: empty spec set");

    Rng rng(seed);
    Rng init = rng.split();
    Predictors p{Predictor(cfg.arch, init), Predictor(cfg.arch, init)};
    p.gate_age_mae = cfg.gate_age_mae;
    p.gate_sex_accuracy = cfg.gate_sex_accuracy;
    p.seed = seed;

    std::vector<NamedParam> params;
    for (auto& np : p.age.parameters()) params.push_back({"age." + np.name, np.value});
    for (auto& np : p.sex.parameters()) params.push_back({"sex." + np.name, np.value});
    Adam opt(cfg.lr);

    const Tensor heldout_images = render_batch({heldout_specs.begin(), heldout_specs.end()});
    const auto heldout_ages = detail::spec_ages(heldout_specs);
    const auto heldout_sexes = detail::spec_sexes(heldout_specs);

    auto evaluate = [&] {
        p.heldout_age_mae = age_mae(p.age, heldout_images, heldout_ages);
        p.heldout_sex_accuracy = sex_accuracy(p.sex, heldout_images, heldout_sexes);
    };

    for (int step = 1; step <= cfg.max_steps; ++step) {
        const auto idx = balanced_batch(train_specs, cfg.batch_size, rng);
        std::vector<PhantomSpec> batch;
        batch.reserve(idx.size());
        for (int i : idx) batch.push_back(train_specs[static_cast<size_t>(i)]);
        const Tensor images = render_batch(batch);

        Tensor age_target = Tensor::zeros({cfg.batch_size, 1});
        Tensor sex_target = Tensor::zeros({cfg.batch_size, 1});
        for (int i = 0; i < cfg.batch_size; ++i) {
            age_target.data()[i] = static_cast<float>(batch[static_cast<size_t>(i)].condition.age / 100.0);
            sex_target.data()[i] = batch[static_cast<size_t>(i)].condition.sex == Sex::male ? 1.0f : 0.0f;
        }

        {
            // Scoped so the consumed tape is gone before any evaluation
            // forward pass below.
            GradientTape tape;
            for (auto& np : params) tape.watch(*np.value);
            Tensor loss =
                add(mse_loss(p.age(images), age_target), bce_with_logits(p.sex(images), sex_target));
            if (!loss.all_finite())
                throw std::runtime_error("train_predictors: non-finite loss at step " + std::to_string(step));
            tape.backward(loss);
            opt.step(params, tape);
        }

        if (step % cfg.check_every == 0 || step == cfg.max_steps) {
            evaluate();
            if (log)
                *log << "predictor step " << step << ": heldout age MAE " << p.heldout_age_mae
                     << ", sex accuracy " << p.heldout_sex_accuracy << "\n";
            if (p.gates_met()) break;
        }
    }

    evaluate();
    const Tensor train_images = render_batch({train_specs.begin(), train_specs.end()});
    p.train_age_mae = age_mae(p.age, train_images, detail::spec_ages(train_specs));
    p.train_sex_accuracy = sex_accuracy(p.sex, train_images, detail::spec_sexes(train_specs));
    p.require_gates();
    return p;
}

// --- Evaluation pipelines -------------------------------------------------------

// Frozen generative model handed to the evaluation pipelines.
struct EvalModel {
    NoisePredictor predict;
    const Autoencoder* autoencoder = nullptr;
    const NoiseSchedule* schedule = nullptr;
    InversionMode inversion = InversionMode::fixed_point;
    int fixed_point_iters = 3;
};

// Evaluation sweep per the protocol: n specs with ages linear in [5,100]
// and alternating sex, fresh identities from the seed.
inline std::vector<PhantomSpec> eval_sweep_specs(int n, uint64_t seed) {
    if (n < 2) throw std::invalid_argument("eval_sweep_specs: need n >= 2");
    Rng rng(seed);
    std::vector<PhantomSpec> specs;
    specs.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double age = 5.0 + 95.0 * static_cast<double>(i) / static_cast<double>(n - 1);
        const Sex sex = i % 2 == 0 ? Sex::female : Sex::male;
        specs.push_back({{age, sex}, rng.next_u64()});
    }
    return specs;
}

struct DeltaRow {
    double mae_regressor = 0.0;
    double mae_oracle = 0.0;
    int n = 0;
};

struct CounterfactualTable {
    std::map<int, DeltaRow> rows; // keyed by age delta
    int n_specs = 0;
    int n_excluded = 0;      // specs with no in-range delta
    int n_oracle_failed = 0; // generated images the analytic oracle rejected
};

inline const std::vector<int>& default_deltas() {
    static const std::vector<int> d{-60, -30, -10, 10, 30, 60};
    return d;
}

namespace detail {

inline Tensor take_rows(const Tensor& x, std::span<const int> idx) {
    Shape s = x.shape();
    const int64_t row = x.size() / s[0];
    s[0] = static_cast<int>(idx.size());
    Tensor out = Tensor::zeros(s);
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(x.data() + idx[i] * row, row, out.data() + static_cast<int64_t>(i) * row);
    return out;
}

inline std::vector<Condition> spec_conditions(std::span<const PhantomSpec> specs) {
    std::vector<Condition> c(specs.size());
    for (size_t i = 0; i < specs.size(); ++i) c[i] = specs[i].condition;
    return c;
}

} // namespace detail

// Counterfactual error table (per-delta layout): every spec is encoded and
// DDIM-inverted once under its source condition; each delta then re-samples
// the kept subset under the shifted condition and scores the generated age
// against the target with both the learned regressor and the analytic
// oracle. Deltas that push a spec outside [0,100] are skipped per sample.
inline CounterfactualTable counterfactual_table(const EvalModel& model,
                                                std::span<const PhantomSpec> specs,
                                                const Predictors& preds,
                                                std::span<const int> deltas = default_deltas()) {
    if (!model.autoencoder || !model.schedule)
        throw std::invalid_argument("counterfactual_table: model is missing autoencoder or schedule");
    if (specs.empty()) throw std::invalid_argument("counterfactual_table: empty spec set");
    preds.require_gates();

    const Tensor images = render_batch({specs.begin(), specs.end()});
    const Tensor z0 = model.autoencoder->encode(images).first; // deterministic mean latent
    const auto source_c = detail::spec_conditions(specs);
    const Tensor z_T =
        ddim_invert(model.predict, z0, source_c, *model.schedule, model.inversion, model.fixed_point_iters);

    CounterfactualTable table;
    table.n_specs = static_cast<int>(specs.size());
    std::vector<int> used(specs.size(), 0);

    for (const int delta : deltas) {
        std::vector<int> keep;
        std::vector<Condition> target_c;
        for (size_t i = 0; i < specs.size(); ++i) {
            Condition cp = specs[i].condition;
            cp.age += delta;
            if (!cp.valid()) continue;
            keep.push_back(static_cast<int>(i));
            target_c.push_back(cp);
            used[i] = 1;
        }
        DeltaRow row;
        if (!keep.empty()) {
            const Tensor z_T_kept = detail::take_rows(z_T, keep);
            const Tensor z_cf = ddim_sample(model.predict, z_T_kept, target_c, *model.schedule);
            const Tensor out = model.autoencoder->decode(z_cf);
            const auto reg_ages = predict_ages(preds.age, out);
            const int64_t px = out.size() / out.shape()[0];
            double reg_sum = 0.0, ora_sum = 0.0;
            int ora_n = 0;
            for (size_t i = 0; i < keep.size(); ++i) {
                reg_sum += std::fabs(reg_ages[i] - target_c[i].age);
                Tensor img = Tensor::zeros({1, 1, out.shape()[2], out.shape()[3]});
                std::copy_n(out.data() + static_cast<int64_t>(i) * px, px, img.data());
                if (const auto age = oracle_age(img)) {
                    ora_sum += std::fabs(*age - target_c[i].age);
                    ++ora_n;
                } else {
                    ++table.n_oracle_failed;
                }
            }
            row.n = static_cast<int>(keep.size());
            row.mae_regressor = reg_sum / static_cast<double>(keep.size());
            row.mae_oracle = ora_n > 0 ? ora_sum / static_cast<double>(ora_n)
                                       : std::numeric_limits<double>::quiet_NaN();
        }
        table.rows[delta] = row;
    }
    for (size_t i = 0; i < specs.size(); ++i)
        if (!used[i]) ++table.n_excluded;
    return table;
}

// Table-3-shaped CSV rows: model,delta,mae_regressor,mae_oracle,n.
inline const char* counterfactual_csv_header() { return "model,delta,mae_regressor,mae_oracle,n"; }

inline void append_counterfactual_rows(std::ostream& out, const std::string& model_label,
                                       const CounterfactualTable& table) {
    for (const auto& [delta, row] : table.rows)
        out << model_label << "," << delta << "," << row.mae_regressor << "," << row.mae_oracle << ","
            << row.n << "\n";
}

// --- Reports --------------------------------------------------------------------

// One generated image's scores; NaN oracle age means the analytic readout
// could not lock onto a brain outline.
struct SampleRow {
    int index = 0;
    double target_age = 0.0;
    double age_regressor = 0.0;
    double age_oracle = 0.0;
    bool target_male = false;
    bool predicted_male = false;
};

struct MetricsReport {
    double age_mae_regressor = 0.0;
    double age_mae_oracle = 0.0;
    double sex_accuracy = 0.0;
    double fid = 0.0;
    double fid_floor = 0.0; // real-vs-real reference
    double ms_ssim_mean = 0.0;
    CounterfactualTable per_delta; // empty in direct mode
    std::vector<SampleRow> samples; // direct mode only
    uint64_t config_fingerprint = 0;
    uint64_t seed = 0;
    float lambda = 0.0f;
    int n_samples = 0;
    int n_oracle_failed = 0;

    void validate() const {
        if (sex_accuracy < 0.0 || sex_accuracy > 1.0)
            throw std::logic_error("MetricsReport: sex_accuracy outside [0,1]");
        if (ms_ssim_mean < 0.0 || ms_ssim_mean > 1.0)
            throw std::logic_error("MetricsReport: ms_ssim outside [0,1]");
        if (fid < -1e-4) throw std::logic_error("MetricsReport: fid below the numerical floor");
    }

    std::string summary() const {
        std::ostringstream s;
        s << "samples: " << n_samples << "\n"
          << "age MAE (regressor): " << age_mae_regressor << "\n"
          << "age MAE (oracle):    " << age_mae_oracle << "\n"
          << "sex accuracy:        " << sex_accuracy << "\n"
          << "ms-ssim (pairwise):  " << ms_ssim_mean << "\n"
          << "frechet distance:    " << fid << " (real-vs-real floor " << fid_floor << ")\n"
          << "lambda:              " << lambda << "\n"
          << "config fingerprint:  " << config_fingerprint << "\n"
          << "seed:                " << seed << "\n";
        if (!per_delta.rows.empty()) {
            s << "per-delta age MAE (regressor / oracle / n):\n";
            for (const auto& [delta, row] : per_delta.rows)
                s << "  " << (delta > 0 ? "+" : "") << delta << ": " << row.mae_regressor << " / "
                  << row.mae_oracle << " / " << row.n << "\n";
            if (per_delta.n_oracle_failed > 0) s << "oracle failures: " << per_delta.n_oracle_failed << "\n";
        }
        return s.str();
    }
};

// Direct generation: sample n images from pure noise along the age sweep,
// score condition adherence, diversity as pairwise MS-SSIM, and Fréchet
// distance against a matched real set (with a real-vs-real floor from a
// second disjoint real set).
inline MetricsReport direct_generation_eval(const EvalModel& model, int n, const Predictors& preds,
                                            uint64_t seed) {
    if (!model.autoencoder || !model.schedule)
        throw std::invalid_argument("direct_generation_eval: model is missing autoencoder or schedule");
    preds.require_gates();

    Rng rng(seed);
    Rng noise_rng = rng.split();
    const auto specs = eval_sweep_specs(n, rng.next_u64());
    const auto conditions = detail::spec_conditions(specs);

    const auto [lc, lh, lw] = [&] {
        const Shape s = model.autoencoder->latent_shape(1, 64, 64);
        return std::make_tuple(s[1], s[2], s[3]);
    }();
    const Tensor z_T = Tensor::randn(noise_rng, {n, lc, lh, lw});
    const Tensor z0 = ddim_sample(model.predict, z_T, conditions, *model.schedule);
    const Tensor gen = model.autoencoder->decode(z0);

    MetricsReport r;
    r.n_samples = n;
    r.seed = seed;

    const auto ages = detail::spec_ages(specs);
    const auto sexes = detail::spec_sexes(specs);
    const auto reg_ages = predict_ages(preds.age, gen);
    const auto pred_sexes = predict_sexes(preds.sex, gen);

    const int64_t px = gen.size() / gen.shape()[0];
    double reg_sum = 0.0, ora_sum = 0.0;
    int correct = 0, ora_n = 0;
    r.samples.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto u = static_cast<size_t>(i);
        SampleRow row{i, ages[u], reg_ages[u], std::numeric_limits<double>::quiet_NaN(),
                      sexes[u] == Sex::male, pred_sexes[u] == Sex::male};
        reg_sum += std::fabs(row.age_regressor - row.target_age);
        correct += row.target_male == row.predicted_male;
        Tensor img = Tensor::zeros({1, 1, gen.shape()[2], gen.shape()[3]});
        std::copy_n(gen.data() + static_cast<int64_t>(i) * px, px, img.data());
        if (const auto age = oracle_age(img)) {
            row.age_oracle = *age;
            ora_sum += std::fabs(*age - row.target_age);
            ++ora_n;
        } else {
            ++r.n_oracle_failed;
        }
        r.samples.push_back(row);
    }
    r.age_mae_regressor = reg_sum / n;
    r.sex_accuracy = static_cast<double>(correct) / n;
    r.age_mae_oracle = ora_n > 0 ? ora_sum / ora_n : std::numeric_limits<double>::quiet_NaN();

    r.ms_ssim_mean = ms_ssim_pairwise_mean(gen);

    const Tensor real_a = render_batch(eval_sweep_specs(n, rng.next_u64()));
    const Tensor real_b = render_batch(eval_sweep_specs(n, rng.next_u64()));
    r.fid = frechet_distance(preds.age.features(gen), preds.age.features(real_a));
    r.fid_floor = frechet_distance(preds.age.features(real_b), preds.age.features(real_a));

    r.validate();
    return r;
}

} // namespace cdm
