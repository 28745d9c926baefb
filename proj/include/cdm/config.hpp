#pragma once

// Run configuration: one plain-text key=value file drives every stage
// (data, autoencoder, denoiser, schedule, training, inversion, evaluation).
// Unknown keys are rejected so typos cannot silently fall back to defaults,
// and the canonicalized text (keys sorted, whitespace trimmed) is hashed
// into a fingerprint that artifacts carry to prove which config made them.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdm/autoencoder.hpp"
#include "cdm/cdm_train.hpp"
#include "cdm/denoiser.hpp"
#include "cdm/diffusion.hpp"
#include "cdm/phantom.hpp"

namespace cdm {

struct RunConfig {
    // Global.
    uint64_t seed = 17;
    std::string out_dir = "runs";

    // Dataset.
    int train_count = 256;
    int heldout_count = 64;
    std::string age_distribution = "uniform"; // uniform | skewed

    // Autoencoder. ae_identity switches the whole stack to pixel space.
    bool ae_identity = false;
    int ae_latent_channels = 4;
    float ae_kl_weight = 1e-7f;
    int ae_steps = 1500;
    float ae_lr = 1e-3f;
    int ae_batch_size = 8;

    // Denoiser backbone.
    int stem_channels = 16;
    std::string down_channels = "32,64"; // comma-separated per level
    int emb_dim = 64;
    int time_basis_dim = 32;
    int norm_groups = 8;

    // Noise schedule.
    std::string schedule = "cosine"; // cosine | linear_beta
    int timesteps = 256;

    // Training; names mirror CdmConfig exactly.
    float lambda = 1.0f;
    std::string cycle_norm = "l1"; // l1 | l2
    bool renoise_for_cycle = false;
    int pretrain_steps = 5000;
    int finetune_steps = 500;
    int batch_size = 8;
    float lr_pretrain = 1e-3f;
    float lr_finetune = 1e-4f;
    int log_every = 50;

    // DDIM inversion.
    std::string inversion_mode = "fixed_point"; // approx | fixed_point
    int fixed_point_iters = 3;

    // Orchestration and evaluation.
    int checkpoint_every = 1000;
    int eval_count = 50;
    int direct_eval_count = 128; // must exceed the 64-dim feature embedding
    int predictor_steps = 1500;
    float predictor_gate_age_mae = 5.0f;      // evaluation refuses weaker predictors
    float predictor_gate_sex_accuracy = 0.9f;
    float predictor_lr = 1e-3f;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline long long parse_ll(const std::string& key, const std::string& v) {
    size_t used = 0;
    long long out = 0;
    try {
        out = std::stoll(v, &used);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: " + key + ": '" + v + "' is not an integer");
    }
    if (used != v.size()) throw std::invalid_argument("config: " + key + ": '" + v + "' is not an integer");
    return out;
}

inline float parse_f32(const std::string& key, const std::string& v) {
    size_t used = 0;
    float out = 0;
    try {
        out = std::stof(v, &used);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: " + key + ": '" + v + "' is not a number");
    }
    if (used != v.size()) throw std::invalid_argument("config: " + key + ": '" + v + "' is not a number");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: " + key + ": '" + v + "' is not a boolean (true/false)");
}

// Shortest decimal form that round-trips a float through stof.
inline std::string format_f32(float x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(x));
    return buf;
}

} // namespace detail

// Field registry: one entry per key with a printer and a parser, so the
// parse / serialize / canonicalize paths can never drift apart.
struct ConfigField {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = [] {
        std::vector<ConfigField> f;
        auto add_i = [&f](std::string n, int RunConfig::* m) {
            f.push_back({n, [m](const RunConfig& c) { return std::to_string(c.*m); },
                         [m, n](RunConfig& c, const std::string& v) { c.*m = static_cast<int>(detail::parse_ll(n, v)); }});
        };
        auto add_u64 = [&f](std::string n, uint64_t RunConfig::* m) {
            f.push_back({n, [m](const RunConfig& c) { return std::to_string(c.*m); },
                         [m, n](RunConfig& c, const std::string& v) {
                             c.*m = static_cast<uint64_t>(detail::parse_ll(n, v));
                         }});
        };
        auto add_f = [&f](std::string n, float RunConfig::* m) {
            f.push_back({n, [m](const RunConfig& c) { return detail::format_f32(c.*m); },
                         [m, n](RunConfig& c, const std::string& v) { c.*m = detail::parse_f32(n, v); }});
        };
        auto add_b = [&f](std::string n, bool RunConfig::* m) {
            f.push_back({n, [m](const RunConfig& c) { return c.*m ? std::string("true") : std::string("false"); },
                         [m, n](RunConfig& c, const std::string& v) { c.*m = detail::parse_bool(n, v); }});
        };
        auto add_s = [&f](std::string n, std::string RunConfig::* m) {
            f.push_back({n, [m](const RunConfig& c) { return c.*m; },
                         [m](RunConfig& c, const std::string& v) { c.*m = v; }});
        };

        add_u64("seed", &RunConfig::seed);
        add_s("out_dir", &RunConfig::out_dir);
        add_i("train_count", &RunConfig::train_count);
        add_i("heldout_count", &RunConfig::heldout_count);
        add_s("age_distribution", &RunConfig::age_distribution);
        add_b("ae_identity", &RunConfig::ae_identity);
        add_i("ae_latent_channels", &RunConfig::ae_latent_channels);
        add_f("ae_kl_weight", &RunConfig::ae_kl_weight);
        add_i("ae_steps", &RunConfig::ae_steps);
        add_f("ae_lr", &RunConfig::ae_lr);
        add_i("ae_batch_size", &RunConfig::ae_batch_size);
        add_i("stem_channels", &RunConfig::stem_channels);
        add_s("down_channels", &RunConfig::down_channels);
        add_i("emb_dim", &RunConfig::emb_dim);
        add_i("time_basis_dim", &RunConfig::time_basis_dim);
        add_i("norm_groups", &RunConfig::norm_groups);
        add_s("schedule", &RunConfig::schedule);
        add_i("timesteps", &RunConfig::timesteps);
        add_f("lambda", &RunConfig::lambda);
        add_s("cycle_norm", &RunConfig::cycle_norm);
        add_b("renoise_for_cycle", &RunConfig::renoise_for_cycle);
        add_i("pretrain_steps", &RunConfig::pretrain_steps);
        add_i("finetune_steps", &RunConfig::finetune_steps);
        add_i("batch_size", &RunConfig::batch_size);
        add_f("lr_pretrain", &RunConfig::lr_pretrain);
        add_f("lr_finetune", &RunConfig::lr_finetune);
        add_i("log_every", &RunConfig::log_every);
        add_s("inversion_mode", &RunConfig::inversion_mode);
        add_i("fixed_point_iters", &RunConfig::fixed_point_iters);
        add_i("checkpoint_every", &RunConfig::checkpoint_every);
        add_i("eval_count", &RunConfig::eval_count);
        add_i("direct_eval_count", &RunConfig::direct_eval_count);
        add_i("predictor_steps", &RunConfig::predictor_steps);
        add_f("predictor_lr", &RunConfig::predictor_lr);
        add_f("predictor_gate_age_mae", &RunConfig::predictor_gate_age_mae);
        add_f("predictor_gate_sex_accuracy", &RunConfig::predictor_gate_sex_accuracy);
        return f;
    }();
    return fields;
}

// Assigns one key, rejecting names that are not in the registry.
inline void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : config_fields()) {
        if (f.name == key) {
            f.set(cfg, value);
            return;
        }
    }
    throw std::invalid_argument("config: unknown key '" + key + "'");
}

// Parses key=value lines into `cfg`. Blank lines and '#' comments are
// skipped; later assignments override earlier ones.
inline void parse_config_text(RunConfig& cfg, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#') continue;
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) + " is not key=value: '" + s + "'");
        const std::string key = detail::trim(s.substr(0, eq));
        const std::string value = detail::trim(s.substr(eq + 1));
        if (key.empty())
            throw std::invalid_argument("config: line " + std::to_string(lineno) + " has an empty key");
        config_set(cfg, key, value);
    }
}

inline RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    RunConfig cfg;
    parse_config_text(cfg, buf.str());
    return cfg;
}

// Canonical form: every key exactly once, sorted, one per line. This is the
// text that gets fingerprinted and embedded into checkpoints and reports.
inline std::string canonical_config_text(const RunConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> kv;
    for (const auto& f : config_fields()) kv.emplace_back(f.name, f.get(cfg));
    std::sort(kv.begin(), kv.end());
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

// FNV-1a over the canonical text: stable, dependency-free, and good enough
// to distinguish configs (this is provenance, not cryptography).
inline uint64_t config_fingerprint(const RunConfig& cfg) {
    uint64_t h = 14695981039346656037ULL;
    for (const char ch : canonical_config_text(cfg)) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ULL;
    }
    return h;
}

// --- Typed views -----------------------------------------------------------

inline ScheduleKind config_schedule_kind(const RunConfig& cfg) {
    if (cfg.schedule == "cosine") return ScheduleKind::cosine;
    if (cfg.schedule == "linear_beta") return ScheduleKind::linear_beta;
    throw std::invalid_argument("config: schedule must be cosine or linear_beta, got '" + cfg.schedule + "'");
}

inline AgeDistribution config_age_distribution(const RunConfig& cfg) {
    if (cfg.age_distribution == "uniform") return AgeDistribution::uniform;
    if (cfg.age_distribution == "skewed") return AgeDistribution::skewed;
    throw std::invalid_argument("config: age_distribution must be uniform or skewed, got '" +
                                cfg.age_distribution + "'");
}

inline InversionMode config_inversion_mode(const RunConfig& cfg) {
    if (cfg.inversion_mode == "approx") return InversionMode::approx;
    if (cfg.inversion_mode == "fixed_point") return InversionMode::fixed_point;
    throw std::invalid_argument("config: inversion_mode must be approx or fixed_point, got '" +
                                cfg.inversion_mode + "'");
}

inline AutoencoderConfig config_autoencoder(const RunConfig& cfg) {
    AutoencoderConfig ac;
    ac.identity = cfg.ae_identity;
    ac.latent_channels = cfg.ae_latent_channels;
    ac.kl_weight = cfg.ae_kl_weight;
    return ac;
}

inline DenoiserConfig config_denoiser(const RunConfig& cfg) {
    DenoiserConfig dc;
    dc.latent_channels = cfg.ae_identity ? 1 : cfg.ae_latent_channels;
    dc.stem_channels = cfg.stem_channels;
    std::vector<int> levels;
    std::istringstream in(cfg.down_channels);
    std::string tok;
    while (std::getline(in, tok, ','))
        levels.push_back(static_cast<int>(detail::parse_ll("down_channels", detail::trim(tok))));
    if (levels.size() != 2)
        throw std::invalid_argument("config: down_channels must list exactly two levels, got '" +
                                    cfg.down_channels + "'");
    dc.down_channels[0] = levels[0];
    dc.down_channels[1] = levels[1];
    dc.emb_dim = cfg.emb_dim;
    dc.time_basis_dim = cfg.time_basis_dim;
    dc.norm_groups = cfg.norm_groups;
    dc.T = cfg.timesteps;
    return dc;
}

inline CdmConfig config_cdm(const RunConfig& cfg) {
    CdmConfig c;
    c.lambda = cfg.lambda;
    if (cfg.cycle_norm == "l1")
        c.cycle_norm = CycleNorm::l1;
    else if (cfg.cycle_norm == "l2")
        c.cycle_norm = CycleNorm::l2;
    else
        throw std::invalid_argument("config: cycle_norm must be l1 or l2, got '" + cfg.cycle_norm + "'");
    c.renoise_for_cycle = cfg.renoise_for_cycle;
    c.pretrain_steps = cfg.pretrain_steps;
    c.finetune_steps = cfg.finetune_steps;
    c.batch_size = cfg.batch_size;
    c.lr_pretrain = cfg.lr_pretrain;
    c.lr_finetune = cfg.lr_finetune;
    c.log_every = cfg.log_every;
    return c;
}

// Full structural validation; commands call this once up front so a bad
// config fails before any work starts.
inline void validate_config(const RunConfig& cfg) {
    (void)config_schedule_kind(cfg);
    (void)config_age_distribution(cfg);
    (void)config_inversion_mode(cfg);
    (void)config_denoiser(cfg);
    config_cdm(cfg).validate();
    if (cfg.train_count <= 0 || cfg.heldout_count <= 0)
        throw std::invalid_argument("config: train_count and heldout_count must be positive");
    if (cfg.timesteps < 2) throw std::invalid_argument("config: timesteps must be >= 2");
    if (cfg.ae_latent_channels <= 0) throw std::invalid_argument("config: ae_latent_channels must be positive");
    if (cfg.ae_steps < 0 || cfg.predictor_steps < 0)
        throw std::invalid_argument("config: step counts must be non-negative");
    if (cfg.ae_batch_size <= 0) throw std::invalid_argument("config: ae_batch_size must be positive");
    if (cfg.fixed_point_iters < 0) throw std::invalid_argument("config: fixed_point_iters must be >= 0");
    if (cfg.checkpoint_every <= 0) throw std::invalid_argument("config: checkpoint_every must be positive");
    if (cfg.eval_count <= 0) throw std::invalid_argument("config: eval_count must be positive");
    if (cfg.direct_eval_count <= 0)
        throw std::invalid_argument("config: direct_eval_count must be positive");
    if (cfg.predictor_gate_age_mae <= 0.0f)
        throw std::invalid_argument("config: predictor_gate_age_mae must be positive");
    if (cfg.predictor_gate_sex_accuracy < 0.0f || cfg.predictor_gate_sex_accuracy >= 1.0f)
        throw std::invalid_argument("config: predictor_gate_sex_accuracy must be in [0,1)");
    if (cfg.ae_lr <= 0.0f || cfg.predictor_lr <= 0.0f)
        throw std::invalid_argument("config: learning rates must be positive");
    if (cfg.out_dir.empty()) throw std::invalid_argument("config: out_dir must not be empty");
}

} // namespace cdm
