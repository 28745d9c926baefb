// cdm command-line interface: dataset export, two-phase training, sampling,
// counterfactual editing, and evaluation. One command per process. Artifact
// paths are derived from (out_dir, command, config fingerprint, seed), and
// every write goes through a temp file + rename so a crash never leaves a
// partial file under its final name.
//
// Exit codes: 0 success, 2 config/argument error, 3 precondition failure
// (missing or mismatched artifacts, quality gates), 4 numerical abort.

#include <CLI11.hpp>

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cdm/checkpoint.hpp"
#include "cdm/config.hpp"
#include "cdm/image_io.hpp"
#include "cdm/metrics.hpp"

namespace fs = std::filesystem;
using namespace cdm;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitPrecondition = 3;
constexpr int kExitNumerical = 4;

// Failed environmental expectations (missing checkpoints, drifted configs),
// as opposed to bad option values (std::invalid_argument) or numerical
// trouble (everything else).
struct PreconditionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// --- small formatting helpers ------------------------------------------------

std::string hex16(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
    return buf;
}

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

// Exact round trip for manifest ages.
std::string fmt_g17(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

const char* sex_name(Sex s) { return s == Sex::male ? "male" : "female"; }
Sex parse_sex(const std::string& s) { return s == "male" ? Sex::male : Sex::female; }

uint64_t fnv1a(const std::string& text) {
    uint64_t h = 14695981039346656037ULL;
    for (const char ch : text) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ULL;
    }
    return h;
}

// --- config plumbing ----------------------------------------------------------

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
};

std::string config_key_footer() {
    RunConfig defaults;
    std::ostringstream s;
    s << "Config keys (default in parentheses), set via --config FILE or --set KEY=VALUE:\n";
    for (const auto& f : config_fields()) s << "  " << f.name << " (" << f.get(defaults) << ")\n";
    s << "CDM_SEED in the environment overrides the default seed; --config and --set win over it.\n"
      << "Commands that load a checkpoint take the model-defining keys from the checkpoint.";
    return s.str();
}

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("-c,--config", o.config_path, "Config file (key=value lines, # comments)");
    cmd->add_option("--set", o.sets, "Override one config key (repeatable)")->type_name("KEY=VALUE");
    cmd->footer(config_key_footer());
}

// Precedence: built-in defaults < CDM_SEED < config file < --set overrides.
RunConfig resolve_config(const CommonOpts& o) {
    RunConfig cfg;
    if (const char* env = std::getenv("CDM_SEED"); env != nullptr && *env != '\0')
        config_set(cfg, "seed", env);
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path, std::ios::binary);
        if (!in) throw PreconditionError("config file not found: " + o.config_path);
        std::ostringstream text;
        text << in.rdbuf();
        parse_config_text(cfg, text.str());
    }
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw std::invalid_argument("--set expects KEY=VALUE, got '" + kv + "'");
        config_set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    validate_config(cfg);
    return cfg;
}

// --- artifact paths and atomic writes ----------------------------------------

fs::path artifact_path(const RunConfig& cfg, const std::string& stem, uint64_t fp,
                       const std::string& ext) {
    return fs::path(cfg.out_dir) / (stem + "_" + hex16(fp) + "_" + std::to_string(cfg.seed) + ext);
}

void atomic_write_text(const fs::path& path, const std::string& content) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open " + tmp.string());
        out << content;
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

void atomic_write_pgm(const fs::path& path, const Tensor& img) {
    fs::path tmp = path;
    tmp += ".tmp";
    write_pgm(tmp.string(), img);
    fs::rename(tmp, path);
}

// Fingerprint over the subset of keys an artifact actually depends on, so
// shared artifacts (autoencoder, predictors) survive unrelated config edits.
uint64_t subset_fingerprint(const RunConfig& cfg, std::span<const char* const> keys) {
    std::string text;
    for (const auto& f : config_fields())
        for (const char* k : keys)
            if (f.name == k) text += f.name + "=" + f.get(cfg) + "\n";
    return fnv1a(text);
}

constexpr const char* kAeKeys[] = {"ae_identity", "ae_latent_channels", "ae_kl_weight",
                                   "ae_steps",    "ae_lr",              "ae_batch_size",
                                   "train_count", "heldout_count",      "age_distribution"};
constexpr const char* kPredictorKeys[] = {
    "predictor_steps", "predictor_lr",  "batch_size",       "train_count",
    "heldout_count",   "age_distribution", "predictor_gate_age_mae",
    "predictor_gate_sex_accuracy"};

uint64_t ae_fingerprint(const RunConfig& cfg) { return subset_fingerprint(cfg, kAeKeys); }
uint64_t predictor_fingerprint(const RunConfig& cfg) {
    return subset_fingerprint(cfg, kPredictorKeys);
}

// --- seed streams --------------------------------------------------------------

// Every data/eval consumer hangs off the global seed through its own split
// stream, so no two consumers share draws and each artifact is reproducible
// from (config, seed) alone. The denoiser's own streams come from
// TrainState(seed) and stay disjoint because split() children carry fresh
// stream constants.
struct SeedLadder {
    uint64_t data_train = 0;
    uint64_t data_heldout = 0;
    uint64_t autoencoder = 0;
    uint64_t predictors = 0;
    uint64_t eval = 0;
};

SeedLadder seed_ladder(uint64_t seed) {
    Rng root(seed);
    SeedLadder l;
    l.data_train = root.split().next_u64();
    l.data_heldout = root.split().next_u64();
    l.autoencoder = root.split().next_u64();
    l.predictors = root.split().next_u64();
    l.eval = root.split().next_u64();
    return l;
}

std::vector<PhantomSpec> make_train_specs(const RunConfig& cfg, const SeedLadder& l) {
    return sample_dataset(cfg.train_count, l.data_train, config_age_distribution(cfg));
}

std::vector<PhantomSpec> make_heldout_specs(const RunConfig& cfg, const SeedLadder& l) {
    return sample_dataset(cfg.heldout_count, l.data_heldout, config_age_distribution(cfg));
}

// --- checkpoint loading --------------------------------------------------------

Checkpoint load_checkpoint_or_fail(const std::string& path, const char* what) {
    if (!fs::exists(path))
        throw PreconditionError(std::string(what) + " checkpoint not found: " + path);
    try {
        return load_checkpoint(path);
    } catch (const std::exception& e) {
        throw PreconditionError(std::string(what) + " checkpoint unusable (" + path +
                                "): " + e.what());
    }
}

// --- autoencoder stage ----------------------------------------------------------

// Returns the frozen first-stage autoencoder for `cfg`: identity when
// configured, otherwise loaded from its cached checkpoint or (during
// training commands) trained now and cached.
Autoencoder obtain_autoencoder(const RunConfig& cfg, const SeedLadder& l, bool train_if_missing,
                               const std::string& explicit_path) {
    Rng rng(l.autoencoder);
    Autoencoder ae(config_autoencoder(cfg), rng);
    if (cfg.ae_identity) return ae;

    const fs::path path = explicit_path.empty()
                              ? artifact_path(cfg, "autoencoder", ae_fingerprint(cfg), ".ckpt")
                              : fs::path(explicit_path);
    if (fs::exists(path)) {
        restore_model_params("autoencoder", ae.parameters(),
                             load_checkpoint_or_fail(path.string(), "autoencoder"));
        std::cout << "autoencoder: loaded " << path.string() << "\n";
        return ae;
    }
    if (!train_if_missing)
        throw PreconditionError("autoencoder checkpoint not found: " + path.string() +
                                " (train it with `cdm train pretrain`, or pass --ae-ckpt)");

    const auto specs = make_train_specs(cfg, l);
    const fs::path log_path = artifact_path(cfg, "ae_train", ae_fingerprint(cfg), ".csv");
    std::ofstream log(log_path);
    if (!log) throw std::runtime_error("cannot open log " + log_path.string());
    log << ae_train_log_header() << "\n";
    std::cout << "autoencoder: training " << cfg.ae_steps << " steps (batch " << cfg.ae_batch_size
              << ")\n";
    train_autoencoder(ae, specs, cfg.ae_steps, cfg.ae_batch_size, cfg.ae_lr, cfg.ae_kl_weight, rng,
                      &log, cfg.log_every);
    const double l1 = reconstruction_l1(ae, make_heldout_specs(cfg, l));
    std::cout << "autoencoder: held-out L1 " << l1 << " per pixel\n";
    save_checkpoint(make_model_checkpoint("autoencoder", ae.parameters(), cfg, cfg.ae_steps),
                    path.string());
    std::cout << "autoencoder: wrote " << path.string() << "\n";
    return ae;
}

// --- model loading ---------------------------------------------------------------

// A denoiser checkpoint rebuilt into a runnable model. The config embedded
// in the checkpoint defines the architecture and schedule; the caller's
// config only supplies search paths. Heap members keep EvalModel's pointers
// stable when the struct moves.
struct LoadedModel {
    Checkpoint ck;
    RunConfig run; // reconstructed from the embedded config text
    uint64_t fingerprint = 0;
    std::unique_ptr<NoiseSchedule> sched;
    std::unique_ptr<Autoencoder> ae;
    std::unique_ptr<TrainState> st;
    EvalModel eval;
    std::string label; // "cdm" once finetuned, "ldm" after pretraining only
};

LoadedModel load_model(const std::string& ckpt_path, const RunConfig& cli_cfg,
                       const std::string& ae_ckpt) {
    LoadedModel m;
    m.ck = load_checkpoint_or_fail(ckpt_path, "model");
    if (m.ck.model != "denoiser")
        throw PreconditionError("expected a denoiser checkpoint, got '" + m.ck.model + "' in " +
                                ckpt_path);
    parse_config_text(m.run, m.ck.config_text);
    validate_config(m.run);
    m.fingerprint = m.ck.config_fingerprint;
    m.sched = std::make_unique<NoiseSchedule>(checkpoint_schedule(m.ck));
    m.st = std::make_unique<TrainState>(config_denoiser(m.run), m.run.seed);
    restore_train_state(*m.st, m.ck);

    const SeedLadder l = seed_ladder(m.run.seed);
    Rng rng(l.autoencoder);
    m.ae = std::make_unique<Autoencoder>(config_autoencoder(m.run), rng);
    if (!m.run.ae_identity) {
        std::vector<fs::path> candidates;
        if (!ae_ckpt.empty()) {
            candidates.emplace_back(ae_ckpt);
        } else {
            RunConfig here = m.run;
            here.out_dir = cli_cfg.out_dir;
            candidates.push_back(artifact_path(here, "autoencoder", ae_fingerprint(m.run), ".ckpt"));
            candidates.push_back(artifact_path(m.run, "autoencoder", ae_fingerprint(m.run), ".ckpt"));
        }
        const fs::path* found = nullptr;
        for (const auto& c : candidates)
            if (fs::exists(c)) {
                found = &c;
                break;
            }
        if (found == nullptr) {
            std::string msg = "autoencoder checkpoint not found; tried:";
            for (const auto& c : candidates) msg += "\n  " + c.string();
            throw PreconditionError(msg + "\npass --ae-ckpt, or rerun `cdm train pretrain`");
        }
        restore_model_params("autoencoder", m.ae->parameters(),
                             load_checkpoint_or_fail(found->string(), "autoencoder"));
    }

    m.eval = EvalModel{m.st->denoiser.predictor(), m.ae.get(), m.sched.get(),
                       config_inversion_mode(m.run), m.run.fixed_point_iters};
    m.label = m.st->phase == Phase::finetune ? "cdm" : "ldm";
    return m;
}

// --- predictors -------------------------------------------------------------------

std::vector<NamedParam> predictor_params(Predictors& p) {
    std::vector<NamedParam> all;
    for (auto& q : p.age.parameters()) all.push_back({"age." + q.name, q.value});
    for (auto& q : p.sex.parameters()) all.push_back({"sex." + q.name, q.value});
    return all;
}

PredictorTrainConfig predictor_train_config(const RunConfig& cfg) {
    PredictorTrainConfig ptc;
    ptc.max_steps = cfg.predictor_steps;
    ptc.batch_size = cfg.batch_size;
    ptc.lr = cfg.predictor_lr;
    ptc.gate_age_mae = cfg.predictor_gate_age_mae;
    ptc.gate_sex_accuracy = cfg.predictor_gate_sex_accuracy;
    return ptc;
}

// Loads the cached evaluation predictors or trains them. Gates are always
// re-measured on the live held-out set, never trusted from disk.
Predictors obtain_predictors(const RunConfig& cfg, const SeedLadder& l, bool retrain) {
    const PredictorTrainConfig ptc = predictor_train_config(cfg);
    const fs::path path = artifact_path(cfg, "predictors", predictor_fingerprint(cfg), ".ckpt");
    const auto heldout = make_heldout_specs(cfg, l);

    if (!retrain && fs::exists(path)) {
        Rng rng(l.predictors);
        Rng init = rng.split();
        Predictors p{Predictor(ptc.arch, init), Predictor(ptc.arch, init)};
        restore_model_params("predictors", predictor_params(p),
                             load_checkpoint_or_fail(path.string(), "predictors"));
        p.gate_age_mae = ptc.gate_age_mae;
        p.gate_sex_accuracy = ptc.gate_sex_accuracy;
        p.seed = l.predictors;
        const Tensor x = render_batch(heldout);
        std::vector<double> ages;
        std::vector<Sex> sexes;
        for (const auto& s : heldout) {
            ages.push_back(s.condition.age);
            sexes.push_back(s.condition.sex);
        }
        p.heldout_age_mae = age_mae(p.age, x, ages);
        p.heldout_sex_accuracy = sex_accuracy(p.sex, x, sexes);
        std::cout << "predictors: loaded " << path.string() << " (held-out age MAE "
                  << p.heldout_age_mae << ", sex accuracy " << p.heldout_sex_accuracy << ")\n";
        p.require_gates();
        return p;
    }

    const auto train = make_train_specs(cfg, l);
    std::cout << "predictors: training up to " << ptc.max_steps << " steps\n";
    Predictors p = train_predictors(train, heldout, ptc, l.predictors, &std::cout);
    save_checkpoint(make_model_checkpoint("predictors", predictor_params(p), cfg, ptc.max_steps),
                    path.string());
    std::cout << "predictors: wrote " << path.string() << " (held-out age MAE "
              << p.heldout_age_mae << ", sex accuracy " << p.heldout_sex_accuracy << ")\n";
    return p;
}

// --- phantom export -----------------------------------------------------------------

struct ExportOpts {
    CommonOpts common;
    int n = -1;
};

int run_phantom_export(const ExportOpts& o) {
    RunConfig cfg = resolve_config(o.common);
    if (o.n != -1) {
        config_set(cfg, "train_count", std::to_string(o.n));
        validate_config(cfg);
    }
    const uint64_t fp = config_fingerprint(cfg);
    const SeedLadder l = seed_ladder(cfg.seed);
    const auto specs = make_train_specs(cfg, l);

    const fs::path dir =
        fs::path(cfg.out_dir) / ("phantoms_" + hex16(fp) + "_" + std::to_string(cfg.seed));
    fs::create_directories(dir);

    const Tensor all = render_batch(specs);
    const int64_t px = 64 * 64;
    {
        CsvWriter manifest((dir / "manifest.csv.tmp").string(), "id,age,sex,identity_seed");
        for (size_t i = 0; i < specs.size(); ++i) {
            char id[16];
            std::snprintf(id, sizeof(id), "%04zu", i);
            Tensor img({1, 1, 64, 64});
            std::copy_n(all.data() + static_cast<int64_t>(i) * px, px, img.data());
            atomic_write_pgm(dir / (std::string(id) + ".pgm"), img);
            manifest.row({id, fmt_g17(specs[i].condition.age), sex_name(specs[i].condition.sex),
                          std::to_string(specs[i].identity_seed)});
        }
        manifest.flush();
    }
    fs::rename(dir / "manifest.csv.tmp", dir / "manifest.csv");
    std::cout << "wrote " << specs.size() << " phantoms + manifest.csv to " << dir.string() << "\n";
    return 0;
}

// --- train --------------------------------------------------------------------------

struct TrainOpts {
    CommonOpts common;
    std::string phase;
    std::string resume;
    std::string from;
    std::string ae_ckpt;
    bool force = false;
    bool allow_drift = false;
    int steps = -1;
};

int run_train(const TrainOpts& o) {
    RunConfig cfg = resolve_config(o.common);
    fs::create_directories(cfg.out_dir);
    const Phase phase = o.phase == "pretrain" ? Phase::pretrain : Phase::finetune;
    const uint64_t fp = config_fingerprint(cfg);
    const SeedLadder l = seed_ladder(cfg.seed);

    const auto specs = make_train_specs(cfg, l);
    Autoencoder ae = obtain_autoencoder(cfg, l, /*train_if_missing=*/true, o.ae_ckpt);
    const NoiseSchedule sched = make_schedule(config_schedule_kind(cfg), cfg.timesteps);
    const TrainData data{specs, &ae};

    TrainState st(config_denoiser(cfg), cfg.seed);
    bool resumed = false;

    const auto adopt = [&](const std::string& path, const char* what) {
        const Checkpoint ck = load_checkpoint_or_fail(path, what);
        if (ck.model != "denoiser")
            throw PreconditionError("expected a denoiser checkpoint, got '" + ck.model + "' in " +
                                    path);
        if (ck.config_fingerprint != fp && !o.allow_drift)
            throw PreconditionError("config fingerprint mismatch with " + path + ": checkpoint " +
                                    hex16(ck.config_fingerprint) + " vs current " + hex16(fp) +
                                    " (pass --allow-config-drift to proceed anyway)");
        restore_train_state(st, ck);
    };

    if (!o.resume.empty()) {
        adopt(o.resume, "resume");
        if (st.phase != phase)
            throw PreconditionError(std::string("--resume checkpoint is from phase '") +
                                    phase_name(st.phase) + "'; use --from to start " + o.phase +
                                    " from it");
        resumed = true;
        std::cout << o.phase << ": resumed at step " << st.step << " from " << o.resume << "\n";
    } else if (phase == Phase::finetune) {
        if (!o.from.empty()) {
            adopt(o.from, "pretrain");
            std::cout << "finetune: starting from " << o.from << " (step " << st.step << ")\n";
        } else {
            const fs::path def = artifact_path(cfg, "denoiser_pretrain", fp, ".ckpt");
            if (fs::exists(def)) {
                adopt(def.string(), "pretrain");
                std::cout << "finetune: starting from " << def.string() << " (step " << st.step
                          << ")\n";
            } else if (o.force) {
                std::cout << "finetune: --force, starting from random initialization\n";
            } else {
                throw PreconditionError(
                    "finetune requires a pretrained checkpoint; expected " + def.string() +
                    " — run `cdm train pretrain` first, pass --from <ckpt>, or --force to start "
                    "from random weights");
            }
        }
    }

    int target = 0;
    if (o.steps >= 0) {
        target = o.steps;
    } else if (phase == Phase::pretrain) {
        target = cfg.pretrain_steps - static_cast<int>(st.step);
    } else {
        // Fine-tune steps are counted beyond the pretrain budget.
        const int64_t done = resumed ? std::max<int64_t>(0, st.step - cfg.pretrain_steps) : 0;
        target = cfg.finetune_steps - static_cast<int>(done);
    }
    if (target <= 0) {
        std::cout << o.phase << ": budget already reached at step " << st.step
                  << "; nothing to do (use --steps to run more)\n";
        return 0;
    }

    const fs::path final_path = artifact_path(cfg, "denoiser_" + o.phase, fp, ".ckpt");
    const fs::path log_path = artifact_path(cfg, "train_" + o.phase, fp, ".csv");
    const bool append = resumed && fs::exists(log_path);
    std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open log " + log_path.string());
    if (!append) log << train_log_header() << "\n";

    CdmConfig ccfg = config_cdm(cfg);
    std::cout << o.phase << ": " << target << " steps (batch " << cfg.batch_size << ", T "
              << cfg.timesteps << ", lambda " << ccfg.lambda << ")\n";

    int remaining = target;
    while (remaining > 0) {
        const int chunk = std::min(remaining, cfg.checkpoint_every);
        ccfg.pretrain_steps = chunk;
        ccfg.finetune_steps = chunk;
        train(phase, st, ccfg, data, sched, &log, /*force=*/phase == Phase::finetune);
        remaining -= chunk;
        log.flush();
        const fs::path out =
            remaining == 0
                ? final_path
                : artifact_path(cfg, "denoiser_" + o.phase + "_step" + std::to_string(st.step), fp,
                                ".ckpt");
        save_checkpoint(make_checkpoint(st, sched, cfg), out.string());
        std::cout << "step " << st.step << ": ldm_cf " << st.last_ldm_cf << ", ldm_fact "
                  << st.last_ldm_fact << ", cycle " << st.last_cycle << " -> " << out.string()
                  << "\n";
    }
    std::cout << "final checkpoint: " << final_path.string() << "\nlog: " << log_path.string()
              << "\n";
    return 0;
}

// --- generate -------------------------------------------------------------------------

struct GenerateOpts {
    CommonOpts common;
    std::string ckpt;
    std::string out;
    std::string ae_ckpt;
    std::string sex = "female";
    double age = 50.0;
    uint64_t seed = 0;
    bool seed_given = false;
    bool trace = false;
};

int run_generate(const GenerateOpts& o) {
    RunConfig cfg = resolve_config(o.common);
    fs::create_directories(cfg.out_dir);
    LoadedModel m = load_model(o.ckpt, cfg, o.ae_ckpt);

    const Condition c{o.age, parse_sex(o.sex)};
    if (!c.valid())
        throw std::invalid_argument("condition age " + fmt_g(o.age) + " outside [0,100]");
    const uint64_t seed = o.seed_given ? o.seed : cfg.seed;

    Rng rng(seed);
    const Tensor z_T = Tensor::randn(rng, m.ae->latent_shape(1, 64, 64));
    const std::vector<Condition> cs{c};
    SamplerTrace trace;
    const Tensor z0 = ddim_sample(m.eval.predict, z_T, cs, *m.sched, o.trace ? &trace : nullptr);
    const Tensor img = m.ae->decode(z0);

    const fs::path out =
        o.out.empty() ? fs::path(cfg.out_dir) / ("generate_" + hex16(m.fingerprint) + "_age" +
                                                 fmt_g(o.age) + "_" + o.sex + "_seed" +
                                                 std::to_string(seed) + ".pgm")
                      : fs::path(o.out);
    atomic_write_pgm(out, img);
    std::cout << "wrote " << out.string() << "\n";
    if (const auto a = oracle_age(img)) std::cout << "oracle age readout: " << *a << "\n";

    if (o.trace) {
        fs::path stem = out;
        stem.replace_extension();
        for (const auto& step : trace.steps) {
            char tb[16];
            std::snprintf(tb, sizeof(tb), "%04d", step.t);
            atomic_write_pgm(stem.string() + "_trace_t" + tb + ".pgm", m.ae->decode(step.z0_hat));
        }
        std::cout << "wrote " << trace.steps.size() << " per-step estimates: " << stem.string()
                  << "_trace_t*.pgm\n";
    }
    return 0;
}

// --- counterfactual ----------------------------------------------------------------------

struct CfOpts {
    CommonOpts common;
    std::string ckpt;
    std::string ae_ckpt;
    std::string input;
    std::string source_sex;
    std::string target_sex;
    std::string out_prefix;
    double source_age = 50.0;
    double target_age = 50.0;
    uint64_t identity_seed = 0;
};

int run_counterfactual(const CfOpts& o) {
    RunConfig cfg = resolve_config(o.common);
    fs::create_directories(cfg.out_dir);
    LoadedModel m = load_model(o.ckpt, cfg, o.ae_ckpt);

    const Condition src{o.source_age, parse_sex(o.source_sex)};
    if (!src.valid())
        throw std::invalid_argument("source age " + fmt_g(o.source_age) + " outside [0,100]");
    const Condition tgt{o.target_age,
                        o.target_sex.empty() ? src.sex : parse_sex(o.target_sex)};
    if (!tgt.valid())
        throw std::invalid_argument("target age " + fmt_g(o.target_age) + " outside [0,100]");

    Tensor x;
    std::optional<PhantomSpec> spec;
    if (!o.input.empty()) {
        x = read_pgm(o.input);
        if (x.shape() != Shape{1, 1, 64, 64})
            throw PreconditionError("input image must be 64x64 (got " + shape_str(x.shape()) +
                                    "): " + o.input);
    } else {
        spec = PhantomSpec{src, o.identity_seed};
        x = render_batch({*spec});
    }

    const Tensor mu = m.ae->encode(x).first;
    const std::vector<Condition> cs{src}, cps{tgt};
    const Tensor z_cf = counterfactual_latent(m.eval.predict, mu, cs, cps, *m.sched,
                                              m.eval.inversion, m.eval.fixed_point_iters);
    const Tensor out = m.ae->decode(z_cf);

    // Signed difference split into positive and negative parts, plus summary
    // statistics. The ventricle delta is measured as change in dark-fluid
    // coverage, so shrinking ventricles read negative.
    Tensor pos({1, 1, 64, 64}), neg({1, 1, 64, 64});
    double sum_abs = 0.0, sum_sq = 0.0, src_sq = 0.0;
    for (int64_t i = 0; i < 64 * 64; ++i) {
        const float d = out.data()[i] - x.data()[i];
        pos.data()[i] = d > 0.0f ? d : 0.0f;
        neg.data()[i] = d < 0.0f ? -d : 0.0f;
        sum_abs += std::fabs(d);
        sum_sq += static_cast<double>(d) * d;
        src_sq += static_cast<double>(x.data()[i]) * x.data()[i];
    }
    const double rel_l2 = src_sq > 0.0 ? std::sqrt(sum_sq / src_sq) : 0.0;

    // Ventricle region: exact analytic mask when the source is a rendered
    // spec, the oracle's central window as a fallback for arbitrary inputs.
    double vent_delta = 0.0;
    int64_t vent_n = 0;
    if (spec) {
        const auto mask = ventricle_region_mask(*spec);
        for (int64_t i = 0; i < 64 * 64; ++i)
            if (mask[static_cast<size_t>(i)]) {
                vent_delta += x.data()[i] - out.data()[i];
                ++vent_n;
            }
    } else {
        const double c = 64 / 2.0 - 0.5;
        for (int y = 0; y < 64; ++y)
            for (int x_ = 0; x_ < 64; ++x_)
                if (std::fabs(x_ - c) <= 16 && std::fabs(y - c) <= 16) {
                    vent_delta += x.data()[y * 64 + x_] - out.data()[y * 64 + x_];
                    ++vent_n;
                }
    }
    vent_delta = vent_n > 0 ? vent_delta / static_cast<double>(vent_n) : 0.0;

    const std::string stem_name =
        "counterfactual_" + hex16(m.fingerprint) + "_src" + fmt_g(src.age) +
        (src.sex == Sex::male ? "m" : "f") + "_tgt" + fmt_g(tgt.age) +
        (tgt.sex == Sex::male ? "m" : "f") +
        (o.input.empty() ? "_id" + std::to_string(o.identity_seed) : "");
    const std::string prefix =
        o.out_prefix.empty() ? (fs::path(cfg.out_dir) / stem_name).string() : o.out_prefix;

    atomic_write_pgm(prefix + ".pgm", out);
    atomic_write_pgm(prefix + "_source.pgm", x);
    atomic_write_pgm(prefix + "_diff_pos.pgm", pos);
    atomic_write_pgm(prefix + "_diff_neg.pgm", neg);

    std::ostringstream stats;
    stats << "stat,value\n";
    stats << "source_age," << fmt_g(src.age) << "\n";
    stats << "source_sex," << sex_name(src.sex) << "\n";
    stats << "target_age," << fmt_g(tgt.age) << "\n";
    stats << "target_sex," << sex_name(tgt.sex) << "\n";
    stats << "mean_abs_delta," << sum_abs / (64.0 * 64.0) << "\n";
    stats << "rel_l2," << rel_l2 << "\n";
    stats << "ventricle_mean_delta," << vent_delta << "\n";
    const auto src_oracle = oracle_age(x);
    const auto cf_oracle = oracle_age(out);
    stats << "oracle_age_source," << (src_oracle ? fmt_g(*src_oracle) : "nan") << "\n";
    stats << "oracle_age_counterfactual," << (cf_oracle ? fmt_g(*cf_oracle) : "nan") << "\n";
    atomic_write_text(prefix + "_stats.csv", stats.str());

    std::cout << "wrote " << prefix << ".pgm (+_source, _diff_pos, _diff_neg, _stats.csv)\n"
              << "rel L2 " << rel_l2 << ", mean |delta| " << sum_abs / (64.0 * 64.0)
              << ", ventricle mean delta " << vent_delta << "\n";
    if (cf_oracle) std::cout << "oracle age of counterfactual: " << *cf_oracle << "\n";
    return 0;
}

// --- evaluate -----------------------------------------------------------------------------

struct EvalOpts {
    CommonOpts common;
    std::string ckpt;
    std::string ldm_ckpt;
    std::string ae_ckpt;
    std::string mode = "both";
    bool retrain_predictors = false;
};

std::string counterfactual_text(const std::string& label, const CounterfactualTable& t) {
    std::ostringstream s;
    s << "model: " << label << "\n"
      << "specs: " << t.n_specs << " (out-of-range target skipped: " << t.n_excluded << ")\n"
      << "per-delta age MAE (regressor / oracle / n):\n";
    for (const auto& [delta, row] : t.rows)
        s << "  " << (delta > 0 ? "+" : "") << delta << ": " << row.mae_regressor << " / "
          << row.mae_oracle << " / " << row.n << "\n";
    if (t.n_oracle_failed > 0) s << "oracle failures: " << t.n_oracle_failed << "\n";
    return s.str();
}

int run_evaluate(const EvalOpts& o) {
    RunConfig cfg = resolve_config(o.common);
    fs::create_directories(cfg.out_dir);
    const SeedLadder l = seed_ladder(cfg.seed);

    LoadedModel m = load_model(o.ckpt, cfg, o.ae_ckpt);
    Predictors preds = obtain_predictors(cfg, l, o.retrain_predictors);
    const std::string tag = hex16(m.fingerprint) + "_" + std::to_string(cfg.seed);

    const bool want_direct = o.mode == "direct" || o.mode == "both";
    const bool want_cf = o.mode == "counterfactual" || o.mode == "both";

    if (want_direct) {
        std::cout << "direct generation: sampling " << cfg.direct_eval_count << " images\n";
        MetricsReport r = direct_generation_eval(m.eval, cfg.direct_eval_count, preds, l.eval);
        r.config_fingerprint = m.fingerprint;
        r.lambda = m.run.lambda;

        std::ostringstream csv;
        csv << "sample,target_age,age_regressor,age_oracle,target_sex,predicted_sex\n";
        for (const auto& s : r.samples)
            csv << s.index << ',' << s.target_age << ',' << s.age_regressor << ',' << s.age_oracle
                << ',' << (s.target_male ? "male" : "female") << ','
                << (s.predicted_male ? "male" : "female") << "\n";
        const fs::path csv_path = fs::path(cfg.out_dir) / ("report_direct_" + tag + ".csv");
        const fs::path txt_path = fs::path(cfg.out_dir) / ("report_direct_" + tag + ".txt");
        atomic_write_text(csv_path, csv.str());
        atomic_write_text(txt_path, "model: " + m.label + "\n" + r.summary());
        std::cout << "== direct generation (" << m.label << ") ==\n"
                  << r.summary() << "wrote " << txt_path.string() << " and " << csv_path.string()
                  << "\n";
    }

    if (want_cf) {
        const auto specs = eval_sweep_specs(cfg.eval_count, l.eval);
        std::cout << "counterfactual sweep: " << cfg.eval_count << " specs x "
                  << default_deltas().size() << " deltas\n";
        const CounterfactualTable table = counterfactual_table(m.eval, specs, preds);

        std::ostringstream csv;
        csv << counterfactual_csv_header() << "\n";
        append_counterfactual_rows(csv, m.label, table);
        const fs::path csv_path = fs::path(cfg.out_dir) / ("report_counterfactual_" + tag + ".csv");
        const fs::path txt_path = fs::path(cfg.out_dir) / ("report_counterfactual_" + tag + ".txt");
        atomic_write_text(csv_path, csv.str());
        atomic_write_text(txt_path, counterfactual_text(m.label, table));
        std::cout << "== counterfactual (" << m.label << ") ==\n"
                  << counterfactual_text(m.label, table) << "wrote " << txt_path.string() << " and "
                  << csv_path.string() << "\n";

        if (!o.ldm_ckpt.empty()) {
            LoadedModel base = load_model(o.ldm_ckpt, cfg, o.ae_ckpt);
            std::string base_label = base.label, main_label = m.label;
            if (base_label == main_label) {
                base_label = "a_" + base_label;
                main_label = "b_" + main_label;
            }
            std::cout << "comparison sweep (" << base_label << ")\n";
            const CounterfactualTable base_table = counterfactual_table(base.eval, specs, preds);

            std::ostringstream cmp_csv;
            cmp_csv << counterfactual_csv_header() << "\n";
            append_counterfactual_rows(cmp_csv, base_label, base_table);
            append_counterfactual_rows(cmp_csv, main_label, table);

            std::ostringstream cmp;
            cmp << "oracle age MAE per delta (" << base_label << " vs " << main_label << "):\n";
            int wins = 0, contested = 0;
            for (const auto& [delta, row] : table.rows) {
                const auto it = base_table.rows.find(delta);
                if (it == base_table.rows.end()) continue;
                ++contested;
                const bool win = row.mae_oracle < it->second.mae_oracle;
                wins += win;
                cmp << "  " << (delta > 0 ? "+" : "") << delta << ": " << it->second.mae_oracle
                    << " vs " << row.mae_oracle << (win ? "  <- " + main_label + " lower" : "")
                    << "\n";
            }
            cmp << main_label << " lower oracle MAE on " << wins << "/" << contested
                << " deltas\n";

            const fs::path cmp_csv_path =
                fs::path(cfg.out_dir) / ("report_compare_" + tag + ".csv");
            const fs::path cmp_txt_path =
                fs::path(cfg.out_dir) / ("report_compare_" + tag + ".txt");
            atomic_write_text(cmp_csv_path, cmp_csv.str());
            atomic_write_text(cmp_txt_path, cmp.str());
            std::cout << "== comparison ==\n"
                      << cmp.str() << "wrote " << cmp_txt_path.string() << " and "
                      << cmp_csv_path.string() << "\n";
        }
    }
    return 0;
}

// --- train-predictors ------------------------------------------------------------------------

struct PredOpts {
    CommonOpts common;
    bool retrain = false;
};

int run_train_predictors(const PredOpts& o) {
    RunConfig cfg = resolve_config(o.common);
    fs::create_directories(cfg.out_dir);
    const SeedLadder l = seed_ladder(cfg.seed);
    const Predictors p = obtain_predictors(cfg, l, o.retrain);
    std::cout << "held-out age MAE " << p.heldout_age_mae << " (gate < " << p.gate_age_mae
              << "), sex accuracy " << p.heldout_sex_accuracy << " (gate > "
              << p.gate_sex_accuracy << ")\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cdm: conditional latent diffusion with cycle-consistent counterfactuals"};
    app.require_subcommand(1);

    auto* phantom = app.add_subcommand("phantom", "Synthetic dataset tools");
    phantom->require_subcommand(1);
    ExportOpts eo;
    auto* exp = phantom->add_subcommand("export", "Write phantom PGM images plus a CSV manifest");
    exp->add_option("-n,--count", eo.n, "Number of phantoms (default: train_count)");
    add_common(exp, eo.common);

    TrainOpts to;
    auto* tr = app.add_subcommand(
        "train", "Train the denoiser (pretrain: LDM objective; finetune: cycle objective)");
    tr->add_option("phase", to.phase, "pretrain|finetune")
        ->required()
        ->check(CLI::IsMember({"pretrain", "finetune"}));
    tr->add_option("--resume", to.resume, "Continue this phase from a checkpoint");
    tr->add_option("--from", to.from, "Finetune: initialize from this pretrain checkpoint");
    tr->add_flag("--force", to.force, "Allow finetuning from random initialization");
    tr->add_flag("--allow-config-drift", to.allow_drift,
                 "Accept checkpoints whose config fingerprint differs");
    tr->add_option("--steps", to.steps, "Run exactly this many steps now (default: remaining budget)");
    tr->add_option("--ae-ckpt", to.ae_ckpt, "Autoencoder checkpoint (default: derived path)");
    add_common(tr, to.common);

    GenerateOpts go;
    auto* gen = app.add_subcommand("generate", "Sample one image from noise for a condition");
    gen->alias("sample");
    gen->add_option("--ckpt", go.ckpt, "Denoiser checkpoint")->required();
    gen->add_option("--age", go.age, "Condition age in years, [0,100]")->required();
    gen->add_option("--sex", go.sex, "female|male")
        ->required()
        ->check(CLI::IsMember({"female", "male"}));
    gen->add_option("--seed", go.seed, "Noise seed (default: config seed)");
    gen->add_option("-o,--out", go.out, "Output PGM path (default: derived from condition+seed)");
    gen->add_flag("--trace", go.trace, "Also write the per-step clean-image estimates");
    gen->add_option("--ae-ckpt", go.ae_ckpt, "Autoencoder checkpoint (default: derived path)");
    add_common(gen, go.common);

    CfOpts co;
    auto* cf = app.add_subcommand("counterfactual",
                                  "Invert an image and re-sample it under a new condition");
    cf->add_option("--ckpt", co.ckpt, "Denoiser checkpoint")->required();
    cf->add_option("--input", co.input, "Source PGM (default: render a phantom from the spec)");
    cf->add_option("--source-age", co.source_age, "Age of the source image")->required();
    cf->add_option("--source-sex", co.source_sex, "female|male")
        ->required()
        ->check(CLI::IsMember({"female", "male"}));
    cf->add_option("--identity-seed", co.identity_seed,
                   "Phantom identity when rendering the source (ignored with --input)");
    cf->add_option("--target-age", co.target_age, "Counterfactual age, [0,100]")->required();
    cf->add_option("--target-sex", co.target_sex, "female|male (default: source sex)")
        ->check(CLI::IsMember({"female", "male"}));
    cf->add_option("--out-prefix", co.out_prefix, "Output path prefix (default: derived)");
    cf->add_option("--ae-ckpt", co.ae_ckpt, "Autoencoder checkpoint (default: derived path)");
    add_common(cf, co.common);

    EvalOpts vo;
    auto* ev = app.add_subcommand("evaluate", "Run the generation metrics suite");
    ev->add_option("--ckpt", vo.ckpt, "Denoiser checkpoint to evaluate")->required();
    ev->add_option("--ldm-ckpt", vo.ldm_ckpt,
                   "Baseline checkpoint for a side-by-side counterfactual comparison");
    ev->add_option("--mode", vo.mode, "direct|counterfactual|both (default: both)")
        ->check(CLI::IsMember({"direct", "counterfactual", "both"}));
    ev->add_flag("--retrain-predictors", vo.retrain_predictors,
                 "Retrain the evaluation predictors even if cached");
    ev->add_option("--ae-ckpt", vo.ae_ckpt, "Autoencoder checkpoint (default: derived path)");
    add_common(ev, vo.common);

    PredOpts po;
    auto* tp = app.add_subcommand("train-predictors", "Train the age/sex evaluation predictors");
    tp->add_flag("--retrain", po.retrain, "Retrain even if a cached checkpoint exists");
    add_common(tp, po.common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }
    go.seed_given = gen->count("--seed") > 0;

    try {
        if (exp->parsed()) return run_phantom_export(eo);
        if (tr->parsed()) return run_train(to);
        if (gen->parsed()) return run_generate(go);
        if (cf->parsed()) return run_counterfactual(co);
        if (ev->parsed()) return run_evaluate(vo);
        if (tp->parsed()) return run_train_predictors(po);
    } catch (const PreconditionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitPrecondition;
    } catch (const GateError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitPrecondition;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumerical;
    }
    return 0;
}
