#pragma once

// Checkpoint persistence. One container serves the denoiser, the
// autoencoder, and the evaluation predictors: magic + format version, the
// canonicalized config text and its fingerprint, a model tag, training
// phase and step, the noise schedule, RNG and optimizer state, and a named
// tensor table. Every scalar is written little-endian and every float as
// its exact bit pattern, so save -> load -> save is byte-identical.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cdm/adam.hpp"
#include "cdm/cdm_train.hpp"
#include "cdm/config.hpp"
#include "cdm/diffusion.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

inline constexpr char kCheckpointMagic[4] = {'C', 'D', 'M', 'C'};
inline constexpr uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    uint64_t config_fingerprint = 0;
    std::string config_text; // canonical key=value lines the fingerprint hashes
    std::string model;       // "denoiser" | "autoencoder" | "predictors"
    Phase phase = Phase::pretrain;
    uint64_t step = 0;
    std::vector<double> alpha_bar; // empty when the model has no schedule
    uint64_t rng_state = 0;
    uint64_t rng_gamma = 0;
    float adam_lr = 0.0f;
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    int64_t adam_steps = 0;
    std::vector<std::pair<std::string, Adam::Slot>> adam_slots; // name-sorted
    std::vector<std::pair<std::string, Tensor>> tensors;        // parameter order
};

namespace detail {

// --- Little-endian primitives over a growable byte buffer -------------------

inline void put_bytes(std::string& out, const void* p, size_t n) {
    out.append(static_cast<const char*>(p), n);
}

inline void put_u8(std::string& out, uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_u16(std::string& out, uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<uint32_t>(v)); }
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

inline void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out += s;
}

inline void put_tensor(std::string& out, const Tensor& t) {
    put_u8(out, static_cast<uint8_t>(t.shape().size()));
    for (int e : t.shape()) put_u32(out, static_cast<uint32_t>(e));
    if constexpr (std::endian::native == std::endian::little) {
        put_bytes(out, t.data(), sizeof(float) * static_cast<size_t>(t.size()));
    } else {
        for (int64_t i = 0; i < t.size(); ++i) put_f32(out, t.data()[i]);
    }
}

struct ByteReader {
    const unsigned char* p;
    size_t n;
    size_t pos = 0;

    explicit ByteReader(const std::string& buf)
        : p(reinterpret_cast<const unsigned char*>(buf.data())), n(buf.size()) {}

    void need(size_t k) const {
        if (pos + k > n) throw std::runtime_error("checkpoint: file truncated");
    }
    uint8_t u8() {
        need(1);
        return p[pos++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(p[pos++]) << (8 * i);
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[pos++]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[pos++]) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const uint32_t len = u32();
        need(len);
        std::string s(reinterpret_cast<const char*>(p + pos), len);
        pos += len;
        return s;
    }
    Tensor tensor() {
        const int rank = u8();
        Shape shape(static_cast<size_t>(rank));
        for (int i = 0; i < rank; ++i) shape[static_cast<size_t>(i)] = static_cast<int>(u32());
        Tensor t = Tensor::zeros(shape);
        if constexpr (std::endian::native == std::endian::little) {
            const size_t bytes = sizeof(float) * static_cast<size_t>(t.size());
            need(bytes);
            std::memcpy(t.data(), p + pos, bytes);
            pos += bytes;
        } else {
            for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = f32();
        }
        return t;
    }
};

} // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    using namespace detail;
    std::string out;
    put_bytes(out, kCheckpointMagic, 4);
    put_u16(out, kCheckpointVersion);
    put_u64(out, ck.config_fingerprint);
    put_str(out, ck.config_text);
    put_str(out, ck.model);
    put_u8(out, ck.phase == Phase::pretrain ? 0 : 1);
    put_u64(out, ck.step);
    put_u32(out, static_cast<uint32_t>(ck.alpha_bar.size()));
    for (double v : ck.alpha_bar) put_f64(out, v);
    put_u64(out, ck.rng_state);
    put_u64(out, ck.rng_gamma);
    put_f32(out, ck.adam_lr);
    put_f32(out, ck.adam_beta1);
    put_f32(out, ck.adam_beta2);
    put_f32(out, ck.adam_eps);
    put_u64(out, static_cast<uint64_t>(ck.adam_steps));
    put_u32(out, static_cast<uint32_t>(ck.adam_slots.size()));
    for (const auto& [name, slot] : ck.adam_slots) {
        put_str(out, name);
        put_tensor(out, slot.m);
        put_tensor(out, slot.v);
    }
    put_u32(out, static_cast<uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        put_str(out, name);
        put_tensor(out, t);
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& buf) {
    detail::ByteReader in(buf);
    in.need(4);
    if (std::memcmp(in.p, kCheckpointMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic (not a checkpoint file)");
    in.pos = 4;
    const uint16_t version = in.u16();
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version) +
                                 " (expected " + std::to_string(kCheckpointVersion) + ")");
    Checkpoint ck;
    ck.config_fingerprint = in.u64();
    ck.config_text = in.str();
    ck.model = in.str();
    ck.phase = in.u8() == 0 ? Phase::pretrain : Phase::finetune;
    ck.step = in.u64();
    const uint32_t sched_len = in.u32();
    ck.alpha_bar.resize(sched_len);
    for (uint32_t i = 0; i < sched_len; ++i) ck.alpha_bar[i] = in.f64();
    ck.rng_state = in.u64();
    ck.rng_gamma = in.u64();
    ck.adam_lr = in.f32();
    ck.adam_beta1 = in.f32();
    ck.adam_beta2 = in.f32();
    ck.adam_eps = in.f32();
    ck.adam_steps = static_cast<int64_t>(in.u64());
    const uint32_t n_slots = in.u32();
    ck.adam_slots.reserve(n_slots);
    for (uint32_t i = 0; i < n_slots; ++i) {
        std::string name = in.str();
        Tensor m = in.tensor();
        Tensor v = in.tensor();
        ck.adam_slots.emplace_back(std::move(name), Adam::Slot{std::move(m), std::move(v)});
    }
    const uint32_t n_tensors = in.u32();
    ck.tensors.reserve(n_tensors);
    for (uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = in.str();
        ck.tensors.emplace_back(std::move(name), in.tensor());
    }
    if (in.pos != in.n) throw std::runtime_error("checkpoint: trailing bytes after payload");
    return ck;
}

// Atomic write: serialize to <path>.tmp, then rename over the target, so a
// crash mid-write never leaves a half-written checkpoint behind.
inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    const std::string bytes = serialize_checkpoint(ck);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("checkpoint: cannot write '" + tmp + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("checkpoint: write failed for '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(buf);
}

// --- TrainState bridge -------------------------------------------------------

inline Checkpoint make_checkpoint(TrainState& st, const NoiseSchedule& sched, const RunConfig& cfg) {
    Checkpoint ck;
    ck.config_fingerprint = config_fingerprint(cfg);
    ck.config_text = canonical_config_text(cfg);
    ck.model = "denoiser";
    ck.phase = st.phase;
    ck.step = static_cast<uint64_t>(st.step);
    ck.alpha_bar = sched.alpha_bar;
    ck.rng_state = st.rng.state();
    ck.rng_gamma = st.rng.gamma();
    ck.adam_lr = st.opt.lr();
    ck.adam_beta1 = st.opt.beta1();
    ck.adam_beta2 = st.opt.beta2();
    ck.adam_eps = st.opt.eps();
    ck.adam_steps = st.opt.steps();
    for (const auto& [name, slot] : st.opt.state())
        ck.adam_slots.emplace_back(name, Adam::Slot{slot.m.clone(), slot.v.clone()});
    for (const auto& p : st.denoiser.parameters()) ck.tensors.emplace_back(p.name, p.value->clone());
    return ck;
}

// Loads a denoiser checkpoint into a state built from the same architecture
// config; parameter names and shapes must line up exactly.
inline void restore_train_state(TrainState& st, const Checkpoint& ck) {
    if (ck.model != "denoiser")
        throw std::runtime_error("checkpoint: expected a denoiser checkpoint, found model '" + ck.model + "'");
    auto params = st.denoiser.parameters();
    if (params.size() != ck.tensors.size())
        throw std::runtime_error("checkpoint: parameter count mismatch (architecture differs)");
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [name, stored] = ck.tensors[i];
        if (name != params[i].name)
            throw std::runtime_error("checkpoint: parameter '" + name + "' does not match '" + params[i].name + "'");
        if (stored.shape() != params[i].value->shape())
            throw std::runtime_error("checkpoint: shape mismatch for parameter '" + name + "'");
        std::memcpy(params[i].value->data(), stored.data(), sizeof(float) * static_cast<size_t>(stored.size()));
    }
    st.opt = Adam(ck.adam_lr, ck.adam_beta1, ck.adam_beta2, ck.adam_eps);
    std::map<std::string, Adam::Slot> slots;
    for (const auto& [name, slot] : ck.adam_slots) slots.emplace(name, Adam::Slot{slot.m.clone(), slot.v.clone()});
    st.opt.restore(ck.adam_steps, std::move(slots));
    st.rng = Rng::restore(ck.rng_state, ck.rng_gamma);
    st.phase = ck.phase;
    st.step = static_cast<int64_t>(ck.step);
}

inline NoiseSchedule checkpoint_schedule(const Checkpoint& ck) {
    if (ck.alpha_bar.empty()) throw std::runtime_error("checkpoint: no schedule stored");
    return NoiseSchedule::from_alpha_bar(ck.alpha_bar);
}

// Generic parameter-set checkpoints for models that are not the denoiser
// (autoencoder, evaluation predictors): tensors only, no schedule.
inline Checkpoint make_model_checkpoint(const std::string& model_tag,
                                        const std::vector<NamedParam>& params,
                                        const RunConfig& cfg, uint64_t step) {
    Checkpoint ck;
    ck.config_fingerprint = config_fingerprint(cfg);
    ck.config_text = canonical_config_text(cfg);
    ck.model = model_tag;
    ck.step = step;
    for (const auto& p : params) ck.tensors.emplace_back(p.name, p.value->clone());
    return ck;
}

inline void restore_model_params(const std::string& model_tag, std::vector<NamedParam> params,
                                 const Checkpoint& ck) {
    if (ck.model != model_tag)
        throw std::runtime_error("checkpoint: expected a " + model_tag + " checkpoint, found model '" +
                                 ck.model + "'");
    if (params.size() != ck.tensors.size())
        throw std::runtime_error("checkpoint: parameter count mismatch (architecture differs)");
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [name, stored] = ck.tensors[i];
        if (name != params[i].name)
            throw std::runtime_error("checkpoint: parameter '" + name + "' does not match '" + params[i].name + "'");
        if (stored.shape() != params[i].value->shape())
            throw std::runtime_error("checkpoint: shape mismatch for parameter '" + name + "'");
        std::memcpy(params[i].value->data(), stored.data(), sizeof(float) * static_cast<size_t>(stored.size()));
    }
}

} // namespace cdm
