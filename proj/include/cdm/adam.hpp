#pragma once

// Adam optimizer with bias correction. Moment buffers are keyed by parameter
// name so they survive checkpointing and resume bit-exactly.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cdm/tensor.hpp"

namespace cdm {

struct NamedParam {
    std::string name;
    Tensor* value = nullptr;
};

class Adam {
public:
    explicit Adam(float lr = 1e-3f, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    float lr() const { return lr_; }
    void set_lr(float lr) { lr_ = lr; }
    float beta1() const { return beta1_; }
    float beta2() const { return beta2_; }
    float eps() const { return eps_; }
    int64_t steps() const { return t_; }

    // Applies one update using gradients already computed on `tape`.
    // Parameters whose gradient contains a non-finite entry are left
    // untouched; the return value is the number of such skips.
    int step(const std::vector<NamedParam>& params, GradientTape& tape) {
        ++t_;
        const float bc1 = 1.0f - static_cast<float>(std::pow(static_cast<double>(beta1_), static_cast<double>(t_)));
        const float bc2 = 1.0f - static_cast<float>(std::pow(static_cast<double>(beta2_), static_cast<double>(t_)));
        int skipped = 0;
        for (const auto& p : params) {
            Tensor g = tape.grad(*p.value);
            if (!g.all_finite()) {
                ++skipped;
                continue;
            }
            Slot& s = slot(p.name, p.value->shape());
            float* m = s.m.data();
            float* v = s.v.data();
            float* w = p.value->data();
            const float* pg = g.data();
            const int64_t n = p.value->size();
            for (int64_t i = 0; i < n; ++i) {
                m[i] = beta1_ * m[i] + (1.0f - beta1_) * pg[i];
                v[i] = beta2_ * v[i] + (1.0f - beta2_) * pg[i] * pg[i];
                const float mhat = m[i] / bc1;
                const float vhat = v[i] / bc2;
                w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
        return skipped;
    }

    // Checkpoint access: first/second moment per parameter plus the step
    // counter.
    struct Slot {
        Tensor m;
        Tensor v;
    };

    const std::map<std::string, Slot>& state() const { return state_; }

    void restore(int64_t t, std::map<std::string, Slot> state) {
        t_ = t;
        state_ = std::move(state);
    }

private:
    Slot& slot(const std::string& name, const Shape& shape) {
        auto it = state_.find(name);
        if (it == state_.end())
            it = state_.emplace(name, Slot{Tensor(shape), Tensor(shape)}).first;
        else if (it->second.m.shape() != shape)
            throw std::logic_error("adam: parameter '" + name + "' changed shape");
        return it->second;
    }

    float lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, Slot> state_;
};

} // namespace cdm
