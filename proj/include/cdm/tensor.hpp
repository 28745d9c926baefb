#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdm/rng.hpp"

namespace cdm {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

class GradientTape;

// Dense row-major f32 array. The data buffer is shared and treated as
// immutable once a tensor has been handed to an op or another thread;
// mutation is only done by the code that just allocated it.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<float>>(numel(shape_), 0.0f)) {
        for (int e : shape_) {
            if (e <= 0) throw std::invalid_argument("Tensor: nonpositive extent in " + shape_str(shape_));
        }
    }

    Tensor(Shape shape, std::vector<float> values) : Tensor(std::move(shape)) {
        if (static_cast<int64_t>(values.size()) != size())
            throw std::invalid_argument("Tensor: data length does not match shape " + shape_str(shape_));
        *data_ = std::move(values);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, float v) {
        Tensor t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), v);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0f); }

    static Tensor scalar(float v) { return full({1}, v); }

    static Tensor randn(Rng& rng, Shape shape) {
        Tensor t(std::move(shape));
        for (float& v : *t.data_) v = rng.normal();
        return t;
    }

    static Tensor rand_uniform(Rng& rng, Shape shape, float lo, float hi) {
        Tensor t(std::move(shape));
        for (float& v : *t.data_) v = static_cast<float>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

    const float* data() const { return data_->data(); }
    float* data() { return data_->data(); }
    float item() const {
        if (size() != 1) throw std::logic_error("Tensor::item on non-scalar " + shape_str(shape_));
        return (*data_)[0];
    }
    float at(int64_t i) const { return (*data_)[i]; }

    bool all_finite() const {
        for (float v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Same buffer, new shape. Gradient handle is dropped; use ops::reshape
    // inside a taped computation.
    Tensor reshaped_view(Shape shape) const {
        if (numel(shape) != size())
            throw std::invalid_argument("reshape: element count mismatch " + shape_str(shape_) + " -> " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<float>>(*data_);
        return t;
    }

    // Tape linkage. A tensor is "tracked" only with respect to the tape that
    // recorded it; handles referring to a dead or different tape (or a new
    // tape reusing the same address — see the generation check) are ignored,
    // so stale tensors are safe to reuse as plain values.
    bool tracked_on(const GradientTape* tape) const;
    int node() const { return node_; }

private:
    friend class GradientTape;

    Shape shape_;
    std::shared_ptr<std::vector<float>> data_;
    const GradientTape* tape_ = nullptr;
    uint64_t tape_gen_ = 0;
    int node_ = -1;
};

// Reverse-mode tape. Nodes are appended in execution order, so parents always
// precede children and the backward sweep is a single reverse pass that visits
// each node once. One tape serves one training step on one thread.
class GradientTape {
public:
    // Backward closure: given the output gradient, return one gradient per
    // parent (aligned with the parent list). Entries for parents whose
    // `needs` flag was false may be default-constructed.
    using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out, std::span<const bool> needs)>;

    GradientTape() {
        if (active_ != nullptr) throw std::logic_error("GradientTape: a tape is already active on this thread");
        active_ = this;
    }
    ~GradientTape() {
        if (active_ == this) active_ = nullptr;
    }
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;

    static GradientTape* active() { return active_; }

    // Registers a leaf whose gradient will be materialized by backward().
    void watch(Tensor& t) {
        check_open("watch");
        if (t.tracked_on(this)) return;
        t.tape_ = this;
        t.tape_gen_ = gen_;
        t.node_ = add_node({}, nullptr);
    }

    // Records an op that produced `out` from `parents`. No-op unless at least
    // one parent is tracked on this tape.
    void record(Tensor& out, std::initializer_list<const Tensor*> parents, BackwardFn fn) {
        check_open("record");
        if (parents.size() > kMaxParents) throw std::logic_error("GradientTape: too many parents");
        std::vector<int> parent_ids;
        parent_ids.reserve(parents.size());
        bool any = false;
        for (const Tensor* p : parents) {
            const bool tracked = p->tracked_on(this);
            any = any || tracked;
            parent_ids.push_back(tracked ? p->node_ : -1);
        }
        if (!any) return;
        out.tape_ = this;
        out.tape_gen_ = gen_;
        out.node_ = add_node(std::move(parent_ids), std::move(fn));
    }

    // Gradients of a scalar loss with respect to every watched leaf.
    // Consumes the tape: recording or a second backward both throw.
    void backward(const Tensor& loss) {
        if (consumed_) throw std::logic_error("GradientTape::backward called twice; re-record first");
        if (loss.size() != 1) throw std::invalid_argument("GradientTape::backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (!loss.tracked_on(this)) throw std::invalid_argument("GradientTape::backward: loss is not tracked on this tape");
        consumed_ = true;

        grads_.assign(nodes_.size(), Tensor());
        grads_[loss.node_] = Tensor::ones(loss.shape());

        bool needs[kMaxParents];
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& node = nodes_[i];
            if (!grads_[i].defined() || !node.backward) continue;
            const size_t np = node.parents.size();
            for (size_t k = 0; k < np; ++k) needs[k] = node.parents[k] >= 0;
            auto parent_grads = node.backward(grads_[i], std::span<const bool>(needs, np));
            if (parent_grads.size() != np)
                throw std::logic_error("GradientTape: backward closure returned wrong arity");
            for (size_t k = 0; k < np; ++k) {
                const int p = node.parents[k];
                if (p < 0) continue;
                accumulate(p, parent_grads[k]);
            }
            node.backward = nullptr; // release captured buffers as we go
        }
    }

    // Gradient of a watched leaf after backward(); zeros when the loss did
    // not depend on it.
    Tensor grad(const Tensor& leaf) const {
        if (!consumed_) throw std::logic_error("GradientTape::grad before backward");
        if (!leaf.tracked_on(this)) throw std::invalid_argument("GradientTape::grad: tensor is not tracked on this tape");
        const Tensor& g = grads_[leaf.node_];
        if (!g.defined()) return Tensor::zeros(leaf.shape());
        return g;
    }

    bool consumed() const { return consumed_; }
    size_t node_count() const { return nodes_.size(); }
    uint64_t generation() const { return gen_; }

private:
    static constexpr size_t kMaxParents = 4;

    struct Node {
        std::vector<int> parents;
        BackwardFn backward;
    };

    void check_open(const char* what) const {
        if (consumed_) throw std::logic_error(std::string("GradientTape::") + what + " after backward; tape is consumed");
    }

    int add_node(std::vector<int> parents, BackwardFn fn) {
        nodes_.push_back(Node{std::move(parents), std::move(fn)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    void accumulate(int node_id, const Tensor& g) {
        if (!g.defined()) throw std::logic_error("GradientTape: missing gradient for required parent");
        Tensor& slot = grads_[node_id];
        if (!slot.defined()) {
            slot = g;
            return;
        }
        if (slot.shape() != g.shape())
            throw std::logic_error("GradientTape: gradient shape mismatch at node " + std::to_string(node_id));
        // Shared subexpressions sum their incoming gradients. Buffers may be
        // shared with forward values, so add into a fresh copy.
        Tensor summed = slot.clone();
        float* d = summed.data();
        const float* s = g.data();
        for (int64_t i = 0; i < summed.size(); ++i) d[i] += s[i];
        slot = summed;
    }

    static thread_local GradientTape* active_;
    static inline std::atomic<uint64_t> next_gen_{0};

    const uint64_t gen_ = ++next_gen_;
    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    bool consumed_ = false;
};

inline thread_local GradientTape* GradientTape::active_ = nullptr;

inline bool Tensor::tracked_on(const GradientTape* tape) const {
    return tape != nullptr && tape_ == tape && node_ >= 0 && tape_gen_ == tape->generation();
}

} // namespace cdm
