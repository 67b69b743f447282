#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sml/common.hpp"

namespace sml {

// Dense NCHW shape. All four extents are strictly positive.
struct Dims4 {
    int n = 0, c = 0, h = 0, w = 0;

    int64_t count() const { return int64_t(n) * c * h * w; }
    bool operator==(const Dims4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
    bool operator!=(const Dims4& o) const { return !(*this == o); }
    std::string str() const;
};

// Value handle over a shared storage node. Copies alias the same storage;
// clone() makes an independent deep copy. Inside a forward pass tensors are
// treated as immutable values; parameter updates happen between passes.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Dims4 dims, bool requires_grad = false);
    static Tensor full(Dims4 dims, float value, bool requires_grad = false);
    static Tensor from_data(Dims4 dims, std::vector<float> data, bool requires_grad = false);
    static Tensor uniform(Dims4 dims, float lo, float hi, Rng& rng, bool requires_grad = false);
    static Tensor kaiming_normal(Dims4 dims, int fan_in, Rng& rng, bool requires_grad = true);

    bool defined() const { return node_ != nullptr; }
    const Dims4& dims() const { return node_->dims; }
    int64_t numel() const { return node_->dims.count(); }

    const std::vector<float>& data() const { return node_->data; }
    std::vector<float>& data() { return node_->data; }
    const float* ptr() const { return node_->data.data(); }
    float* ptr() { return node_->data.data(); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return node_ && !node_->grad.empty(); }
    // Grad buffer, zero-initialized on first access.
    std::vector<float>& grad();
    const std::vector<float>& grad_view() const { return node_->grad; }
    void zero_grad();

    float at(int n, int c, int h, int w) const { return node_->data[offset(n, c, h, w)]; }
    float& at(int n, int c, int h, int w) { return node_->data[offset(n, c, h, w)]; }
    size_t offset(int n, int c, int h, int w) const {
        const Dims4& d = node_->dims;
        return ((size_t(n) * d.c + c) * d.h + h) * d.w + w;
    }

    float scalar() const;  // requires dims (1,1,1,1)
    // Scalar reductions keep their double accumulator; the gradient-check
    // harness reads it to avoid the final float32 rounding. Falls back to
    // the stored float when no higher-precision value exists.
    double scalar_precise() const;
    void set_precise(double v) { node_->precise = v; }
    Tensor clone() const;
    bool all_finite() const;
    bool same_node(const Tensor& o) const { return node_ == o.node_; }

private:
    struct Node {
        Dims4 dims;
        std::vector<float> data;
        std::vector<float> grad;
        bool requires_grad = false;
        double precise = std::numeric_limits<double>::quiet_NaN();
    };
    std::shared_ptr<Node> node_;

    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    static Tensor make(Dims4 dims, bool requires_grad);
};

// Integer label map (N,H,W); values are class ids or the ignore index.
struct LabelMap {
    int n = 0, h = 0, w = 0;
    std::vector<int32_t> data;

    LabelMap() = default;
    LabelMap(int n_, int h_, int w_, int32_t fill = 0)
        : n(n_), h(h_), w(w_), data(size_t(n_) * h_ * w_, fill) {}

    int64_t count() const { return int64_t(n) * h * w; }
    int32_t at(int ni, int y, int x) const { return data[(size_t(ni) * h + y) * w + x]; }
    int32_t& at(int ni, int y, int x) { return data[(size_t(ni) * h + y) * w + x]; }
};

// Recorded reverse pass. Ops executed while a tape is active append their
// backward rules in execution order (a topological order of the DAG);
// backward() replays them exactly once in reverse. One tape per training
// step, owned by a single thread.
class Tape {
public:
    void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
    size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    // Seeds d(root)/d(root)=1 and runs all recorded rules in reverse order.
    // root must be scalar-shaped (1,1,1,1).
    void backward(Tensor root);

private:
    std::vector<std::function<void()>> entries_;
};

Tape* active_tape();

// RAII activation of a tape for the enclosed forward pass.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// True when a tape is active and any argument requires grad.
bool track_grad(std::initializer_list<const Tensor*> inputs);

// Named parameter/buffer listing in a fixed enumeration order. Names are
// unique; checkpoints serialize entries in this order.
class ParamRegistry {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
        bool trainable;
    };

    void add(const std::string& name, const Tensor& t, bool trainable);
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Tensor> trainable() const;
    int64_t trainable_count() const;

private:
    std::vector<Entry> entries_;
};

}  // namespace sml
