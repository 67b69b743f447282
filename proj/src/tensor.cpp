#include "sml/tensor.hpp"

#include <cmath>
#include <cstring>
#include <unordered_set>

namespace sml {

std::string Dims4::str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
}

Tensor Tensor::make(Dims4 dims, bool requires_grad) {
    if (dims.n <= 0 || dims.c <= 0 || dims.h <= 0 || dims.w <= 0)
        throw ConfigError("tensor dims must be positive, got " + dims.str());
    auto node = std::make_shared<Node>();
    node->dims = dims;
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(Dims4 dims, bool requires_grad) {
    Tensor t = make(dims, requires_grad);
    t.node_->data.assign(size_t(dims.count()), 0.0f);
    return t;
}

Tensor Tensor::full(Dims4 dims, float value, bool requires_grad) {
    Tensor t = make(dims, requires_grad);
    t.node_->data.assign(size_t(dims.count()), value);
    return t;
}

Tensor Tensor::from_data(Dims4 dims, std::vector<float> data, bool requires_grad) {
    if (int64_t(data.size()) != dims.count())
        throw ConfigError("tensor data length " + std::to_string(data.size()) +
                          " does not match dims " + dims.str());
    Tensor t = make(dims, requires_grad);
    t.node_->data = std::move(data);
    return t;
}

Tensor Tensor::uniform(Dims4 dims, float lo, float hi, Rng& rng, bool requires_grad) {
    Tensor t = make(dims, requires_grad);
    t.node_->data.resize(size_t(dims.count()));
    for (auto& v : t.node_->data) v = rng.uniform(lo, hi);
    return t;
}

Tensor Tensor::kaiming_normal(Dims4 dims, int fan_in, Rng& rng, bool requires_grad) {
    Tensor t = make(dims, requires_grad);
    t.node_->data.resize(size_t(dims.count()));
    const float stddev = std::sqrt(2.0f / float(fan_in));
    for (auto& v : t.node_->data) v = rng.normal(0.0f, stddev);
    return t;
}

std::vector<float>& Tensor::grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0f);
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

float Tensor::scalar() const {
    if (dims() != Dims4{1, 1, 1, 1})
        throw ConfigError("scalar() requires dims (1,1,1,1), got " + dims().str());
    return node_->data[0];
}

double Tensor::scalar_precise() const {
    const float f = scalar();
    return std::isnan(node_->precise) ? double(f) : node_->precise;
}

Tensor Tensor::clone() const {
    Tensor t = make(node_->dims, node_->requires_grad);
    t.node_->data = node_->data;
    return t;
}

bool Tensor::all_finite() const {
    for (float v : node_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

bool track_grad(std::initializer_list<const Tensor*> inputs) {
    if (!g_active_tape) return false;
    for (const Tensor* t : inputs)
        if (t && t->defined() && t->requires_grad()) return true;
    return false;
}

void Tape::backward(Tensor root) {
    if (root.dims() != Dims4{1, 1, 1, 1})
        throw ConfigError("backward() root must be scalar-shaped, got " + root.dims().str());
    root.grad()[0] += 1.0f;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

void ParamRegistry::add(const std::string& name, const Tensor& t, bool trainable) {
    if (!t.defined()) throw ConfigError("registry entry '" + name + "' is undefined");
    for (const auto& e : entries_)
        if (e.name == name) throw ConfigError("duplicate registry name '" + name + "'");
    entries_.push_back({name, t, trainable});
}

std::vector<Tensor> ParamRegistry::trainable() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_)
        if (e.trainable) out.push_back(e.tensor);
    return out;
}

int64_t ParamRegistry::trainable_count() const {
    int64_t total = 0;
    for (const auto& e : entries_)
        if (e.trainable) total += e.tensor.numel();
    return total;
}

}  // namespace sml
