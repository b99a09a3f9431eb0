#include "diffseg/nn.hpp"

#include <cmath>

namespace diffseg {

Value ParamRegistry::add(const std::string& name, Tensor init) {
    for (const auto& [n, v] : entries_)
        if (n == name) throw ParameterError("duplicate parameter name: " + name);
    Value p = make_parameter(std::move(init));
    entries_.emplace_back(name, p);
    return p;
}

Value ParamRegistry::find(const std::string& name) const {
    for (const auto& [n, v] : entries_)
        if (n == name) return v;
    return nullptr;
}

int64_t ParamRegistry::param_count() const {
    int64_t n = 0;
    for (const auto& [name, v] : entries_) n += v->value.numel();
    return n;
}

uint64_t ParamRegistry::checksum() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, v] : entries_) {
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(v->value.data(), static_cast<size_t>(v->value.numel()) * sizeof(float), h);
    }
    return h;
}

uint64_t ParamRegistry::checksum_prefix(const std::string& prefix) const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, v] : entries_) {
        if (name.rfind(prefix, 0) != 0) continue;
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(v->value.data(), static_cast<size_t>(v->value.numel()) * sizeof(float), h);
    }
    return h;
}

double ParamRegistry::grad_norm() const {
    double s = 0.0;
    for (const auto& [name, v] : entries_) {
        if (v->grad.empty()) continue;
        for (int64_t i = 0; i < v->grad.numel(); ++i) s += static_cast<double>(v->grad[i]) * v->grad[i];
    }
    return std::sqrt(s);
}

void ParamRegistry::zero_grads() {
    for (const auto& [name, v] : entries_)
        if (!v->grad.empty()) std::fill(v->grad.storage().begin(), v->grad.storage().end(), 0.0f);
}

void ParamRegistry::set_requires_grad(bool rg) {
    for (const auto& [name, v] : entries_) v->requires_grad = rg;
}

Tensor randn_tensor(std::vector<int> dims, std::mt19937_64& rng, float stddev) {
    Tensor t(std::move(dims));
    std::normal_distribution<float> dist(0.0f, stddev);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
    return t;
}

Tensor kaiming_conv_init(int co, int ci, int kh, int kw, std::mt19937_64& rng) {
    const float stddev = std::sqrt(2.0f / (static_cast<float>(ci) * kh * kw));
    return randn_tensor({co, ci, kh, kw}, rng, stddev);
}

Tensor kaiming_linear_init(int out_f, int in_f, std::mt19937_64& rng) {
    const float stddev = std::sqrt(2.0f / static_cast<float>(in_f));
    return randn_tensor({out_f, in_f}, rng, stddev);
}

Conv2d::Conv2d(ParamRegistry& reg, const std::string& name, int ci, int co, int k, int stride, int pad,
               std::mt19937_64& rng)
    : stride(stride), pad(pad) {
    weight = reg.add(name + ".weight", kaiming_conv_init(co, ci, k, k, rng));
    bias = reg.add(name + ".bias", Tensor({co}, 0.0f));
}

Linear::Linear(ParamRegistry& reg, const std::string& name, int in_f, int out_f, std::mt19937_64& rng) {
    weight = reg.add(name + ".weight", kaiming_linear_init(out_f, in_f, rng));
    bias = reg.add(name + ".bias", Tensor({out_f}, 0.0f));
}

GroupNorm::GroupNorm(ParamRegistry& reg, const std::string& name, int channels, int groups) : groups(groups) {
    gamma = reg.add(name + ".gamma", Tensor({channels}, 1.0f));
    beta = reg.add(name + ".beta", Tensor({channels}, 0.0f));
}

Embedding::Embedding(ParamRegistry& reg, const std::string& name, int rows, int d, std::mt19937_64& rng) {
    table = reg.add(name + ".table", randn_tensor({rows, d}, rng, 0.02f));
}

int norm_groups_for(int channels) {
    for (int g = std::min(32, channels); g >= 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

AdamW::AdamW(std::vector<Value> params, OptimConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p->value.dims(), 0.0f);
        v_.emplace_back(p->value.dims(), 0.0f);
    }
}

void AdamW::step() {
    ++t_;
    float lr = cfg_.lr;
    if (cfg_.warmup_steps > 0 && t_ <= cfg_.warmup_steps)
        lr = cfg_.lr * static_cast<float>(t_) / static_cast<float>(cfg_.warmup_steps);
    const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Value& p = params_[i];
        if (p->grad.empty()) p->ensure_grad();
        float* w = p->value.data();
        const float* g = p->grad.data();
        float* m = m_[i].data();
        float* v = v_[i].data();
        const int64_t n = p->value.numel();
        for (int64_t j = 0; j < n; ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * g[j] * g[j];
            const float mhat = m[j] / bc1;
            const float vhat = v[j] / bc2;
            w[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[j]);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_)
        if (!p->grad.empty()) std::fill(p->grad.storage().begin(), p->grad.storage().end(), 0.0f);
}

std::vector<Tensor> AdamW::state_tensors() const {
    std::vector<Tensor> out;
    out.reserve(m_.size() * 2);
    for (size_t i = 0; i < m_.size(); ++i) {
        out.push_back(m_[i]);
        out.push_back(v_[i]);
    }
    return out;
}

void AdamW::load_state(const std::vector<Tensor>& state, int64_t step_count) {
    if (state.size() != m_.size() * 2) throw FormatError("optimizer state size mismatch");
    for (size_t i = 0; i < m_.size(); ++i) {
        if (!state[2 * i].same_shape(m_[i]) || !state[2 * i + 1].same_shape(v_[i]))
            throw FormatError("optimizer state shape mismatch");
        m_[i] = state[2 * i];
        v_[i] = state[2 * i + 1];
    }
    t_ = step_count;
}

} // namespace diffseg
