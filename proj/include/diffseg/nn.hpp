#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "diffseg/autodiff.hpp"

namespace diffseg {

// Named parameter registry. Modules register their tensors here so that
// optimizers, checksums, and checkpoints see one flat, ordered view.
class ParamRegistry {
public:
    Value add(const std::string& name, Tensor init);
    const std::vector<std::pair<std::string, Value>>& entries() const { return entries_; }
    Value find(const std::string& name) const;

    int64_t param_count() const;
    uint64_t checksum() const;                       // FNV-1a over all values, registration order
    uint64_t checksum_prefix(const std::string& prefix) const;
    double grad_norm() const;                        // L2 over all grads (missing grads count as 0)
    void zero_grads();
    void set_requires_grad(bool rg);

private:
    std::vector<std::pair<std::string, Value>> entries_;
};

// Deterministic weight init helpers.
Tensor randn_tensor(std::vector<int> dims, std::mt19937_64& rng, float stddev = 1.0f);
Tensor kaiming_conv_init(int co, int ci, int kh, int kw, std::mt19937_64& rng);
Tensor kaiming_linear_init(int out_f, int in_f, std::mt19937_64& rng);

// --- modules ------------------------------------------------------------------

struct Conv2d {
    Value weight, bias;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(ParamRegistry& reg, const std::string& name, int ci, int co, int k, int stride, int pad,
           std::mt19937_64& rng);
    Value forward(const Value& x) const { return conv2d(x, weight, &bias, stride, pad); }
    int out_channels() const { return weight->value.dim(0); }
    int in_channels() const { return weight->value.dim(1); }
};

struct Linear {
    Value weight, bias;

    Linear() = default;
    Linear(ParamRegistry& reg, const std::string& name, int in_f, int out_f, std::mt19937_64& rng);
    Value forward(const Value& x) const { return linear(x, weight, &bias); }
};

struct GroupNorm {
    Value gamma, beta;
    int groups = 32;

    GroupNorm() = default;
    GroupNorm(ParamRegistry& reg, const std::string& name, int channels, int groups);
    Value forward(const Value& x) const { return group_norm(x, gamma, beta, groups); }
};

struct Embedding {
    Value table; // [rows, d]

    Embedding() = default;
    Embedding(ParamRegistry& reg, const std::string& name, int rows, int d, std::mt19937_64& rng);
    Value lookup(const std::vector<int>& indices, std::vector<int> out_dims) const {
        return gather_rows(table, indices, std::move(out_dims));
    }
};

// Picks a group count that divides the channel count (<= 32).
int norm_groups_for(int channels);

// --- optimizer ------------------------------------------------------------------

struct OptimConfig {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
    int warmup_steps = 100; // linear 0 -> lr
};

// Adam with decoupled weight decay and linear warmup.
class AdamW {
public:
    AdamW() = default;
    AdamW(std::vector<Value> params, OptimConfig cfg);

    void step();
    void zero_grad();
    int64_t step_count() const { return t_; }
    const OptimConfig& config() const { return cfg_; }

    // Flat serialization of optimizer state (m, v per param + step counter).
    std::vector<Tensor> state_tensors() const;
    void load_state(const std::vector<Tensor>& state, int64_t step_count);

private:
    std::vector<Value> params_;
    std::vector<Tensor> m_, v_;
    OptimConfig cfg_;
    int64_t t_ = 0;
};

} // namespace diffseg
