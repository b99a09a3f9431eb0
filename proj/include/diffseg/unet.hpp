#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "diffseg/nn.hpp"
#include "diffseg/schedule.hpp"

namespace diffseg {

// --- condition embedding ---------------------------------------------------

// Fixed-width token sequence for one prompt; the empty prompt maps to a
// dedicated learned null row repeated across all positions.
struct ConditionEmbedding {
    Tensor tokens; // [K, d]
    bool is_null = false;
};

class CondEmbedder {
public:
    CondEmbedder() = default;
    CondEmbedder(ParamRegistry& reg, std::vector<std::string> vocab, int tokens, int dim, std::mt19937_64& rng);

    const std::vector<std::string>& vocab() const { return vocab_; }
    int token_count() const { return tokens_; }
    int dim() const { return dim_; }

    // Spec surface: K padded rows; unknown names raise VocabularyError.
    ConditionEmbedding embed(const std::vector<std::string>& categories) const;

    // Graph-building variant for batched training; [N, K, d].
    Value embed_value(const std::vector<std::vector<std::string>>& batch) const;

    std::vector<int> token_indices(const std::vector<std::string>& categories) const;

private:
    Embedding table_; // vocab rows + pad row + null row
    std::vector<std::string> vocab_;
    int tokens_ = 0;
    int dim_ = 0;
    int pad_row() const { return static_cast<int>(vocab_.size()); }
    int null_row() const { return static_cast<int>(vocab_.size()) + 1; }
};

// --- U-Net -------------------------------------------------------------------

struct UNetConfig {
    int in_channels = 3;
    int base_width = 64;
    std::vector<int> channel_mults = {1, 2, 2};
    int res_blocks_per_resolution = 2;
    int attention_heads = 4;
    int cond_dim = 64;
    int cond_tokens = 8;
    int time_embed_dim = 256;
};

struct CaptureRequest {
    bool enabled = false;
    std::vector<int> layers;    // decoder layer indices; empty = all
    bool raw_attention = false; // additionally keep per-head attention probs
};

// Captured features for one decoder layer, batched.
struct LayerCapture {
    Tensor inter;    // [N, d_l, h, w] residual-block output
    Tensor cross;    // [N, K, h, w] head-averaged attention map
    Tensor raw_attn; // [N, heads, h*w, K] when requested, else empty
};

struct DenoiserOutput {
    Tensor eps;                          // same shape as the input latent
    std::map<int, LayerCapture> capture; // keyed by decoder layer index
};

class CondUNet {
public:
    CondUNet() = default;
    CondUNet(ParamRegistry& reg, const std::string& prefix, const UNetConfig& cfg, std::mt19937_64& rng);

    // x: [N,in,H,W]; t_per_sample: schedule steps (size N); cond: [N,K,cond_dim].
    Value forward(const Value& x, const std::vector<int>& t_per_sample, const Value& cond,
                  const CaptureRequest& cap = {}, std::map<int, LayerCapture>* captures = nullptr) const;

    int decoder_layer_count() const { return static_cast<int>(decoder_.size()); }
    int decoder_layer_channels(int layer) const;
    const UNetConfig& config() const { return cfg_; }

private:
    struct ResBlock {
        GroupNorm norm1, norm2;
        Conv2d conv1, conv2;
        Linear time_proj;
        Conv2d skip;
        bool has_skip = false;
        Value forward(const Value& x, const Value& temb) const;
    };
    struct CrossAttention {
        GroupNorm norm;
        Linear to_q, to_k, to_v, to_out;
        int heads = 4;
        // Returns residual-added output; attn_probs receives [N*heads, HW, K].
        Value forward(const Value& x, const Value& cond, Value* attn_probs) const;
    };
    struct DecoderBlock {
        ResBlock res;
        CrossAttention attn;
        int channels = 0;
    };

    UNetConfig cfg_;
    Conv2d conv_in_;
    Linear time_fc1_, time_fc2_;
    std::vector<ResBlock> encoder_;    // res_blocks * levels, level-major
    std::vector<Conv2d> down_;         // levels-1 stride-2 convs
    ResBlock mid1_, mid2_;
    std::vector<DecoderBlock> decoder_; // res_blocks * levels, coarse -> fine
    std::vector<Conv2d> up_;            // levels-1 upsample convs
    GroupNorm out_norm_;
    Conv2d out_conv_;

    Tensor sinusoidal_embedding(const std::vector<int>& t_per_sample) const;
};

// --- denoiser facade -----------------------------------------------------------

struct DenoiserConfig {
    UNetConfig unet;
    int train_steps = 1000;
    float beta_start = 1e-4f;
    float beta_end = 0.02f;
};

// Owns the schedule, the condition embedder, and the U-Net; the unit that gets
// pretrained, then frozen for feature extraction.
class Denoiser {
public:
    Denoiser() = default; // uninitialized; operations raise StateError
    Denoiser(const DenoiserConfig& cfg, std::vector<std::string> vocab, uint64_t seed);

    bool initialized() const { return initialized_; }
    const Schedule& schedule() const;
    const DenoiserConfig& config() const;
    const CondEmbedder& embedder() const;
    CondUNet& unet() { return unet_; }
    const CondUNet& unet() const { return unet_; }
    ParamRegistry& params() { return params_; }
    const ParamRegistry& params() const { return params_; }

    ConditionEmbedding embed_condition(const std::vector<std::string>& categories) const;

    // Single-condition inference; x 3-D [C,H,W] or 4-D batch sharing one cond.
    DenoiserOutput predict_noise(const LatentImage& x, int t, const ConditionEmbedding& cond,
                                 const CaptureRequest& cap = {}) const;
    // Batched inference with one condition per sample.
    DenoiserOutput predict_noise_batch(const Tensor& x, int t, const std::vector<ConditionEmbedding>& conds,
                                       const CaptureRequest& cap = {}) const;

    // Graph-building forward for pretraining.
    Value forward_eps(const Value& x, const std::vector<int>& t_per_sample,
                      const std::vector<std::vector<std::string>>& prompts, bool null_prompt_mask_all = false) const;
    Value forward_eps_masked(const Value& x, const std::vector<int>& t_per_sample,
                             const std::vector<std::vector<std::string>>& prompts,
                             const std::vector<bool>& drop_condition) const;

    void set_trainable(bool trainable) { params_.set_requires_grad(trainable); }
    uint64_t weights_checksum() const { return params_.checksum(); }

    void save(const std::string& path, const std::string& extra_meta_json = "{}") const;
    static Denoiser load_file(const std::string& path);
    // Serialization into an existing archive under a name prefix.
    void append_to(struct Archive& archive, const std::string& prefix) const;
    static Denoiser from_archive(const struct Archive& archive, const std::string& prefix);

private:
    DenoiserConfig cfg_;
    Schedule sched_;
    ParamRegistry params_;
    CondEmbedder embedder_;
    CondUNet unet_;
    bool initialized_ = false;

    void require_initialized() const;
};

} // namespace diffseg
