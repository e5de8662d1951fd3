#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "trinity/tensor.hpp"
#include "trinity/tokenizer.hpp"

namespace trinity {

enum class GrcSigma : std::uint8_t { Sigmoid, Identity };

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t hidden = 64;
    std::size_t ffn_hidden = 171;
    std::size_t heads = 4;
    std::vector<std::size_t> window_sizes = {8, 32, 128, 512};  // per head
    std::vector<std::size_t> kernel_sizes = {3, 5, 7};
    std::size_t vocab_size = vocab::kSize;
    double rope_base = 10000.0;
    double ntk_factor = 0.0;  // 0 disables dynamic NTK scaling
    GrcSigma grc_sigma = GrcSigma::Sigmoid;
    bool use_grc = true;

    std::size_t head_dim() const { return hidden / heads; }
    double deepnorm_alpha() const;  // residual scaling (2L)^(1/4)
    double deepnorm_beta() const;   // init scaling (8L)^(-1/4)
    double effective_rope_base() const;
    std::size_t max_kernel_radius() const;
    void validate() const;  // throws ConfigError
};

// Heads spread evenly over the ladder {N/64, N/16, N/4, N}, clipped to >= 1.
std::vector<std::size_t> default_window_ladder(std::size_t heads, std::size_t seq_len);

struct PresetInfo {
    ModelConfig config;
    std::size_t seq_len = 0;
    double peak_lr = 0.0;
};

// Named pretraining configurations ("6m".."1b" plus desk-scale "micro"/"tiny").
PresetInfo model_preset(const std::string& name);
std::vector<std::string> preset_names();

// Rank-r additive adapter on a 2-D weight: W x + (alpha/r) B (A x).
struct LoraAdapter {
    std::string target;
    Tensor a;  // [r, d_in]
    Tensor b;  // [d_out, r], zero-initialized
    std::size_t rank = 0;
    double alpha = 0.0;
};

class ModelParams {
public:
    ModelParams(const ModelConfig& config, RandomSource& rng);
    static ModelParams zeros(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    ParameterStore& store() { return store_; }
    const ParameterStore& store() const { return store_; }

    std::vector<LoraAdapter>& adapters() { return adapters_; }
    const std::vector<LoraAdapter>& adapters() const { return adapters_; }
    const LoraAdapter* adapter_for(const std::string& path) const;

private:
    explicit ModelParams(const ModelConfig& config);

    ModelConfig config_;
    ParameterStore store_;
    std::vector<LoraAdapter> adapters_;
};

// Shapes of every tensor implied by the config, in creation order.
std::vector<std::pair<std::string, Shape>> enumerate_parameter_shapes(const ModelConfig& config);
std::size_t count_parameters(const ModelConfig& config);

// Exported attention rows for entropy diagnostics.
struct AttentionCapture {
    struct HeadRows {
        std::size_t layer = 0;
        std::size_t head = 0;
        std::size_t window = 0;
        std::vector<AttentionRow> rows;
    };
    std::vector<HeadRows> entries;
};

// ---- forward operations ----

// Learned base-embedding lookup (PADs embed like any token).
Tensor base_embed(const TokenSequence& tokens, const ModelParams& params);

// Sum over kernel sizes of GELU(conv_k(x)) where x is the embedded input.
Tensor groove_fusion_from_embedded(const Tensor& x, const ModelParams& params);
Tensor groove_fusion_embed(const TokenSequence& tokens, const ModelParams& params);

// Weight application with any attached low-rank adapter folded in.
Tensor apply_projection(const ModelParams& params, const std::string& path, const Tensor& x);

// One sliding multi-window attention layer: per-head windowed softmax
// attention with RoPE on q/k, heads concatenated then projected by w_o.
Tensor smwa_layer(const Tensor& x, const ModelParams& params, std::size_t layer_index,
                  AttentionCapture* capture = nullptr);

Tensor geglu_ffn(const Tensor& x, const ModelParams& params, std::size_t layer_index);

// Full encoder on an already-embedded input (groove fusion + blocks + norm).
Tensor encoder_from_embedded(const Tensor& embedded, const ModelParams& params,
                             AttentionCapture* capture = nullptr);
Tensor encoder_forward(const TokenSequence& tokens, const ModelParams& params,
                       AttentionCapture* capture = nullptr);

// Reverse-complement token sequence (pads complement to pads and move to the
// front as the order reverses).
TokenSequence reverse_complement_tokens(const TokenSequence& seq);

// f(S) + sigma(Flip(f(S^R)) * W_G^T) with a shared-parameter encoder.
Tensor grc_combine(const Tensor& hidden_fwd, const Tensor& hidden_rc, const ModelParams& params);
Tensor grc_forward(const TokenSequence& tokens, const ModelParams& params,
                   AttentionCapture* capture = nullptr);

// Dispatches on config().use_grc.
Tensor model_hidden(const TokenSequence& tokens, const ModelParams& params,
                    AttentionCapture* capture = nullptr);

Tensor lm_logits(const Tensor& hidden, const ModelParams& params);

// ---- low-rank adaptation ----

void lora_attach(ModelParams& params, const std::string& path, std::size_t rank, double alpha,
                 RandomSource& rng);
// Folds every adapter into its base weight and removes it.
void lora_merge(ModelParams& params);

}  // namespace trinity
