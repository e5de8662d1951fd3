#include "trinity/model.hpp"

#include <algorithm>
#include <cmath>

#include "trinity/error.hpp"

namespace trinity {

double ModelConfig::deepnorm_alpha() const {
    return std::pow(2.0 * static_cast<double>(layers), 0.25);
}

double ModelConfig::deepnorm_beta() const {
    return std::pow(8.0 * static_cast<double>(layers), -0.25);
}

double ModelConfig::effective_rope_base() const {
    if (ntk_factor <= 0.0) return rope_base;
    const double d = static_cast<double>(head_dim());
    return rope_base * std::pow(ntk_factor, d / (d - 2.0));
}

std::size_t ModelConfig::max_kernel_radius() const {
    std::size_t r = 0;
    for (auto k : kernel_sizes) r = std::max(r, (k - 1) / 2);
    return r;
}

void ModelConfig::validate() const {
    if (hidden == 0 || heads == 0) throw ConfigError("hidden and heads must be positive");
    if (hidden % heads != 0)
        throw ConfigError("hidden (" + std::to_string(hidden) + ") must be divisible by heads (" +
                          std::to_string(heads) + ")");
    if (head_dim() % 2 != 0)
        throw ConfigError("head dimension must be even for rotary embedding, got " +
                          std::to_string(head_dim()));
    if (window_sizes.size() != heads)
        throw ConfigError("window_sizes must list one window per head: " +
                          std::to_string(window_sizes.size()) + " windows for " +
                          std::to_string(heads) + " heads");
    for (auto w : window_sizes)
        if (w < 1) throw ConfigError("attention windows must be >= 1");
    for (auto k : kernel_sizes)
        if (k % 2 == 0)
            throw ConfigError("kernel sizes must be odd, got " + std::to_string(k));
    if (vocab_size != static_cast<std::size_t>(vocab::kSize))
        throw ConfigError("vocab_size must be " + std::to_string(vocab::kSize));
    if (ffn_hidden == 0) throw ConfigError("ffn_hidden must be positive");
}

std::vector<std::size_t> default_window_ladder(std::size_t heads, std::size_t seq_len) {
    const std::size_t rungs[4] = {std::max<std::size_t>(1, seq_len / 64),
                                  std::max<std::size_t>(1, seq_len / 16),
                                  std::max<std::size_t>(1, seq_len / 4),
                                  std::max<std::size_t>(1, seq_len)};
    std::vector<std::size_t> windows(heads);
    for (std::size_t h = 0; h < heads; ++h) windows[h] = rungs[(h * 4) / heads];
    return windows;
}

PresetInfo model_preset(const std::string& name) {
    auto make = [](std::size_t layers, std::size_t hidden, std::size_t ffn, std::size_t heads,
                   std::size_t seq_len, double lr) {
        PresetInfo p;
        p.config.layers = layers;
        p.config.hidden = hidden;
        p.config.ffn_hidden = ffn;
        p.config.heads = heads;
        p.config.window_sizes = default_window_ladder(heads, seq_len);
        p.seq_len = seq_len;
        p.peak_lr = lr;
        return p;
    };
    if (name == "tiny") return make(2, 32, 85, 2, 128, 3e-3);
    if (name == "micro") return make(2, 64, 171, 4, 512, 1e-3);
    if (name == "6m") return make(8, 256, 682, 8, 8192, 1e-3);
    if (name == "40m") return make(10, 576, 1536, 8, 8192, 6e-4);
    if (name == "85m") return make(12, 768, 2048, 12, 8192, 5.5e-4);
    if (name == "170m") return make(24, 768, 2048, 16, 8192, 5e-4);
    if (name == "470m") return make(24, 1280, 3413, 20, 8192, 4e-4);
    if (name == "1b") return make(24, 2048, 5461, 32, 8192, 3e-4);
    if (name == "1b-30k") return make(24, 2048, 5461, 32, 30720, 2e-4);
    if (name == "1b-100k") return make(24, 2048, 5461, 32, 102400, 1e-4);
    throw ConfigError("unknown model preset '" + name + "'");
}

std::vector<std::string> preset_names() {
    return {"tiny", "micro", "6m", "40m", "85m", "170m", "470m", "1b", "1b-30k", "1b-100k"};
}

std::vector<std::pair<std::string, Shape>> enumerate_parameter_shapes(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t h = cfg.hidden, f = cfg.ffn_hidden, v = cfg.vocab_size;
    std::vector<std::pair<std::string, Shape>> shapes;
    shapes.emplace_back("embed.base", Shape{v, h});
    for (auto k : cfg.kernel_sizes) {
        const std::string prefix = "embed.conv" + std::to_string(k);
        shapes.emplace_back(prefix + ".kernel", Shape{k, h, h});
        shapes.emplace_back(prefix + ".bias", Shape{h});
    }
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        const std::string prefix = "layer." + std::to_string(i) + ".";
        shapes.emplace_back(prefix + "attn.w_q", Shape{h, h});
        shapes.emplace_back(prefix + "attn.w_k", Shape{h, h});
        shapes.emplace_back(prefix + "attn.w_v", Shape{h, h});
        shapes.emplace_back(prefix + "attn.w_o", Shape{h, h});
        shapes.emplace_back(prefix + "norm1.gain", Shape{h});
        shapes.emplace_back(prefix + "norm1.bias", Shape{h});
        shapes.emplace_back(prefix + "ffn.w1a", Shape{h, f});
        shapes.emplace_back(prefix + "ffn.b1a", Shape{f});
        shapes.emplace_back(prefix + "ffn.w1b", Shape{h, f});
        shapes.emplace_back(prefix + "ffn.b1b", Shape{f});
        shapes.emplace_back(prefix + "ffn.w2", Shape{f, h});
        shapes.emplace_back(prefix + "ffn.b2", Shape{h});
        shapes.emplace_back(prefix + "norm2.gain", Shape{h});
        shapes.emplace_back(prefix + "norm2.bias", Shape{h});
    }
    shapes.emplace_back("final_norm.gain", Shape{h});
    shapes.emplace_back("final_norm.bias", Shape{h});
    shapes.emplace_back("grc.w_g", Shape{h, h});
    shapes.emplace_back("lm_head.w", Shape{h, v});
    shapes.emplace_back("lm_head.b", Shape{v});
    return shapes;
}

std::size_t count_parameters(const ModelConfig& config) {
    std::size_t total = 0;
    for (const auto& [name, shape] : enumerate_parameter_shapes(config))
        total += shape_numel(shape);
    return total;
}

namespace {

bool is_beta_scaled(const std::string& name) {
    // DeepNorm scales value/output projections and the feed-forward weights
    return name.find("attn.w_v") != std::string::npos ||
           name.find("attn.w_o") != std::string::npos ||
           (name.find(".ffn.w") != std::string::npos);
}

bool is_norm_gain(const std::string& name) {
    return name.size() >= 5 && name.find("gain") != std::string::npos;
}

bool is_bias_like(const std::string& name) {
    return name.find("bias") != std::string::npos || name.find(".b1a") != std::string::npos ||
           name.find(".b1b") != std::string::npos || name.find(".b2") != std::string::npos ||
           name == "lm_head.b";
}

}  // namespace

ModelParams::ModelParams(const ModelConfig& config) : config_(config) { config_.validate(); }

ModelParams::ModelParams(const ModelConfig& config, RandomSource& rng) : ModelParams(config) {
    constexpr double kInitStd = 0.02;
    const double beta = config_.deepnorm_beta();
    for (const auto& [name, shape] : enumerate_parameter_shapes(config_)) {
        if (is_norm_gain(name)) {
            store_.adopt(name, Tensor::full(shape, 1.0, true));
        } else if (is_bias_like(name)) {
            store_.create(name, shape);
        } else {
            const double stddev = is_beta_scaled(name) ? kInitStd * beta : kInitStd;
            store_.create_randn(name, shape, rng, stddev);
        }
    }
}

ModelParams ModelParams::zeros(const ModelConfig& config) {
    ModelParams params(config);
    for (const auto& [name, shape] : enumerate_parameter_shapes(config))
        params.store_.create(name, shape);
    return params;
}

const LoraAdapter* ModelParams::adapter_for(const std::string& path) const {
    for (const auto& a : adapters_)
        if (a.target == path) return &a;
    return nullptr;
}

// ---- forward ----

Tensor base_embed(const TokenSequence& tokens, const ModelParams& params) {
    return embedding_rows(params.store().at("embed.base"), tokens.ids);
}

Tensor groove_fusion_from_embedded(const Tensor& x, const ModelParams& params) {
    Tensor out;
    for (auto k : params.config().kernel_sizes) {
        const std::string prefix = "embed.conv" + std::to_string(k);
        Tensor branch = gelu(conv1d_same(x, params.store().at(prefix + ".kernel"),
                                         params.store().at(prefix + ".bias")));
        out = out.defined() ? add(out, branch) : branch;
    }
    return out;
}

Tensor groove_fusion_embed(const TokenSequence& tokens, const ModelParams& params) {
    return groove_fusion_from_embedded(base_embed(tokens, params), params);
}

Tensor apply_projection(const ModelParams& params, const std::string& path, const Tensor& x) {
    Tensor out = matmul(x, params.store().at(path));
    if (const LoraAdapter* adapter = params.adapter_for(path)) {
        Tensor delta = matmul_nt(matmul_nt(x, adapter->a), adapter->b);
        out = add(out, scale(delta, adapter->alpha / static_cast<double>(adapter->rank)));
    }
    return out;
}

Tensor smwa_layer(const Tensor& x, const ModelParams& params, std::size_t layer_index,
                  AttentionCapture* capture) {
    const ModelConfig& cfg = params.config();
    const std::string prefix = "layer." + std::to_string(layer_index) + ".attn.";
    const std::size_t n = x.shape().at(0);
    const std::size_t d_k = cfg.head_dim();
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(d_k));
    const double base = cfg.effective_rope_base();

    Tensor q = apply_projection(params, prefix + "w_q", x);
    Tensor k = apply_projection(params, prefix + "w_k", x);
    Tensor v = apply_projection(params, prefix + "w_v", x);

    std::vector<std::size_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = i;

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        const std::size_t c0 = h * d_k, c1 = (h + 1) * d_k;
        Tensor qh = rope_apply(slice_cols(q, c0, c1), positions, base);
        Tensor kh = rope_apply(slice_cols(k, c0, c1), positions, base);
        Tensor vh = slice_cols(v, c0, c1);
        std::vector<AttentionRow>* rows_out = nullptr;
        if (capture) {
            capture->entries.push_back({layer_index, h, cfg.window_sizes[h], {}});
            rows_out = &capture->entries.back().rows;
        }
        head_outputs.push_back(
            windowed_attention(qh, kh, vh, cfg.window_sizes[h], scale_factor, rows_out));
    }
    Tensor merged = cfg.heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
    return apply_projection(params, prefix + "w_o", merged);
}

Tensor geglu_ffn(const Tensor& x, const ModelParams& params, std::size_t layer_index) {
    const auto& store = params.store();
    const std::string prefix = "layer." + std::to_string(layer_index) + ".ffn.";
    Tensor gate_in = add_bias(matmul(x, store.at(prefix + "w1a")), store.at(prefix + "b1a"));
    Tensor value_in = add_bias(matmul(x, store.at(prefix + "w1b")), store.at(prefix + "b1b"));
    Tensor fused = mul(gelu(gate_in), value_in);
    return add_bias(matmul(fused, store.at(prefix + "w2")), store.at(prefix + "b2"));
}

Tensor encoder_from_embedded(const Tensor& embedded, const ModelParams& params,
                             AttentionCapture* capture) {
    const ModelConfig& cfg = params.config();
    const auto& store = params.store();
    const double alpha = cfg.deepnorm_alpha();

    Tensor x = groove_fusion_from_embedded(embedded, params);
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        const std::string prefix = "layer." + std::to_string(i) + ".";
        Tensor attn = smwa_layer(x, params, i, capture);
        x = layer_norm(add(scale(x, alpha), attn), store.at(prefix + "norm1.gain"),
                       store.at(prefix + "norm1.bias"));
        Tensor ffn = geglu_ffn(x, params, i);
        x = layer_norm(add(scale(x, alpha), ffn), store.at(prefix + "norm2.gain"),
                       store.at(prefix + "norm2.bias"));
    }
    return layer_norm(x, store.at("final_norm.gain"), store.at("final_norm.bias"));
}

Tensor encoder_forward(const TokenSequence& tokens, const ModelParams& params,
                       AttentionCapture* capture) {
    return encoder_from_embedded(base_embed(tokens, params), params, capture);
}

TokenSequence reverse_complement_tokens(const TokenSequence& seq) {
    TokenSequence out;
    out.ids.resize(seq.ids.size());
    for (std::size_t i = 0; i < seq.ids.size(); ++i)
        out.ids[seq.ids.size() - 1 - i] = vocab::complement_id(seq.ids[i]);
    out.pad_len = 0;  // pads moved to the front; they are ordinary tokens here
    return out;
}

Tensor grc_combine(const Tensor& hidden_fwd, const Tensor& hidden_rc, const ModelParams& params) {
    Tensor gated = matmul_nt(reverse_rows(hidden_rc), params.store().at("grc.w_g"));
    if (params.config().grc_sigma == GrcSigma::Sigmoid) gated = sigmoid(gated);
    return add(hidden_fwd, gated);
}

Tensor grc_forward(const TokenSequence& tokens, const ModelParams& params,
                   AttentionCapture* capture) {
    Tensor hidden_fwd = encoder_forward(tokens, params, capture);
    Tensor hidden_rc = encoder_forward(reverse_complement_tokens(tokens), params, nullptr);
    return grc_combine(hidden_fwd, hidden_rc, params);
}

Tensor model_hidden(const TokenSequence& tokens, const ModelParams& params,
                    AttentionCapture* capture) {
    return params.config().use_grc ? grc_forward(tokens, params, capture)
                                   : encoder_forward(tokens, params, capture);
}

Tensor lm_logits(const Tensor& hidden, const ModelParams& params) {
    return add_bias(matmul(hidden, params.store().at("lm_head.w")),
                    params.store().at("lm_head.b"));
}

// ---- LoRA ----

void lora_attach(ModelParams& params, const std::string& path, std::size_t rank, double alpha,
                 RandomSource& rng) {
    if (rank == 0) throw ConfigError("lora_attach: rank must be >= 1");
    const Tensor* base = params.store().find(path);
    if (!base) throw ConfigError("lora_attach: unknown parameter path '" + path + "'");
    if (base->rank() != 2)
        throw ConfigError("lora_attach: '" + path + "' is not a 2-D parameter");
    if (params.adapter_for(path))
        throw ConfigError("lora_attach: '" + path + "' already has an adapter");
    const std::size_t d_in = base->shape()[0], d_out = base->shape()[1];
    LoraAdapter adapter;
    adapter.target = path;
    adapter.rank = rank;
    adapter.alpha = alpha;
    adapter.a = Tensor::randn({rank, d_in}, rng, 0.02, true);
    adapter.b = Tensor::zeros({d_out, rank}, true);
    params.adapters().push_back(std::move(adapter));
}

void lora_merge(ModelParams& params) {
    for (const auto& adapter : params.adapters()) {
        Tensor& base = params.store().at(adapter.target);
        const std::size_t d_in = base.shape()[0], d_out = base.shape()[1];
        const double s = adapter.alpha / static_cast<double>(adapter.rank);
        const double* ap = adapter.a.data();
        const double* bp = adapter.b.data();
        double* wp = base.data();
        // W[in, out] += s * sum_r A[r, in] * B[out, r]
        for (std::size_t r = 0; r < adapter.rank; ++r)
            for (std::size_t i = 0; i < d_in; ++i) {
                const double av = s * ap[r * d_in + i];
                if (av == 0.0) continue;
                for (std::size_t o = 0; o < d_out; ++o)
                    wp[i * d_out + o] += av * bp[o * adapter.rank + r];
            }
    }
    params.adapters().clear();
}

}  // namespace trinity
