#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "trinity/genome.hpp"
#include "trinity/model.hpp"
#include "trinity/tokenizer.hpp"

namespace trinity {

struct TrainConfig {
    int stage = 1;
    std::size_t seq_len = 512;   // desk default; stage 2 default is 2048
    std::size_t batch_size = 8;
    std::size_t steps = 1000;
    double peak_lr = 1e-3;
    std::size_t warmup_steps = 0;  // 0 derives 1% of steps (>= 1)
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    std::vector<std::string> corpus_paths;
    std::vector<double> corpus_weights;  // empty = uniform mixture
    bool grc_enabled = true;
    bool allow_scratch_stage2 = false;  // ablation override for the stage guard
    std::string model_preset = "micro";
    std::optional<ModelConfig> model;  // explicit config wins over the preset
    std::size_t eval_every = 100;      // 0 disables periodic eval logging
    std::size_t eval_windows = 16;
    MaskingConfig masking;

    ModelConfig resolve_model() const;
    std::size_t effective_warmup() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Linear warmup to peak_lr, then cosine decay to 0.1 * peak_lr at `steps`.
double lr_at(std::size_t step, const TrainConfig& config);

// Adaptive-moment optimizer with decoupled weight decay over a fixed
// parameter list. Moment buffers are serialized with checkpoints.
class AdamW {
public:
    explicit AdamW(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.95,
                   double eps = 1e-8);

    void step(double lr, double weight_decay);
    void zero_grad();

    std::size_t update_count() const { return update_count_; }
    void set_update_count(std::size_t n) { update_count_ = n; }
    const std::vector<Tensor>& params() const { return params_; }
    std::vector<double>& moment1(std::size_t i) { return m_[i]; }
    std::vector<double>& moment2(std::size_t i) { return v_[i]; }
    const std::vector<double>& moment1(std::size_t i) const { return m_[i]; }
    const std::vector<double>& moment2(std::size_t i) const { return v_[i]; }
    double beta1() const { return beta1_; }
    double beta2() const { return beta2_; }
    double eps() const { return eps_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_;
    std::size_t update_count_ = 0;
};

struct MlmBatchItem {
    TokenSequence corrupted;
    MaskingPlan plan;
};

// One optimizer update on a batch; returns the pre-update loss. Loss covers
// plan-selected positions only. Throws NumericalError on a non-finite loss.
double mlm_step(const std::vector<MlmBatchItem>& batch, ModelParams& params, AdamW& opt,
                double lr, double weight_decay, std::uint64_t step_label = 0);

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
    std::string kind = "pretrain";  // or "cds_classifier"
    ModelConfig model_config;
    std::uint64_t step = 0;
    RandomState rng;
    nlohmann::json meta;  // adapters, training provenance
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

// ---- staged pretraining ----

class Trainer {
public:
    // Fresh initialization. Enforces the stage-2 guard and corpus checks.
    explicit Trainer(const TrainConfig& config);
    // Warm start (params only) or bitwise resume (full state) from data.
    Trainer(const TrainConfig& config, const CheckpointData& init, bool resume);

    // Runs until config.steps, appending JSON-lines metrics when given.
    void run(std::ostream* metrics = nullptr);

    double eval_ppl();

    CheckpointData to_checkpoint() const;
    ModelParams& params() { return params_; }
    const ModelParams& params() const { return params_; }
    std::uint64_t step() const { return step_; }

private:
    void load_corpora();
    void build_eval_set();
    MlmBatchItem draw_item();

    TrainConfig config_;
    ModelParams params_;
    AdamW opt_;
    RandomSource rng_;
    std::uint64_t step_ = 0;

    struct CorpusEntry {
        DnaRecord train_region;
        DnaRecord eval_region;
        double weight = 1.0;
    };
    std::vector<CorpusEntry> entries_;
    std::vector<double> cumulative_weights_;

    struct EvalItem {
        TokenSequence corrupted;
        std::vector<int> targets;
        std::vector<bool> selected;
    };
    std::vector<EvalItem> eval_items_;
};

// Perplexity over masked eval positions with the predictive distribution
// renormalized over the four nucleotide classes (N targets are skipped).
double base4_masked_ppl(const Tensor& logits, const std::vector<int>& targets,
                        const std::vector<bool>& selected, double* nll_sum = nullptr,
                        std::size_t* count = nullptr);

}  // namespace trinity
