#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "trinity/genome.hpp"
#include "trinity/train.hpp"

namespace trinity {

enum class TokenLabel : std::uint8_t { Noncoding = 0, CdsForward = 1, CdsReverse = 2 };

// One label per position; overlapping intervals resolve earliest-start-wins.
std::vector<TokenLabel> labels_from_annotations(const DnaRecord& record,
                                                const std::vector<AnnotationInterval>& intervals);

// Maximal runs of an identical coding label become intervals; runs shorter
// than min_len are discarded.
std::vector<AnnotationInterval> intervals_from_labels(const std::vector<TokenLabel>& labels,
                                                      const std::string& seq_id,
                                                      std::size_t min_len = 60);

enum class MatchCriterion : std::uint8_t { Exact, SeventyFive };

struct MatchReport {
    MatchCriterion criterion = MatchCriterion::Exact;
    std::size_t tp = 0, fp = 0, fn = 0;
    double recall = 0.0, precision = 0.0, f1 = 0.0;
    bool recall_defined = true;
    bool precision_defined = true;
};

// Exact: identical coordinates and strand. 75%: prediction fully inside the
// truth, at least 75% of its length, matching strand. One-to-one greedy
// matching over criterion-satisfying pairs, largest overlap first.
MatchReport match_predictions(const std::vector<AnnotationInterval>& truth,
                              const std::vector<AnnotationInterval>& predictions,
                              MatchCriterion criterion);

bool pair_satisfies(const AnnotationInterval& truth, const AnnotationInterval& pred,
                    MatchCriterion criterion);

nlohmann::json match_report_json(const MatchReport& report);
std::string render_metrics_table(const MatchReport& exact, const MatchReport& seventy_five);

// Two GELU hidden layers (256, 128) and a 3-class projection on top of the
// frozen encoder hidden states.
class ClassifierHead {
public:
    ClassifierHead(std::size_t input_width, RandomSource& rng);
    static ClassifierHead zeros(std::size_t input_width);

    Tensor forward(const Tensor& hidden) const;
    ParameterStore& store() { return store_; }
    const ParameterStore& store() const { return store_; }
    std::size_t input_width() const { return input_width_; }

private:
    explicit ClassifierHead(std::size_t input_width, bool);
    std::size_t input_width_;
    ParameterStore store_;
};

struct CdsFinetuneConfig {
    std::size_t lora_rank = 4;
    double lora_alpha = 32.0;
    double lr = 0.001;
    std::size_t batch_size = 32;
    std::size_t steps = 2000;
    std::size_t window_len = 512;
    std::uint64_t seed = 0;
    double weight_decay = 0.0;
};

// Base weights stay frozen; LoRA adapters on the attention projections train
// jointly with the classifier head. Returns a "cds_classifier" checkpoint.
CheckpointData finetune_cds(const CheckpointData& base, const std::vector<DnaRecord>& records,
                            const std::vector<AnnotationInterval>& annotations,
                            const CdsFinetuneConfig& config, std::ostream* metrics = nullptr);

struct CdsClassifier {
    ModelParams params;
    ClassifierHead head;
};

CdsClassifier classifier_from_checkpoint(const CheckpointData& data);

struct CdsEvalConfig {
    std::size_t window_len = 20000;
    std::size_t overlap = 1000;
    std::size_t min_interval_len = 60;
};

struct CdsEvalResult {
    MatchReport exact;
    MatchReport seventy_five;
    double token_accuracy = 0.0;
    std::vector<AnnotationInterval> predictions;
};

// Windowed prediction with majority vote in overlaps, interval decoding, and
// matching under both criteria.
CdsEvalResult evaluate_cds(const CdsClassifier& classifier,
                           const std::vector<DnaRecord>& records,
                           const std::vector<AnnotationInterval>& truth,
                           const CdsEvalConfig& config = {});

// Same scoring path on externally supplied per-record labels.
CdsEvalResult evaluate_from_labels(const std::vector<std::vector<TokenLabel>>& labels,
                                   const std::vector<DnaRecord>& records,
                                   const std::vector<AnnotationInterval>& truth,
                                   std::size_t min_interval_len = 60);

// Per-record predicted labels (argmax, majority vote in window overlaps).
std::vector<TokenLabel> predict_labels(const CdsClassifier& classifier, const DnaRecord& record,
                                       const CdsEvalConfig& config);

}  // namespace trinity
