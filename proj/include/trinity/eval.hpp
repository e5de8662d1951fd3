#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "trinity/genome.hpp"
#include "trinity/model.hpp"
#include "trinity/tokenizer.hpp"

namespace trinity {

struct ScoreReport {
    std::string id;
    double mean_masked_ppl = 0.0;
    double mutation_impact = 0.0;
    std::size_t positions = 0;
};

nlohmann::json score_report_json(const ScoreReport& report);

// Perplexity of the true tokens at the given positions under masking.
// Default masks all positions jointly in one forward pass; sequential = true
// masks one position at a time (one forward per position).
double masked_ppl(const TokenSequence& seq, const std::vector<std::size_t>& positions,
                  const ModelParams& params, bool sequential = false);

// masked_ppl(mt at variant positions) - masked_ppl(wt at variant positions);
// implausible mutants score positive. Variant positions are the indices where
// the two sequences differ.
double mutation_impact(const DnaRecord& wild_type, const DnaRecord& mutant,
                       const ModelParams& params, bool sequential = false,
                       std::size_t* variant_count = nullptr);

// Mean Shannon entropy (nats) of attention rows over layers, heads, and
// queries of the forward-branch encoder.
double attention_entropy(const ModelParams& params, const std::vector<TokenSequence>& batch);

// log10(|d y_t / d x_s| + eps) for every source position s, where y_t is the
// L2 norm of the final hidden state at t and x_s are the base-embedding input
// rows of the forward branch.
std::vector<double> influence_profile(const ModelParams& params, const TokenSequence& seq,
                                      std::size_t target_index);

Tensor mean_pool_rows(const Tensor& hidden, std::size_t content_rows);

// Mean of final hidden states over non-PAD positions.
Tensor sequence_embedding(const TokenSequence& seq, const ModelParams& params);

}  // namespace trinity
