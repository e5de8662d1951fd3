#include "trinity/eval.hpp"

#include <algorithm>
#include <cmath>

#include "trinity/error.hpp"

namespace trinity {

namespace {

constexpr double kInfluenceEps = 1e-30;

double nll_at(const Tensor& logits, std::size_t row, int target) {
    const std::size_t v = logits.shape().at(1);
    const double* p = logits.data() + row * v;
    double mx = p[0];
    for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, p[c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < v; ++c) denom += std::exp(p[c] - mx);
    return std::log(denom) - (p[static_cast<std::size_t>(target)] - mx);
}

}  // namespace

nlohmann::json score_report_json(const ScoreReport& report) {
    return nlohmann::json{{"id", report.id},
                          {"ppl", report.mean_masked_ppl},
                          {"impact", report.mutation_impact},
                          {"positions", report.positions}};
}

double masked_ppl(const TokenSequence& seq, const std::vector<std::size_t>& positions,
                  const ModelParams& params, bool sequential) {
    if (positions.empty()) throw ContractError("masked_ppl: no positions to score");
    for (auto p : positions)
        if (p >= seq.length())
            throw ContractError("masked_ppl: position " + std::to_string(p) +
                                " out of range for length " + std::to_string(seq.length()));
    NoGradGuard guard;
    double nll_sum = 0.0;
    if (sequential) {
        for (auto p : positions) {
            TokenSequence corrupted = seq;
            corrupted.ids[p] = vocab::kMask;
            Tensor logits = lm_logits(model_hidden(corrupted, params), params);
            nll_sum += nll_at(logits, p, seq.ids[p]);
        }
    } else {
        TokenSequence corrupted = seq;
        for (auto p : positions) corrupted.ids[p] = vocab::kMask;
        Tensor logits = lm_logits(model_hidden(corrupted, params), params);
        for (auto p : positions) nll_sum += nll_at(logits, p, seq.ids[p]);
    }
    return std::exp(nll_sum / static_cast<double>(positions.size()));
}

double mutation_impact(const DnaRecord& wild_type, const DnaRecord& mutant,
                       const ModelParams& params, bool sequential,
                       std::size_t* variant_count) {
    if (wild_type.length() != mutant.length())
        throw ContractError("mutation_impact: wt and mt lengths differ (" +
                            std::to_string(wild_type.length()) + " vs " +
                            std::to_string(mutant.length()) + ")");
    std::vector<std::size_t> variants;
    for (std::size_t i = 0; i < wild_type.length(); ++i)
        if (wild_type.bases[i] != mutant.bases[i]) variants.push_back(i);
    if (variants.empty())
        throw ContractError("mutation_impact: sequences are identical (no variant positions)");
    if (variant_count) *variant_count = variants.size();

    const TokenSequence wt_seq = encode(wild_type.bases);
    const TokenSequence mt_seq = encode(mutant.bases);
    return masked_ppl(mt_seq, variants, params, sequential) -
           masked_ppl(wt_seq, variants, params, sequential);
}

double attention_entropy(const ModelParams& params, const std::vector<TokenSequence>& batch) {
    if (batch.empty()) throw ContractError("attention_entropy: empty batch");
    NoGradGuard guard;
    double entropy_sum = 0.0;
    std::size_t rows = 0;
    for (const auto& seq : batch) {
        AttentionCapture capture;
        encoder_forward(seq, params, &capture);
        for (const auto& entry : capture.entries) {
            for (const auto& row : entry.rows) {
                double h = 0.0;
                for (double w : row.weights)
                    if (w > 0.0) h -= w * std::log(w);
                entropy_sum += h;
                ++rows;
            }
        }
    }
    return rows == 0 ? 0.0 : entropy_sum / static_cast<double>(rows);
}

std::vector<double> influence_profile(const ModelParams& params, const TokenSequence& seq,
                                      std::size_t target_index) {
    const std::size_t n = seq.length();
    if (target_index >= n) throw ContractError("influence_profile: target index out of range");

    Tensor embedded;
    {
        NoGradGuard guard;
        embedded = base_embed(seq, params);
    }
    Tensor leaf = Tensor::from_data(embedded.shape(),
                                    {embedded.data(), embedded.data() + embedded.size()}, true);
    Tensor hidden = encoder_from_embedded(leaf, params);
    if (params.config().use_grc) {
        Tensor hidden_rc = encoder_forward(reverse_complement_tokens(seq), params);
        hidden = grc_combine(hidden, hidden_rc, params);
    }
    Tensor y = row_l2_norm(hidden, target_index);
    backward(y);

    const std::size_t width = leaf.shape().at(1);
    const double* g = leaf.grad_data();
    std::vector<double> profile(n);
    for (std::size_t s = 0; s < n; ++s) {
        double sq = 0.0;
        for (std::size_t c = 0; c < width; ++c) {
            const double v = g[s * width + c];
            sq += v * v;
        }
        profile[s] = std::log10(std::sqrt(sq) + kInfluenceEps);
    }
    // drop the incidental parameter gradients (handles share storage)
    for (const auto& item : params.store().items()) {
        Tensor handle = item.value;
        handle.zero_grad();
    }
    return profile;
}

Tensor mean_pool_rows(const Tensor& hidden, std::size_t content_rows) {
    if (hidden.rank() != 2) throw ContractError("mean_pool_rows: rank-2 tensor required");
    if (content_rows == 0 || content_rows > hidden.shape()[0])
        throw ContractError("mean_pool_rows: invalid row count");
    const std::size_t width = hidden.shape()[1];
    std::vector<double> pooled(width, 0.0);
    const double* hp = hidden.data();
    for (std::size_t r = 0; r < content_rows; ++r)
        for (std::size_t c = 0; c < width; ++c) pooled[c] += hp[r * width + c];
    for (auto& v : pooled) v /= static_cast<double>(content_rows);
    return Tensor::from_data({width}, std::move(pooled));
}

Tensor sequence_embedding(const TokenSequence& seq, const ModelParams& params) {
    if (seq.content_length() == 0)
        throw ContractError("sequence_embedding: sequence is all padding");
    NoGradGuard guard;
    Tensor hidden = model_hidden(seq, params);
    return mean_pool_rows(hidden, seq.content_length());
}

}  // namespace trinity
