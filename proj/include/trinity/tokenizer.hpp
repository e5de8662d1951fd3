#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "trinity/random.hpp"

namespace trinity {

// Character-level vocabulary: five base tokens plus MASK/PAD specials.
namespace vocab {
constexpr int kA = 0;
constexpr int kC = 1;
constexpr int kG = 2;
constexpr int kT = 3;
constexpr int kN = 4;
constexpr int kMask = 5;
constexpr int kPad = 6;
constexpr int kBaseCount = 5;  // A, C, G, T, N
constexpr int kSize = 7;

bool is_base(int id);
int encode_char(char c);  // throws ParseError on non-base characters
char decode_id(int id);
// Token-level reverse complement partner: A<->T, C<->G; N/MASK/PAD fixed.
int complement_id(int id);
}  // namespace vocab

struct TokenSequence {
    std::vector<int> ids;
    std::size_t pad_len = 0;  // trailing PAD count

    std::size_t length() const { return ids.size(); }
    std::size_t content_length() const { return ids.size() - pad_len; }
};

TokenSequence encode(std::string_view bases);
// Encode a sampled window, appending pad_len PAD tokens.
TokenSequence encode_padded(std::string_view bases, std::size_t pad_len);
std::string decode(const TokenSequence& seq);

enum class MaskAction : std::uint8_t { MaskReplace, RandomReplace, Keep };

struct MaskedPosition {
    std::size_t index;
    MaskAction action;
    int original_id;
    int replacement_id;
};

struct MaskingPlan {
    std::vector<MaskedPosition> positions;  // ascending index order
    bool variable_branch = false;           // the per-sequence mask-ratio draw fired
    double mask_prob_used = 0.0;            // MASK-substitution probability in effect

    bool empty() const { return positions.empty(); }
};

struct MaskingConfig {
    double select_prob = 0.15;
    double mask_prob = 0.80;    // among selected: replaced with MASK
    double random_prob = 0.10;  // among selected: replaced with a random base
    // With this per-sequence probability, mask_prob is drawn uniformly from
    // [0, mask_prob] instead; keep-probability absorbs the difference.
    double variable_branch_prob = 0.02;
};

// Independently selects each non-PAD position with select_prob and assigns
// corruption actions. PAD positions are never selected.
MaskingPlan build_masking_plan(const TokenSequence& seq, RandomSource& rng,
                               const MaskingConfig& config = {});

TokenSequence apply_masking_plan(const TokenSequence& seq, const MaskingPlan& plan);

// Inverse of apply_masking_plan given the plan.
TokenSequence restore_original(const TokenSequence& corrupted, const MaskingPlan& plan);

}  // namespace trinity
