#include "trinity/tokenizer.hpp"

#include "trinity/error.hpp"

namespace trinity {

namespace vocab {

bool is_base(int id) { return id >= 0 && id < kBaseCount; }

int encode_char(char c) {
    switch (c) {
        case 'A': return kA;
        case 'C': return kC;
        case 'G': return kG;
        case 'T': return kT;
        case 'N': return kN;
        default:
            throw ParseError("cannot encode character '" + std::string(1, c) + "'");
    }
}

char decode_id(int id) {
    switch (id) {
        case kA: return 'A';
        case kC: return 'C';
        case kG: return 'G';
        case kT: return 'T';
        case kN: return 'N';
        case kMask: return 'M';
        case kPad: return 'P';
        default:
            throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
    }
}

int complement_id(int id) {
    switch (id) {
        case kA: return kT;
        case kT: return kA;
        case kC: return kG;
        case kG: return kC;
        case kN: return kN;
        case kMask: return kMask;
        case kPad: return kPad;
        default:
            throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
    }
}

}  // namespace vocab

TokenSequence encode(std::string_view bases) {
    TokenSequence seq;
    seq.ids.reserve(bases.size());
    for (std::size_t i = 0; i < bases.size(); ++i) {
        try {
            seq.ids.push_back(vocab::encode_char(bases[i]));
        } catch (const ParseError&) {
            throw ParseError("cannot encode character '" + std::string(1, bases[i]) +
                             "' at position " + std::to_string(i));
        }
    }
    return seq;
}

TokenSequence encode_padded(std::string_view bases, std::size_t pad_len) {
    TokenSequence seq = encode(bases);
    seq.ids.insert(seq.ids.end(), pad_len, vocab::kPad);
    seq.pad_len = pad_len;
    return seq;
}

std::string decode(const TokenSequence& seq) {
    std::string out;
    out.reserve(seq.ids.size());
    for (int id : seq.ids) out.push_back(vocab::decode_id(id));
    return out;
}

MaskingPlan build_masking_plan(const TokenSequence& seq, RandomSource& rng,
                               const MaskingConfig& config) {
    if (seq.content_length() == 0)
        throw ContractError("build_masking_plan: sequence has no non-PAD tokens");

    MaskingPlan plan;
    plan.mask_prob_used = config.mask_prob;
    if (rng.bernoulli(config.variable_branch_prob)) {
        plan.variable_branch = true;
        plan.mask_prob_used = rng.uniform(0.0, config.mask_prob);
    }

    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
        const int id = seq.ids[i];
        if (id == vocab::kPad) continue;
        if (!rng.bernoulli(config.select_prob)) continue;

        MaskedPosition mp;
        mp.index = i;
        mp.original_id = id;
        const double u = rng.uniform();
        if (u < plan.mask_prob_used) {
            mp.action = MaskAction::MaskReplace;
            mp.replacement_id = vocab::kMask;
        } else if (u < plan.mask_prob_used + config.random_prob) {
            mp.action = MaskAction::RandomReplace;
            mp.replacement_id = static_cast<int>(rng.uniform_int(4));  // A, C, G, T
        } else {
            mp.action = MaskAction::Keep;
            mp.replacement_id = id;
        }
        plan.positions.push_back(mp);
    }
    return plan;
}

TokenSequence apply_masking_plan(const TokenSequence& seq, const MaskingPlan& plan) {
    TokenSequence out = seq;
    for (const auto& mp : plan.positions) {
        if (mp.index >= out.ids.size())
            throw ContractError("apply_masking_plan: index " + std::to_string(mp.index) +
                                " out of range for sequence of length " +
                                std::to_string(out.ids.size()));
        out.ids[mp.index] = mp.replacement_id;
    }
    return out;
}

TokenSequence restore_original(const TokenSequence& corrupted, const MaskingPlan& plan) {
    TokenSequence out = corrupted;
    for (const auto& mp : plan.positions) {
        if (mp.index >= out.ids.size())
            throw ContractError("restore_original: index out of range");
        out.ids[mp.index] = mp.original_id;
    }
    return out;
}

}  // namespace trinity
