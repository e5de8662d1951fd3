#include "trinity/genome.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <ostream>

#include "trinity/error.hpp"

namespace trinity {

namespace {

char complement_base(char c, std::size_t pos) {
    switch (c) {
        case 'A': return 'T';
        case 'T': return 'A';
        case 'C': return 'G';
        case 'G': return 'C';
        case 'N': return 'N';
        default:
            throw ParseError("invalid base '" + std::string(1, c) + "' at position " +
                             std::to_string(pos));
    }
}

}  // namespace

char strand_to_char(Strand s) { return s == Strand::Forward ? '+' : '-'; }

Strand strand_from_char(char c) {
    if (c == '+') return Strand::Forward;
    if (c == '-') return Strand::Reverse;
    throw ParseError(std::string("unknown strand symbol '") + c + "'");
}

bool is_valid_base(char c) {
    return c == 'A' || c == 'C' || c == 'G' || c == 'T' || c == 'N';
}

std::string reverse_complement(std::string_view bases) {
    std::string out(bases.size(), '\0');
    for (std::size_t i = 0; i < bases.size(); ++i)
        out[bases.size() - 1 - i] = complement_base(bases[i], i);
    return out;
}

FastaParseResult parse_fasta(std::istream& in) {
    FastaParseResult result;
    std::string line;
    std::size_t line_no = 0;
    DnaRecord* current = nullptr;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '>') {
            std::string id = line.substr(1);
            const std::size_t ws = id.find_first_of(" \t");
            if (ws != std::string::npos) id.resize(ws);
            if (id.empty())
                throw ParseError("empty FASTA header at line " + std::to_string(line_no));
            result.records.push_back({std::move(id), ""});
            current = &result.records.back();
            continue;
        }
        if (!current)
            throw ParseError("sequence data before first '>' header at line " +
                             std::to_string(line_no));
        for (char c : line) {
            if (std::isspace(static_cast<unsigned char>(c))) continue;
            char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
            if (!is_valid_base(u)) {
                u = 'N';
                ++result.replaced_bases;
            }
            current->bases.push_back(u);
        }
    }
    return result;
}

FastaParseResult parse_fasta_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open FASTA file: " + path);
    return parse_fasta(in);
}

void write_fasta(std::ostream& out, const std::vector<DnaRecord>& records,
                 std::size_t line_width) {
    for (const auto& rec : records) {
        out << '>' << rec.id << '\n';
        for (std::size_t i = 0; i < rec.bases.size(); i += line_width)
            out << rec.bases.substr(i, line_width) << '\n';
    }
}

std::vector<AnnotationInterval> parse_annotations(std::istream& in) {
    std::vector<AnnotationInterval> intervals;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::size_t pos = 0;
        while (true) {
            const std::size_t tab = line.find('\t', pos);
            fields.push_back(line.substr(pos, tab == std::string::npos ? tab : tab - pos));
            if (tab == std::string::npos) break;
            pos = tab + 1;
        }
        if (fields.size() != 4)
            throw ParseError("expected 4 tab-separated fields, got " +
                             std::to_string(fields.size()) + ", line " + std::to_string(line_no));
        AnnotationInterval iv;
        iv.seq_id = fields[0];
        if (iv.seq_id.empty())
            throw ParseError("empty seq_id, line " + std::to_string(line_no));
        auto parse_coord = [&](const std::string& text, const char* what) -> std::size_t {
            try {
                std::size_t consumed = 0;
                const long long value = std::stoll(text, &consumed);
                if (consumed != text.size() || value < 0) throw std::invalid_argument("range");
                return static_cast<std::size_t>(value);
            } catch (const std::exception&) {
                throw ParseError(std::string("non-integer ") + what + " '" + text + "', line " +
                                 std::to_string(line_no));
            }
        };
        iv.start = parse_coord(fields[1], "start");
        iv.end = parse_coord(fields[2], "end");
        if (iv.start >= iv.end)
            throw ParseError("empty interval, line " + std::to_string(line_no));
        if (fields[3].size() != 1)
            throw ParseError("unknown strand symbol '" + fields[3] + "', line " +
                             std::to_string(line_no));
        try {
            iv.strand = strand_from_char(fields[3][0]);
        } catch (const ParseError&) {
            throw ParseError("unknown strand symbol '" + fields[3] + "', line " +
                             std::to_string(line_no));
        }
        intervals.push_back(std::move(iv));
    }
    std::stable_sort(intervals.begin(), intervals.end(),
                     [](const AnnotationInterval& a, const AnnotationInterval& b) {
                         if (a.seq_id != b.seq_id) return a.seq_id < b.seq_id;
                         return a.start < b.start;
                     });
    return intervals;
}

std::vector<AnnotationInterval> parse_annotations_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open annotation file: " + path);
    return parse_annotations(in);
}

void serialize_annotations(std::ostream& out, const std::vector<AnnotationInterval>& intervals) {
    for (const auto& iv : intervals)
        out << iv.seq_id << '\t' << iv.start << '\t' << iv.end << '\t'
            << strand_to_char(iv.strand) << '\n';
}

WindowSample sample_window(const DnaRecord& record, std::size_t window_len, RandomSource& rng) {
    if (window_len == 0) throw ContractError("sample_window: window length must be >= 1");
    WindowSample out;
    const std::size_t n = record.length();
    if (n >= window_len) {
        out.start = static_cast<std::size_t>(rng.uniform_int(n - window_len + 1));
        out.bases = record.bases.substr(out.start, window_len);
        out.pad_len = 0;
    } else {
        out.start = 0;
        out.pad_len = window_len - n;
        out.bases = record.bases + std::string(out.pad_len, 'N');
    }
    return out;
}

SyntheticCorpus generate_synthetic_corpus(const SyntheticGenomeSpec& spec) {
    if (spec.gene_len_min > spec.gene_len_max)
        throw ConfigError("generate_synthetic_corpus: gene_len_min > gene_len_max");
    const std::size_t motif_overhead = spec.start_motif.size() + spec.stop_motif.size();
    if (spec.gene_count > 0 && spec.gene_len_min < motif_overhead + 1)
        throw ConfigError("generate_synthetic_corpus: gene_len_min must exceed motif lengths (" +
                          std::to_string(motif_overhead) + ")");
    if (spec.strand_mix < 0.0 || spec.strand_mix > 1.0)
        throw ConfigError("generate_synthetic_corpus: strand_mix must be in [0, 1]");

    RandomSource rng(spec.seed);
    static const char kBases[4] = {'A', 'C', 'G', 'T'};

    // place non-overlapping genes by rejection
    struct Placement {
        std::size_t start, len;
        Strand strand;
    };
    std::vector<Placement> placements;
    placements.reserve(spec.gene_count);
    const std::size_t max_attempts = 200 * (spec.gene_count + 1);
    std::size_t attempts = 0;
    while (placements.size() < spec.gene_count) {
        if (++attempts > max_attempts)
            throw GenerationError("could not place " + std::to_string(spec.gene_count) +
                                  " non-overlapping genes of length <= " +
                                  std::to_string(spec.gene_len_max) + " in " +
                                  std::to_string(spec.total_length) + " bases");
        const std::size_t len =
            spec.gene_len_min +
            static_cast<std::size_t>(rng.uniform_int(spec.gene_len_max - spec.gene_len_min + 1));
        if (len > spec.total_length) continue;
        const std::size_t start =
            static_cast<std::size_t>(rng.uniform_int(spec.total_length - len + 1));
        bool overlaps = false;
        for (const auto& p : placements) {
            if (start < p.start + p.len && p.start < start + len) {
                overlaps = true;
                break;
            }
        }
        if (overlaps) continue;
        const Strand strand = rng.bernoulli(spec.strand_mix) ? Strand::Reverse : Strand::Forward;
        placements.push_back({start, len, strand});
    }
    std::sort(placements.begin(), placements.end(),
              [](const Placement& a, const Placement& b) { return a.start < b.start; });

    std::string bases(spec.total_length, 'A');
    for (auto& c : bases) c = kBases[rng.uniform_int(4)];

    SyntheticCorpus corpus;
    for (const auto& p : placements) {
        // gene pattern on its own strand: start motif, interior, stop motif;
        // interiors are resampled until they contain no stray motif copy, so
        // every motif occurrence in a gene marks a real boundary
        const std::size_t interior_len = p.len - motif_overhead;
        std::string pattern;
        for (int tries = 0; tries < 200; ++tries) {
            std::string interior(interior_len, 'A');
            for (auto& c : interior) c = kBases[rng.uniform_int(4)];
            pattern = spec.start_motif + interior + spec.stop_motif;
            const bool stray_start =
                pattern.find(spec.start_motif, 1) != std::string::npos;
            const bool stray_stop =
                pattern.find(spec.stop_motif) != pattern.size() - spec.stop_motif.size();
            if (!stray_start && !stray_stop) break;
            pattern.clear();
        }
        if (pattern.empty())
            throw GenerationError("could not generate a motif-free gene interior");
        const std::string slice =
            p.strand == Strand::Forward ? pattern : reverse_complement(pattern);
        bases.replace(p.start, p.len, slice);
        corpus.annotations.push_back({spec.record_id, p.start, p.start + p.len, p.strand});
    }

    corpus.records.push_back({spec.record_id, std::move(bases)});
    return corpus;
}

}  // namespace trinity
