#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "trinity/random.hpp"

namespace trinity {

// An identified nucleotide string over {A, C, G, T, N}, uppercase.
struct DnaRecord {
    std::string id;
    std::string bases;

    std::size_t length() const { return bases.size(); }
};

enum class Strand : std::uint8_t { Forward, Reverse };

char strand_to_char(Strand s);
Strand strand_from_char(char c);

// 0-based half-open coding interval on a named sequence.
struct AnnotationInterval {
    std::string seq_id;
    std::size_t start = 0;  // inclusive
    std::size_t end = 0;    // exclusive
    Strand strand = Strand::Forward;

    std::size_t length() const { return end - start; }
    bool operator==(const AnnotationInterval&) const = default;
};

bool is_valid_base(char c);

// (s_N^C, ..., s_1^C) with A<->T, C<->G, N fixed. Throws ParseError naming the
// offending position on any other character.
std::string reverse_complement(std::string_view bases);

struct FastaParseResult {
    std::vector<DnaRecord> records;
    std::size_t replaced_bases = 0;  // out-of-alphabet characters turned into N
};

FastaParseResult parse_fasta(std::istream& in);
FastaParseResult parse_fasta_file(const std::string& path);
void write_fasta(std::ostream& out, const std::vector<DnaRecord>& records,
                 std::size_t line_width = 70);

// TSV: seq_id<TAB>start<TAB>end<TAB>strand, '#' comments, 0-based half-open.
// Result is sorted by (seq_id, start).
std::vector<AnnotationInterval> parse_annotations(std::istream& in);
std::vector<AnnotationInterval> parse_annotations_file(const std::string& path);
void serialize_annotations(std::ostream& out, const std::vector<AnnotationInterval>& intervals);

struct WindowSample {
    std::string bases;
    std::size_t start = 0;    // offset of the window in the source record
    std::size_t pad_len = 0;  // trailing N padding when the record is short
};

// Uniform random window of length L; short records are returned whole,
// right-padded with N.
WindowSample sample_window(const DnaRecord& record, std::size_t window_len, RandomSource& rng);

// Desk-scale stand-in for a real annotated genome: uniform background with
// non-overlapping planted genes that carry fixed start/stop signals.
struct SyntheticGenomeSpec {
    std::size_t total_length = 100000;
    std::size_t gene_count = 40;
    std::size_t gene_len_min = 120;
    std::size_t gene_len_max = 300;
    double strand_mix = 0.5;  // fraction of genes on the reverse strand
    std::string start_motif = "ATGCCGTAC";  // 5' signal, written on the gene strand
    std::string stop_motif = "TAGCAT";      // 3' signal
    std::uint64_t seed = 0;
    std::string record_id = "syn0";
};

struct SyntheticCorpus {
    std::vector<DnaRecord> records;
    std::vector<AnnotationInterval> annotations;
};

SyntheticCorpus generate_synthetic_corpus(const SyntheticGenomeSpec& spec);

}  // namespace trinity
