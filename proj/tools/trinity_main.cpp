#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "trinity/cds.hpp"
#include "trinity/error.hpp"
#include "trinity/eval.hpp"
#include "trinity/genome.hpp"
#include "trinity/model.hpp"
#include "trinity/tokenizer.hpp"
#include "trinity/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace trinity;

namespace {

std::optional<std::uint64_t> env_seed_override() {
    const char* env = std::getenv("TRINITY_SEED");
    if (!env || !*env) return std::nullopt;
    try {
        return std::stoull(env);
    } catch (const std::exception&) {
        throw ConfigError(std::string("TRINITY_SEED is not an integer: ") + env);
    }
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

void echo_config(const fs::path& out_dir, const json& effective) {
    write_text_file(out_dir / "effective_config.json", effective.dump(2) + "\n");
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

// dotted-path override: "masking.select_prob=0.2"
void apply_override(json& config, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override must look like key=value: " + assignment);
    const std::string key = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;  // plain string
    }
    json* cursor = &config;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
        if (part.empty()) throw ConfigError("bad override key: " + key);
        if (dot == std::string::npos) {
            (*cursor)[part] = parsed;
            break;
        }
        cursor = &(*cursor)[part];
        start = dot + 1;
    }
}

std::vector<std::size_t> parse_size_list(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(static_cast<std::size_t>(std::stoull(item)));
    }
    if (out.empty()) throw ConfigError("empty list: " + text);
    return out;
}

// ---- synth ----

int cmd_synth(const SyntheticGenomeSpec& base_spec, std::size_t records, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::vector<DnaRecord> all_records;
    std::vector<AnnotationInterval> all_annotations;
    for (std::size_t r = 0; r < records; ++r) {
        SyntheticGenomeSpec spec = base_spec;
        spec.seed = base_spec.seed + r;
        spec.record_id = "syn" + std::to_string(r);
        SyntheticCorpus corpus = generate_synthetic_corpus(spec);
        for (auto& rec : corpus.records) all_records.push_back(std::move(rec));
        for (auto& iv : corpus.annotations) all_annotations.push_back(std::move(iv));
    }
    {
        std::ofstream fasta(out_dir / "corpus.fasta", std::ios::binary);
        if (!fasta) throw IoError("cannot write corpus.fasta");
        write_fasta(fasta, all_records);
        std::ofstream tsv(out_dir / "annotations.tsv", std::ios::binary);
        if (!tsv) throw IoError("cannot write annotations.tsv");
        tsv << "# seq_id\tstart\tend\tstrand (0-based, half-open)\n";
        serialize_annotations(tsv, all_annotations);
    }
    std::size_t total_bases = 0;
    for (const auto& rec : all_records) total_bases += rec.length();
    std::cout << "wrote " << all_records.size() << " record(s), " << total_bases << " bases, "
              << all_annotations.size() << " gene(s) to " << out_dir.string() << "\n";

    json effective{{"command", "synth"},
                   {"length", base_spec.total_length},
                   {"genes", base_spec.gene_count},
                   {"records", records},
                   {"gene_min", base_spec.gene_len_min},
                   {"gene_max", base_spec.gene_len_max},
                   {"strand_mix", base_spec.strand_mix},
                   {"start_motif", base_spec.start_motif},
                   {"stop_motif", base_spec.stop_motif},
                   {"seed", base_spec.seed}};
    echo_config(out_dir, effective);
    return 0;
}

// ---- pretrain ----

int cmd_pretrain(TrainConfig config, const std::optional<std::string>& init_path,
                 const std::optional<std::string>& resume_path, const fs::path& out_dir) {
    if (config.stage == 2 && !init_path && !resume_path && !config.allow_scratch_stage2)
        throw ConfigError(
            "stage 2 requires --init <stage-1 checkpoint> (or --scratch to ablate)");

    fs::create_directories(out_dir);
    json effective;
    to_json(effective, config);
    effective["command"] = "pretrain";
    if (init_path) effective["init"] = *init_path;
    if (resume_path) effective["resume"] = *resume_path;
    echo_config(out_dir, effective);

    std::optional<Trainer> trainer;
    if (resume_path) {
        CheckpointData data = load_checkpoint(*resume_path);
        trainer.emplace(config, data, /*resume=*/true);
    } else if (init_path) {
        CheckpointData data = load_checkpoint(*init_path);
        trainer.emplace(config, data, /*resume=*/false);
    } else {
        trainer.emplace(config);
    }

    std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::binary);
    if (!metrics) throw IoError("cannot write metrics.jsonl");
    trainer->run(&metrics);
    save_checkpoint((out_dir / "checkpoint.tdna").string(), trainer->to_checkpoint());
    std::cout << "finished at step " << trainer->step() << ", checkpoint written to "
              << (out_dir / "checkpoint.tdna").string() << "\n";
    return 0;
}

// ---- score ----

std::string pairing_key(const std::string& id) {
    const std::size_t us = id.find_last_of('_');
    return us == std::string::npos ? id : id.substr(0, us);
}

int cmd_score(const std::string& ckpt_path, const std::string& fasta_path,
              const std::string& mode, const std::optional<std::string>& mt_path,
              bool sequential, const std::optional<fs::path>& out_dir) {
    CheckpointData data = load_checkpoint(ckpt_path);
    ModelParams params = ModelParams::zeros(data.model_config);
    for (auto& item : params.store().items()) {
        const Tensor* src = data.find("param." + item.name);
        if (!src) throw ConfigError("checkpoint is missing parameter '" + item.name + "'");
        std::copy(src->data(), src->data() + src->size(), item.value.data());
    }

    std::ostringstream lines;
    if (mode == "ppl") {
        FastaParseResult parsed = parse_fasta_file(fasta_path);
        if (parsed.records.empty()) throw ConfigError("no records in " + fasta_path);
        for (const auto& rec : parsed.records) {
            TokenSequence seq = encode(rec.bases);
            std::vector<std::size_t> positions(seq.length());
            for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
            ScoreReport report;
            report.id = rec.id;
            report.positions = positions.size();
            report.mean_masked_ppl = masked_ppl(seq, positions, params, sequential);
            lines << score_report_json(report).dump() << "\n";
        }
    } else if (mode == "impact") {
        if (!mt_path) throw ConfigError("impact mode requires --mt <mutant fasta>");
        FastaParseResult wt = parse_fasta_file(fasta_path);
        FastaParseResult mt = parse_fasta_file(*mt_path);
        if (wt.records.size() != mt.records.size())
            throw ConfigError("impact mode: wt and mt files hold different record counts");
        for (std::size_t i = 0; i < wt.records.size(); ++i) {
            const auto& w = wt.records[i];
            const auto& m = mt.records[i];
            if (pairing_key(w.id) != pairing_key(m.id))
                throw ConfigError("unpaired records: '" + w.id + "' vs '" + m.id +
                                  "' (ids must share a prefix up to the last '_')");
            ScoreReport report;
            report.id = pairing_key(w.id);
            try {
                report.mutation_impact =
                    mutation_impact(w, m, params, sequential, &report.positions);
            } catch (const ContractError& e) {
                throw ConfigError("records '" + w.id + "'/'" + m.id + "': " + e.what());
            }
            lines << score_report_json(report).dump() << "\n";
        }
    } else {
        throw ConfigError("unknown score mode '" + mode + "' (expected ppl or impact)");
    }

    std::cout << lines.str();
    if (out_dir) {
        fs::create_directories(*out_dir);
        write_text_file(*out_dir / "scores.jsonl", lines.str());
        json effective{{"command", "score"}, {"mode", mode},     {"ckpt", ckpt_path},
                       {"fasta", fasta_path}, {"sequential", sequential}};
        if (mt_path) effective["mt"] = *mt_path;
        echo_config(*out_dir, effective);
    }
    return 0;
}

// ---- diagnose ----

int cmd_diagnose(const std::string& ckpt_path, const std::string& kind,
                 const std::string& lengths_text, std::size_t batch, std::uint64_t seed,
                 std::size_t influence_len, const std::optional<fs::path>& out_dir) {
    CheckpointData data = load_checkpoint(ckpt_path);
    ModelParams params = ModelParams::zeros(data.model_config);
    for (auto& item : params.store().items()) {
        const Tensor* src = data.find("param." + item.name);
        if (!src) throw ConfigError("checkpoint is missing parameter '" + item.name + "'");
        std::copy(src->data(), src->data() + src->size(), item.value.data());
    }

    static const char kBases[4] = {'A', 'C', 'G', 'T'};
    std::ostringstream csv;
    if (kind == "entropy") {
        csv << "seq_len,mean_entropy\n";
        RandomSource rng(seed);
        for (std::size_t len : parse_size_list(lengths_text)) {
            std::vector<TokenSequence> sequences;
            for (std::size_t b = 0; b < batch; ++b) {
                std::string s(len, 'A');
                for (auto& c : s) c = kBases[rng.uniform_int(4)];
                sequences.push_back(encode(s));
            }
            csv << len << "," << format_double(attention_entropy(params, sequences)) << "\n";
        }
    } else if (kind == "influence") {
        const std::size_t n = influence_len;
        RandomSource rng(seed);
        // mean of log-influence at each distance over targets and sequences
        std::vector<double> sums(2 * n - 1, 0.0);
        std::vector<std::size_t> counts(2 * n - 1, 0);
        for (std::size_t b = 0; b < batch; ++b) {
            std::string s(n, 'A');
            for (auto& c : s) c = kBases[rng.uniform_int(4)];
            TokenSequence seq = encode(s);
            for (std::size_t t = 0; t < n; ++t) {
                std::vector<double> profile = influence_profile(params, seq, t);
                for (std::size_t src = 0; src < n; ++src) {
                    const std::size_t bucket = src + (n - 1) - t;
                    sums[bucket] += profile[src];
                    ++counts[bucket];
                }
            }
        }
        csv << "distance,mean_log_influence\n";
        for (std::size_t i = 0; i < sums.size(); ++i) {
            const long long distance =
                static_cast<long long>(i) - static_cast<long long>(n - 1);
            csv << distance << "," << format_double(sums[i] / static_cast<double>(counts[i]))
                << "\n";
        }
    } else {
        throw ConfigError("unknown diagnose kind '" + kind + "' (expected entropy or influence)");
    }

    std::cout << csv.str();
    if (out_dir) {
        fs::create_directories(*out_dir);
        write_text_file(*out_dir / (kind + ".csv"), csv.str());
        echo_config(*out_dir, json{{"command", "diagnose"},
                                   {"kind", kind},
                                   {"ckpt", ckpt_path},
                                   {"lengths", lengths_text},
                                   {"batch", batch},
                                   {"seq_len", influence_len},
                                   {"seed", seed}});
    }
    return 0;
}

// ---- cds ----

int cmd_cds_train(const std::string& base_path, const std::string& fasta_path,
                  const std::string& tsv_path, const CdsFinetuneConfig& config,
                  const fs::path& out_dir) {
    CheckpointData base = load_checkpoint(base_path);
    FastaParseResult parsed = parse_fasta_file(fasta_path);
    std::vector<AnnotationInterval> annotations = parse_annotations_file(tsv_path);
    if (parsed.records.empty()) throw ConfigError("no records in " + fasta_path);

    fs::create_directories(out_dir);
    echo_config(out_dir, json{{"command", "cds train"},
                              {"base", base_path},
                              {"fasta", fasta_path},
                              {"annotations", tsv_path},
                              {"lora_rank", config.lora_rank},
                              {"lora_alpha", config.lora_alpha},
                              {"lr", config.lr},
                              {"batch_size", config.batch_size},
                              {"steps", config.steps},
                              {"window_len", config.window_len},
                              {"seed", config.seed}});
    if (config.lr == 0.0)
        std::cerr << "warning: --lr 0 leaves adapters and head unchanged\n";

    std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::binary);
    if (!metrics) throw IoError("cannot write metrics.jsonl");
    CheckpointData classifier =
        finetune_cds(base, parsed.records, annotations, config, &metrics);
    save_checkpoint((out_dir / "classifier.tdna").string(), classifier);
    std::cout << "classifier written to " << (out_dir / "classifier.tdna").string() << "\n";
    return 0;
}

int cmd_cds_eval(const std::string& ckpt_path, const std::string& fasta_path,
                 const std::string& tsv_path, const CdsEvalConfig& config,
                 const std::optional<fs::path>& out_dir) {
    CheckpointData data = load_checkpoint(ckpt_path);
    CdsClassifier classifier = classifier_from_checkpoint(data);
    FastaParseResult parsed = parse_fasta_file(fasta_path);
    std::vector<AnnotationInterval> truth = parse_annotations_file(tsv_path);
    if (parsed.records.empty()) throw ConfigError("no records in " + fasta_path);

    CdsEvalResult result = evaluate_cds(classifier, parsed.records, truth, config);
    const std::string table = render_metrics_table(result.exact, result.seventy_five);
    std::cout << table;
    json metrics{{"exact", match_report_json(result.exact)},
                 {"seventy_five", match_report_json(result.seventy_five)},
                 {"token_accuracy", result.token_accuracy}};
    if (out_dir) {
        fs::create_directories(*out_dir);
        write_text_file(*out_dir / "metrics.json", metrics.dump(2) + "\n");
        write_text_file(*out_dir / "table.txt", table);
        std::ostringstream preds;
        serialize_annotations(preds, result.predictions);
        write_text_file(*out_dir / "predictions.tsv", preds.str());
        echo_config(*out_dir, json{{"command", "cds eval"},
                                   {"ckpt", ckpt_path},
                                   {"fasta", fasta_path},
                                   {"annotations", tsv_path},
                                   {"window_len", config.window_len},
                                   {"overlap", config.overlap},
                                   {"min_len", config.min_interval_len}});
    } else {
        std::cout << metrics.dump(2) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TrinityDNA: DNA language model training, scoring, and CDS benchmark"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic annotated corpus");
    SyntheticGenomeSpec synth_spec;
    std::size_t synth_records = 1;
    std::string synth_out;
    synth->add_option("--length", synth_spec.total_length, "Bases per record");
    synth->add_option("--genes", synth_spec.gene_count, "Planted genes per record");
    synth->add_option("--records", synth_records, "Number of records");
    synth->add_option("--gene-min", synth_spec.gene_len_min, "Minimum gene length");
    synth->add_option("--gene-max", synth_spec.gene_len_max, "Maximum gene length");
    synth->add_option("--strand-mix", synth_spec.strand_mix, "Reverse-strand fraction");
    synth->add_option("--start-motif", synth_spec.start_motif, "5' signal string");
    synth->add_option("--stop-motif", synth_spec.stop_motif, "3' signal string");
    synth->add_option("--seed", synth_spec.seed, "Random seed");
    synth->add_option("--out", synth_out, "Output directory")->required();

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "Run a pretraining stage");
    std::string pretrain_config_path, pretrain_out;
    std::vector<std::string> pretrain_overrides;
    std::optional<std::string> pretrain_init, pretrain_resume;
    int pt_stage = 0;
    std::uint64_t pt_steps = 0, pt_seed = 0;
    bool pt_scratch = false, pt_no_grc = false;
    std::vector<std::string> pt_corpora;
    pretrain->add_option("--config", pretrain_config_path, "TrainConfig JSON file");
    pretrain->add_option("--set", pretrain_overrides,
                         "Config override key=value (dotted keys allowed)");
    pretrain->add_option("--stage", pt_stage, "Training stage (1 or 2)");
    pretrain->add_option("--steps", pt_steps, "Total steps for this stage");
    pretrain->add_option("--seed", pt_seed, "Random seed");
    pretrain->add_option("--corpus", pt_corpora, "Corpus FASTA path (repeatable)");
    pretrain->add_flag("--scratch", pt_scratch, "Allow stage 2 without an initial checkpoint");
    pretrain->add_flag("--no-grc", pt_no_grc, "Disable the gated reverse-complement branch");
    pretrain->add_option("--init", [&pretrain_init](const std::vector<std::string>& v) {
        pretrain_init = v.back();
        return true;
    }, "Warm-start checkpoint (params only)");
    pretrain->add_option("--resume", [&pretrain_resume](const std::vector<std::string>& v) {
        pretrain_resume = v.back();
        return true;
    }, "Resume checkpoint (bitwise continuation)");
    pretrain->add_option("--out", pretrain_out, "Output directory")->required();

    // score
    auto* score = app.add_subcommand("score", "Zero-shot scoring (ppl or mutation impact)");
    std::string score_ckpt, score_fasta, score_mode = "ppl";
    std::optional<std::string> score_mt;
    std::string score_out;
    bool score_sequential = false;
    score->add_option("--ckpt", score_ckpt, "Model checkpoint")->required();
    score->add_option("--fasta", score_fasta, "Input FASTA (wild type in impact mode)")
        ->required();
    score->add_option("--mode", score_mode, "ppl | impact");
    score->add_option("--mt", [&score_mt](const std::vector<std::string>& v) {
        score_mt = v.back();
        return true;
    }, "Mutant FASTA (impact mode)");
    score->add_flag("--sequential", score_sequential, "Mask one position at a time");
    score->add_option("--out", score_out, "Output directory");

    // diagnose
    auto* diagnose = app.add_subcommand("diagnose", "Attention entropy / influence diagnostics");
    std::string diag_ckpt, diag_kind, diag_lengths = "64,128,256", diag_out;
    std::size_t diag_batch = 4, diag_seq_len = 64;
    std::uint64_t diag_seed = 0;
    diagnose->add_option("--ckpt", diag_ckpt, "Model checkpoint")->required();
    diagnose->add_option("--kind", diag_kind, "entropy | influence")->required();
    diagnose->add_option("--lengths", diag_lengths, "Comma-separated lengths (entropy)");
    diagnose->add_option("--seq-len", diag_seq_len, "Sequence length (influence)");
    diagnose->add_option("--batch", diag_batch, "Random sequences per setting");
    diagnose->add_option("--seed", diag_seed, "Random seed");
    diagnose->add_option("--out", diag_out, "Output directory");

    // cds
    auto* cds = app.add_subcommand("cds", "CDS annotation benchmark");
    cds->require_subcommand(1);
    auto* cds_train = cds->add_subcommand("train", "LoRA fine-tune a token classifier");
    std::string cds_base, cds_fasta, cds_tsv, cds_out;
    CdsFinetuneConfig ft_config;
    cds_train->add_option("--base", cds_base, "Pretrained checkpoint")->required();
    cds_train->add_option("--fasta", cds_fasta, "Training FASTA")->required();
    cds_train->add_option("--annotations", cds_tsv, "Training annotation TSV")->required();
    cds_train->add_option("--lora-r", ft_config.lora_rank, "LoRA rank");
    cds_train->add_option("--lora-alpha", ft_config.lora_alpha, "LoRA scaling factor");
    cds_train->add_option("--lr", ft_config.lr, "Learning rate");
    cds_train->add_option("--batch", ft_config.batch_size, "Batch size");
    cds_train->add_option("--steps", ft_config.steps, "Fine-tuning steps");
    cds_train->add_option("--window", ft_config.window_len, "Training window length");
    cds_train->add_option("--seed", ft_config.seed, "Random seed");
    cds_train->add_option("--out", cds_out, "Output directory")->required();

    auto* cds_eval = cds->add_subcommand("eval", "Evaluate a classifier checkpoint");
    std::string cds_eval_ckpt, cds_eval_fasta, cds_eval_tsv, cds_eval_out;
    CdsEvalConfig eval_config;
    cds_eval->add_option("--ckpt", cds_eval_ckpt, "Classifier checkpoint")->required();
    cds_eval->add_option("--fasta", cds_eval_fasta, "Test FASTA")->required();
    cds_eval->add_option("--annotations", cds_eval_tsv, "Ground-truth TSV")->required();
    cds_eval->add_option("--window", eval_config.window_len, "Prediction window");
    cds_eval->add_option("--overlap", eval_config.overlap, "Window overlap");
    cds_eval->add_option("--min-len", eval_config.min_interval_len,
                         "Minimum decoded interval length");
    cds_eval->add_option("--out", cds_eval_out, "Output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        const auto seed_override = env_seed_override();

        if (synth->parsed()) {
            if (seed_override) synth_spec.seed = *seed_override;
            return cmd_synth(synth_spec, synth_records, synth_out);
        }
        if (pretrain->parsed()) {
            json config_json = json::object();
            if (!pretrain_config_path.empty()) {
                std::ifstream in(pretrain_config_path);
                if (!in) throw IoError("cannot open config: " + pretrain_config_path);
                try {
                    in >> config_json;
                } catch (const json::exception& e) {
                    throw ConfigError(std::string("bad config JSON: ") + e.what());
                }
            }
            for (const auto& ov : pretrain_overrides) apply_override(config_json, ov);
            TrainConfig config = config_json.get<TrainConfig>();
            if (pretrain->count("--stage")) config.stage = pt_stage;
            if (pretrain->count("--steps")) config.steps = pt_steps;
            if (pretrain->count("--seed")) config.seed = pt_seed;
            if (!pt_corpora.empty()) config.corpus_paths = pt_corpora;
            if (pt_scratch) config.allow_scratch_stage2 = true;
            if (pt_no_grc) config.grc_enabled = false;
            if (seed_override) config.seed = *seed_override;
            return cmd_pretrain(config, pretrain_init, pretrain_resume, pretrain_out);
        }
        if (score->parsed()) {
            std::optional<fs::path> out;
            if (!score_out.empty()) out = score_out;
            return cmd_score(score_ckpt, score_fasta, score_mode, score_mt, score_sequential,
                             out);
        }
        if (diagnose->parsed()) {
            if (seed_override) diag_seed = *seed_override;
            std::optional<fs::path> out;
            if (!diag_out.empty()) out = diag_out;
            return cmd_diagnose(diag_ckpt, diag_kind, diag_lengths, diag_batch, diag_seed,
                                diag_seq_len, out);
        }
        if (cds->parsed()) {
            if (cds_train->parsed()) {
                if (seed_override) ft_config.seed = *seed_override;
                return cmd_cds_train(cds_base, cds_fasta, cds_tsv, ft_config, cds_out);
            }
            if (cds_eval->parsed()) {
                std::optional<fs::path> out;
                if (!cds_eval_out.empty()) out = cds_eval_out;
                return cmd_cds_eval(cds_eval_ckpt, cds_eval_fasta, cds_eval_tsv, eval_config,
                                    out);
            }
        }
        std::cerr << "no subcommand\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
