#include "trinity/train.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>
#include <sstream>

#include "trinity/error.hpp"

namespace trinity {

namespace {

constexpr std::uint64_t kEvalSeedSalt = 0x6576616C5F736574ull;  // "eval_set"

// ---- little-endian primitives ----

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw IoError(std::string("checkpoint truncated while reading ") + what);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
};

// CRC-32 (IEEE 802.3, reflected), table-driven.
std::uint32_t crc32(const unsigned char* data, std::size_t len) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

nlohmann::json rng_to_json(const RandomState& st) {
    nlohmann::json j;
    j["s"] = st.s;
    j["has_spare"] = st.has_spare_gaussian;
    j["spare_bits"] = std::bit_cast<std::uint64_t>(st.spare_gaussian);
    return j;
}

RandomState rng_from_json(const nlohmann::json& j) {
    RandomState st;
    const auto& s = j.at("s");
    for (std::size_t i = 0; i < 4; ++i) st.s[i] = s.at(i).get<std::uint64_t>();
    st.has_spare_gaussian = j.at("has_spare").get<bool>();
    st.spare_gaussian = std::bit_cast<double>(j.at("spare_bits").get<std::uint64_t>());
    return st;
}

}  // namespace

// ---- config json ----

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"layers", c.layers},
                       {"hidden", c.hidden},
                       {"ffn_hidden", c.ffn_hidden},
                       {"heads", c.heads},
                       {"window_sizes", c.window_sizes},
                       {"kernel_sizes", c.kernel_sizes},
                       {"vocab_size", c.vocab_size},
                       {"rope_base", c.rope_base},
                       {"ntk_factor", c.ntk_factor},
                       {"grc_sigma", c.grc_sigma == GrcSigma::Sigmoid ? "sigmoid" : "identity"},
                       {"use_grc", c.use_grc}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    j.at("layers").get_to(c.layers);
    j.at("hidden").get_to(c.hidden);
    j.at("ffn_hidden").get_to(c.ffn_hidden);
    j.at("heads").get_to(c.heads);
    j.at("window_sizes").get_to(c.window_sizes);
    if (j.contains("kernel_sizes")) j.at("kernel_sizes").get_to(c.kernel_sizes);
    if (j.contains("vocab_size")) j.at("vocab_size").get_to(c.vocab_size);
    if (j.contains("rope_base")) j.at("rope_base").get_to(c.rope_base);
    if (j.contains("ntk_factor")) j.at("ntk_factor").get_to(c.ntk_factor);
    if (j.contains("grc_sigma")) {
        const std::string s = j.at("grc_sigma").get<std::string>();
        if (s == "sigmoid") c.grc_sigma = GrcSigma::Sigmoid;
        else if (s == "identity") c.grc_sigma = GrcSigma::Identity;
        else throw ConfigError("unknown grc_sigma '" + s + "'");
    }
    if (j.contains("use_grc")) j.at("use_grc").get_to(c.use_grc);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"stage", c.stage},
                       {"seq_len", c.seq_len},
                       {"batch_size", c.batch_size},
                       {"steps", c.steps},
                       {"peak_lr", c.peak_lr},
                       {"warmup_steps", c.warmup_steps},
                       {"weight_decay", c.weight_decay},
                       {"seed", c.seed},
                       {"corpus_paths", c.corpus_paths},
                       {"corpus_weights", c.corpus_weights},
                       {"grc_enabled", c.grc_enabled},
                       {"allow_scratch_stage2", c.allow_scratch_stage2},
                       {"model_preset", c.model_preset},
                       {"eval_every", c.eval_every},
                       {"eval_windows", c.eval_windows},
                       {"masking",
                        {{"select_prob", c.masking.select_prob},
                         {"mask_prob", c.masking.mask_prob},
                         {"random_prob", c.masking.random_prob},
                         {"variable_branch_prob", c.masking.variable_branch_prob}}}};
    if (c.model) j["model"] = *c.model;
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    if (j.contains("stage")) j.at("stage").get_to(c.stage);
    if (j.contains("seq_len")) j.at("seq_len").get_to(c.seq_len);
    if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
    if (j.contains("steps")) j.at("steps").get_to(c.steps);
    if (j.contains("peak_lr")) j.at("peak_lr").get_to(c.peak_lr);
    if (j.contains("warmup_steps")) j.at("warmup_steps").get_to(c.warmup_steps);
    if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("corpus_paths")) j.at("corpus_paths").get_to(c.corpus_paths);
    if (j.contains("corpus_weights")) j.at("corpus_weights").get_to(c.corpus_weights);
    if (j.contains("grc_enabled")) j.at("grc_enabled").get_to(c.grc_enabled);
    if (j.contains("allow_scratch_stage2"))
        j.at("allow_scratch_stage2").get_to(c.allow_scratch_stage2);
    if (j.contains("model_preset")) j.at("model_preset").get_to(c.model_preset);
    if (j.contains("eval_every")) j.at("eval_every").get_to(c.eval_every);
    if (j.contains("eval_windows")) j.at("eval_windows").get_to(c.eval_windows);
    if (j.contains("masking")) {
        const auto& m = j.at("masking");
        if (m.contains("select_prob")) m.at("select_prob").get_to(c.masking.select_prob);
        if (m.contains("mask_prob")) m.at("mask_prob").get_to(c.masking.mask_prob);
        if (m.contains("random_prob")) m.at("random_prob").get_to(c.masking.random_prob);
        if (m.contains("variable_branch_prob"))
            m.at("variable_branch_prob").get_to(c.masking.variable_branch_prob);
    }
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
}

ModelConfig TrainConfig::resolve_model() const {
    ModelConfig cfg = model ? *model : ::trinity::model_preset(this->model_preset).config;
    cfg.use_grc = grc_enabled;
    cfg.validate();
    return cfg;
}

std::size_t TrainConfig::effective_warmup() const {
    if (warmup_steps > 0) return warmup_steps;
    return std::max<std::size_t>(1, steps / 100);
}

double lr_at(std::size_t step, const TrainConfig& config) {
    const std::size_t warmup = config.effective_warmup();
    if (step < warmup)
        return config.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= config.steps) return 0.1 * config.peak_lr;
    const double span = static_cast<double>(std::max<std::size_t>(1, config.steps - warmup));
    const double progress = static_cast<double>(step - warmup) / span;
    const double cosine = 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    return config.peak_lr * (0.1 + 0.9 * cosine);
}

// ---- optimizer ----

AdamW::AdamW(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i].size(), 0.0);
        v_[i].assign(params_[i].size(), 0.0);
    }
}

void AdamW::step(double lr, double weight_decay) {
    ++update_count_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(update_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(update_count_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        const double* g = p.grad_data();
        double* w = p.data();
        double* m = m_[i].data();
        double* v = v_[i].data();
        const std::size_t n = p.size();
        for (std::size_t c = 0; c < n; ++c) {
            m[c] = beta1_ * m[c] + (1.0 - beta1_) * g[c];
            v[c] = beta2_ * v[c] + (1.0 - beta2_) * g[c] * g[c];
            const double mhat = m[c] / bc1;
            const double vhat = v[c] / bc2;
            w[c] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * w[c]);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

// ---- mlm step ----

double mlm_step(const std::vector<MlmBatchItem>& batch, ModelParams& params, AdamW& opt,
                double lr, double weight_decay, std::uint64_t step_label) {
    if (batch.empty()) throw ContractError("mlm_step: empty batch");

    Tensor total;
    std::size_t total_selected = 0;
    std::vector<std::pair<Tensor, std::size_t>> losses;
    for (const auto& item : batch) {
        if (item.plan.empty())
            throw ContractError("mlm_step: every sequence needs >= 1 selected position");
        Tensor hidden = model_hidden(item.corrupted, params);
        Tensor logits = lm_logits(hidden, params);
        std::vector<int> targets(item.corrupted.length(), 0);
        std::vector<bool> selected(item.corrupted.length(), false);
        for (const auto& mp : item.plan.positions) {
            targets[mp.index] = mp.original_id;
            selected[mp.index] = true;
        }
        Tensor loss = cross_entropy_masked(logits, targets, selected);
        losses.emplace_back(loss, item.plan.positions.size());
        total_selected += item.plan.positions.size();
    }
    for (auto& [loss, count] : losses) {
        Tensor weighted =
            scale(loss, static_cast<double>(count) / static_cast<double>(total_selected));
        total = total.defined() ? add(total, weighted) : weighted;
    }

    const double loss_value = total.item();
    if (!std::isfinite(loss_value))
        throw NumericalError("non-finite loss at step " + std::to_string(step_label));

    backward(total);
    opt.step(lr, weight_decay);
    opt.zero_grad();
    return loss_value;
}

// ---- checkpoint io ----

const Tensor* CheckpointData::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

void save_checkpoint(const std::string& path, const CheckpointData& data) {
    nlohmann::json header;
    header["kind"] = data.kind;
    header["model_config"] = data.model_config;
    header["step"] = data.step;
    header["rng"] = rng_to_json(data.rng);
    header["meta"] = data.meta;

    nlohmann::json manifest = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, tensor] : data.tensors) {
        manifest.push_back({{"name", name},
                            {"shape", tensor.shape()},
                            {"offset", offset},
                            {"count", tensor.size()}});
        offset += tensor.size() * 8;
    }
    header["tensors"] = manifest;

    const std::string header_text = header.dump();
    std::string blob;
    blob.reserve(16 + header_text.size() + offset + 4);
    blob += "TDNA";
    put_u32(blob, kCheckpointVersion);
    put_u64(blob, header_text.size());
    blob += header_text;
    for (const auto& [name, tensor] : data.tensors)
        for (std::size_t i = 0; i < tensor.size(); ++i) put_f64(blob, tensor.data()[i]);
    const std::uint32_t checksum =
        crc32(reinterpret_cast<const unsigned char*>(blob.data()), blob.size());
    put_u32(blob, checksum);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint file for writing: " + path);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string blob = ss.str();

    if (blob.size() < 20 || blob.compare(0, 4, "TDNA") != 0)
        throw IoError("not a TDNA checkpoint: " + path);
    // trailing CRC covers everything before it
    Reader tail{blob, blob.size() - 4};
    const std::uint32_t stored = tail.u32("checksum");
    const std::uint32_t actual =
        crc32(reinterpret_cast<const unsigned char*>(blob.data()), blob.size() - 4);
    if (stored != actual)
        throw IoError("checkpoint integrity failure (crc mismatch): " + path);

    Reader r{blob, 4};
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw IoError("checkpoint version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    const std::uint64_t header_len = r.u64("header length");
    r.need(header_len, "header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(r.pos, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("corrupt checkpoint header: ") + e.what());
    }
    r.pos += header_len;

    CheckpointData data;
    data.kind = header.at("kind").get<std::string>();
    data.model_config = header.at("model_config").get<ModelConfig>();
    data.step = header.at("step").get<std::uint64_t>();
    data.rng = rng_from_json(header.at("rng"));
    data.meta = header.value("meta", nlohmann::json::object());

    const std::size_t payload_begin = r.pos;
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        const std::size_t count = entry.at("count").get<std::size_t>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        if (count != shape_numel(shape))
            throw IoError("checkpoint manifest mismatch for tensor '" + name + "'");
        Reader pr{blob, payload_begin + offset};
        std::vector<double> values(count);
        for (std::size_t i = 0; i < count; ++i) values[i] = pr.f64(name.c_str());
        data.tensors.emplace_back(name, Tensor::from_data(shape, std::move(values)));
    }
    return data;
}

// ---- trainer ----

namespace {

std::vector<Tensor> trainable_tensors(ModelParams& params) {
    std::vector<Tensor> out;
    out.reserve(params.store().items().size());
    for (auto& item : params.store().items()) out.push_back(item.value);
    return out;
}

}  // namespace

double base4_masked_ppl(const Tensor& logits, const std::vector<int>& targets,
                        const std::vector<bool>& selected, double* nll_sum_out,
                        std::size_t* count_out) {
    const std::size_t n = logits.shape().at(0);
    const std::size_t v = logits.shape().at(1);
    double nll = 0.0;
    std::size_t count = 0;
    const double* lp = logits.data();
    for (std::size_t i = 0; i < n; ++i) {
        if (!selected[i]) continue;
        const int t = targets[i];
        if (!vocab::is_base(t) || t == vocab::kN) continue;
        const double* row = lp + i * v;
        double mx = row[vocab::kA];
        for (int b = 1; b < 4; ++b) mx = std::max(mx, row[b]);
        double denom = 0.0;
        for (int b = 0; b < 4; ++b) denom += std::exp(row[b] - mx);
        nll += std::log(denom) - (row[t] - mx);
        ++count;
    }
    if (nll_sum_out) *nll_sum_out = nll;
    if (count_out) *count_out = count;
    if (count == 0) return std::exp(0.0);
    return std::exp(nll / static_cast<double>(count));
}

Trainer::Trainer(const TrainConfig& config)
    : config_(config),
      params_([&config] {
          RandomSource init_rng(config.seed);
          return ModelParams(config.resolve_model(), init_rng);
      }()),
      opt_(trainable_tensors(params_)),
      rng_(config.seed ^ 0x747261696Eull) {
    if (config_.stage == 2 && !config_.allow_scratch_stage2)
        throw ConfigError("stage 2 requires an initial checkpoint (or the scratch override)");
    load_corpora();
    build_eval_set();
}

Trainer::Trainer(const TrainConfig& config, const CheckpointData& init, bool resume)
    : config_(config),
      params_(ModelParams::zeros(resume ? init.model_config : [&config, &init] {
          ModelConfig cfg = config.resolve_model();
          // warm start keeps the architecture of the checkpoint
          ModelConfig from = init.model_config;
          from.use_grc = cfg.use_grc;
          from.ntk_factor = cfg.ntk_factor;
          return from;
      }())),
      opt_(trainable_tensors(params_)),
      rng_(config.seed ^ 0x747261696Eull) {
    for (auto& item : params_.store().items()) {
        const Tensor* src = init.find("param." + item.name);
        if (!src)
            throw ConfigError("checkpoint is missing parameter '" + item.name + "'");
        if (src->shape() != item.value.shape())
            throw ConfigError("checkpoint shape mismatch for '" + item.name + "'");
        std::copy(src->data(), src->data() + src->size(), item.value.data());
    }
    if (resume) {
        step_ = init.step;
        rng_.restore(init.rng);
        const auto& opt_meta = init.meta.at("optimizer");
        opt_.set_update_count(opt_meta.at("updates").get<std::size_t>());
        for (std::size_t i = 0; i < opt_.params().size(); ++i) {
            const std::string& name = params_.store().items()[i].name;
            const Tensor* m = init.find("adam.m." + name);
            const Tensor* v = init.find("adam.v." + name);
            if (!m || !v)
                throw ConfigError("checkpoint is missing optimizer moments for '" + name + "'");
            opt_.moment1(i).assign(m->data(), m->data() + m->size());
            opt_.moment2(i).assign(v->data(), v->data() + v->size());
        }
        if (init.meta.contains("train_seq_len") &&
            init.meta.at("train_seq_len").get<std::size_t>() != config_.seq_len)
            throw ConfigError("resume requires the original seq_len");
    } else {
        // warm start: fresh optimizer, step counter, and data stream
        if (init.meta.contains("train_seq_len")) {
            const auto prev = init.meta.at("train_seq_len").get<std::size_t>();
            if (config_.seq_len < prev)
                throw ConfigError("stage seq_len (" + std::to_string(config_.seq_len) +
                                  ") must be >= the initial checkpoint's (" +
                                  std::to_string(prev) + ")");
        }
    }
    load_corpora();
    build_eval_set();
}

void Trainer::load_corpora() {
    if (config_.corpus_paths.empty()) throw ConfigError("no corpus paths configured");
    if (!config_.corpus_weights.empty() &&
        config_.corpus_weights.size() != config_.corpus_paths.size())
        throw ConfigError("corpus_weights length must match corpus_paths");

    for (std::size_t ci = 0; ci < config_.corpus_paths.size(); ++ci) {
        const double weight =
            config_.corpus_weights.empty() ? 1.0 : config_.corpus_weights[ci];
        FastaParseResult parsed = parse_fasta_file(config_.corpus_paths[ci]);
        for (auto& rec : parsed.records) {
            if (rec.bases.empty()) continue;
            CorpusEntry entry;
            entry.weight = weight;
            // the tail tenth of each record is held out for eval when the
            // record is long enough to afford it
            const std::size_t n = rec.bases.size();
            if (n >= 10 * config_.seq_len) {
                const std::size_t split = n - n / 10;
                entry.train_region = {rec.id, rec.bases.substr(0, split)};
                entry.eval_region = {rec.id + ":eval", rec.bases.substr(split)};
            } else {
                entry.train_region = rec;
                entry.eval_region = {rec.id + ":eval", rec.bases};
            }
            entries_.push_back(std::move(entry));
        }
    }
    if (entries_.empty()) throw ConfigError("corpus is empty");

    cumulative_weights_.clear();
    double acc = 0.0;
    for (const auto& e : entries_) {
        acc += e.weight * static_cast<double>(e.train_region.length());
        cumulative_weights_.push_back(acc);
    }
}

void Trainer::build_eval_set() {
    RandomSource eval_rng(config_.seed ^ kEvalSeedSalt);
    eval_items_.clear();
    for (std::size_t i = 0; i < config_.eval_windows; ++i) {
        const auto& entry = entries_[eval_rng.uniform_int(entries_.size())];
        for (int attempt = 0; attempt < 100; ++attempt) {
            WindowSample window = sample_window(entry.eval_region, config_.seq_len, eval_rng);
            TokenSequence seq = encode_padded(window.bases, window.pad_len);
            MaskingPlan plan = build_masking_plan(seq, eval_rng, config_.masking);
            bool has_base_target = false;
            for (const auto& mp : plan.positions)
                if (vocab::is_base(mp.original_id) && mp.original_id != vocab::kN) {
                    has_base_target = true;
                    break;
                }
            if (!has_base_target) continue;
            EvalItem item;
            item.corrupted = apply_masking_plan(seq, plan);
            item.targets.assign(seq.length(), 0);
            item.selected.assign(seq.length(), false);
            for (const auto& mp : plan.positions) {
                item.targets[mp.index] = mp.original_id;
                item.selected[mp.index] = true;
            }
            eval_items_.push_back(std::move(item));
            break;
        }
    }
}

MlmBatchItem Trainer::draw_item() {
    for (int attempt = 0; attempt < 100; ++attempt) {
        const double pick = rng_.uniform() * cumulative_weights_.back();
        const std::size_t idx = static_cast<std::size_t>(
            std::lower_bound(cumulative_weights_.begin(), cumulative_weights_.end(), pick) -
            cumulative_weights_.begin());
        const auto& entry = entries_[std::min(idx, entries_.size() - 1)];
        WindowSample window = sample_window(entry.train_region, config_.seq_len, rng_);
        TokenSequence seq = encode_padded(window.bases, window.pad_len);
        MaskingPlan plan = build_masking_plan(seq, rng_, config_.masking);
        if (plan.empty()) continue;
        return {apply_masking_plan(seq, plan), std::move(plan)};
    }
    throw ContractError("could not draw a batch item with a non-empty masking plan");
}

void Trainer::run(std::ostream* metrics) {
    while (step_ < config_.steps) {
        std::vector<MlmBatchItem> batch;
        batch.reserve(config_.batch_size);
        for (std::size_t b = 0; b < config_.batch_size; ++b) batch.push_back(draw_item());
        const double lr = lr_at(step_, config_);
        const double loss = mlm_step(batch, params_, opt_, lr, config_.weight_decay, step_);
        ++step_;
        if (metrics) {
            nlohmann::json line{{"step", step_}, {"loss", loss}, {"lr", lr}};
            if (config_.eval_every > 0 &&
                (step_ % config_.eval_every == 0 || step_ == config_.steps))
                line["eval_ppl"] = eval_ppl();
            (*metrics) << line.dump() << "\n";
        }
    }
}

double Trainer::eval_ppl() {
    NoGradGuard guard;
    double nll_total = 0.0;
    std::size_t count_total = 0;
    for (const auto& item : eval_items_) {
        Tensor hidden = model_hidden(item.corrupted, params_);
        Tensor logits = lm_logits(hidden, params_);
        double nll = 0.0;
        std::size_t count = 0;
        base4_masked_ppl(logits, item.targets, item.selected, &nll, &count);
        nll_total += nll;
        count_total += count;
    }
    if (count_total == 0) return 1.0;
    return std::exp(nll_total / static_cast<double>(count_total));
}

CheckpointData Trainer::to_checkpoint() const {
    CheckpointData data;
    data.kind = "pretrain";
    data.model_config = params_.config();
    data.step = step_;
    data.rng = rng_.state();
    data.meta["optimizer"] = {{"beta1", opt_.beta1()},
                              {"beta2", opt_.beta2()},
                              {"eps", opt_.eps()},
                              {"updates", opt_.update_count()}};
    data.meta["train_seq_len"] = config_.seq_len;
    data.meta["stage"] = config_.stage;
    for (const auto& item : params_.store().items())
        data.tensors.emplace_back("param." + item.name, item.value.detached());
    for (std::size_t i = 0; i < opt_.params().size(); ++i) {
        const std::string& name = params_.store().items()[i].name;
        const Shape& shape = params_.store().items()[i].value.shape();
        data.tensors.emplace_back("adam.m." + name,
                                  Tensor::from_data(shape, opt_.moment1(i)));
        data.tensors.emplace_back("adam.v." + name,
                                  Tensor::from_data(shape, opt_.moment2(i)));
    }
    return data;
}

}  // namespace trinity
