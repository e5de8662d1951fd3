#include "trinity/cds.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "trinity/error.hpp"

namespace trinity {

std::vector<TokenLabel> labels_from_annotations(const DnaRecord& record,
                                                const std::vector<AnnotationInterval>& intervals) {
    std::vector<TokenLabel> labels(record.length(), TokenLabel::Noncoding);
    std::vector<bool> claimed(record.length(), false);
    std::vector<const AnnotationInterval*> mine;
    for (const auto& iv : intervals)
        if (iv.seq_id == record.id) mine.push_back(&iv);
    std::stable_sort(mine.begin(), mine.end(),
                     [](const AnnotationInterval* a, const AnnotationInterval* b) {
                         return a->start < b->start;
                     });
    for (const auto* iv : mine) {
        if (iv->end > record.length())
            throw ContractError("interval [" + std::to_string(iv->start) + ", " +
                                std::to_string(iv->end) + ") exceeds record '" + record.id +
                                "' of length " + std::to_string(record.length()));
        const TokenLabel label =
            iv->strand == Strand::Forward ? TokenLabel::CdsForward : TokenLabel::CdsReverse;
        for (std::size_t p = iv->start; p < iv->end; ++p) {
            if (claimed[p]) continue;  // earliest start wins on overlaps
            claimed[p] = true;
            labels[p] = label;
        }
    }
    return labels;
}

std::vector<AnnotationInterval> intervals_from_labels(const std::vector<TokenLabel>& labels,
                                                      const std::string& seq_id,
                                                      std::size_t min_len) {
    std::vector<AnnotationInterval> out;
    std::size_t i = 0;
    while (i < labels.size()) {
        if (labels[i] == TokenLabel::Noncoding) {
            ++i;
            continue;
        }
        const TokenLabel label = labels[i];
        std::size_t j = i + 1;
        while (j < labels.size() && labels[j] == label) ++j;
        if (j - i >= min_len)
            out.push_back({seq_id, i, j,
                           label == TokenLabel::CdsForward ? Strand::Forward : Strand::Reverse});
        i = j;
    }
    return out;
}

bool pair_satisfies(const AnnotationInterval& truth, const AnnotationInterval& pred,
                    MatchCriterion criterion) {
    if (truth.seq_id != pred.seq_id) return false;
    if (criterion == MatchCriterion::Exact)
        return truth.start == pred.start && truth.end == pred.end && truth.strand == pred.strand;
    // 75%: fully inside, >= 75% of the truth length, strand matched
    if (pred.strand != truth.strand) return false;
    if (pred.start < truth.start || pred.end > truth.end) return false;
    return 4 * pred.length() >= 3 * truth.length();
}

MatchReport match_predictions(const std::vector<AnnotationInterval>& truth,
                              const std::vector<AnnotationInterval>& predictions,
                              MatchCriterion criterion) {
    struct Edge {
        std::size_t overlap;
        std::size_t t, p;
    };
    std::vector<Edge> edges;
    for (std::size_t t = 0; t < truth.size(); ++t) {
        for (std::size_t p = 0; p < predictions.size(); ++p) {
            if (!pair_satisfies(truth[t], predictions[p], criterion)) continue;
            const std::size_t lo = std::max(truth[t].start, predictions[p].start);
            const std::size_t hi = std::min(truth[t].end, predictions[p].end);
            edges.push_back({hi > lo ? hi - lo : 0, t, p});
        }
    }
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
        if (a.overlap != b.overlap) return a.overlap > b.overlap;
        if (a.t != b.t) return a.t < b.t;
        return a.p < b.p;
    });

    std::vector<bool> truth_used(truth.size(), false), pred_used(predictions.size(), false);
    std::size_t tp = 0;
    for (const auto& e : edges) {
        if (truth_used[e.t] || pred_used[e.p]) continue;
        truth_used[e.t] = true;
        pred_used[e.p] = true;
        ++tp;
    }

    MatchReport report;
    report.criterion = criterion;
    report.tp = tp;
    report.fn = truth.size() - tp;
    report.fp = predictions.size() - tp;
    report.recall_defined = !truth.empty();
    report.precision_defined = !predictions.empty();
    report.recall = report.recall_defined
                        ? static_cast<double>(tp) / static_cast<double>(truth.size())
                        : 0.0;
    report.precision = report.precision_defined
                           ? static_cast<double>(tp) / static_cast<double>(predictions.size())
                           : 0.0;
    const double pr = report.precision + report.recall;
    report.f1 = pr > 0.0 ? 2.0 * report.precision * report.recall / pr : 0.0;
    return report;
}

nlohmann::json match_report_json(const MatchReport& r) {
    return nlohmann::json{{"criterion", r.criterion == MatchCriterion::Exact ? "exact"
                                                                             : "seventy_five"},
                          {"tp", r.tp},
                          {"fp", r.fp},
                          {"fn", r.fn},
                          {"recall", r.recall},
                          {"precision", r.precision},
                          {"f1", r.f1},
                          {"recall_defined", r.recall_defined},
                          {"precision_defined", r.precision_defined}};
}

std::string render_metrics_table(const MatchReport& exact, const MatchReport& seventy_five) {
    char buf[128];
    std::string out;
    out += "Criterion       Recall  Precision         F1\n";
    std::snprintf(buf, sizeof(buf), "Exact Match   %8.3f  %9.3f  %9.3f\n", exact.recall,
                  exact.precision, exact.f1);
    out += buf;
    std::snprintf(buf, sizeof(buf), "75%% Match     %8.3f  %9.3f  %9.3f\n", seventy_five.recall,
                  seventy_five.precision, seventy_five.f1);
    out += buf;
    return out;
}

// ---- classifier head ----

ClassifierHead::ClassifierHead(std::size_t input_width, bool) : input_width_(input_width) {}

ClassifierHead::ClassifierHead(std::size_t input_width, RandomSource& rng)
    : ClassifierHead(input_width, true) {
    constexpr double kStd = 0.02;
    store_.create_randn("head.w1", {input_width_, 256}, rng, kStd);
    store_.create("head.b1", {256});
    store_.create_randn("head.w2", {256, 128}, rng, kStd);
    store_.create("head.b2", {128});
    store_.create_randn("head.w3", {128, 3}, rng, kStd);
    store_.create("head.b3", {3});
}

ClassifierHead ClassifierHead::zeros(std::size_t input_width) {
    ClassifierHead head(input_width, true);
    head.store_.create("head.w1", {input_width, 256});
    head.store_.create("head.b1", {256});
    head.store_.create("head.w2", {256, 128});
    head.store_.create("head.b2", {128});
    head.store_.create("head.w3", {128, 3});
    head.store_.create("head.b3", {3});
    return head;
}

Tensor ClassifierHead::forward(const Tensor& hidden) const {
    Tensor h1 = gelu(add_bias(matmul(hidden, store_.at("head.w1")), store_.at("head.b1")));
    Tensor h2 = gelu(add_bias(matmul(h1, store_.at("head.w2")), store_.at("head.b2")));
    return add_bias(matmul(h2, store_.at("head.w3")), store_.at("head.b3"));
}

// ---- fine-tuning ----

namespace {

ModelParams params_from_checkpoint(const CheckpointData& data) {
    ModelParams params = ModelParams::zeros(data.model_config);
    for (auto& item : params.store().items()) {
        const Tensor* src = data.find("param." + item.name);
        if (!src) throw ConfigError("checkpoint is missing parameter '" + item.name + "'");
        if (src->shape() != item.value.shape())
            throw ConfigError("checkpoint shape mismatch for '" + item.name + "'");
        std::copy(src->data(), src->data() + src->size(), item.value.data());
    }
    return params;
}

std::vector<std::string> attention_projection_paths(const ModelConfig& config) {
    std::vector<std::string> paths;
    for (std::size_t i = 0; i < config.layers; ++i) {
        const std::string prefix = "layer." + std::to_string(i) + ".attn.";
        for (const char* w : {"w_q", "w_k", "w_v", "w_o"}) paths.push_back(prefix + w);
    }
    return paths;
}

}  // namespace

CheckpointData finetune_cds(const CheckpointData& base, const std::vector<DnaRecord>& records,
                            const std::vector<AnnotationInterval>& annotations,
                            const CdsFinetuneConfig& config, std::ostream* metrics) {
    if (base.kind != "pretrain")
        throw ConfigError("finetune_cds expects a pretrain checkpoint, got '" + base.kind + "'");
    if (records.empty()) throw ConfigError("finetune_cds: empty corpus");

    ModelParams params = params_from_checkpoint(base);
    RandomSource rng(config.seed ^ 0x636473ull);
    for (const auto& path : attention_projection_paths(params.config()))
        lora_attach(params, path, config.lora_rank, config.lora_alpha, rng);
    ClassifierHead head(params.config().hidden, rng);

    // frozen base: only adapters and head train
    std::vector<Tensor> trainable;
    for (auto& adapter : params.adapters()) {
        trainable.push_back(adapter.a);
        trainable.push_back(adapter.b);
    }
    for (auto& item : head.store().items()) trainable.push_back(item.value);
    AdamW opt(trainable);

    std::vector<std::vector<TokenLabel>> labels;
    labels.reserve(records.size());
    std::vector<double> cumulative;
    double acc = 0.0;
    for (const auto& rec : records) {
        labels.push_back(labels_from_annotations(rec, annotations));
        acc += static_cast<double>(rec.length());
        cumulative.push_back(acc);
    }

    for (std::size_t step = 0; step < config.steps; ++step) {
        Tensor total;
        for (std::size_t b = 0; b < config.batch_size; ++b) {
            const double pick = rng.uniform() * cumulative.back();
            const std::size_t ri = static_cast<std::size_t>(
                std::lower_bound(cumulative.begin(), cumulative.end(), pick) -
                cumulative.begin());
            const auto& rec = records[std::min(ri, records.size() - 1)];
            WindowSample window = sample_window(rec, config.window_len, rng);
            TokenSequence tokens = encode_padded(window.bases, window.pad_len);

            std::vector<int> targets(tokens.length(), 0);
            std::vector<bool> selected(tokens.length(), false);
            const auto& rec_labels = labels[std::min(ri, records.size() - 1)];
            for (std::size_t p = 0; p + window.pad_len < tokens.length(); ++p) {
                targets[p] = static_cast<int>(rec_labels[window.start + p]);
                selected[p] = true;
            }
            Tensor hidden = model_hidden(tokens, params);
            Tensor logits = head.forward(hidden);
            Tensor loss = cross_entropy_masked(logits, targets, selected);
            Tensor weighted = scale(loss, 1.0 / static_cast<double>(config.batch_size));
            total = total.defined() ? add(total, weighted) : weighted;
        }
        const double loss_value = total.item();
        if (!std::isfinite(loss_value))
            throw NumericalError("non-finite fine-tune loss at step " + std::to_string(step));
        backward(total);
        opt.step(config.lr, config.weight_decay);
        opt.zero_grad();
        // the frozen base accumulated gradients through the adapters; drop them
        params.store().zero_grad_all();
        if (metrics)
            (*metrics) << nlohmann::json{{"step", step + 1}, {"loss", loss_value}}.dump() << "\n";
    }

    CheckpointData out;
    out.kind = "cds_classifier";
    out.model_config = params.config();
    out.step = config.steps;
    out.rng = rng.state();
    nlohmann::json adapters = nlohmann::json::array();
    for (const auto& adapter : params.adapters())
        adapters.push_back({{"target", adapter.target},
                            {"rank", adapter.rank},
                            {"alpha", adapter.alpha}});
    out.meta["adapters"] = adapters;
    out.meta["head_input_width"] = head.input_width();
    out.meta["finetune"] = {{"lr", config.lr},
                            {"batch_size", config.batch_size},
                            {"steps", config.steps},
                            {"window_len", config.window_len}};
    for (const auto& item : params.store().items())
        out.tensors.emplace_back("param." + item.name, item.value.detached());
    for (const auto& adapter : params.adapters()) {
        out.tensors.emplace_back("lora." + adapter.target + ".a", adapter.a.detached());
        out.tensors.emplace_back("lora." + adapter.target + ".b", adapter.b.detached());
    }
    for (const auto& item : head.store().items())
        out.tensors.emplace_back(item.name, item.value.detached());
    return out;
}

CdsClassifier classifier_from_checkpoint(const CheckpointData& data) {
    if (data.kind != "cds_classifier")
        throw ConfigError("expected a cds_classifier checkpoint, got '" + data.kind + "'");
    ModelParams params = params_from_checkpoint(data);
    for (const auto& meta : data.meta.at("adapters")) {
        LoraAdapter adapter;
        adapter.target = meta.at("target").get<std::string>();
        adapter.rank = meta.at("rank").get<std::size_t>();
        adapter.alpha = meta.at("alpha").get<double>();
        const Tensor* a = data.find("lora." + adapter.target + ".a");
        const Tensor* b = data.find("lora." + adapter.target + ".b");
        if (!a || !b)
            throw ConfigError("checkpoint is missing adapter tensors for '" + adapter.target +
                              "'");
        adapter.a = a->clone();
        adapter.b = b->clone();
        params.adapters().push_back(std::move(adapter));
    }
    ClassifierHead head = ClassifierHead::zeros(data.meta.at("head_input_width").get<std::size_t>());
    for (auto& item : head.store().items()) {
        const Tensor* src = data.find(item.name);
        if (!src) throw ConfigError("checkpoint is missing head tensor '" + item.name + "'");
        std::copy(src->data(), src->data() + src->size(), item.value.data());
    }
    return CdsClassifier{std::move(params), std::move(head)};
}

// ---- evaluation ----

std::vector<TokenLabel> predict_labels(const CdsClassifier& classifier, const DnaRecord& record,
                                       const CdsEvalConfig& config) {
    NoGradGuard guard;
    const std::size_t n = record.length();
    std::vector<std::array<std::uint32_t, 3>> votes(n, {0, 0, 0});
    const std::size_t window = config.window_len;
    const std::size_t stride = window > config.overlap ? window - config.overlap : window;

    std::size_t start = 0;
    while (true) {
        const std::size_t begin = std::min(start, n > window ? n - window : 0);
        const std::size_t end = std::min(begin + window, n);
        const std::string slice = record.bases.substr(begin, end - begin);
        TokenSequence tokens = encode(slice);
        Tensor hidden = model_hidden(tokens, classifier.params);
        Tensor logits = classifier.head.forward(hidden);
        const double* lp = logits.data();
        for (std::size_t p = 0; p < tokens.length(); ++p) {
            const double* row = lp + p * 3;
            std::size_t best = 0;
            for (std::size_t c = 1; c < 3; ++c)
                if (row[c] > row[best]) best = c;
            ++votes[begin + p][best];
        }
        if (end >= n) break;
        start += stride;
    }

    std::vector<TokenLabel> out(n, TokenLabel::Noncoding);
    for (std::size_t p = 0; p < n; ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < 3; ++c)
            if (votes[p][c] > votes[p][best]) best = c;  // ties keep the lower class id
        out[p] = static_cast<TokenLabel>(best);
    }
    return out;
}

CdsEvalResult evaluate_from_labels(const std::vector<std::vector<TokenLabel>>& labels,
                                   const std::vector<DnaRecord>& records,
                                   const std::vector<AnnotationInterval>& truth,
                                   std::size_t min_interval_len) {
    if (labels.size() != records.size())
        throw ContractError("evaluate_from_labels: one label array per record required");
    CdsEvalResult result;
    std::size_t correct = 0, total = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto truth_labels = labels_from_annotations(records[i], truth);
        if (labels[i].size() != records[i].length())
            throw ContractError("evaluate_from_labels: label/record length mismatch");
        for (std::size_t p = 0; p < truth_labels.size(); ++p) {
            if (labels[i][p] == truth_labels[p]) ++correct;
            ++total;
        }
        auto decoded = intervals_from_labels(labels[i], records[i].id, min_interval_len);
        result.predictions.insert(result.predictions.end(), decoded.begin(), decoded.end());
    }
    result.token_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    result.exact = match_predictions(truth, result.predictions, MatchCriterion::Exact);
    result.seventy_five = match_predictions(truth, result.predictions, MatchCriterion::SeventyFive);
    return result;
}

CdsEvalResult evaluate_cds(const CdsClassifier& classifier, const std::vector<DnaRecord>& records,
                           const std::vector<AnnotationInterval>& truth,
                           const CdsEvalConfig& config) {
    std::vector<std::vector<TokenLabel>> labels;
    labels.reserve(records.size());
    for (const auto& rec : records) labels.push_back(predict_labels(classifier, rec, config));
    return evaluate_from_labels(labels, records, truth, config.min_interval_len);
}

}  // namespace trinity
