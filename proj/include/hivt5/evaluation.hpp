// SPDX-License-Identifier: Apache-2.0
//
// Metrics (normalized Levenshtein similarity, exact accuracy, answer-page
// accuracy), the evaluation setups (oracle, concat, max-conf, hierarchical),
// per-answer-page breakdowns, the answer-vs-page confusion matrix, and the
// report/attention files.
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "hivt5/corpus.hpp"
#include "hivt5/errors.hpp"
#include "hivt5/io_util.hpp"
#include "hivt5/model.hpp"
#include "hivt5/parallel.hpp"

namespace hivt5 {

// ---------------------------------------------------------------------------
// string metrics
// ---------------------------------------------------------------------------

// Unit-cost edit distance (insert, delete, substitute), two-row DP.
inline std::size_t levenshtein(const std::string& a, const std::string& b) {
    if (a.empty()) return b.size();
    if (b.empty()) return a.size();
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// Lowercase, trim, collapse internal whitespace. Applied identically to
// accuracy and similarity scoring.
inline std::string normalize_answer(const std::string& text) {
    std::string out;
    bool pending_space = false;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!out.empty()) pending_space = true;
        } else {
            if (pending_space) out += ' ';
            pending_space = false;
            out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        }
    }
    return out;
}

// 1 - lev/max(len) on normalized strings; two empty strings count as equal.
inline double answer_similarity(const std::string& prediction, const std::string& truth) {
    std::string p = normalize_answer(prediction), t = normalize_answer(truth);
    std::size_t denom = std::max(p.size(), t.size());
    if (denom == 0) return 1.0;
    return 1.0 - static_cast<double>(levenshtein(p, t)) / static_cast<double>(denom);
}

inline double best_similarity(const std::string& prediction, const std::vector<std::string>& truths) {
    double best = 0.0;
    for (const auto& t : truths) best = std::max(best, answer_similarity(prediction, t));
    return best;
}

inline bool exact_match(const std::string& prediction, const std::vector<std::string>& truths) {
    for (const auto& t : truths)
        if (normalize_answer(prediction) == normalize_answer(t)) return true;
    return false;
}

// Average Normalized Levenshtein Similarity: per sample the best similarity
// against any accepted answer, zeroed below the threshold tau.
inline double anls(const std::vector<std::string>& predictions,
                   const std::vector<std::vector<std::string>>& truth_sets, double tau = 0.5) {
    if (predictions.size() != truth_sets.size())
        throw ShapeError("anls: predictions and truth sets differ in length");
    if (predictions.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (truth_sets[i].empty()) throw ValidationError("anls: empty truth set at sample " + std::to_string(i));
        double s = best_similarity(predictions[i], truth_sets[i]);
        total += s >= tau ? s : 0.0;
    }
    return total / static_cast<double>(predictions.size());
}

inline double exact_accuracy(const std::vector<std::string>& predictions,
                             const std::vector<std::vector<std::string>>& truth_sets) {
    if (predictions.size() != truth_sets.size())
        throw ShapeError("accuracy: predictions and truth sets differ in length");
    if (predictions.empty()) return 0.0;
    double hits = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (exact_match(predictions[i], truth_sets[i])) hits += 1.0;
    return hits / static_cast<double>(predictions.size());
}

inline double page_accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& truth) {
    if (predicted.size() != truth.size()) throw ShapeError("page_accuracy: length mismatch");
    if (predicted.empty()) return 0.0;
    double hits = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i)
        if (predicted[i] == truth[i]) hits += 1.0;
    return hits / static_cast<double>(predicted.size());
}

// ---------------------------------------------------------------------------
// evaluation setups
// ---------------------------------------------------------------------------

enum class SetupKind { oracle, concat, max_conf, hierarchical };

inline const char* setup_name(SetupKind k) {
    switch (k) {
        case SetupKind::oracle: return "oracle";
        case SetupKind::concat: return "concat";
        case SetupKind::max_conf: return "max_conf";
        default: return "hierarchical";
    }
}

inline SetupKind setup_from(const std::string& s) {
    if (s == "oracle") return SetupKind::oracle;
    if (s == "concat") return SetupKind::concat;
    if (s == "max_conf") return SetupKind::max_conf;
    if (s == "hierarchical") return SetupKind::hierarchical;
    throw ValidationError("unknown setup '" + s + "'");
}

struct SampleResult {
    std::string prediction;
    std::size_t predicted_page = 0;
    std::size_t true_page = 0;
    bool answer_correct = false;
    double similarity = 0.0;
    double confidence = 0.0;
};

struct BreakdownRow {
    std::size_t answer_page = 0;
    std::size_t n = 0;
    double accuracy = 0.0;
    double anls = 0.0;
    double page_accuracy = 0.0;
};

struct MetricReport {
    double accuracy = 0.0;
    double anls = 0.0;
    double page_accuracy = 0.0;
    std::size_t n_samples = 0;
    std::vector<BreakdownRow> breakdown;
};

struct Confusion {
    std::size_t both = 0;         // answer correct, page correct
    std::size_t answer_only = 0;  // answer correct, page wrong
    std::size_t page_only = 0;
    std::size_t neither = 0;
};

namespace detail {

struct MergedToken {
    std::size_t source_page;
    std::string word;
};

}  // namespace detail

// Runs one sample under a setup. `budget` caps the merged OCR stream of the
// concat setup (the page budget L still applies afterwards).
inline SampleResult evaluate_sample(const HiVt5Model& model, const Corpus& corpus, const QASample& sample,
                                    SetupKind setup, std::size_t budget, std::size_t max_len) {
    const Document& doc = corpus.document(sample.doc_id);
    SampleResult res;
    res.true_page = sample.answer_page_idx;
    switch (setup) {
        case SetupKind::oracle: {
            // only the annotated answer page is shown; page prediction is
            // defined as that page, making the setup an upper bound
            auto page = make_page_input(model.vocab, sample.question, doc.pages[sample.answer_page_idx],
                                        sample.answer_page_idx, model.cfg.use_visual);
            auto gen = model.generate({page}, max_len);
            res.prediction = gen.answer;
            res.confidence = gen.confidence;
            res.predicted_page = sample.answer_page_idx;
            break;
        }
        case SetupKind::concat: {
            if (budget == 0) throw ValidationError("concat setup needs a positive budget");
            std::vector<detail::MergedToken> merged;
            PageInput merged_page;
            merged_page.question_ids = question_token_ids(model.vocab, sample.question);
            bool full = false;
            for (std::size_t p = 0; p < doc.pages.size() && !full; ++p) {
                for (const auto& tok : doc.pages[p].tokens) {
                    for (const auto& word : Vocabulary::tokenize(tok.text)) {
                        if (merged.size() >= budget) {
                            full = true;
                            break;
                        }
                        merged.push_back({p, word});
                        merged_page.ocr_ids.push_back(model.vocab.id(word));
                        merged_page.ocr_boxes.push_back(tok.box);
                    }
                    if (full) break;
                }
            }
            auto gen = model.generate({merged_page}, max_len);
            res.prediction = gen.answer;
            res.confidence = gen.confidence;
            // predicted page: first occurrence of the generated answer in the
            // merged stream; the head argmax over the merged document is the
            // documented fallback
            auto words = Vocabulary::tokenize(normalize_answer(gen.answer));
            res.predicted_page = doc.pages.size();  // sentinel: not found
            if (!words.empty() && merged.size() >= words.size()) {
                for (std::size_t i = 0; i + words.size() <= merged.size(); ++i) {
                    bool hit = true;
                    for (std::size_t k = 0; k < words.size() && hit; ++k)
                        hit = normalize_answer(merged[i + k].word) == words[k];
                    if (hit) {
                        res.predicted_page = merged[i].source_page;
                        break;
                    }
                }
            }
            if (res.predicted_page >= doc.pages.size()) res.predicted_page = gen.page_index;
            break;
        }
        case SetupKind::max_conf: {
            // one answer per page; the most confident one wins
            double best_conf = -std::numeric_limits<double>::infinity();
            for (std::size_t p = 0; p < doc.pages.size(); ++p) {
                auto page = make_page_input(model.vocab, sample.question, doc.pages[p], p, model.cfg.use_visual);
                auto gen = model.generate({page}, max_len);
                if (gen.confidence > best_conf) {
                    best_conf = gen.confidence;
                    res.prediction = gen.answer;
                    res.predicted_page = p;
                    res.confidence = gen.confidence;
                }
            }
            break;
        }
        case SetupKind::hierarchical: {
            auto pages = make_document_inputs(model.vocab, sample.question, doc, model.cfg.use_visual);
            auto gen = model.generate(pages, max_len);
            res.prediction = gen.answer;
            res.confidence = gen.confidence;
            res.predicted_page = gen.page_index;
            break;
        }
    }
    res.answer_correct = exact_match(res.prediction, sample.answers);
    res.similarity = best_similarity(res.prediction, sample.answers);
    return res;
}

struct EvalOutput {
    MetricReport report;
    Confusion confusion;
    std::vector<SampleResult> results;
};

inline std::vector<BreakdownRow> breakdown_by_answer_page(const std::vector<SampleResult>& results,
                                                          double tau = 0.5) {
    std::map<std::size_t, std::vector<const SampleResult*>> groups;
    for (const auto& r : results) groups[r.true_page].push_back(&r);
    std::vector<BreakdownRow> rows;
    for (auto& [page, rs] : groups) {
        BreakdownRow row;
        row.answer_page = page;
        row.n = rs.size();
        for (const auto* r : rs) {
            row.accuracy += r->answer_correct ? 1.0 : 0.0;
            row.anls += r->similarity >= tau ? r->similarity : 0.0;
            row.page_accuracy += r->predicted_page == r->true_page ? 1.0 : 0.0;
        }
        row.accuracy /= static_cast<double>(row.n);
        row.anls /= static_cast<double>(row.n);
        row.page_accuracy /= static_cast<double>(row.n);
        rows.push_back(row);
    }
    return rows;
}

inline Confusion confusion_answer_vs_page(const std::vector<SampleResult>& results) {
    Confusion c;
    for (const auto& r : results) {
        bool page_ok = r.predicted_page == r.true_page;
        if (r.answer_correct && page_ok) ++c.both;
        else if (r.answer_correct) ++c.answer_only;
        else if (page_ok) ++c.page_only;
        else ++c.neither;
    }
    return c;
}

// Samples run in parallel with a deterministic ordered reduction.
inline EvalOutput evaluate(const HiVt5Model& model, const Corpus& corpus, Split split, SetupKind setup,
                           std::size_t budget, double tau = 0.5, std::size_t max_len = 8) {
    std::vector<const QASample*> picked;
    for (const auto& s : corpus.samples)
        if (s.split == split) picked.push_back(&s);
    EvalOutput out;
    out.results.resize(picked.size());
    parallel_for(picked.size(), [&](std::size_t i) {
        out.results[i] = evaluate_sample(model, corpus, *picked[i], setup, budget, max_len);
    });
    auto& rep = out.report;
    rep.n_samples = out.results.size();
    for (const auto& r : out.results) {
        rep.accuracy += r.answer_correct ? 1.0 : 0.0;
        rep.anls += r.similarity >= tau ? r.similarity : 0.0;
        rep.page_accuracy += r.predicted_page == r.true_page ? 1.0 : 0.0;
    }
    if (rep.n_samples > 0) {
        rep.accuracy /= static_cast<double>(rep.n_samples);
        rep.anls /= static_cast<double>(rep.n_samples);
        rep.page_accuracy /= static_cast<double>(rep.n_samples);
    }
    rep.breakdown = breakdown_by_answer_page(out.results, tau);
    out.confusion = confusion_answer_vs_page(out.results);
    return out;
}

// ---------------------------------------------------------------------------
// report files
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json report_to_json(const MetricReport& r) {
    nlohmann::ordered_json j;
    j["accuracy"] = r.accuracy;
    j["anls"] = r.anls;
    j["page_accuracy"] = r.page_accuracy;
    j["n_samples"] = r.n_samples;
    j["breakdown"] = nlohmann::ordered_json::array();
    for (const auto& row : r.breakdown) {
        nlohmann::ordered_json jr;
        jr["answer_page"] = row.answer_page;
        jr["n"] = row.n;
        jr["accuracy"] = row.accuracy;
        jr["anls"] = row.anls;
        jr["page_accuracy"] = row.page_accuracy;
        j["breakdown"].push_back(jr);
    }
    return j;
}

inline void write_report_json(const std::filesystem::path& path, const MetricReport& r) {
    atomic_write_file(path, report_to_json(r).dump(1) + "\n");
}

inline void write_breakdown_csv(const std::filesystem::path& path, const std::vector<BreakdownRow>& rows) {
    std::string out = "answer_page,n,accuracy,anls,page_accuracy\n";
    for (const auto& r : rows) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%zu,%zu,%.12g,%.12g,%.12g\n", r.answer_page, r.n, r.accuracy, r.anls,
                      r.page_accuracy);
        out += buf;
    }
    atomic_write_file(path, out);
}

inline void write_confusion_csv(const std::filesystem::path& path, const Confusion& c) {
    std::string out = "answer_correct,page_correct,count\n";
    out += "true,true," + std::to_string(c.both) + "\n";
    out += "true,false," + std::to_string(c.answer_only) + "\n";
    out += "false,true," + std::to_string(c.page_only) + "\n";
    out += "false,false," + std::to_string(c.neither) + "\n";
    atomic_write_file(path, out);
}

// Grouped bar chart (accuracy, similarity, page accuracy per answer page).
inline void write_breakdown_svg(const std::filesystem::path& path, const std::vector<BreakdownRow>& rows) {
    const double width = 960, height = 360, margin = 48;
    const double plot_w = width - 2 * margin, plot_h = height - 2 * margin;
    std::string svg;
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%g\" height=\"%g\" "
                  "viewBox=\"0 0 %g %g\">\n",
                  width, height, width, height);
    svg += buf;
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    std::snprintf(buf, sizeof(buf), "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", margin,
                  height - margin, width - margin, height - margin);
    svg += buf;
    const char* colors[3] = {"#4c78a8", "#f58518", "#54a24b"};
    const char* labels[3] = {"accuracy", "anls", "page_accuracy"};
    for (int s = 0; s < 3; ++s) {
        std::snprintf(buf, sizeof(buf),
                      "<rect x=\"%g\" y=\"%g\" width=\"10\" height=\"10\" fill=\"%s\"/>"
                      "<text x=\"%g\" y=\"%g\" font-size=\"11\">%s</text>\n",
                      margin + s * 130.0, 12.0, colors[s], margin + s * 130.0 + 14, 21.0, labels[s]);
        svg += buf;
    }
    if (!rows.empty()) {
        double group_w = plot_w / static_cast<double>(rows.size());
        double bar_w = std::min(22.0, group_w / 4.0);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            double gx = margin + group_w * (static_cast<double>(i) + 0.5);
            double vals[3] = {rows[i].accuracy, rows[i].anls, rows[i].page_accuracy};
            for (int s = 0; s < 3; ++s) {
                double h = std::clamp(vals[s], 0.0, 1.0) * plot_h;
                std::snprintf(buf, sizeof(buf), "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\" fill=\"%s\"/>\n",
                              gx + (s - 1.5) * bar_w, height - margin - h, bar_w, h, colors[s]);
                svg += buf;
            }
            std::snprintf(buf, sizeof(buf),
                          "<text x=\"%g\" y=\"%g\" font-size=\"10\" text-anchor=\"middle\">%zu</text>\n", gx,
                          height - margin + 14, rows[i].answer_page);
            svg += buf;
        }
    }
    svg += "</svg>\n";
    atomic_write_file(path, svg);
}

// Encoder attention of the page-summary query rows on one page: one CSV per
// (layer, head), M rows by sequence length.
inline void dump_attention(const HiVt5Model& model, const std::vector<PageInput>& pages, std::size_t page_index,
                           const std::filesystem::path& dir) {
    if (page_index >= pages.size()) throw ValidationError("dump_attention: page index outside document");
    NoGradGuard inference;
    AttentionTrace trace;
    model.encode_page(pages[page_index], nullptr, &trace);
    std::filesystem::create_directories(dir);
    std::size_t m = model.cfg.page_tokens;
    for (std::size_t layer = 0; layer < trace.weights.size(); ++layer) {
        for (std::size_t head = 0; head < trace.n_heads; ++head) {
            std::string out;
            for (std::size_t q = 0; q < m; ++q) {
                for (std::size_t k = 0; k < trace.k_len; ++k) {
                    char buf[40];
                    std::snprintf(buf, sizeof(buf), "%.12g",
                                  trace.weights[layer][head * trace.q_len * trace.k_len + q * trace.k_len + k]);
                    out += buf;
                    out += (k + 1 < trace.k_len) ? "," : "\n";
                }
            }
            char name[64];
            std::snprintf(name, sizeof(name), "attn_L%zu_H%zu.csv", layer, head);
            atomic_write_file(dir / name, out);
        }
    }
}

}  // namespace hivt5
