// SPDX-License-Identifier: Apache-2.0
//
// Corpus model and pipeline: OCR tokens with normalized boxes, multi-page
// documents, extractive QA samples, JSON ingestion/emission, a deterministic
// synthetic generator, and the dataset construction steps (windowing long
// documents, keyword filtering, leak-free splits, two-page training views).
#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "hivt5/errors.hpp"
#include "hivt5/geometry.hpp"
#include "hivt5/io_util.hpp"
#include "hivt5/rng.hpp"

namespace hivt5 {

// ---------------------------------------------------------------------------
// data model
// ---------------------------------------------------------------------------

struct OcrToken {
    std::string text;
    Box box{};

    bool operator==(const OcrToken&) const = default;
};

struct PageImage {
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<std::uint8_t> pixels;  // row-major grayscale

    bool operator==(const PageImage&) const = default;
};

struct Page {
    std::vector<OcrToken> tokens;  // reading order (row band, then x0)
    std::optional<PageImage> image;

    bool operator==(const Page&) const = default;

    // Reading order: tokens are bucketed into row bands of one line height
    // (median box height), then ordered left to right. Stable for exact ties.
    void sort_reading_order() {
        if (tokens.empty()) return;
        std::vector<double> heights;
        heights.reserve(tokens.size());
        for (const auto& t : tokens) heights.push_back(t.box[3] - t.box[1]);
        std::nth_element(heights.begin(), heights.begin() + heights.size() / 2, heights.end());
        double line_height = heights[heights.size() / 2];
        if (line_height <= 0.0) line_height = 1.0;
        auto band = [line_height](const OcrToken& t) {
            return static_cast<long long>(t.box[1] / line_height);
        };
        std::stable_sort(tokens.begin(), tokens.end(), [&](const OcrToken& a, const OcrToken& b) {
            long long ba = band(a), bb = band(b);
            if (ba != bb) return ba < bb;
            return a.box[0] < b.box[0];
        });
    }
};

struct Document {
    std::string id;
    std::vector<Page> pages;

    bool operator==(const Document&) const = default;
};

enum class Split { train, val, test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

inline Split split_from(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ValidationError("unknown split '" + s + "'");
}

struct QASample {
    std::string question;
    std::vector<std::string> answers;  // any of these counts as correct
    std::string doc_id;
    std::size_t answer_page_idx = 0;
    Split split = Split::train;

    bool operator==(const QASample&) const = default;
};

struct Corpus {
    std::vector<Document> documents;
    std::vector<QASample> samples;

    bool operator==(const Corpus&) const = default;

    const Document& document(const std::string& id) const {
        for (const auto& d : documents)
            if (d.id == id) return d;
        throw ValidationError("unknown document id '" + id + "'");
    }

    std::unordered_map<std::string, std::size_t> doc_index() const {
        std::unordered_map<std::string, std::size_t> idx;
        for (std::size_t i = 0; i < documents.size(); ++i) idx[documents[i].id] = i;
        return idx;
    }
};

// ---------------------------------------------------------------------------
// JSON corpus file
// ---------------------------------------------------------------------------

constexpr int kCorpusFormatVersion = 1;

inline nlohmann::ordered_json corpus_to_json(const Corpus& corpus) {
    nlohmann::ordered_json root;
    root["format_version"] = kCorpusFormatVersion;
    auto& docs = root["documents"] = nlohmann::ordered_json::array();
    for (const auto& doc : corpus.documents) {
        nlohmann::ordered_json jd;
        jd["id"] = doc.id;
        auto& pages = jd["pages"] = nlohmann::ordered_json::array();
        for (const auto& page : doc.pages) {
            nlohmann::ordered_json jp;
            auto& toks = jp["tokens"] = nlohmann::ordered_json::array();
            for (const auto& t : page.tokens) {
                nlohmann::ordered_json jt;
                jt["text"] = t.text;
                jt["box"] = {t.box[0], t.box[1], t.box[2], t.box[3]};
                toks.push_back(std::move(jt));
            }
            if (page.image) {
                jp["image"] = {{"h", page.image->h},
                               {"w", page.image->w},
                               {"pixels", base64_encode(page.image->pixels)}};
            }
            pages.push_back(std::move(jp));
        }
        docs.push_back(std::move(jd));
    }
    auto& samples = root["samples"] = nlohmann::ordered_json::array();
    for (const auto& s : corpus.samples) {
        nlohmann::ordered_json js;
        js["question"] = s.question;
        js["answers"] = s.answers;
        js["doc_id"] = s.doc_id;
        js["answer_page_idx"] = s.answer_page_idx;
        js["split"] = split_name(s.split);
        samples.push_back(std::move(js));
    }
    return root;
}

inline void emit_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    atomic_write_file(path, corpus_to_json(corpus).dump(1) + "\n");
}

// Parses and validates a corpus file. `max_pages` > 0 additionally enforces
// the constructed-corpus page cap; raw inputs (pre-construction) pass 0.
inline Corpus ingest_corpus_json(const nlohmann::json& root, std::size_t max_pages = 0) {
    auto fail = [](const std::string& where, const std::string& why) {
        throw ValidationError(where + ": " + why);
    };
    if (!root.is_object()) fail("corpus", "top level must be an object");
    if (!root.contains("format_version") || !root["format_version"].is_number_integer() ||
        root["format_version"].get<int>() != kCorpusFormatVersion)
        fail("corpus", "missing or unsupported format_version");
    if (!root.contains("documents") || !root["documents"].is_array()) fail("corpus", "missing documents array");
    if (!root.contains("samples") || !root["samples"].is_array()) fail("corpus", "missing samples array");

    Corpus corpus;
    std::unordered_map<std::string, std::size_t> pages_of;
    for (std::size_t di = 0; di < root["documents"].size(); ++di) {
        const auto& jd = root["documents"][di];
        std::string where = "documents[" + std::to_string(di) + "]";
        if (!jd.is_object() || !jd.contains("id") || !jd["id"].is_string()) fail(where, "missing id");
        Document doc;
        doc.id = jd["id"].get<std::string>();
        if (pages_of.count(doc.id)) fail(where, "duplicate document id '" + doc.id + "'");
        if (!jd.contains("pages") || !jd["pages"].is_array() || jd["pages"].empty())
            fail(where, "document needs at least one page");
        if (max_pages > 0 && jd["pages"].size() > max_pages)
            fail(where, "has " + std::to_string(jd["pages"].size()) + " pages, cap is " + std::to_string(max_pages));
        for (std::size_t pi = 0; pi < jd["pages"].size(); ++pi) {
            const auto& jp = jd["pages"][pi];
            std::string pwhere = where + ".pages[" + std::to_string(pi) + "]";
            if (!jp.is_object() || !jp.contains("tokens") || !jp["tokens"].is_array())
                fail(pwhere, "missing tokens array");
            Page page;
            for (std::size_t ti = 0; ti < jp["tokens"].size(); ++ti) {
                const auto& jt = jp["tokens"][ti];
                std::string twhere = pwhere + ".tokens[" + std::to_string(ti) + "]";
                if (!jt.is_object() || !jt.contains("text") || !jt["text"].is_string()) fail(twhere, "missing text");
                if (!jt.contains("box") || !jt["box"].is_array() || jt["box"].size() != 4)
                    fail(twhere, "box must be [x0,y0,x1,y1]");
                OcrToken tok;
                tok.text = jt["text"].get<std::string>();
                for (std::size_t c = 0; c < 4; ++c) {
                    if (!jt["box"][c].is_number()) fail(twhere, "box coordinate is not a number");
                    tok.box[c] = jt["box"][c].get<double>();
                }
                try {
                    validate_box(tok.box, twhere);
                } catch (const ValidationError& e) {
                    fail(twhere, e.what());
                }
                page.tokens.push_back(std::move(tok));
            }
            if (jp.contains("image")) {
                const auto& ji = jp["image"];
                if (!ji.is_object() || !ji.contains("h") || !ji.contains("w") || !ji.contains("pixels"))
                    fail(pwhere, "image needs h, w, pixels");
                PageImage img;
                img.h = ji["h"].get<std::size_t>();
                img.w = ji["w"].get<std::size_t>();
                img.pixels = base64_decode(ji["pixels"].get<std::string>());
                if (img.pixels.size() != img.h * img.w) fail(pwhere, "image pixel count does not match h*w");
                page.image = std::move(img);
            }
            page.sort_reading_order();
            doc.pages.push_back(std::move(page));
        }
        pages_of[doc.id] = doc.pages.size();
        corpus.documents.push_back(std::move(doc));
    }
    for (std::size_t si = 0; si < root["samples"].size(); ++si) {
        const auto& js = root["samples"][si];
        std::string where = "samples[" + std::to_string(si) + "]";
        if (!js.is_object()) fail(where, "sample must be an object");
        for (const char* key : {"question", "doc_id", "split"})
            if (!js.contains(key) || !js[key].is_string()) fail(where, std::string("missing ") + key);
        if (!js.contains("answers") || !js["answers"].is_array() || js["answers"].empty())
            fail(where, "answers must be a non-empty array");
        if (!js.contains("answer_page_idx") || !js["answer_page_idx"].is_number_integer() ||
            js["answer_page_idx"].get<long long>() < 0)
            fail(where, "answer_page_idx must be a non-negative integer");
        QASample s;
        s.question = js["question"].get<std::string>();
        for (const auto& a : js["answers"]) {
            if (!a.is_string()) fail(where, "answers must be strings");
            s.answers.push_back(a.get<std::string>());
        }
        s.doc_id = js["doc_id"].get<std::string>();
        s.answer_page_idx = js["answer_page_idx"].get<std::size_t>();
        try {
            s.split = split_from(js["split"].get<std::string>());
        } catch (const ValidationError& e) {
            fail(where, e.what());
        }
        auto it = pages_of.find(s.doc_id);
        if (it == pages_of.end()) fail(where, "doc_id '" + s.doc_id + "' does not exist");
        if (s.answer_page_idx >= it->second)
            fail(where, "answer_page_idx " + std::to_string(s.answer_page_idx) + " >= page count " +
                            std::to_string(it->second));
        corpus.samples.push_back(std::move(s));
    }
    return corpus;
}

inline Corpus ingest_corpus(const std::filesystem::path& path, std::size_t max_pages = 0) {
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
    return ingest_corpus_json(root, max_pages);
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

struct SynthConfig {
    std::size_t n_docs = 100;
    std::size_t pages_min = 2;
    std::size_t pages_max = 4;
    std::size_t tokens_per_page = 48;
    std::size_t qa_per_doc = 1;
    std::size_t key_pool = 200;      // distinct key (and value) words available
    std::size_t filler_words = 64;   // distinct background words
    bool images = false;
    std::size_t image_size = 64;
    std::uint64_t seed = 7;
};

namespace detail {

inline Box grid_box(std::size_t cell, std::size_t n_cols, std::size_t n_rows) {
    std::size_t r = cell / n_cols, c = cell % n_cols;
    double w = 1.0 / static_cast<double>(n_cols);
    double h = 1.0 / static_cast<double>(n_rows);
    double x0 = static_cast<double>(c) * w + 0.05 * w;
    double y0 = static_cast<double>(r) * h + 0.05 * h;
    return {x0, y0, x0 + 0.8 * w, y0 + 0.8 * h};
}

}  // namespace detail

// Pages of filler words on a fixed grid; each QA plants a unique key token
// with its value token immediately after it in reading order, on a uniformly
// chosen answer page. Answers are extractive by construction. Bit-identical
// output for a given config.
inline Corpus generate_synthetic(const SynthConfig& cfg) {
    if (cfg.pages_min < 1 || cfg.pages_max > 20 || cfg.pages_min > cfg.pages_max)
        throw ConfigError("generate_synthetic: pages_range must lie within [1,20]");
    if (cfg.tokens_per_page < 4) throw ConfigError("generate_synthetic: tokens_per_page must be at least 4");
    if (cfg.filler_words < 1) throw ConfigError("generate_synthetic: filler_words must be positive");
    std::size_t total_qa = cfg.n_docs * cfg.qa_per_doc;
    if (total_qa > cfg.key_pool)
        throw ConfigError("generate_synthetic: key pool of " + std::to_string(cfg.key_pool) +
                          " cannot keep " + std::to_string(total_qa) + " planted keys unique");
    if (cfg.qa_per_doc * 2 > cfg.tokens_per_page / 2)
        throw ConfigError("generate_synthetic: pages too small for the planted pairs");

    Rng rng(cfg.seed);
    std::vector<std::size_t> key_ids(cfg.key_pool);
    for (std::size_t i = 0; i < cfg.key_pool; ++i) key_ids[i] = i;
    rng.shuffle(key_ids);

    const std::size_t n_cols = 8;
    const std::size_t n_rows = (cfg.tokens_per_page + n_cols - 1) / n_cols;

    Corpus corpus;
    std::size_t next_key = 0;
    for (std::size_t di = 0; di < cfg.n_docs; ++di) {
        Document doc;
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "doc%05zu", di);
        doc.id = idbuf;
        std::size_t n_pages = cfg.pages_min + rng.below(cfg.pages_max - cfg.pages_min + 1);
        for (std::size_t pi = 0; pi < n_pages; ++pi) {
            Page page;
            for (std::size_t t = 0; t < cfg.tokens_per_page; ++t) {
                OcrToken tok;
                tok.text = "tok" + std::to_string(rng.below(cfg.filler_words));
                tok.box = detail::grid_box(t, n_cols, n_rows);
                page.tokens.push_back(std::move(tok));
            }
            doc.pages.push_back(std::move(page));
        }
        std::vector<std::unordered_set<std::size_t>> used(n_pages);
        for (std::size_t qi = 0; qi < cfg.qa_per_doc; ++qi) {
            std::size_t page = rng.below(n_pages);
            std::size_t pos;
            do {
                pos = rng.below(cfg.tokens_per_page - 1);
            } while (used[page].count(pos) || used[page].count(pos + 1));
            used[page].insert(pos);
            used[page].insert(pos + 1);
            std::string key = "key" + std::to_string(key_ids[next_key]);
            std::string value = "val" + std::to_string(rng.below(cfg.key_pool));
            ++next_key;
            doc.pages[page].tokens[pos].text = key;
            doc.pages[page].tokens[pos + 1].text = value;
            QASample s;
            s.question = "what is the value of " + key;
            s.answers = {value};
            s.doc_id = doc.id;
            s.answer_page_idx = page;
            s.split = Split::train;
            corpus.samples.push_back(std::move(s));
        }
        if (cfg.images) {
            for (auto& page : doc.pages) {
                PageImage img;
                img.h = img.w = cfg.image_size;
                img.pixels.assign(img.h * img.w, 235);
                for (const auto& tok : page.tokens) {
                    // deterministic per-word ink level
                    std::uint8_t ink = static_cast<std::uint8_t>(40 + (tok.text.size() * 37) % 120);
                    auto px0 = static_cast<std::size_t>(tok.box[0] * static_cast<double>(img.w));
                    auto px1 = static_cast<std::size_t>(tok.box[2] * static_cast<double>(img.w));
                    auto py0 = static_cast<std::size_t>(tok.box[1] * static_cast<double>(img.h));
                    auto py1 = static_cast<std::size_t>(tok.box[3] * static_cast<double>(img.h));
                    for (std::size_t y = py0; y < std::min(py1, img.h); ++y)
                        for (std::size_t x = px0; x < std::min(px1, img.w); ++x) img.pixels[y * img.w + x] = ink;
                }
                page.image = std::move(img);
            }
        }
        corpus.documents.push_back(std::move(doc));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// construction pipeline
// ---------------------------------------------------------------------------

// Long documents are cut per sample to `window` pages that always include the
// answer page (original page order kept, answer_page_idx remapped; the sample
// is repointed at its derived document). Documents within the window stay
// untouched; unreferenced long documents are trimmed to their first pages.
inline Corpus construct_multipage(const Corpus& raw, std::size_t window, Rng& rng) {
    Corpus out;
    auto idx = raw.doc_index();
    std::unordered_set<std::string> copied;
    for (const auto& doc : raw.documents) {
        if (doc.pages.size() <= window) {
            out.documents.push_back(doc);
            copied.insert(doc.id);
        }
    }
    std::unordered_set<std::string> referenced;
    for (std::size_t si = 0; si < raw.samples.size(); ++si) {
        const QASample& s = raw.samples[si];
        const Document& doc = raw.documents[idx.at(s.doc_id)];
        referenced.insert(doc.id);
        if (doc.pages.size() <= window) {
            out.samples.push_back(s);
            continue;
        }
        std::vector<std::size_t> others;
        others.reserve(doc.pages.size() - 1);
        for (std::size_t p = 0; p < doc.pages.size(); ++p)
            if (p != s.answer_page_idx) others.push_back(p);
        rng.shuffle(others);
        others.resize(window - 1);
        others.push_back(s.answer_page_idx);
        std::sort(others.begin(), others.end());
        Document derived;
        derived.id = doc.id + "#s" + std::to_string(si);
        QASample ns = s;
        ns.doc_id = derived.id;
        for (std::size_t k = 0; k < others.size(); ++k) {
            derived.pages.push_back(doc.pages[others[k]]);
            if (others[k] == s.answer_page_idx) ns.answer_page_idx = k;
        }
        out.documents.push_back(std::move(derived));
        out.samples.push_back(std::move(ns));
    }
    // long documents nobody references still have to respect the cap
    for (const auto& doc : raw.documents) {
        if (doc.pages.size() > window && !referenced.count(doc.id)) {
            Document trimmed;
            trimmed.id = doc.id;
            trimmed.pages.assign(doc.pages.begin(), doc.pages.begin() + static_cast<std::ptrdiff_t>(window));
            out.documents.push_back(std::move(trimmed));
        }
    }
    return out;
}

// Case-insensitive whole-word match; words are maximal alphanumeric runs.
inline bool contains_word(const std::string& text, const std::string& word) {
    std::string run;
    auto matches = [&]() { return run == word; };
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            run += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        } else {
            if (matches()) return true;
            run.clear();
        }
    }
    return matches();
}

// Removes questions containing the whole word "document" (ambiguous in a
// multi-page setting); everything else is kept.
inline std::pair<std::vector<QASample>, std::vector<QASample>> filter_ambiguous(
    const std::vector<QASample>& samples) {
    std::vector<QASample> kept, removed;
    for (const auto& s : samples) {
        if (contains_word(s.question, "document"))
            removed.push_back(s);
        else
            kept.push_back(s);
    }
    return {kept, removed};
}

// Per-document split assignment: a document id never appears in two splits,
// so no page can leak across train and validation/test.
inline void split_and_trim(Corpus& corpus, double train_ratio, double val_ratio, double test_ratio, Rng& rng) {
    double sum = train_ratio + val_ratio + test_ratio;
    if (train_ratio < 0 || val_ratio < 0 || test_ratio < 0 || std::abs(sum - 1.0) > 1e-9)
        throw ConfigError("split ratios must be non-negative and sum to 1");
    std::vector<std::size_t> order(corpus.documents.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    auto n = static_cast<double>(order.size());
    auto n_train = static_cast<std::size_t>(std::llround(train_ratio * n));
    auto n_val = static_cast<std::size_t>(std::llround(val_ratio * n));
    n_train = std::min(n_train, order.size());
    n_val = std::min(n_val, order.size() - n_train);
    std::unordered_map<std::string, Split> split_of;
    for (std::size_t k = 0; k < order.size(); ++k) {
        Split s = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
        split_of[corpus.documents[order[k]].id] = s;
    }
    for (auto& sample : corpus.samples) sample.split = split_of.at(sample.doc_id);
}

// Two-page training view: the answer page plus one uniformly chosen adjacent
// page (forced to the only available side at document boundaries).
struct TwoPageView {
    std::vector<std::size_t> page_indices;  // into the source document
    std::size_t answer_pos = 0;             // 0 or 1
};

inline TwoPageView shorten_two_pages(const QASample& sample, const Document& doc, Rng& rng) {
    std::size_t n = doc.pages.size();
    if (n == 0) throw ValidationError("shorten_two_pages: empty document");
    std::size_t a = sample.answer_page_idx;
    if (a >= n) throw ValidationError("shorten_two_pages: answer page outside document");
    TwoPageView view;
    if (n == 1) {
        view.page_indices = {0};
        view.answer_pos = 0;
        return view;
    }
    bool use_previous;
    if (a == 0)
        use_previous = false;
    else if (a == n - 1)
        use_previous = true;
    else
        use_previous = rng.below(2) == 0;
    if (use_previous) {
        view.page_indices = {a - 1, a};
        view.answer_pos = 1;
    } else {
        view.page_indices = {a, a + 1};
        view.answer_pos = 0;
    }
    return view;
}

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

// Word-level vocabulary with reserved control tokens followed by the corpus
// words in sorted order. Ids are stable for a given word set.
class Vocabulary {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kStart = 1;
    static constexpr std::size_t kEnd = 2;
    static constexpr std::size_t kUnk = 3;
    static constexpr std::size_t kQaTask = 4;
    static constexpr std::size_t kPagePlaceholder = 5;
    static constexpr std::size_t kSentinelBase = 6;
    static constexpr std::size_t kNumSentinels = 32;
    static constexpr std::size_t kReserved = kSentinelBase + kNumSentinels;

    Vocabulary() = default;

    static std::vector<std::string> reserved_words() {
        std::vector<std::string> words = {"<pad>", "<s>", "</s>", "<unk>", "<qa>", "<page>"};
        for (std::size_t i = 0; i < kNumSentinels; ++i) words.push_back("<x" + std::to_string(i) + ">");
        return words;
    }

    static Vocabulary build(const Corpus& corpus) {
        std::map<std::string, bool> seen;  // ordered -> deterministic ids
        for (const auto& doc : corpus.documents)
            for (const auto& page : doc.pages)
                for (const auto& tok : page.tokens)
                    for (auto& w : tokenize(tok.text)) seen[w] = true;
        for (const auto& s : corpus.samples) {
            for (auto& w : tokenize(s.question)) seen[w] = true;
            for (const auto& a : s.answers)
                for (auto& w : tokenize(a)) seen[w] = true;
        }
        Vocabulary v;
        v.words_ = reserved_words();
        for (auto& [w, _] : seen) v.words_.push_back(w);
        v.rebuild_index();
        return v;
    }

    // Restores a vocabulary saved id-by-id (checkpoint header).
    static Vocabulary from_words(std::vector<std::string> words) {
        auto reserved = reserved_words();
        if (words.size() < reserved.size()) throw ValidationError("vocabulary: missing reserved tokens");
        for (std::size_t i = 0; i < reserved.size(); ++i)
            if (words[i] != reserved[i]) throw ValidationError("vocabulary: reserved token mismatch at id " +
                                                               std::to_string(i));
        Vocabulary v;
        v.words_ = std::move(words);
        v.rebuild_index();
        return v;
    }

    // Lowercase, whitespace-separated word units.
    static std::vector<std::string> tokenize(const std::string& text) {
        std::vector<std::string> out;
        std::string cur;
        for (char ch : text) {
            if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
            } else {
                cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
            }
        }
        if (!cur.empty()) out.push_back(std::move(cur));
        return out;
    }

    std::size_t size() const { return words_.size(); }
    const std::vector<std::string>& words() const { return words_; }
    const std::string& word(std::size_t id) const { return words_.at(id); }
    static std::size_t sentinel(std::size_t i) { return kSentinelBase + i; }

    std::size_t id(const std::string& w) const {
        auto it = index_.find(w);
        return it == index_.end() ? kUnk : it->second;
    }

    std::vector<std::size_t> encode(const std::string& text) const {
        std::vector<std::size_t> ids;
        for (auto& w : tokenize(text)) ids.push_back(id(w));
        return ids;
    }

    std::string decode(const std::vector<std::size_t>& ids) const {
        std::string out;
        for (std::size_t t : ids) {
            if (t == kEnd || t == kPad) continue;
            if (!out.empty()) out += ' ';
            out += word(t);
        }
        return out;
    }

    bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

private:
    void rebuild_index() {
        index_.clear();
        for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = i;
    }

    std::vector<std::string> words_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace hivt5
