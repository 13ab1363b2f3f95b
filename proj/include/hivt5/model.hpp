// SPDX-License-Identifier: Apache-2.0
//
// The hierarchical model: every page is encoded independently together with
// the question and M learnable page-summary tokens; the M contextualized
// outputs of all pages are concatenated into the document representation D,
// which feeds both the answer decoder and the answer-page head.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "hivt5/corpus.hpp"
#include "hivt5/errors.hpp"
#include "hivt5/io_util.hpp"
#include "hivt5/nn.hpp"
#include "hivt5/tensor.hpp"

namespace hivt5 {

// Appendix-style budget: how many page-summary tokens fit the decoder input
// for a given page count. Plain floor division.
inline std::size_t page_budget(std::size_t decoder_budget, std::size_t pages) {
    if (decoder_budget < 1 || pages < 1) throw ValidationError("page_budget: both budgets must be >= 1");
    return decoder_budget / pages;
}

// Two page-head designs. `indexed` scores page slot j with its own (w_j, b_j)
// on the pooled page vector, so slots never targeted by the loss stay at
// their init scores; this is what makes the head predict only trained slots
// until full-length finetuning. `shared` scores every pooled vector with one
// shared linear map and is permutation-equivariant.
enum class PageHeadKind { indexed, shared };

inline const char* page_head_name(PageHeadKind k) { return k == PageHeadKind::indexed ? "indexed" : "shared"; }
inline PageHeadKind page_head_from(const std::string& s) {
    if (s == "indexed") return PageHeadKind::indexed;
    if (s == "shared") return PageHeadKind::shared;
    throw ConfigError("unknown page_head '" + s + "'");
}

struct HiVt5Config {
    std::size_t d_model = 64;
    std::size_t n_enc_layers = 2;
    std::size_t n_dec_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 0;  // 0 -> 4 * d_model
    std::size_t vocab_size = 0;
    std::size_t page_tokens = 10;       // M
    std::size_t per_page_budget = 256;  // L: page tokens + visual + question + OCR
    std::size_t decoder_budget = 256;   // S: max length of D
    std::size_t max_pages = 20;         // P_max
    std::size_t patch_size = 16;        // visual patch edge, pixels
    bool use_visual = false;
    double page_loss_weight = 1.0;
    std::size_t coord_buckets = 32;
    std::size_t rel_buckets = 32;
    std::size_t rel_max_distance = 128;
    PageHeadKind page_head = PageHeadKind::indexed;

    std::size_t ff_dim() const { return d_ff == 0 ? 4 * d_model : d_ff; }

    void validate() const {
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
            throw ConfigError("config: d_model must be a positive multiple of n_heads");
        if (n_enc_layers == 0 || n_dec_layers == 0) throw ConfigError("config: need at least one layer per stack");
        if (max_pages == 0) throw ConfigError("config: max_pages must be positive");
        if (page_tokens == 0) throw ConfigError("config: page_tokens must be positive");
        if (page_tokens > page_budget(decoder_budget, max_pages))
            throw ConfigError("config: page_tokens " + std::to_string(page_tokens) + " exceeds decoder budget " +
                              std::to_string(decoder_budget) + " / " + std::to_string(max_pages) + " pages");
        if (per_page_budget < page_tokens + 1)
            throw ConfigError("config: per_page_budget smaller than the page tokens themselves");
        if (patch_size == 0) throw ConfigError("config: patch_size must be positive");
        if (rel_buckets % 2 != 0) throw ConfigError("config: rel_buckets must be even");
        if (page_loss_weight < 0) throw ConfigError("config: page_loss_weight must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// visual features
// ---------------------------------------------------------------------------

// Per-patch statistics: (mean, stddev, normalized row, normalized col) over
// patch_size x patch_size cells; the raster is zero-padded up to full
// patches. Intensities are scaled to [0,1]. The trainable part is a single
// linear projection of these features into the model width.
struct PatchFeatures {
    std::size_t n_patches = 0;
    std::vector<double> data;  // n_patches x 4
};

inline PatchFeatures featurize_patches(const PageImage& image, std::size_t patch_size) {
    if (image.h == 0 || image.w == 0 || image.pixels.size() != image.h * image.w)
        throw ValidationError("featurize_patches: empty or inconsistent raster");
    if (patch_size == 0) throw ValidationError("featurize_patches: patch size must be positive");
    std::size_t rows = (image.h + patch_size - 1) / patch_size;
    std::size_t cols = (image.w + patch_size - 1) / patch_size;
    PatchFeatures out;
    out.n_patches = rows * cols;
    out.data.reserve(out.n_patches * 4);
    double denom_pixels = static_cast<double>(patch_size * patch_size);
    for (std::size_t pr = 0; pr < rows; ++pr) {
        for (std::size_t pc = 0; pc < cols; ++pc) {
            auto pixel = [&](std::size_t y, std::size_t x) {
                return (y < image.h && x < image.w) ? static_cast<double>(image.pixels[y * image.w + x]) / 255.0
                                                    : 0.0;
            };
            double sum = 0.0;
            for (std::size_t y = pr * patch_size; y < (pr + 1) * patch_size; ++y)
                for (std::size_t x = pc * patch_size; x < (pc + 1) * patch_size; ++x) sum += pixel(y, x);
            double mean = sum / denom_pixels;
            double var = 0.0;  // two-pass: exact zero on constant patches
            for (std::size_t y = pr * patch_size; y < (pr + 1) * patch_size; ++y)
                for (std::size_t x = pc * patch_size; x < (pc + 1) * patch_size; ++x) {
                    double dev = pixel(y, x) - mean;
                    var += dev * dev;
                }
            var /= denom_pixels;
            out.data.push_back(mean);
            out.data.push_back(std::sqrt(var));
            out.data.push_back(rows > 1 ? static_cast<double>(pr) / static_cast<double>(rows - 1) : 0.0);
            out.data.push_back(cols > 1 ? static_cast<double>(pc) / static_cast<double>(cols - 1) : 0.0);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// page input
// ---------------------------------------------------------------------------

struct PageInput {
    std::vector<std::size_t> question_ids;  // task prefix + question, boxless
    std::vector<std::size_t> ocr_ids;
    std::vector<Box> ocr_boxes;             // one per ocr id
    const PageImage* image = nullptr;       // borrowed, optional
    std::size_t page_index = 0;             // position in the source document
};

// ---------------------------------------------------------------------------
// the model
// ---------------------------------------------------------------------------

struct ModelOutput {
    Tensor answer_logits;                    // [target_len, vocab]
    Tensor page_logits;                      // [P_max], graph-connected
    std::vector<double> masked_page_logits;  // absent pages forced to -inf
    std::size_t n_pages = 0;
    std::vector<AttentionTrace> encoder_attention;  // one per page when traced
};

struct HiVt5Model {
    HiVt5Config cfg;
    Vocabulary vocab;
    AttentionSpec spec;

    SpatialEmbedder embedder;  // token table doubles as the decoder embedding
    Tensor page_token_emb;     // [M, d], shared across pages
    Tensor visual_proj;        // [4, d]
    std::vector<EncoderLayer> enc_layers;
    Tensor enc_final_norm;
    Tensor enc_bias_table;
    std::vector<DecoderLayer> dec_layers;
    Tensor dec_final_norm;
    Tensor dec_bias_table;
    Tensor head_w;  // indexed: [P_max, d]; shared: [1, d]
    Tensor head_b;  // indexed: [P_max];    shared: [1]

    HiVt5Model(HiVt5Config config, Vocabulary vocabulary, Rng& rng)
        : cfg(std::move(config)),
          vocab(std::move(vocabulary)),
          spec(cfg.d_model, cfg.n_heads, cfg.rel_buckets, cfg.rel_max_distance) {
        cfg.vocab_size = vocab.size();
        cfg.validate();
        if (vocab.size() <= Vocabulary::kReserved) throw ConfigError("model: vocabulary has no corpus words");
        std::size_t d = cfg.d_model;
        embedder = SpatialEmbedder(vocab.size(), d, cfg.coord_buckets, cfg.coord_buckets, rng);
        page_token_emb = Tensor::param({cfg.page_tokens, d}, rng, 0.02);
        visual_proj = Tensor::param({4, d}, rng, 0.5);
        for (std::size_t i = 0; i < cfg.n_enc_layers; ++i) enc_layers.emplace_back(d, cfg.ff_dim(), rng);
        enc_final_norm = Tensor::param_zeros({d});
        enc_final_norm.values().assign(d, 1.0);
        enc_bias_table = Tensor::param({cfg.rel_buckets, cfg.n_heads}, rng, 0.1);
        for (std::size_t i = 0; i < cfg.n_dec_layers; ++i) dec_layers.emplace_back(d, cfg.ff_dim(), rng);
        dec_final_norm = Tensor::param_zeros({d});
        dec_final_norm.values().assign(d, 1.0);
        dec_bias_table = Tensor::param({cfg.rel_buckets, cfg.n_heads}, rng, 0.1);
        // zero-init head: an untrained head scores every page equally
        if (cfg.page_head == PageHeadKind::indexed) {
            head_w = Tensor::param_zeros({cfg.max_pages, d});
            head_b = Tensor::param_zeros({cfg.max_pages});
        } else {
            head_w = Tensor::param_zeros({1, d});
            head_b = Tensor::param_zeros({1});
        }
    }

    // Stable registry: names starting with "enc." are the encoder side frozen
    // during finetuning (spatial tables, page tokens, visual projection and
    // the tied output embedding included).
    ParamList parameters() const {
        ParamList out;
        embedder.collect(out, "enc.embed");
        out.emplace_back("enc.page_tokens", page_token_emb);
        out.emplace_back("enc.visual_proj", visual_proj);
        out.emplace_back("enc.bias", enc_bias_table);
        for (std::size_t i = 0; i < enc_layers.size(); ++i)
            enc_layers[i].collect(out, "enc.l" + std::to_string(i));
        out.emplace_back("enc.final_norm", enc_final_norm);
        out.emplace_back("dec.bias", dec_bias_table);
        for (std::size_t i = 0; i < dec_layers.size(); ++i)
            dec_layers[i].collect(out, "dec.l" + std::to_string(i));
        out.emplace_back("dec.final_norm", dec_final_norm);
        out.emplace_back("head.w", head_w);
        out.emplace_back("head.b", head_b);
        return out;
    }

    static bool is_encoder_param(const std::string& name) { return name.rfind("enc.", 0) == 0; }

    // ------------------------------------------------------------------
    // page encoding
    // ------------------------------------------------------------------

    // Builds the page sequence [PAGE tokens; visual patches; question; OCR],
    // truncating the OCR tail to the per-page budget, and returns the M
    // contextualized page-token outputs. `ocr_visible`, when given, hides the
    // marked OCR key positions from every query instead of deleting them.
    Tensor encode_page(const PageInput& page, const std::vector<bool>* ocr_visible = nullptr,
                       AttentionTrace* trace = nullptr) const {
        if (page.ocr_ids.size() != page.ocr_boxes.size())
            throw ShapeError("encode_page: ocr ids and boxes out of step");
        std::vector<Tensor> segments;
        segments.push_back(page_token_emb);
        std::size_t n_visual = 0;
        if (cfg.use_visual && page.image != nullptr) {
            PatchFeatures feats = featurize_patches(*page.image, cfg.patch_size);
            n_visual = feats.n_patches;
            Tensor f = Tensor::from_values({feats.n_patches, 4}, std::move(feats.data));
            segments.push_back(matmul(f, visual_proj));
        }
        std::size_t mandatory = cfg.page_tokens + n_visual + page.question_ids.size();
        if (mandatory > cfg.per_page_budget)
            throw ConfigError("encode_page: page tokens + visual + question = " + std::to_string(mandatory) +
                              " exceed per-page budget " + std::to_string(cfg.per_page_budget));
        if (!page.question_ids.empty()) {
            std::vector<std::optional<Box>> none(page.question_ids.size(), std::nullopt);
            segments.push_back(embedder.embed(page.question_ids, none));
        }
        std::size_t ocr_keep = std::min(page.ocr_ids.size(), cfg.per_page_budget - mandatory);
        if (ocr_keep > 0) {
            std::vector<std::size_t> ids(page.ocr_ids.begin(),
                                         page.ocr_ids.begin() + static_cast<std::ptrdiff_t>(ocr_keep));
            std::vector<std::optional<Box>> boxes;
            boxes.reserve(ocr_keep);
            for (std::size_t i = 0; i < ocr_keep; ++i) boxes.emplace_back(page.ocr_boxes[i]);
            segments.push_back(embedder.embed(ids, boxes));
        }
        Tensor input = segments.size() == 1 ? segments[0] : concat_rows(segments);
        std::size_t total = input.shape()[0];

        Tensor mask;
        const Tensor* mask_ptr = nullptr;
        if (ocr_visible != nullptr) {
            if (ocr_visible->size() != ocr_keep)
                throw ShapeError("encode_page: visibility mask must cover the kept OCR tokens");
            std::vector<double> m(total * total, 0.0);
            std::size_t ocr_base = total - ocr_keep;
            for (std::size_t j = 0; j < ocr_keep; ++j)
                if (!(*ocr_visible)[j])
                    for (std::size_t q = 0; q < total; ++q) m[q * total + ocr_base + j] = kMaskHidden;
            mask = Tensor::from_values({total, total}, std::move(m));
            mask_ptr = &mask;
        }
        Tensor encoded = encoder_forward(enc_layers, enc_final_norm, spec, enc_bias_table, input, mask_ptr, trace);
        return slice_rows(encoded, 0, cfg.page_tokens);
    }

    // ------------------------------------------------------------------
    // document forward
    // ------------------------------------------------------------------

    struct EncodedDocument {
        std::vector<Tensor> page_vectors;  // each [M, d]
        Tensor holistic;                   // D: [n_pages * M, d]
        std::vector<AttentionTrace> traces;
    };

    EncodedDocument encode_document(const std::vector<PageInput>& pages, bool collect_attention = false) const {
        if (pages.empty()) throw ValidationError("encode_document: no pages");
        if (pages.size() > cfg.max_pages)
            throw ValidationError("encode_document: " + std::to_string(pages.size()) + " pages exceed max of " +
                                  std::to_string(cfg.max_pages));
        EncodedDocument out;
        if (collect_attention) out.traces.resize(pages.size());
        for (std::size_t p = 0; p < pages.size(); ++p)
            out.page_vectors.push_back(encode_page(pages[p], nullptr, collect_attention ? &out.traces[p] : nullptr));
        out.holistic = pages.size() == 1 ? out.page_vectors[0] : concat_rows(out.page_vectors);
        if (out.holistic.shape()[0] > cfg.decoder_budget)
            throw ValidationError("encode_document: D of length " + std::to_string(out.holistic.shape()[0]) +
                                  " exceeds decoder budget " + std::to_string(cfg.decoder_budget));
        return out;
    }

    // One logit per page slot up to P_max. Pages beyond the document length
    // contribute zero pooled vectors, so with the indexed head their logits
    // are exactly the slot biases.
    Tensor page_head_logits(const std::vector<Tensor>& page_vectors) const {
        std::vector<Tensor> pooled;
        pooled.reserve(cfg.max_pages);
        for (const auto& pv : page_vectors) pooled.push_back(reshape(mean_axis0(pv), {1, cfg.d_model}));
        if (page_vectors.size() < cfg.max_pages)
            pooled.push_back(Tensor::zeros({cfg.max_pages - page_vectors.size(), cfg.d_model}));
        Tensor pools = pooled.size() == 1 ? pooled[0] : concat_rows(pooled);
        if (cfg.page_head == PageHeadKind::indexed) return add(rowwise_dot(pools, head_w), head_b);
        Tensor scores = reshape(matmul(pools, transpose(head_w, {1, 0})), {cfg.max_pages});
        Tensor bias = reshape(gather_rows(reshape(head_b, {1, 1}), std::vector<std::size_t>(cfg.max_pages, 0)),
                              {cfg.max_pages});
        return add(scores, bias);
    }

    Tensor decoder_logits(const Tensor& memory, const std::vector<std::size_t>& decoder_input_ids) const {
        Tensor emb = gather_rows(embedder.tok_table, decoder_input_ids);
        Tensor out = decoder_forward(dec_layers, dec_final_norm, spec, dec_bias_table, emb, memory);
        return matmul(out, transpose(embedder.tok_table, {1, 0}));  // tied output projection
    }

    // Teacher-forced forward: decoder input [<s>; answer], logits for every
    // step, page logits over all slots, inference-masked copies alongside.
    ModelOutput forward_document(const std::vector<PageInput>& pages, const std::vector<std::size_t>& answer_ids,
                                 bool collect_attention = false) const {
        EncodedDocument enc = encode_document(pages, collect_attention);
        std::vector<std::size_t> dec_in;
        dec_in.reserve(answer_ids.size() + 1);
        dec_in.push_back(Vocabulary::kStart);
        dec_in.insert(dec_in.end(), answer_ids.begin(), answer_ids.end());
        ModelOutput out;
        out.n_pages = pages.size();
        out.answer_logits = decoder_logits(enc.holistic, dec_in);
        out.page_logits = page_head_logits(enc.page_vectors);
        out.masked_page_logits = out.page_logits.values();
        for (std::size_t p = pages.size(); p < cfg.max_pages; ++p)
            out.masked_page_logits[p] = -std::numeric_limits<double>::infinity();
        out.encoder_attention = std::move(enc.traces);
        return out;
    }

    // ------------------------------------------------------------------
    // inference
    // ------------------------------------------------------------------

    struct Generation {
        std::string answer;
        std::vector<std::size_t> token_ids;  // without start/end
        std::size_t page_index = 0;          // argmax over present pages
        double confidence = 0.0;             // mean per-token log-probability
    };

    Generation generate(const std::vector<PageInput>& pages, std::size_t max_len = 8) const {
        NoGradGuard inference;
        EncodedDocument enc = encode_document(pages);
        Tensor plog = page_head_logits(enc.page_vectors);
        std::size_t best_page = 0;
        for (std::size_t p = 1; p < pages.size(); ++p)
            if (plog.values()[p] > plog.values()[best_page]) best_page = p;

        Generation gen;
        gen.page_index = best_page;
        std::vector<std::size_t> dec_in = {Vocabulary::kStart};
        double logp_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t step = 0; step < max_len; ++step) {
            Tensor logits = decoder_logits(enc.holistic, dec_in);
            std::size_t last = logits.shape()[0] - 1;
            const double* row = logits.values().data() + last * vocab.size();
            std::size_t best = 0;
            double mx = row[0];
            for (std::size_t j = 1; j < vocab.size(); ++j)
                if (row[j] > mx) mx = row[j], best = j;
            double denom = 0.0;
            for (std::size_t j = 0; j < vocab.size(); ++j) denom += std::exp(row[j] - mx);
            logp_sum += (row[best] - mx) - std::log(denom);
            ++steps;
            if (best == Vocabulary::kEnd) break;
            gen.token_ids.push_back(best);
            dec_in.push_back(best);
        }
        gen.confidence = steps == 0 ? 0.0 : logp_sum / static_cast<double>(steps);
        gen.answer = vocab.decode(gen.token_ids);
        return gen;
    }
};

// ---------------------------------------------------------------------------
// page input construction
// ---------------------------------------------------------------------------

inline std::vector<std::size_t> question_token_ids(const Vocabulary& vocab, const std::string& question) {
    std::vector<std::size_t> ids = {Vocabulary::kQaTask};
    for (std::size_t id : vocab.encode(question)) ids.push_back(id);
    return ids;
}

// OCR token texts can normalize into several words; each inherits the box.
inline PageInput make_page_input(const Vocabulary& vocab, const std::string& question, const Page& page,
                                 std::size_t page_index, bool with_image) {
    PageInput in;
    in.page_index = page_index;
    in.question_ids = question_token_ids(vocab, question);
    for (const auto& tok : page.tokens) {
        for (std::size_t id : vocab.encode(tok.text)) {
            in.ocr_ids.push_back(id);
            in.ocr_boxes.push_back(tok.box);
        }
    }
    if (with_image && page.image) in.image = &*page.image;
    return in;
}

inline std::vector<PageInput> make_document_inputs(const Vocabulary& vocab, const std::string& question,
                                                   const Document& doc, bool with_image) {
    std::vector<PageInput> pages;
    pages.reserve(doc.pages.size());
    for (std::size_t p = 0; p < doc.pages.size(); ++p)
        pages.push_back(make_page_input(vocab, question, doc.pages[p], p, with_image));
    return pages;
}

// ---------------------------------------------------------------------------
// config <-> text entries (checkpoint header, run config echo)
// ---------------------------------------------------------------------------

inline std::vector<std::pair<std::string, std::string>> config_to_entries(const HiVt5Config& c) {
    auto b = [](bool v) { return v ? std::string("true") : std::string("false"); };
    return {
        {"d_model", std::to_string(c.d_model)},
        {"n_enc_layers", std::to_string(c.n_enc_layers)},
        {"n_dec_layers", std::to_string(c.n_dec_layers)},
        {"n_heads", std::to_string(c.n_heads)},
        {"d_ff", std::to_string(c.d_ff)},
        {"vocab_size", std::to_string(c.vocab_size)},
        {"page_tokens", std::to_string(c.page_tokens)},
        {"per_page_budget", std::to_string(c.per_page_budget)},
        {"decoder_budget", std::to_string(c.decoder_budget)},
        {"max_pages", std::to_string(c.max_pages)},
        {"patch_size", std::to_string(c.patch_size)},
        {"use_visual", b(c.use_visual)},
        {"page_loss_weight", format_double(c.page_loss_weight)},
        {"coord_buckets", std::to_string(c.coord_buckets)},
        {"rel_buckets", std::to_string(c.rel_buckets)},
        {"rel_max_distance", std::to_string(c.rel_max_distance)},
        {"page_head", page_head_name(c.page_head)},
    };
}

inline HiVt5Config config_from_entries(const std::vector<std::pair<std::string, std::string>>& entries) {
    HiVt5Config c;
    for (const auto& [key, value] : entries) {
        auto n = [&]() { return static_cast<std::size_t>(std::stoull(value)); };
        if (key == "d_model") c.d_model = n();
        else if (key == "n_enc_layers") c.n_enc_layers = n();
        else if (key == "n_dec_layers") c.n_dec_layers = n();
        else if (key == "n_heads") c.n_heads = n();
        else if (key == "d_ff") c.d_ff = n();
        else if (key == "vocab_size") c.vocab_size = n();
        else if (key == "page_tokens") c.page_tokens = n();
        else if (key == "per_page_budget") c.per_page_budget = n();
        else if (key == "decoder_budget") c.decoder_budget = n();
        else if (key == "max_pages") c.max_pages = n();
        else if (key == "patch_size") c.patch_size = n();
        else if (key == "use_visual") c.use_visual = (value == "true");
        else if (key == "page_loss_weight") c.page_loss_weight = std::strtod(value.c_str(), nullptr);
        else if (key == "coord_buckets") c.coord_buckets = n();
        else if (key == "rel_buckets") c.rel_buckets = n();
        else if (key == "rel_max_distance") c.rel_max_distance = n();
        else if (key == "page_head") c.page_head = page_head_from(value);
        else throw ValidationError("config: unknown key '" + key + "'");
    }
    return c;
}

}  // namespace hivt5
