// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "hivt5/corpus.hpp"
#include "hivt5/model.hpp"

namespace testutil {

struct TinySetup {
    hivt5::SynthConfig synth;
    hivt5::Corpus corpus;
    hivt5::Vocabulary vocab;
    hivt5::HiVt5Config config;
};

inline TinySetup tiny_setup(std::uint64_t seed = 7, std::size_t n_docs = 12, std::size_t pages_min = 2,
                            std::size_t pages_max = 3, bool images = false) {
    TinySetup s;
    s.synth.n_docs = n_docs;
    s.synth.pages_min = pages_min;
    s.synth.pages_max = pages_max;
    s.synth.tokens_per_page = 12;
    s.synth.qa_per_doc = 1;
    s.synth.key_pool = n_docs;
    s.synth.filler_words = 12;
    s.synth.images = images;
    s.synth.image_size = 32;
    s.synth.seed = seed;
    s.corpus = hivt5::generate_synthetic(s.synth);
    s.vocab = hivt5::Vocabulary::build(s.corpus);
    s.config.d_model = 16;
    s.config.n_enc_layers = 1;
    s.config.n_dec_layers = 1;
    s.config.n_heads = 2;
    s.config.page_tokens = 2;
    s.config.per_page_budget = 64;
    s.config.decoder_budget = 64;
    s.config.max_pages = 20;
    s.config.patch_size = 16;
    s.config.use_visual = images;
    s.config.coord_buckets = 16;
    s.config.rel_buckets = 16;
    s.config.rel_max_distance = 32;
    return s;
}

inline std::vector<hivt5::PageInput> sample_inputs(const TinySetup& s, const hivt5::QASample& sample) {
    const auto& doc = s.corpus.document(sample.doc_id);
    return hivt5::make_document_inputs(s.vocab, sample.question, doc, s.config.use_visual);
}

}  // namespace testutil
