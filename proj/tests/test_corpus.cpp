// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "hivt5/corpus.hpp"

using namespace hivt5;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto p = fs::temp_directory_path() / "hivt5_corpus_test";
    fs::create_directories(p);
    return p;
}

Corpus tiny_corpus() {
    Corpus c;
    Document d;
    d.id = "doc00000";
    Page p;
    p.tokens.push_back({"hello", {0.1, 0.1, 0.2, 0.15}});
    p.tokens.push_back({"world", {0.3, 0.1, 0.4, 0.15}});
    d.pages.push_back(p);
    c.documents.push_back(d);
    QASample s;
    s.question = "what is next to hello";
    s.answers = {"world"};
    s.doc_id = "doc00000";
    s.answer_page_idx = 0;
    s.split = Split::train;
    c.samples.push_back(s);
    return c;
}

Document long_doc(const std::string& id, std::size_t pages) {
    Document d;
    d.id = id;
    for (std::size_t p = 0; p < pages; ++p) {
        Page page;
        page.tokens.push_back({"page" + std::to_string(p), {0.1, 0.1, 0.2, 0.15}});
        d.pages.push_back(page);
    }
    return d;
}

}  // namespace

TEST_CASE("minimal corpus round-trips identically through the JSON file") {
    Corpus c = tiny_corpus();
    auto path = temp_dir() / "mini.json";
    emit_corpus(c, path);
    Corpus back = ingest_corpus(path);
    CHECK(back == c);
}

TEST_CASE("ingest rejects out-of-range answer pages and malformed records") {
    Corpus c = tiny_corpus();
    c.samples[0].answer_page_idx = 3;
    auto j = corpus_to_json(c);
    CHECK_THROWS_AS(ingest_corpus_json(j), ValidationError);
    CHECK_THROWS_WITH(ingest_corpus_json(j), Catch::Matchers::ContainsSubstring("samples[0]"));

    auto j2 = corpus_to_json(tiny_corpus());
    j2["documents"][0]["pages"][0]["tokens"][0]["box"] = {0.5, 0.1, 0.2, 0.15};  // x0 > x1
    CHECK_THROWS_WITH(ingest_corpus_json(j2), Catch::Matchers::ContainsSubstring("tokens[0]"));

    auto j3 = corpus_to_json(tiny_corpus());
    j3.erase("format_version");
    CHECK_THROWS_AS(ingest_corpus_json(j3), ValidationError);

    auto j4 = corpus_to_json(tiny_corpus());
    j4["samples"][0]["split"] = "dev";
    CHECK_THROWS_AS(ingest_corpus_json(j4), ValidationError);
}

TEST_CASE("generator output ingests cleanly and round-trips over many seeds") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        SynthConfig cfg;
        cfg.n_docs = 4;
        cfg.pages_min = 1;
        cfg.pages_max = 5;
        cfg.tokens_per_page = 12;
        cfg.key_pool = 16;
        cfg.filler_words = 10;
        cfg.seed = seed;
        Corpus c = generate_synthetic(cfg);
        Corpus back = ingest_corpus_json(corpus_to_json(c));
        REQUIRE(back == c);
    }
}

TEST_CASE("generator is bit-deterministic in the seed") {
    SynthConfig cfg;
    cfg.n_docs = 6;
    cfg.seed = 42;
    cfg.key_pool = 12;
    Corpus a = generate_synthetic(cfg);
    Corpus b = generate_synthetic(cfg);
    CHECK(a == b);
    CHECK(corpus_to_json(a).dump() == corpus_to_json(b).dump());
    cfg.seed = 43;
    CHECK_FALSE(generate_synthetic(cfg) == a);
}

TEST_CASE("every planted answer appears verbatim in the OCR of its answer page") {
    SynthConfig cfg;
    cfg.n_docs = 40;
    cfg.qa_per_doc = 2;
    cfg.key_pool = 100;
    cfg.seed = 9;
    Corpus c = generate_synthetic(cfg);
    auto idx = c.doc_index();
    REQUIRE(c.samples.size() == 80);
    for (const auto& s : c.samples) {
        const auto& page = c.documents[idx.at(s.doc_id)].pages[s.answer_page_idx];
        bool found = false;
        for (const auto& tok : page.tokens) found = found || tok.text == s.answers[0];
        REQUIRE(found);
    }
}

TEST_CASE("generator enforces key uniqueness and pool capacity") {
    SynthConfig cfg;
    cfg.n_docs = 30;
    cfg.qa_per_doc = 1;
    cfg.key_pool = 20;
    CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);

    cfg.key_pool = 30;
    Corpus c = generate_synthetic(cfg);
    std::set<std::string> keys;
    for (const auto& s : c.samples) {
        auto words = Vocabulary::tokenize(s.question);
        keys.insert(words.back());
    }
    CHECK(keys.size() == c.samples.size());
}

TEST_CASE("answer page positions are uniform (chi-squared)") {
    SynthConfig cfg;
    cfg.n_docs = 10000;
    cfg.pages_min = cfg.pages_max = 8;
    cfg.tokens_per_page = 8;
    cfg.qa_per_doc = 1;
    cfg.key_pool = 10000;
    cfg.filler_words = 16;
    cfg.seed = 123;
    Corpus c = generate_synthetic(cfg);
    std::vector<double> counts(8, 0.0);
    for (const auto& s : c.samples) counts[s.answer_page_idx] += 1.0;
    double expected = 10000.0 / 8.0;
    double chi2 = 0.0;
    for (double n : counts) chi2 += (n - expected) * (n - expected) / expected;
    // df = 7; p > 0.01 means chi2 below the 0.99 quantile 18.475
    CHECK(chi2 < 18.475);
}

TEST_CASE("construct_multipage leaves short documents untouched") {
    Corpus raw = tiny_corpus();
    Rng rng(5);
    Corpus out = construct_multipage(raw, 20, rng);
    CHECK(out == raw);
}

TEST_CASE("construct_multipage cuts a 30-page document to 20 pages containing the answer") {
    Corpus raw;
    raw.documents.push_back(long_doc("big", 30));
    QASample s;
    s.question = "what is the date";
    s.answers = {"page17"};
    s.doc_id = "big";
    s.answer_page_idx = 17;
    raw.samples.push_back(s);

    Rng rng(7);
    Corpus out = construct_multipage(raw, 20, rng);
    REQUIRE(out.documents.size() == 1);
    REQUIRE(out.samples.size() == 1);
    const auto& doc = out.documents[0];
    const auto& ns = out.samples[0];
    CHECK(doc.pages.size() == 20);
    CHECK(ns.doc_id == doc.id);
    REQUIRE(ns.answer_page_idx < doc.pages.size());
    // remapped index addresses the same page content
    CHECK(doc.pages[ns.answer_page_idx].tokens[0].text == "page17");
}

TEST_CASE("construct_multipage remaps every sample onto identical page content") {
    Rng gen_rng(11);
    for (int trial = 0; trial < 25; ++trial) {
        Corpus raw;
        std::size_t n_pages = 21 + gen_rng.below(30);
        raw.documents.push_back(long_doc("d", n_pages));
        for (int q = 0; q < 3; ++q) {
            QASample s;
            s.doc_id = "d";
            s.answer_page_idx = gen_rng.below(n_pages);
            s.question = "q" + std::to_string(q);
            s.answers = {"page" + std::to_string(s.answer_page_idx)};
            raw.samples.push_back(s);
        }
        Rng rng(static_cast<std::uint64_t>(trial));
        Corpus out = construct_multipage(raw, 20, rng);
        auto idx = out.doc_index();
        for (const auto& s : out.samples) {
            const auto& doc = out.documents[idx.at(s.doc_id)];
            REQUIRE(doc.pages.size() <= 20);
            REQUIRE(doc.pages[s.answer_page_idx].tokens[0].text == s.answers[0]);
        }
    }
}

TEST_CASE("filter_ambiguous removes whole-word 'document' questions only") {
    std::vector<QASample> samples(4);
    samples[0].question = "What is the title of the document?";
    samples[1].question = "What is the date?";
    samples[2].question = "Who signed this documentation?";
    samples[3].question = "Which DOCUMENT mentions the total?";
    auto [kept, removed] = filter_ambiguous(samples);
    REQUIRE(removed.size() == 2);
    CHECK(removed[0].question == samples[0].question);
    CHECK(removed[1].question == samples[3].question);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].question == samples[1].question);
    CHECK(kept[1].question == samples[2].question);
    // partition property
    CHECK(kept.size() + removed.size() == samples.size());
    for (const auto& s : kept) CHECK_FALSE(contains_word(s.question, "document"));
}

TEST_CASE("split assignment is per-document, proportional and deterministic") {
    SynthConfig cfg;
    cfg.n_docs = 100;
    cfg.key_pool = 100;
    cfg.seed = 3;
    Corpus c = generate_synthetic(cfg);
    Rng rng(77);
    split_and_trim(c, 0.8, 0.1, 0.1, rng);

    std::unordered_map<std::string, Split> doc_split;
    for (const auto& s : c.samples) {
        auto it = doc_split.find(s.doc_id);
        if (it != doc_split.end())
            REQUIRE(it->second == s.split);
        else
            doc_split[s.doc_id] = s.split;
    }
    std::size_t n_train = 0, n_val = 0, n_test = 0;
    for (auto& [id, sp] : doc_split) {
        if (sp == Split::train) ++n_train;
        if (sp == Split::val) ++n_val;
        if (sp == Split::test) ++n_test;
    }
    CHECK(n_train == 80);
    CHECK(n_val == 10);
    CHECK(n_test == 10);

    Corpus c2 = generate_synthetic(cfg);
    Rng rng2(77);
    split_and_trim(c2, 0.8, 0.1, 0.1, rng2);
    CHECK(c == c2);

    Rng bad(1);
    CHECK_THROWS_AS(split_and_trim(c, 0.8, 0.3, 0.1, bad), ConfigError);
}

TEST_CASE("shorten_two_pages boundary and interior behavior") {
    Document doc = long_doc("d", 5);
    Rng rng(1);
    QASample s;
    s.doc_id = "d";

    s.answer_page_idx = 0;
    auto v = shorten_two_pages(s, doc, rng);
    CHECK(v.page_indices == std::vector<std::size_t>{0, 1});
    CHECK(v.answer_pos == 0);

    s.answer_page_idx = 4;
    v = shorten_two_pages(s, doc, rng);
    CHECK(v.page_indices == std::vector<std::size_t>{3, 4});
    CHECK(v.answer_pos == 1);

    Document single = long_doc("s", 1);
    s.answer_page_idx = 0;
    v = shorten_two_pages(s, single, rng);
    CHECK(v.page_indices == std::vector<std::size_t>{0});
    CHECK(v.answer_pos == 0);

    // interior: both sides drawn about equally often, answer page always kept
    s.answer_page_idx = 2;
    std::size_t prev = 0, post = 0;
    for (int i = 0; i < 4000; ++i) {
        auto view = shorten_two_pages(s, doc, rng);
        REQUIRE(view.page_indices.size() == 2);
        REQUIRE(view.page_indices[view.answer_pos] == 2);
        if (view.page_indices[0] == 1)
            ++prev;
        else
            ++post;
    }
    CHECK(prev + post == 4000);
    CHECK(std::abs(static_cast<double>(prev) / 4000.0 - 0.5) < 0.03);
}

TEST_CASE("reading order sorts by row band then x0") {
    Page p;
    p.tokens.push_back({"c", {0.8, 0.11, 0.9, 0.19}});
    p.tokens.push_back({"d", {0.1, 0.31, 0.2, 0.39}});
    p.tokens.push_back({"a", {0.1, 0.12, 0.2, 0.2}});
    p.tokens.push_back({"b", {0.4, 0.1, 0.5, 0.18}});
    p.sort_reading_order();
    std::vector<std::string> order;
    for (auto& t : p.tokens) order.push_back(t.text);
    CHECK(order == std::vector<std::string>{"a", "b", "c", "d"});
}

TEST_CASE("page images survive the JSON round trip") {
    Corpus c = tiny_corpus();
    PageImage img;
    img.h = 4;
    img.w = 3;
    img.pixels = {0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 255, 128};
    c.documents[0].pages[0].image = img;
    Corpus back = ingest_corpus_json(corpus_to_json(c));
    REQUIRE(back.documents[0].pages[0].image.has_value());
    CHECK(back == c);
}

TEST_CASE("base64 round-trips arbitrary byte strings") {
    Rng rng(99);
    for (int len = 0; len < 40; ++len) {
        std::vector<std::uint8_t> data(static_cast<std::size_t>(len));
        for (auto& b : data) b = static_cast<std::uint8_t>(rng.below(256));
        CHECK(base64_decode(base64_encode(data)) == data);
    }
    CHECK_THROWS_AS(base64_decode("abc"), ValidationError);
    CHECK_THROWS_AS(base64_decode("a!=="), ValidationError);
}

TEST_CASE("vocabulary: reserved layout, deterministic ids, encode/decode") {
    Corpus c = tiny_corpus();
    Vocabulary v = Vocabulary::build(c);
    CHECK(v.word(Vocabulary::kPad) == "<pad>");
    CHECK(v.word(Vocabulary::kStart) == "<s>");
    CHECK(v.word(Vocabulary::kEnd) == "</s>");
    CHECK(v.word(Vocabulary::kUnk) == "<unk>");
    CHECK(v.word(Vocabulary::kQaTask) == "<qa>");
    CHECK(v.word(Vocabulary::kPagePlaceholder) == "<page>");
    CHECK(v.word(Vocabulary::sentinel(0)) == "<x0>");
    CHECK(v.word(Vocabulary::sentinel(31)) == "<x31>");
    CHECK(v.size() > Vocabulary::kReserved);

    CHECK(v.id("hello") != Vocabulary::kUnk);
    CHECK(v.id("HELLO") == Vocabulary::kUnk);  // ids are for normalized words
    CHECK(v.id("missing") == Vocabulary::kUnk);
    auto ids = v.encode("Hello WORLD");
    CHECK(ids == std::vector<std::size_t>{v.id("hello"), v.id("world")});
    CHECK(v.decode(ids) == "hello world");

    Vocabulary same = Vocabulary::build(c);
    CHECK(v == same);

    Vocabulary restored = Vocabulary::from_words(v.words());
    CHECK(restored == v);
    auto broken = v.words();
    broken[2] = "<eos>";
    CHECK_THROWS_AS(Vocabulary::from_words(broken), ValidationError);
}

TEST_CASE("construction invariants hold end to end over many generated corpora") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        SynthConfig cfg;
        cfg.n_docs = 8;
        cfg.pages_min = 1;
        cfg.pages_max = 6;
        cfg.tokens_per_page = 12;
        cfg.key_pool = 20;
        cfg.qa_per_doc = 2;
        cfg.seed = seed;
        Corpus raw = generate_synthetic(cfg);
        // extra question wording exercising the keyword filter
        raw.samples[0].question = "what is the title of the document";
        // a long raw document with its own sample exercises the window rule
        raw.documents.push_back(long_doc("long" + std::to_string(seed), 25 + seed % 10));
        QASample ls;
        ls.doc_id = raw.documents.back().id;
        ls.answer_page_idx = 22;
        ls.question = "what is on the late page";
        ls.answers = {"page22"};
        raw.samples.push_back(ls);

        Rng rng(seed * 31 + 7);
        Corpus built = construct_multipage(raw, 20, rng);
        auto [kept, removed] = filter_ambiguous(built.samples);
        built.samples = kept;
        split_and_trim(built, 0.8, 0.1, 0.1, rng);

        auto idx = built.doc_index();
        for (const auto& d : built.documents) REQUIRE(d.pages.size() <= 20);
        for (const auto& s : built.samples) {
            REQUIRE(idx.count(s.doc_id) == 1);
            REQUIRE(s.answer_page_idx < built.documents[idx.at(s.doc_id)].pages.size());
            REQUIRE_FALSE(contains_word(s.question, "document"));
        }
        for (const auto& s : removed) REQUIRE(contains_word(s.question, "document"));
        std::unordered_map<std::string, Split> doc_split;
        for (const auto& s : built.samples) {
            auto it = doc_split.find(s.doc_id);
            if (it != doc_split.end())
                REQUIRE(it->second == s.split);
            else
                doc_split[s.doc_id] = s.split;
        }
    }
}
