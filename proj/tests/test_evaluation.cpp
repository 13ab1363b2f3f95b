// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "hivt5/evaluation.hpp"
#include "hivt5/training.hpp"

using namespace hivt5;
using testutil::tiny_setup;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto p = fs::temp_directory_path() / "hivt5_eval_test";
    fs::create_directories(p);
    return p;
}

// Brute-force edit distance by full-matrix recursion with memoization-free
// dynamic programming written independently of the two-row implementation.
std::size_t lev_oracle(const std::string& a, const std::string& b) {
    std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
    for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
    for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i)
        for (std::size_t j = 1; j <= b.size(); ++j) {
            std::size_t best = std::min(d[i - 1][j], d[i][j - 1]) + 1;
            best = std::min(best, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u));
            d[i][j] = best;
        }
    return d[a.size()][b.size()];
}

std::string random_string(Rng& rng, std::size_t max_len) {
    std::string s;
    std::size_t len = rng.below(max_len + 1);
    for (std::size_t i = 0; i < len; ++i) s += static_cast<char>('a' + rng.below(3));
    return s;
}

// Trains one small model on a seven-doc corpus until it memorizes it; shared
// across the test cases that need a trained model.
struct TrainedFixture {
    testutil::TinySetup setup;
    HiVt5Model model;

    // Several planted pairs per document make the question load-bearing: the
    // encoder has to read the queried pair off the page instead of rote-
    // learning one answer per document.
    TrainedFixture() : setup(make_setup()), model(make_model(setup)) {
        TrainConfig tcfg;
        tcfg.batch_size = 8;
        tcfg.lr = 3e-3;
        tcfg.warmup_steps = 20;
        tcfg.seed = 13;
        // the full recipe: single-page denoising first, then the QA stage
        Trainer pre(model, setup.corpus, tcfg, Stage::pretrain);
        for (int i = 0; i < 300; ++i) pre.pretrain_step();
        Trainer trainer(model, setup.corpus, tcfg, Stage::train);
        for (int i = 0; i < 2500; ++i) trainer.train_step();
    }

    static testutil::TinySetup make_setup() {
        auto s = tiny_setup(71, 30, 1, 2);
        s.synth.qa_per_doc = 2;
        s.synth.key_pool = 60;
        s.synth.tokens_per_page = 16;
        s.corpus = hivt5::generate_synthetic(s.synth);
        s.vocab = hivt5::Vocabulary::build(s.corpus);
        return s;
    }

    static HiVt5Model make_model(testutil::TinySetup& s) {
        s.config.d_model = 32;
        s.config.n_enc_layers = 2;  // key matching and value copying need two hops
        s.config.n_dec_layers = 2;
        s.config.n_heads = 2;
        s.config.page_tokens = 2;
        Rng rng(71);
        return HiVt5Model(s.config, s.vocab, rng);
    }
};

const TrainedFixture& trained() {
    static TrainedFixture f;
    return f;
}

}  // namespace

TEST_CASE("levenshtein basic cases") {
    CHECK(levenshtein("", "abc") == 3);
    CHECK(levenshtein("abc", "") == 3);
    CHECK(levenshtein("kitten", "sitting") == 3);
    CHECK(levenshtein("november 8 1977", "november 8, 1977") == 1);
    CHECK(levenshtein("same", "same") == 0);
}

TEST_CASE("levenshtein agrees with an independent full-matrix oracle and is a metric") {
    Rng rng(2025);
    for (int trial = 0; trial < 300; ++trial) {
        std::string a = random_string(rng, 12);
        std::string b = random_string(rng, 12);
        std::string c = random_string(rng, 12);
        std::size_t ab = levenshtein(a, b);
        REQUIRE(ab == lev_oracle(a, b));
        REQUIRE(ab == levenshtein(b, a));                       // symmetry
        REQUIRE((ab == 0) == (a == b));                         // identity
        REQUIRE(levenshtein(a, c) <= ab + levenshtein(b, c));   // triangle
    }
}

TEST_CASE("answer normalization: lowercase, trim, collapse whitespace") {
    CHECK(normalize_answer("  Val7  ") == "val7");
    CHECK(normalize_answer("A\t B\n C") == "a b c");
    CHECK(normalize_answer("") == "");
    CHECK(exact_match(" A  B ", {"a b"}));
}

TEST_CASE("anls: exact match, paper-derived near miss, threshold rule") {
    CHECK(anls({"val7"}, {{"val7"}}) == 1.0);

    double sim = answer_similarity("november 8 1977", "november 8, 1977");
    CHECK_THAT(sim, Catch::Matchers::WithinAbs(0.9375, 1e-12));  // 1 - 1/16
    CHECK_THAT(anls({"november 8 1977"}, {{"november 8, 1977"}}), Catch::Matchers::WithinAbs(0.9375, 1e-12));

    // similarity below tau contributes zero
    std::string far = "zzzzzzzzzz";
    REQUIRE(answer_similarity(far, "val7") < 0.5);
    CHECK(anls({far}, {{"val7"}}) == 0.0);
}

TEST_CASE("anls with tau=0 equals mean similarity and is non-increasing in tau") {
    Rng rng(31);
    std::vector<std::string> preds;
    std::vector<std::vector<std::string>> truths;
    for (int i = 0; i < 40; ++i) {
        preds.push_back(random_string(rng, 10));
        truths.push_back({random_string(rng, 10)});
    }
    double mean_sim = 0.0;
    for (int i = 0; i < 40; ++i) mean_sim += best_similarity(preds[static_cast<std::size_t>(i)],
                                                             truths[static_cast<std::size_t>(i)]);
    mean_sim /= 40.0;
    CHECK_THAT(anls(preds, truths, 0.0), Catch::Matchers::WithinAbs(mean_sim, 1e-12));

    double prev = 1e9;
    for (double tau : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        double v = anls(preds, truths, tau);
        CHECK(v <= prev + 1e-15);
        prev = v;
    }
}

TEST_CASE("accuracy never exceeds anls for the same predictions") {
    Rng rng(33);
    std::vector<std::string> preds;
    std::vector<std::vector<std::string>> truths;
    for (int i = 0; i < 60; ++i) {
        std::string t = random_string(rng, 8);
        std::string p = rng.below(2) == 0 ? t : random_string(rng, 8);
        preds.push_back(p);
        truths.push_back({t});
    }
    CHECK(exact_accuracy(preds, truths) <= anls(preds, truths) + 1e-12);
}

TEST_CASE("exact and page accuracy arithmetic") {
    CHECK(exact_accuracy({"a", "b"}, {{"a"}, {"b"}}) == 1.0);
    CHECK(exact_accuracy({"a", "b"}, {{"x"}, {"y"}}) == 0.0);
    CHECK_THAT(exact_accuracy({"a", "b", "c", "d"}, {{"a"}, {"b"}, {"c"}, {"x"}}),
               Catch::Matchers::WithinAbs(0.75, 1e-12));
    CHECK(page_accuracy({1, 2, 3}, {1, 2, 3}) == 1.0);
    CHECK(page_accuracy({1, 2, 3}, {0, 0, 0}) == 0.0);
    CHECK_THAT(page_accuracy({1, 0, 3, 4}, {1, 2, 3, 4}), Catch::Matchers::WithinAbs(0.75, 1e-12));
}

TEST_CASE("single-page documents: every setup produces the same answer") {
    auto s = tiny_setup(61, 6, 1, 1);
    Rng rng(61);
    HiVt5Model model(s.config, s.vocab, rng);
    for (auto setup : {SetupKind::oracle, SetupKind::concat, SetupKind::max_conf, SetupKind::hierarchical}) {
        auto out = evaluate(model, s.corpus, Split::train, setup, 256);
        REQUIRE(out.report.n_samples == s.corpus.samples.size());
    }
    auto oracle = evaluate(model, s.corpus, Split::train, SetupKind::oracle, 256);
    auto concat = evaluate(model, s.corpus, Split::train, SetupKind::concat, 256);
    auto maxconf = evaluate(model, s.corpus, Split::train, SetupKind::max_conf, 256);
    auto hier = evaluate(model, s.corpus, Split::train, SetupKind::hierarchical, 256);
    for (std::size_t i = 0; i < oracle.results.size(); ++i) {
        CHECK(oracle.results[i].prediction == concat.results[i].prediction);
        CHECK(oracle.results[i].prediction == maxconf.results[i].prediction);
        CHECK(oracle.results[i].prediction == hier.results[i].prediction);
    }
}

TEST_CASE("breakdown rows partition the samples; confusion quadrants sum to n") {
    auto s = tiny_setup(62, 8, 2, 3);
    Rng rng(62);
    HiVt5Model model(s.config, s.vocab, rng);
    auto out = evaluate(model, s.corpus, Split::train, SetupKind::hierarchical, 256);
    std::size_t total = 0;
    for (const auto& row : out.report.breakdown) total += row.n;
    CHECK(total == out.report.n_samples);
    CHECK(out.confusion.both + out.confusion.answer_only + out.confusion.page_only + out.confusion.neither ==
          out.report.n_samples);

    // all answers forced onto page 0 -> single row covering everything
    Corpus single = s.corpus;
    for (auto& sample : single.samples) sample.answer_page_idx = 0;
    auto out0 = evaluate(model, single, Split::train, SetupKind::oracle, 256);
    REQUIRE(out0.report.breakdown.size() == 1);
    CHECK(out0.report.breakdown[0].answer_page == 0);
    CHECK(out0.report.breakdown[0].n == out0.report.n_samples);
}

TEST_CASE("evaluate is deterministic for a fixed model, corpus, setup and budget") {
    auto s = tiny_setup(63, 6, 2, 2);
    Rng rng(63);
    HiVt5Model model(s.config, s.vocab, rng);
    auto a = evaluate(model, s.corpus, Split::train, SetupKind::max_conf, 128);
    auto b = evaluate(model, s.corpus, Split::train, SetupKind::max_conf, 128);
    REQUIRE(a.results.size() == b.results.size());
    for (std::size_t i = 0; i < a.results.size(); ++i) {
        CHECK(a.results[i].prediction == b.results[i].prediction);
        CHECK(a.results[i].predicted_page == b.results[i].predicted_page);
        CHECK(a.results[i].confidence == b.results[i].confidence);
    }
    CHECK_THROWS_AS(evaluate(model, s.corpus, Split::train, SetupKind::concat, 0), ValidationError);
}

TEST_CASE("trained model memorizes its corpus: generation reproduces planted answers") {
    const auto& f = trained();
    auto out = evaluate(f.model, f.setup.corpus, Split::train, SetupKind::hierarchical, 256);
    CHECK(out.report.accuracy >= 0.85);
    CHECK(out.report.anls >= out.report.accuracy - 1e-12);

    // the first sample verbatim
    const auto& sample = f.setup.corpus.samples[0];
    auto pages = testutil::sample_inputs(f.setup, sample);
    auto gen = f.model.generate(pages, 6);
    CHECK(gen.answer == sample.answers[0]);
}

TEST_CASE("oracle is at least as strong as hierarchical on similarity") {
    const auto& f = trained();
    auto oracle = evaluate(f.model, f.setup.corpus, Split::train, SetupKind::oracle, 256);
    auto hier = evaluate(f.model, f.setup.corpus, Split::train, SetupKind::hierarchical, 256);
    CHECK(oracle.report.anls >= hier.report.anls - 1e-9);
    CHECK(oracle.report.page_accuracy == 1.0);  // defined as the annotated page
}

TEST_CASE("memorized question scores at least the confidence of a shuffled question") {
    const auto& f = trained();
    const auto& s0 = f.setup.corpus.samples[0];
    // a question whose key lives in a different document: unanswerable here
    const QASample* other = nullptr;
    for (const auto& s : f.setup.corpus.samples)
        if (s.doc_id != s0.doc_id) {
            other = &s;
            break;
        }
    REQUIRE(other != nullptr);
    auto own = f.model.generate(testutil::sample_inputs(f.setup, s0), 6);
    QASample crossed = s0;
    crossed.question = other->question;
    auto foreign = f.model.generate(testutil::sample_inputs(f.setup, crossed), 6);
    CHECK(own.confidence >= foreign.confidence - 1e-9);
}

TEST_CASE("attention of some page-summary row lands on the planted answer for most samples") {
    const auto& f = trained();
    const auto& corpus = f.setup.corpus;
    std::size_t probed = 0, hits = 0;
    for (const auto& sample : corpus.samples) {
        const auto& doc = corpus.document(sample.doc_id);
        auto pages = testutil::sample_inputs(f.setup, sample);
        const auto& page = pages[sample.answer_page_idx];
        // key position of the planted answer inside the page sequence
        std::size_t answer_id = f.model.vocab.id(sample.answers[0]);
        std::size_t answer_pos = page.ocr_ids.size();
        for (std::size_t i = 0; i < page.ocr_ids.size(); ++i)
            if (page.ocr_ids[i] == answer_id) answer_pos = i;
        REQUIRE(answer_pos < page.ocr_ids.size());
        std::size_t key = f.model.cfg.page_tokens + page.question_ids.size() + answer_pos;

        NoGradGuard inference;
        AttentionTrace trace;
        f.model.encode_page(page, nullptr, &trace);
        bool hit = false;
        for (std::size_t layer = 0; layer < trace.weights.size(); ++layer)
            for (std::size_t h = 0; h < trace.n_heads; ++h)
                for (std::size_t q = 0; q < f.model.cfg.page_tokens; ++q) {
                    const double* row = trace.weights[layer].data() + h * trace.q_len * trace.k_len + q * trace.k_len;
                    std::size_t arg = 0;
                    for (std::size_t k = 1; k < trace.k_len; ++k)
                        if (row[k] > row[arg]) arg = k;
                    hit = hit || arg == key;
                }
        ++probed;
        if (hit) ++hits;
    }
    INFO("answer-attention hits: " << hits << "/" << probed);
    CHECK(hits * 2 >= probed);  // at least half of the probed samples
}

TEST_CASE("attention dumps: softmax rows, M x sequence shape, expected files") {
    const auto& f = trained();
    const auto& sample = f.setup.corpus.samples[2];
    auto pages = testutil::sample_inputs(f.setup, sample);
    auto dir = temp_dir() / "attn";
    fs::remove_all(dir);
    dump_attention(f.model, pages, sample.answer_page_idx, dir);

    std::size_t files = 0;
    for (auto& e : fs::directory_iterator(dir)) {
        ++files;
        auto text = read_file(e.path());
        std::size_t rows = 0;
        double row_sum = 0.0;
        std::size_t cols = 0, expect_cols = 0;
        std::string cell;
        for (char c : text) {
            if (c == ',' || c == '\n') {
                row_sum += std::strtod(cell.c_str(), nullptr);
                cell.clear();
                ++cols;
                if (c == '\n') {
                    REQUIRE_THAT(row_sum, Catch::Matchers::WithinAbs(1.0, 1e-6));
                    if (expect_cols == 0) expect_cols = cols;
                    REQUIRE(cols == expect_cols);
                    row_sum = 0.0;
                    cols = 0;
                    ++rows;
                }
            } else {
                cell += c;
            }
        }
        REQUIRE(rows == f.model.cfg.page_tokens);
    }
    CHECK(files == f.model.cfg.n_enc_layers * f.model.cfg.n_heads);
}

TEST_CASE("report files: json schema, csv headers, svg bars") {
    const auto& f = trained();
    auto out = evaluate(f.model, f.setup.corpus, Split::train, SetupKind::hierarchical, 256);
    auto dir = temp_dir();
    write_report_json(dir / "report.json", out.report);
    write_breakdown_csv(dir / "breakdown.csv", out.report.breakdown);
    write_confusion_csv(dir / "confusion.csv", out.confusion);
    write_breakdown_svg(dir / "breakdown.svg", out.report.breakdown);

    auto j = nlohmann::json::parse(read_file(dir / "report.json"));
    for (const char* key : {"accuracy", "anls", "page_accuracy", "n_samples", "breakdown"}) REQUIRE(j.contains(key));
    CHECK(j["n_samples"].get<std::size_t>() == out.report.n_samples);
    CHECK(j["breakdown"].size() == out.report.breakdown.size());

    auto csv = read_file(dir / "breakdown.csv");
    CHECK(csv.rfind("answer_page,n,accuracy,anls,page_accuracy\n", 0) == 0);
    auto conf = read_file(dir / "confusion.csv");
    CHECK(conf.rfind("answer_correct,page_correct,count\n", 0) == 0);
    CHECK(std::count(conf.begin(), conf.end(), '\n') == 5);

    auto svg = read_file(dir / "breakdown.svg");
    CHECK(svg.find("<svg") != std::string::npos);
    std::size_t rects = 0;
    for (std::size_t pos = 0; (pos = svg.find("<rect", pos)) != std::string::npos; ++pos) ++rects;
    // background + 3 legend swatches + 3 bars per breakdown row
    CHECK(rects == 1 + 3 + 3 * out.report.breakdown.size());
}
