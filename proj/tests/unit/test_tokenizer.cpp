#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "relectra/tokenizer.hpp"
#include "support/oracles.hpp"

using namespace relectra;
using tok::Vocab;

namespace {

std::size_t budget_for_merges(const std::string& corpus, std::size_t n_merges) {
    // vocab_size = specials + alphabet + wanted merges
    std::set<std::string> alphabet;
    std::istringstream in(corpus);
    std::string w;
    while (in >> w) {
        for (auto& c : tok::utf8_chars(tok::ascii_lower(w))) alphabet.insert(c);
    }
    alphabet.insert(tok::kWordEnd);
    return tok::default_specials().size() + alphabet.size() + n_merges;
}

}  // namespace

TEST_CASE("train_bpe worked example: ab ab ac") {
    std::string corpus = "ab ab ac";
    Vocab v = tok::train_bpe(corpus, budget_for_merges(corpus, 2));
    REQUIRE(v.merges.size() == 2);
    CHECK(v.merges[0] == std::pair<std::string, std::string>("a", "b"));
    CHECK(v.merges[1] == std::pair<std::string, std::string>("ab", "</w>"));
}

TEST_CASE("train_bpe degenerate budgets") {
    std::string corpus = "ab ab ac";
    // Exactly alphabet + specials: zero merges, character-level vocab.
    Vocab v = tok::train_bpe(corpus, budget_for_merges(corpus, 0));
    CHECK(v.merges.empty());
    // Below that is a configuration error; an empty corpus is a data error.
    CHECK_THROWS_AS(tok::train_bpe(corpus, 3), ConfigError);
    CHECK_THROWS_AS(tok::train_bpe(std::string("   "), 100), DataError);
}

TEST_CASE("train_bpe with no repeating pairs makes no merges") {
    // every word is a unique single character
    Vocab v = tok::train_bpe(std::string("a b c d"), 100);
    CHECK(v.merges.empty());
    CHECK(v.size() == 5 + 5);  // specials + {a,b,c,d,</w>}
}

TEST_CASE("encode applies merges and maps unknown symbols to [UNK]") {
    std::string corpus = "ab ab ac";
    Vocab v = tok::train_bpe(corpus, budget_for_merges(corpus, 2));
    tok::TokenSequence seq = tok::encode("ab", v, false);
    REQUIRE(seq.ids.size() == 1);
    CHECK(v.token(seq.ids[0]) == "ab</w>");

    tok::TokenSequence empty = tok::encode("", v, false);
    CHECK(empty.ids.empty());
    tok::TokenSequence wrapped = tok::encode("", v, true);
    REQUIRE(wrapped.ids.size() == 2);
    CHECK(wrapped.ids[0] == v.cls_id());
    CHECK(wrapped.ids[1] == v.sep_id());

    tok::TokenSequence unk = tok::encode("axb", v, false);
    bool has_unk = false;
    for (int id : unk.ids) has_unk = has_unk || id == v.unk_id();
    CHECK(has_unk);
}

TEST_CASE("offsets are monotone and non-overlapping") {
    std::string corpus = "ab ab ac";
    Vocab v = tok::train_bpe(corpus, budget_for_merges(corpus, 2));
    std::string text = "ab ac ab";
    tok::TokenSequence seq = tok::encode(text, v, true);
    std::ptrdiff_t prev_end = 0;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
        auto [b, e] = seq.offsets[i];
        if (b < 0) continue;  // special sentinel
        CHECK(b >= prev_end);
        CHECK(e >= b);
        prev_end = e;
    }
}

TEST_CASE("decode inverts encode; specials are stripped") {
    std::string corpus = "the cat sat on the mat";
    Vocab v = tok::train_bpe(corpus, budget_for_merges(corpus, 8));
    CHECK(tok::decode(tok::encode("the cat sat", v, true).ids, v) == "the cat sat");
    CHECK(tok::decode({}, v) == "");
    CHECK(tok::decode({v.cls_id()}, v) == "");
    CHECK_THROWS_AS(tok::decode({static_cast<int>(v.size()) + 5}, v), IndexError);
}

TEST_CASE("round trip property over random alphabet-constrained strings") {
    Rng rng(99);
    std::string corpus = testutil::random_text(rng, 200, 5, "abcde");
    Vocab v = tok::train_bpe(corpus, budget_for_merges(corpus, 30));
    for (int iter = 0; iter < 200; ++iter) {
        std::string text = testutil::random_text(rng, 1 + rng.bounded(12), 5, "abcde");
        CHECK(tok::decode(tok::encode(text, v, iter % 2 == 0).ids, v) == text);
    }
}

TEST_CASE("merge list matches the recount-from-scratch oracle") {
    Rng rng(123);
    for (int iter = 0; iter < 20; ++iter) {
        std::string corpus = testutil::random_text(rng, 10 + rng.bounded(41), 6, "abcd");
        std::size_t n_merges = 1 + rng.bounded(20);
        Vocab v = tok::train_bpe(corpus, budget_for_merges(corpus, n_merges));
        auto oracle = testutil::bpe_oracle_merges(corpus, n_merges);
        REQUIRE(v.merges.size() == oracle.size());
        for (std::size_t i = 0; i < oracle.size(); ++i) {
            INFO("corpus: " << corpus << " merge " << i);
            CHECK(v.merges[i] == oracle[i]);
        }
    }
}

TEST_CASE("monotone merge budget: budget k merges prefix budget k+1") {
    Rng rng(321);
    std::string corpus = testutil::random_text(rng, 60, 6, "abc");
    for (std::size_t k = 0; k < 12; ++k) {
        Vocab a = tok::train_bpe(corpus, budget_for_merges(corpus, k));
        Vocab b = tok::train_bpe(corpus, budget_for_merges(corpus, k + 1));
        REQUIRE(a.merges.size() <= b.merges.size());
        for (std::size_t i = 0; i < a.merges.size(); ++i) CHECK(a.merges[i] == b.merges[i]);
    }
}

TEST_CASE("token count bound: tokens <= characters + words") {
    // The standalone </w> symbol adds at most one token per word.
    Rng rng(77);
    std::string corpus = testutil::random_text(rng, 100, 6, "abcd");
    Vocab v = tok::train_bpe(corpus, budget_for_merges(corpus, 10));
    for (int iter = 0; iter < 50; ++iter) {
        std::string text = testutil::random_text(rng, 1 + rng.bounded(20), 6, "abcd");
        auto seq = tok::encode(text, v, false);
        std::size_t chars = tok::utf8_chars(text).size();
        std::size_t words = tok::split_words(text).size();
        CHECK(seq.ids.size() <= chars + words);
    }
}

TEST_CASE("evaluate_tokenization counts unique split words") {
    // Vocab that knows "ab" fully but splits everything else.
    std::string corpus = "ab ab ab ab";
    Vocab v = tok::train_bpe(corpus, budget_for_merges(corpus, 2));

    SECTION("all words whole -> zero errors") {
        auto rep = tok::evaluate_tokenization("ab ab", v);
        CHECK(rep.word_count == 2);
        CHECK(rep.total_errors == 0);
    }
    SECTION("5 words, 2 split forms, 1 allowlisted -> 1 error") {
        // "aa" and "bb" split; "aa" is allowlisted.
        auto rep = tok::evaluate_tokenization("ab aa bb ab ab", v, {"aa"});
        CHECK(rep.word_count == 5);
        CHECK(rep.total_errors == 1);
        REQUIRE(rep.error_words.size() == 1);
        CHECK(rep.error_words[0] == "bb");
    }
    SECTION("lexicon attribution") {
        auto rep = tok::evaluate_tokenization("ab orthopnea bb", v, {}, {"bb"}, {"orthopnea"});
        CHECK(rep.total_errors == 2);
        CHECK(rep.legal_errors == 1);
        CHECK(rep.medical_errors >= 1);
        CHECK(rep.legal_errors + rep.medical_errors <= rep.total_errors);
    }
    SECTION("duplicates count once") {
        auto rep = tok::evaluate_tokenization("bb bb bb", v);
        CHECK(rep.word_count == 3);
        CHECK(rep.total_errors == 1);
    }
}

TEST_CASE("vocab save/load round trip") {
    std::string corpus = "the cat sat on the mat and the dog sat too";
    Vocab v = tok::train_bpe(corpus, budget_for_merges(corpus, 12));
    std::string path = (std::filesystem::temp_directory_path() / "relectra_vocab_test.txt").string();
    tok::save_vocab(v, path);
    Vocab w = tok::load_vocab(path);
    std::remove(path.c_str());

    CHECK(w.merges == v.merges);
    CHECK(w.specials == v.specials);
    CHECK(w.alphabet == v.alphabet);
    CHECK(w.lowercase == v.lowercase);
    CHECK(w.size() == v.size());
    // Same id maps -> identical encodes.
    std::string text = "the dog sat on the mat";
    CHECK(tok::encode(text, w, true).ids == tok::encode(text, v, true).ids);
}

TEST_CASE("uppercase input is lowercased by default") {
    std::string corpus = "ab ab ac";
    Vocab v = tok::train_bpe(corpus, budget_for_merges(corpus, 2));
    CHECK(tok::encode("AB", v, false).ids == tok::encode("ab", v, false).ids);
}
