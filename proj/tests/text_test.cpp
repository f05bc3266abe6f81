#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "cat/errors.hpp"
#include "cat/text.hpp"

using namespace cat;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name, const std::string& content)
        : path("text_test_" + name) {
        std::ofstream out(path);
        out << content;
    }
    ~TempFile() { std::remove(path.c_str()); }
};

Dataset toy_dataset(int labels, int per_label) {
    Dataset ds;
    for (int l = 0; l < labels; ++l) ds.label_names.push_back("label" + std::to_string(l));
    for (int l = 0; l < labels; ++l)
        for (int i = 0; i < per_label; ++i) {
            Example ex;
            ex.text = "word" + std::to_string(l) + " filler" + std::to_string(i);
            ex.label = l;
            ds.examples.push_back(ex);
        }
    return ds;
}

}  // namespace

TEST_CASE("tokenize lowercases and splits on whitespace and punctuation") {
    CHECK(tokenize("Hello, World!") == std::vector<std::string>{"hello", "world"});
    CHECK(tokenize("a  b\tc\nd") == std::vector<std::string>{"a", "b", "c", "d"});
    CHECK(tokenize("don't-stop") == std::vector<std::string>{"don", "t", "stop"});
    CHECK(tokenize("") == std::vector<std::string>{});
    CHECK(tokenize("...") == std::vector<std::string>{});
    CHECK(tokenize("Book2 tickets") == std::vector<std::string>{"book2", "tickets"});
}

TEST_CASE("build_vocab sizes and ordering") {
    std::vector<std::string> corpus = {"a b", "a c"};
    SUBCASE("min_freq 1 keeps all tokens") {
        Vocab v = build_vocab(corpus, 1);
        CHECK(v.size() == 7);
    }
    SUBCASE("min_freq 2 keeps only repeated tokens") {
        Vocab v = build_vocab(corpus, 2);
        CHECK(v.size() == 5);
        CHECK(v.id_of("a") == 4);
        CHECK(v.id_of("b") == Vocab::kUnk);
    }
    SUBCASE("empty corpus is rejected") {
        CHECK_THROWS_AS(build_vocab(std::vector<std::string>{}, 1), std::invalid_argument);
    }
    SUBCASE("ids ordered by frequency descending then token ascending") {
        std::vector<std::string> c2 = {"zeta zeta apple", "mango apple"};
        Vocab v = build_vocab(c2, 1);
        CHECK(v.id_of("apple") == 4);
        CHECK(v.id_of("zeta") == 5);
        CHECK(v.id_of("mango") == 6);
    }
    SUBCASE("reserved tokens keep their ids") {
        Vocab v = build_vocab(corpus, 1);
        CHECK(v.token_of(0) == "[PAD]");
        CHECK(v.token_of(1) == "[CLS]");
        CHECK(v.token_of(2) == "[SEP]");
        CHECK(v.token_of(3) == "[UNK]");
    }
}

TEST_CASE("encode framing") {
    std::vector<std::string> corpus = {"book a flight", "p h"};
    Vocab v = build_vocab(corpus, 1);

    SUBCASE("single segment") {
        TokenSequence s = encode("book a flight", std::nullopt, v, 128);
        REQUIRE(s.ids.size() == 5);
        CHECK(s.ids[0] == Vocab::kCls);
        CHECK(s.ids[1] == v.id_of("book"));
        CHECK(s.ids[2] == v.id_of("a"));
        CHECK(s.ids[3] == v.id_of("flight"));
        CHECK(s.ids[4] == Vocab::kSep);
        CHECK(s.mask == std::vector<uint8_t>(5, 1));
    }
    SUBCASE("over-long input keeps the left prefix") {
        std::string longtext;
        for (int i = 0; i < 200; ++i) longtext += "book ";
        TokenSequence s = encode(longtext, std::nullopt, v, 128);
        REQUIRE(s.ids.size() == 128);
        CHECK(s.ids[0] == Vocab::kCls);
        CHECK(s.ids[127] == Vocab::kSep);
        for (size_t i = 1; i < 127; ++i) CHECK(s.ids[i] == v.id_of("book"));
    }
    SUBCASE("pair gets a separator between segments and a trailing one") {
        TokenSequence s = encode("p", std::optional<std::string>("h"), v, 128);
        REQUIRE(s.ids.size() == 5);
        CHECK(s.ids[0] == Vocab::kCls);
        CHECK(s.ids[1] == v.id_of("p"));
        CHECK(s.ids[2] == Vocab::kSep);
        CHECK(s.ids[3] == v.id_of("h"));
        CHECK(s.ids[4] == Vocab::kSep);
    }
    SUBCASE("unknown tokens map to [UNK]") {
        TokenSequence s = encode("zzz", std::nullopt, v, 128);
        CHECK(s.ids[1] == Vocab::kUnk);
    }
    SUBCASE("max_len below 3 is rejected") {
        CHECK_THROWS_AS(encode("a", std::nullopt, v, 2), std::invalid_argument);
    }
    SUBCASE("in-vocabulary round trip") {
        TokenSequence s = encode("book a flight", std::nullopt, v, 128);
        std::vector<std::string> back;
        for (size_t i = 1; i + 1 < s.ids.size(); ++i) back.push_back(v.token_of(s.ids[i]));
        CHECK(back == tokenize("book a flight"));
    }
}

TEST_CASE("make_batches") {
    Dataset ds = toy_dataset(4, 25);
    std::vector<std::string> corpus;
    for (const Example& ex : ds.examples) corpus.push_back(ex.text);
    Vocab v = build_vocab(corpus, 1);

    SUBCASE("100 examples at batch 32 give sizes 32,32,32,4") {
        auto batches = make_batches(ds, v, 16, 32, 7, true);
        REQUIRE(batches.size() == 4);
        CHECK(batches[0].n == 32);
        CHECK(batches[1].n == 32);
        CHECK(batches[2].n == 32);
        CHECK(batches[3].n == 4);
    }
    SUBCASE("same seed reproduces the same order") {
        auto a = make_batches(ds, v, 16, 32, 7, true);
        auto b = make_batches(ds, v, 16, 32, 7, true);
        for (size_t i = 0; i < a.size(); ++i)
            CHECK(a[i].example_index == b[i].example_index);
        auto c = make_batches(ds, v, 16, 32, 8, true);
        bool all_equal = true;
        for (size_t i = 0; i < a.size(); ++i)
            if (a[i].example_index != c[i].example_index) all_equal = false;
        CHECK_FALSE(all_equal);
    }
    SUBCASE("shuffle off preserves dataset order") {
        auto batches = make_batches(ds, v, 16, 32, 7, false);
        int64_t want = 0;
        for (const Batch& b : batches)
            for (int64_t idx : b.example_index) CHECK(idx == want++);
    }
    SUBCASE("rows are padded to the batch maximum and masks mark real tokens") {
        Dataset mixed;
        mixed.label_names = {"x"};
        mixed.examples = {{"one", std::nullopt, 0}, {"one two three four", std::nullopt, 0}};
        std::vector<std::string> c2 = {"one two three four"};
        Vocab v2 = build_vocab(c2, 1);
        auto batches = make_batches(mixed, v2, 16, 2, 0, false);
        REQUIRE(batches.size() == 1);
        const Batch& b = batches[0];
        CHECK(b.t == 6);
        CHECK(b.ids[0 * b.t + 0] == Vocab::kCls);
        CHECK(b.mask[0 * b.t + 0] == 1);
        CHECK(b.ids[0 * b.t + 2] == Vocab::kSep);
        for (int64_t j = 3; j < 6; ++j) {
            CHECK(b.ids[static_cast<size_t>(0 * b.t + j)] == Vocab::kPad);
            CHECK(b.mask[static_cast<size_t>(0 * b.t + j)] == 0);
        }
        for (int64_t j = 0; j < 6; ++j) CHECK(b.mask[static_cast<size_t>(1 * b.t + j)] == 1);
    }
    SUBCASE("every row starts with [CLS] under shuffling") {
        auto batches = make_batches(ds, v, 16, 8, 3, true);
        for (const Batch& b : batches)
            for (int64_t row = 0; row < b.n; ++row) {
                CHECK(b.ids[static_cast<size_t>(row * b.t)] == Vocab::kCls);
                CHECK(b.mask[static_cast<size_t>(row * b.t)] == 1);
            }
    }
    SUBCASE("empty dataset is rejected") {
        Dataset empty;
        CHECK_THROWS_AS(make_batches(empty, v, 16, 8, 0, false), std::invalid_argument);
    }
}

TEST_CASE("per_intent_split") {
    SUBCASE("keeps ceil(fraction * n) per label") {
        Dataset ds = toy_dataset(3, 10);
        auto [kept, held] = per_intent_split(ds, 0.5, 11);
        std::vector<int> kept_counts(3, 0), held_counts(3, 0);
        for (const Example& ex : kept.examples) ++kept_counts[static_cast<size_t>(ex.label)];
        for (const Example& ex : held.examples) ++held_counts[static_cast<size_t>(ex.label)];
        for (int l = 0; l < 3; ++l) {
            CHECK(kept_counts[static_cast<size_t>(l)] == 5);
            CHECK(held_counts[static_cast<size_t>(l)] == 5);
        }
    }
    SUBCASE("odd label sizes round up") {
        Dataset ds = toy_dataset(2, 7);
        auto [kept, held] = per_intent_split(ds, 0.5, 11);
        std::vector<int> kept_counts(2, 0);
        for (const Example& ex : kept.examples) ++kept_counts[static_cast<size_t>(ex.label)];
        CHECK(kept_counts[0] == 4);
        CHECK(kept_counts[1] == 4);
    }
    SUBCASE("fraction 1 keeps everything") {
        Dataset ds = toy_dataset(2, 5);
        auto [kept, held] = per_intent_split(ds, 1.0, 11);
        CHECK(kept.size() == ds.size());
        CHECK(held.size() == 0);
    }
    SUBCASE("same seed is idempotent, union covers the input") {
        Dataset ds = toy_dataset(4, 9);
        auto [kept1, held1] = per_intent_split(ds, 0.4, 5);
        auto [kept2, held2] = per_intent_split(ds, 0.4, 5);
        REQUIRE(kept1.size() == kept2.size());
        for (size_t i = 0; i < kept1.size(); ++i)
            CHECK(kept1.examples[i].text == kept2.examples[i].text);
        CHECK(kept1.size() + held1.size() == ds.size());
    }
    SUBCASE("out-of-range fraction is rejected") {
        Dataset ds = toy_dataset(2, 4);
        CHECK_THROWS_AS(per_intent_split(ds, 0.0, 1), std::invalid_argument);
        CHECK_THROWS_AS(per_intent_split(ds, 1.5, 1), std::invalid_argument);
        CHECK_THROWS_AS(per_intent_split(ds, -0.1, 1), std::invalid_argument);
    }
}

TEST_CASE("load_jsonl") {
    SUBCASE("labels get first-seen dense ids") {
        TempFile f("ok.jsonl",
                   "{\"text\": \"book me a flight\", \"label\": \"book\"}\n"
                   "{\"text\": \"cancel it\", \"label\": \"cancel\"}\n"
                   "{\"text\": \"book another\", \"label\": \"book\"}\n");
        Dataset ds = load_jsonl(f.path);
        REQUIRE(ds.size() == 3);
        CHECK(ds.label_names == std::vector<std::string>{"book", "cancel"});
        CHECK(ds.examples[0].label == 0);
        CHECK(ds.examples[1].label == 1);
        CHECK(ds.examples[2].label == 0);
        CHECK_FALSE(ds.examples[0].text2.has_value());
    }
    SUBCASE("second segment is read when present") {
        TempFile f("pair.jsonl",
                   "{\"text\": \"premise here\", \"text2\": \"hypothesis\", "
                   "\"label\": \"entail\"}\n");
        Dataset ds = load_jsonl(f.path);
        REQUIRE(ds.size() == 1);
        REQUIRE(ds.examples[0].text2.has_value());
        CHECK(*ds.examples[0].text2 == "hypothesis");
    }
    SUBCASE("missing label names the line") {
        TempFile f("bad.jsonl",
                   "{\"text\": \"fine\", \"label\": \"a\"}\n"
                   "{\"text\": \"broken\"}\n");
        CHECK_THROWS_WITH_AS(load_jsonl(f.path), doctest::Contains(":2"), DataError);
    }
    SUBCASE("malformed JSON names the line") {
        TempFile f("garbled.jsonl", "not json at all\n");
        CHECK_THROWS_WITH_AS(load_jsonl(f.path), doctest::Contains(":1"), DataError);
    }
    SUBCASE("empty file is rejected") {
        TempFile f("empty.jsonl", "");
        CHECK_THROWS_AS(load_jsonl(f.path), DataError);
    }
    SUBCASE("missing file is rejected") {
        CHECK_THROWS_AS(load_jsonl("no_such_file.jsonl"), DataError);
    }
    SUBCASE("fixed mapping rejects unknown labels and keeps ids stable") {
        TempFile f("fixed.jsonl",
                   "{\"text\": \"x\", \"label\": \"cancel\"}\n"
                   "{\"text\": \"y\", \"label\": \"book\"}\n");
        std::vector<std::string> mapping = {"book", "cancel"};
        Dataset ds = load_jsonl(f.path, mapping);
        CHECK(ds.examples[0].label == 1);
        CHECK(ds.examples[1].label == 0);
        TempFile g("unknown.jsonl", "{\"text\": \"z\", \"label\": \"refund\"}\n");
        CHECK_THROWS_WITH_AS(load_jsonl(g.path, mapping), doctest::Contains("refund"),
                             DataError);
    }
}
