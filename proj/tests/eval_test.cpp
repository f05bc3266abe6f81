#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cat/errors.hpp"
#include "cat/eval.hpp"
#include "cat/rng.hpp"

using namespace cat;

namespace {

// Independent oracle: walk all 2^(b+c) discordant assignments and apply the
// two-sided binomial formula to the enumerated tail count.
double mcnemar_enum(int64_t b, int64_t c) {
    const int64_t n = b + c;
    if (n == 0) return 1.0;
    const int64_t k = std::max(b, c);
    uint64_t tail = 0;
    for (uint64_t mask = 0; mask < (1ULL << n); ++mask)
        if (std::popcount(mask) >= k) ++tail;
    return std::min(1.0, 2.0 * std::ldexp(static_cast<double>(tail), static_cast<int>(-n)));
}

// Two aligned record sets with the given discordance pattern plus padding
// rows on which both systems agree.
struct RecordPair {
    std::vector<PredictionRecord> a;
    std::vector<PredictionRecord> b;
};

RecordPair discordant_records(int64_t b, int64_t c, int64_t both_right = 3,
                              int64_t both_wrong = 2) {
    std::vector<int32_t> gold, pa, pb;
    for (int64_t i = 0; i < b; ++i) {  // a right, b wrong
        gold.push_back(0);
        pa.push_back(0);
        pb.push_back(1);
    }
    for (int64_t i = 0; i < c; ++i) {  // a wrong, b right
        gold.push_back(1);
        pa.push_back(0);
        pb.push_back(1);
    }
    for (int64_t i = 0; i < both_right; ++i) {
        gold.push_back(0);
        pa.push_back(0);
        pb.push_back(0);
    }
    for (int64_t i = 0; i < both_wrong; ++i) {
        gold.push_back(1);
        pa.push_back(0);
        pb.push_back(0);
    }
    return {make_records(gold, pa), make_records(gold, pb)};
}

std::vector<PredictionRecord> records_of(std::vector<int32_t> gold,
                                         std::vector<int32_t> pred) {
    return make_records(gold, pred);
}

Dataset dataset_of(std::vector<std::pair<std::string, int32_t>> rows,
                   std::vector<std::string> label_names) {
    Dataset ds;
    ds.label_names = std::move(label_names);
    for (auto& [text, label] : rows) ds.examples.push_back({std::move(text), {}, label});
    return ds;
}

}  // namespace

TEST_CASE("records pair gold with predictions") {
    const auto records = make_records(std::vector<int32_t>{0, 1, 2},
                                      std::vector<int32_t>{0, 2, 2});
    REQUIRE(records.size() == 3);
    CHECK(records[0].id == 0);
    CHECK(records[1].id == 1);
    CHECK(records[0].correct);
    CHECK(!records[1].correct);
    CHECK(records[2].correct);
    CHECK_THROWS_AS(make_records(std::vector<int32_t>{0}, std::vector<int32_t>{}),
                    std::invalid_argument);
}

TEST_CASE("report validation bounds the p-value") {
    EvalReport report;
    report.metric = "accuracy";
    report.value = 0.9;
    report.n = 10;
    report.validate();
    report.p_value = 0.5;
    report.validate();
    report.p_value = 1.5;
    CHECK_THROWS_AS(report.validate(), std::invalid_argument);
    report.p_value = -0.1;
    CHECK_THROWS_AS(report.validate(), std::invalid_argument);
}

TEST_CASE("accuracy is the mean of correct flags") {
    CHECK(accuracy(records_of({0, 1, 0}, {0, 1, 0})) == 1.0);
    CHECK(accuracy(records_of({0, 1, 0, 1}, {0, 1, 0, 0})) == 0.75);
    CHECK(accuracy(records_of({0, 1}, {1, 0})) == 0.0);
    CHECK_THROWS_AS(accuracy({}), std::invalid_argument);
}

TEST_CASE("binary f1 handles the degenerate denominators") {
    CHECK(f1_binary(records_of({1, 0, 1, 0}, {1, 0, 1, 0}), 1) == 1.0);

    // All predicted positive, half the gold positive: P = 1/2, R = 1.
    const auto half = records_of({1, 1, 0, 0}, {1, 1, 1, 1});
    CHECK(std::abs(f1_binary(half, 1) - 2.0 / 3.0) < 1e-15);

    CHECK(f1_binary(records_of({1, 1, 0}, {0, 0, 0}), 1) == 0.0);  // nothing predicted
    CHECK(f1_binary(records_of({0, 0, 0}, {1, 0, 0}), 1) == 0.0);  // nothing gold

    // The positive class is whatever the caller says it is.
    const auto relabeled = records_of({7, 7, 3, 3}, {7, 7, 7, 7});
    CHECK(std::abs(f1_binary(relabeled, 7) - 2.0 / 3.0) < 1e-15);
}

TEST_CASE("mcc matches its closed form") {
    CHECK(mcc(records_of({1, 0, 1, 0}, {1, 0, 1, 0})) == 1.0);
    CHECK(mcc(records_of({1, 0, 1, 0}, {0, 1, 0, 1})) == -1.0);

    // TP=4, TN=3, FP=1, FN=2.
    std::vector<int32_t> gold, pred;
    for (int i = 0; i < 4; ++i) { gold.push_back(1); pred.push_back(1); }
    for (int i = 0; i < 3; ++i) { gold.push_back(0); pred.push_back(0); }
    gold.push_back(0); pred.push_back(1);
    for (int i = 0; i < 2; ++i) { gold.push_back(1); pred.push_back(0); }
    const double value = mcc(make_records(gold, pred));
    CHECK(std::abs(value - 10.0 / std::sqrt(600.0)) < 1e-12);
    CHECK(std::abs(value - 0.40825) < 5e-6);

    // A zero marginal collapses the score to 0.
    CHECK(mcc(records_of({1, 1, 1}, {1, 1, 0})) == 0.0);
}

TEST_CASE("classification metrics ignore record order") {
    std::vector<int32_t> gold, pred;
    Rng rng(40);
    for (int i = 0; i < 60; ++i) {
        gold.push_back(static_cast<int32_t>(rng.below(2)));
        pred.push_back(static_cast<int32_t>(rng.below(2)));
    }
    auto records = make_records(gold, pred);
    const double acc = accuracy(records);
    const double f1 = f1_binary(records, 1);
    const double m = mcc(records);
    Rng shuffler(41);
    shuffler.shuffle(records);
    CHECK(accuracy(records) == acc);
    CHECK(f1_binary(records, 1) == f1);
    CHECK(mcc(records) == m);
}

TEST_CASE("mcnemar agrees with full enumeration up to 20 discordant pairs") {
    const std::pair<int64_t, int64_t> cases[] = {{0, 0}, {1, 0}, {1, 1}, {2, 3}, {5, 5},
                                                 {10, 2}, {12, 8}, {20, 0}, {7, 13}, {9, 11}};
    for (const auto& [b, c] : cases) {
        const RecordPair pair = discordant_records(b, c);
        const double p = mcnemar_exact(pair.a, pair.b);
        const double expect = mcnemar_enum(b, c);
        CAPTURE(b);
        CAPTURE(c);
        CHECK(std::abs(p - expect) < 1e-12);
    }
}

TEST_CASE("mcnemar frozen values") {
    const RecordPair ten_two = discordant_records(10, 2);
    const double p = mcnemar_exact(ten_two.a, ten_two.b);
    CHECK(std::abs(p - 158.0 / 4096.0) < 1e-12);
    CHECK(std::abs(p - 0.038574) < 5e-7);

    const RecordPair one_one = discordant_records(1, 1);
    CHECK(mcnemar_exact(one_one.a, one_one.b) == 1.0);

    const RecordPair same = discordant_records(0, 0, 5, 3);
    CHECK(mcnemar_exact(same.a, same.b) == 1.0);
}

TEST_CASE("mcnemar ignores concordant padding and is symmetric") {
    const RecordPair lean = discordant_records(10, 2, 0, 0);
    const RecordPair padded = discordant_records(10, 2, 50, 25);
    CHECK(mcnemar_exact(lean.a, lean.b) == mcnemar_exact(padded.a, padded.b));

    for (uint64_t seed = 1; seed <= 4; ++seed) {
        Rng rng(seed);
        std::vector<int32_t> gold, pa, pb;
        for (int i = 0; i < 40; ++i) {
            gold.push_back(static_cast<int32_t>(rng.below(2)));
            pa.push_back(static_cast<int32_t>(rng.below(2)));
            pb.push_back(static_cast<int32_t>(rng.below(2)));
        }
        const auto a = make_records(gold, pa);
        const auto b = make_records(gold, pb);
        CHECK(mcnemar_exact(a, b) == mcnemar_exact(b, a));
    }
}

TEST_CASE("mcnemar survives large discordant counts") {
    const RecordPair big = discordant_records(160, 90, 0, 0);
    const double p = mcnemar_exact(big.a, big.b);
    CHECK(p > 0.0);
    CHECK(p < 0.001);  // 160 vs 90 is a lopsided split
    const RecordPair even = discordant_records(120, 130, 0, 0);
    const double q = mcnemar_exact(even.a, even.b);
    CHECK(q > 0.5);
    CHECK(q <= 1.0);
}

TEST_CASE("mcnemar rejects misaligned record sets") {
    RecordPair pair = discordant_records(2, 1);
    auto broken_id = pair.b;
    broken_id[0].id = 99;
    CHECK_THROWS_AS(mcnemar_exact(pair.a, broken_id), DataError);
    auto broken_gold = pair.b;
    broken_gold[1].gold = 1 - broken_gold[1].gold;
    CHECK_THROWS_AS(mcnemar_exact(pair.a, broken_gold), DataError);
    auto shorter = pair.b;
    shorter.pop_back();
    CHECK_THROWS_AS(mcnemar_exact(pair.a, shorter), DataError);
}

TEST_CASE("fisher randomization null and determinism") {
    std::vector<int32_t> gold, pred;
    Rng rng(50);
    for (int i = 0; i < 30; ++i) {
        gold.push_back(static_cast<int32_t>(rng.below(2)));
        pred.push_back(static_cast<int32_t>(rng.below(2)));
    }
    const auto a = make_records(gold, pred);
    CHECK(fisher_randomization(a, a, FisherMetric::F1, 500, 3) == 1.0);

    std::vector<int32_t> other = pred;
    for (int i = 0; i < 6; ++i) other[static_cast<size_t>(i)] = 1 - other[static_cast<size_t>(i)];
    const auto b = make_records(gold, other);
    const double p1 = fisher_randomization(a, b, FisherMetric::F1, 1000, 7);
    const double p2 = fisher_randomization(a, b, FisherMetric::F1, 1000, 7);
    CHECK(p1 == p2);
    CHECK(p1 > 0.0);
    CHECK(p1 <= 1.0);
    CHECK(p1 >= 1.0 / 1001.0);  // add-one smoothing floor

    const double p3 = fisher_randomization(a, b, FisherMetric::F1, 1000, 8);
    CHECK(p3 > 0.0);  // a different seed still yields a valid p
}

TEST_CASE("fisher randomization separates extreme systems") {
    std::vector<int32_t> gold, right, wrong;
    for (int i = 0; i < 20; ++i) {
        const int32_t label = i % 2;
        gold.push_back(label);
        right.push_back(label);
        wrong.push_back(1 - label);
    }
    const auto perfect = make_records(gold, right);
    const auto antiperfect = make_records(gold, wrong);
    const double p =
        fisher_randomization(perfect, antiperfect, FisherMetric::Mcc, 10000, 11);
    CHECK(p <= 0.001);
}

TEST_CASE("fisher randomization single-pair stat is swap-invariant") {
    const auto a = records_of({1}, {1});
    const auto b = records_of({1}, {0});
    // Every permuted assignment has |F1 difference| = 1 = observed.
    CHECK(fisher_randomization(a, b, FisherMetric::F1, 64, 5) == 1.0);
}

TEST_CASE("fisher randomization validates its inputs") {
    const auto a = records_of({0, 1}, {0, 1});
    auto b = records_of({0, 1}, {1, 1});
    CHECK_THROWS_AS(fisher_randomization(a, b, FisherMetric::F1, 0, 1),
                    std::invalid_argument);
    b[0].id = 5;
    CHECK_THROWS_AS(fisher_randomization(a, b, FisherMetric::F1, 10, 1),
                    DataError);
}

TEST_CASE("tf-idf matches hand computation") {
    const std::vector<std::vector<std::string>> corpus = {
        {"cat", "sat", "cat"}, {"dog", "sat"}, {"cat"}};
    const TfIdfModel model = fit_tf_idf(corpus);
    CHECK(model.documents == 3);
    CHECK(model.terms == std::vector<std::string>{"cat", "dog", "sat"});

    const double idf_cat = std::log(4.0 / 3.0) + 1.0;
    const double idf_dog = std::log(4.0 / 2.0) + 1.0;
    const double idf_sat = std::log(4.0 / 3.0) + 1.0;
    CHECK(model.idf[0] == idf_cat);
    CHECK(model.idf[1] == idf_dog);
    CHECK(model.idf[2] == idf_sat);

    const auto vectors = tf_idf(corpus);
    REQUIRE(vectors.size() == 3);
    REQUIRE(vectors[0].size() == 2);
    CHECK(vectors[0][0].term == 0);
    CHECK(std::abs(vectors[0][0].weight - (2.0 / 3.0) * idf_cat) < 1e-15);
    CHECK(vectors[0][1].term == 2);
    CHECK(std::abs(vectors[0][1].weight - (1.0 / 3.0) * idf_sat) < 1e-15);
    REQUIRE(vectors[1].size() == 2);
    CHECK(std::abs(vectors[1][0].weight - 0.5 * idf_dog) < 1e-15);
    REQUIRE(vectors[2].size() == 1);
    CHECK(std::abs(vectors[2][0].weight - idf_cat) < 1e-15);
}

TEST_CASE("tf-idf edge behavior") {
    // A term in every document idles at idf exactly 1.
    const std::vector<std::vector<std::string>> shared = {{"a", "b"}, {"a", "c"}};
    const TfIdfModel model = fit_tf_idf(shared);
    CHECK(model.idf[static_cast<size_t>(model.term_id("a"))] == 1.0);

    // Empty documents become empty vectors.
    const std::vector<std::vector<std::string>> with_empty = {{"a"}, {}};
    const auto vectors = tf_idf(with_empty);
    CHECK(vectors[1].empty());

    // Identical documents get identical vectors at cosine 1.
    const std::vector<std::vector<std::string>> twins = {{"x", "y"}, {"x", "y"}, {"z"}};
    const auto tv = tf_idf(twins);
    CHECK(tv[0].size() == tv[1].size());
    for (size_t i = 0; i < tv[0].size(); ++i) {
        CHECK(tv[0][i].term == tv[1][i].term);
        CHECK(tv[0][i].weight == tv[1][i].weight);
    }
    CHECK(std::abs(sparse_cosine(tv[0], tv[1]) - 1.0) < 1e-15);

    // Unknown terms are dropped but still dilute the document length.
    const SparseVector diluted = tf_idf_vector(model, {"a", "zzz"});
    REQUIRE(diluted.size() == 1);
    CHECK(diluted[0].weight == 0.5 * model.idf[static_cast<size_t>(model.term_id("a"))]);

    CHECK(model.term_id("zzz") == -1);
    CHECK_THROWS_AS(fit_tf_idf({}), std::invalid_argument);
    CHECK(sparse_cosine({}, {{0, 1.0}}) == 0.0);
}

TEST_CASE("difficult subset keeps the least similar test examples") {
    const Dataset train = dataset_of({{"red apple fruit", 0},
                                      {"green apple tree", 0},
                                      {"fast car engine", 1},
                                      {"slow car wheel", 1}},
                                     {"fruit", "car"});
    const Dataset test = dataset_of({{"red apple fruit", 0},
                                     {"purple banana", 0},
                                     {"green tree", 0},
                                     {"fast engine", 1}},
                                    {"fruit", "car"});

    const DifficultSubset all = difficult_subset(train, test, 1.0);
    REQUIRE(all.indices.size() == 4);
    CHECK(all.indices == std::vector<int64_t>{0, 1, 2, 3});
    CHECK(all.scores[1] == 0.0);            // out-of-vocabulary text
    CHECK(all.scores[0] > all.scores[1]);   // the verbatim copy scores high
    CHECK(all.scores[0] > all.scores[2]);

    const DifficultSubset half = difficult_subset(train, test, 0.5);
    REQUIRE(half.indices.size() == 2);
    CHECK(std::find(half.indices.begin(), half.indices.end(), 1) != half.indices.end());
    CHECK(std::find(half.indices.begin(), half.indices.end(), 0) == half.indices.end());
    CHECK(std::is_sorted(half.indices.begin(), half.indices.end()));

    const DifficultSubset again = difficult_subset(train, test, 0.5);
    CHECK(again.indices == half.indices);
    CHECK(again.scores == half.scores);
}

TEST_CASE("difficult subset breaks score ties by example id") {
    const Dataset train = dataset_of({{"alpha beta", 0}}, {"only"});
    const Dataset test = dataset_of({{"gamma delta", 0},
                                     {"gamma delta", 0},
                                     {"gamma delta", 0},
                                     {"alpha beta", 0}},
                                    {"only"});
    const DifficultSubset subset = difficult_subset(train, test, 0.5);
    CHECK(subset.indices == std::vector<int64_t>{0, 1});
}

TEST_CASE("difficult subset reproduces the benchmark shape") {
    std::vector<std::pair<std::string, int32_t>> train_rows = {{"alpha beta", 0},
                                                               {"gamma delta", 1}};
    std::vector<std::pair<std::string, int32_t>> test_rows;
    for (int i = 0; i < 4500; ++i)
        test_rows.push_back({i % 2 == 0 ? "alpha word" : "gamma word",
                             static_cast<int32_t>(i % 2)});
    const Dataset train = dataset_of(std::move(train_rows), {"a", "b"});
    const Dataset test = dataset_of(std::move(test_rows), {"a", "b"});
    const DifficultSubset subset = difficult_subset(train, test, 750.0 / 4500.0);
    CHECK(subset.indices.size() == 750);
}

TEST_CASE("difficult subset rejects unknown labels and bad fractions") {
    const Dataset train = dataset_of({{"alpha", 0}}, {"a", "b"});
    const Dataset test = dataset_of({{"beta", 1}}, {"a", "b"});
    CHECK_THROWS_AS(difficult_subset(train, test, 0.5), DataError);

    const Dataset ok = dataset_of({{"alpha", 0}}, {"a", "b"});
    CHECK_THROWS_AS(difficult_subset(train, ok, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(difficult_subset(train, ok, 1.5), std::invalid_argument);
}
