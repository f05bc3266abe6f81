#include "cat/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "cat/errors.hpp"
#include "cat/rng.hpp"

namespace cat {

namespace {

struct BinaryCounts {
    int64_t tp = 0, tn = 0, fp = 0, fn = 0;
};

BinaryCounts count_binary(std::span<const int32_t> gold, std::span<const int32_t> pred,
                          int32_t positive) {
    BinaryCounts c;
    for (size_t i = 0; i < gold.size(); ++i) {
        const bool gp = gold[i] == positive;
        const bool pp = pred[i] == positive;
        if (gp && pp) ++c.tp;
        else if (!gp && !pp) ++c.tn;
        else if (pp) ++c.fp;
        else ++c.fn;
    }
    return c;
}

// nullopt marks the degenerate cases the public metrics map to 0.
std::optional<double> f1_raw(const BinaryCounts& c) {
    const double precision =
        c.tp + c.fp > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
    const double recall =
        c.tp + c.fn > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
    if (precision + recall == 0.0) return std::nullopt;
    return 2.0 * precision * recall / (precision + recall);
}

std::optional<double> mcc_raw(const BinaryCounts& c) {
    const double f1 = static_cast<double>(c.tp + c.fp);
    const double f2 = static_cast<double>(c.tp + c.fn);
    const double f3 = static_cast<double>(c.tn + c.fp);
    const double f4 = static_cast<double>(c.tn + c.fn);
    if (f1 == 0.0 || f2 == 0.0 || f3 == 0.0 || f4 == 0.0) return std::nullopt;
    const double num = static_cast<double>(c.tp) * static_cast<double>(c.tn) -
                       static_cast<double>(c.fp) * static_cast<double>(c.fn);
    return num / std::sqrt(f1 * f2 * f3 * f4);
}

void check_aligned(std::span<const PredictionRecord> a,
                   std::span<const PredictionRecord> b, const char* who) {
    if (a.size() != b.size())
        throw DataError(std::string(who) + ": record sets of size " +
                                    std::to_string(a.size()) + " and " +
                                    std::to_string(b.size()));
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].id != b[i].id)
            throw DataError(std::string(who) + ": records disagree on id at row " +
                                        std::to_string(i));
        if (a[i].gold != b[i].gold)
            throw DataError(std::string(who) +
                                        ": records disagree on gold label for id " +
                                        std::to_string(a[i].id));
    }
}

// P(X >= k) for X ~ Binomial(n, 1/2). Counts are exact integers up to
// n = 62; larger n fall back to a log-gamma tail sum.
double binomial_tail_half(int64_t n, int64_t k) {
    if (k <= 0) return 1.0;
    if (k > n) return 0.0;
    if (n <= 62) {
        unsigned __int128 binom = 1;  // C(n, j) walking j upward
        uint64_t tail = 0;
        for (int64_t j = 0; j <= n; ++j) {
            if (j >= k) tail += static_cast<uint64_t>(binom);
            binom = binom * static_cast<unsigned __int128>(n - j) /
                    static_cast<unsigned __int128>(j + 1);
        }
        return std::ldexp(static_cast<double>(tail), static_cast<int>(-n));
    }
    long double sum = 0.0L;
    const long double log_half = std::log(0.5L);
    for (int64_t j = n; j >= k; --j) {
        const long double log_term = std::lgamma(static_cast<long double>(n + 1)) -
                                     std::lgamma(static_cast<long double>(j + 1)) -
                                     std::lgamma(static_cast<long double>(n - j + 1)) +
                                     static_cast<long double>(n) * log_half;
        sum += std::exp(log_term);
    }
    return static_cast<double>(sum);
}

std::vector<std::string> example_tokens(const Example& e) {
    std::vector<std::string> tokens = tokenize(e.text);
    if (e.text2) {
        std::vector<std::string> second = tokenize(*e.text2);
        tokens.insert(tokens.end(), second.begin(), second.end());
    }
    return tokens;
}

}  // namespace

std::vector<PredictionRecord> make_records(std::span<const int32_t> gold,
                                           std::span<const int32_t> pred) {
    if (gold.size() != pred.size())
        throw std::invalid_argument("records: " + std::to_string(gold.size()) +
                                    " gold labels for " + std::to_string(pred.size()) +
                                    " predictions");
    std::vector<PredictionRecord> records(gold.size());
    for (size_t i = 0; i < gold.size(); ++i) {
        records[i].id = static_cast<int64_t>(i);
        records[i].gold = gold[i];
        records[i].pred = pred[i];
        records[i].correct = gold[i] == pred[i];
    }
    return records;
}

void EvalReport::validate() const {
    if (p_value && (!(*p_value >= 0.0) || !(*p_value <= 1.0)))
        throw std::invalid_argument("report: p-value " + std::to_string(*p_value) +
                                    " outside [0,1]");
}

double accuracy(std::span<const PredictionRecord> records) {
    if (records.empty()) throw std::invalid_argument("accuracy: no records");
    int64_t correct = 0;
    for (const PredictionRecord& r : records) correct += r.correct ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(records.size());
}

double f1_binary(std::span<const PredictionRecord> records, int32_t positive_class) {
    std::vector<int32_t> gold(records.size()), pred(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        gold[i] = records[i].gold;
        pred[i] = records[i].pred;
    }
    return f1_raw(count_binary(gold, pred, positive_class)).value_or(0.0);
}

double mcc(std::span<const PredictionRecord> records) {
    std::vector<int32_t> gold(records.size()), pred(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        gold[i] = records[i].gold;
        pred[i] = records[i].pred;
    }
    return mcc_raw(count_binary(gold, pred, 1)).value_or(0.0);
}

double mcnemar_exact(std::span<const PredictionRecord> records_a,
                     std::span<const PredictionRecord> records_b) {
    check_aligned(records_a, records_b, "mcnemar");
    int64_t b = 0, c = 0;
    for (size_t i = 0; i < records_a.size(); ++i) {
        if (records_a[i].correct && !records_b[i].correct) ++b;
        if (!records_a[i].correct && records_b[i].correct) ++c;
    }
    const int64_t n = b + c;
    if (n == 0) return 1.0;
    return std::min(1.0, 2.0 * binomial_tail_half(n, std::max(b, c)));
}

double fisher_randomization(std::span<const PredictionRecord> records_a,
                            std::span<const PredictionRecord> records_b,
                            FisherMetric metric, int64_t iterations, uint64_t seed,
                            int32_t positive_class) {
    check_aligned(records_a, records_b, "fisher");
    if (iterations < 1)
        throw std::invalid_argument("fisher: iterations must be >= 1, got " +
                                    std::to_string(iterations));
    const size_t n = records_a.size();
    std::vector<int32_t> gold(n), pa(n), pb(n);
    for (size_t i = 0; i < n; ++i) {
        gold[i] = records_a[i].gold;
        pa[i] = records_a[i].pred;
        pb[i] = records_b[i].pred;
    }
    auto raw = [&](std::span<const int32_t> pred) {
        const BinaryCounts counts = count_binary(gold, pred, positive_class);
        return metric == FisherMetric::F1 ? f1_raw(counts) : mcc_raw(counts);
    };
    const double observed =
        std::abs(raw(pa).value_or(0.0) - raw(pb).value_or(0.0));

    int64_t extreme = 0;
    std::vector<int32_t> qa(n), qb(n);
    for (int64_t iter = 1; iter <= iterations; ++iter) {
        Rng rng(derive_seed(seed, static_cast<uint64_t>(iter)));
        qa = pa;
        qb = pb;
        for (size_t i = 0; i < n; ++i)
            if (rng.coin()) std::swap(qa[i], qb[i]);
        const std::optional<double> ra = raw(qa);
        const std::optional<double> rb = raw(qb);
        if (!ra || !rb || std::abs(*ra - *rb) >= observed) ++extreme;
    }
    return (1.0 + static_cast<double>(extreme)) / (1.0 + static_cast<double>(iterations));
}

int32_t TfIdfModel::term_id(const std::string& term) const {
    const auto it = std::lower_bound(terms.begin(), terms.end(), term);
    if (it == terms.end() || *it != term) return -1;
    return static_cast<int32_t>(it - terms.begin());
}

TfIdfModel fit_tf_idf(std::span<const std::vector<std::string>> corpus) {
    if (corpus.empty()) throw std::invalid_argument("tf-idf: empty corpus");
    std::map<std::string, int64_t> df;
    for (const std::vector<std::string>& doc : corpus) {
        std::vector<std::string> unique = doc;
        std::sort(unique.begin(), unique.end());
        unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
        for (const std::string& term : unique) ++df[term];
    }
    TfIdfModel model;
    model.documents = static_cast<int64_t>(corpus.size());
    const double d = static_cast<double>(model.documents);
    for (const auto& [term, count] : df) {
        model.terms.push_back(term);
        model.idf.push_back(std::log((1.0 + d) / (1.0 + static_cast<double>(count))) + 1.0);
    }
    return model;
}

SparseVector tf_idf_vector(const TfIdfModel& model, const std::vector<std::string>& doc) {
    if (doc.empty()) return {};
    std::map<int32_t, int64_t> counts;
    for (const std::string& term : doc) {
        const int32_t id = model.term_id(term);
        if (id >= 0) ++counts[id];
    }
    SparseVector vec;
    const double len = static_cast<double>(doc.size());
    for (const auto& [id, count] : counts)
        vec.push_back({id, static_cast<double>(count) / len *
                               model.idf[static_cast<size_t>(id)]});
    return vec;
}

std::vector<SparseVector> tf_idf(std::span<const std::vector<std::string>> corpus) {
    const TfIdfModel model = fit_tf_idf(corpus);
    std::vector<SparseVector> vectors;
    vectors.reserve(corpus.size());
    for (const std::vector<std::string>& doc : corpus) vectors.push_back(tf_idf_vector(model, doc));
    return vectors;
}

double sparse_cosine(const SparseVector& a, const SparseVector& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i].term == b[j].term) {
            dot += a[i].weight * b[j].weight;
            ++i;
            ++j;
        } else if (a[i].term < b[j].term) {
            ++i;
        } else {
            ++j;
        }
    }
    for (const SparseEntry& e : a) na += e.weight * e.weight;
    for (const SparseEntry& e : b) nb += e.weight * e.weight;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

DifficultSubset difficult_subset(const Dataset& train, const Dataset& test,
                                 double fraction) {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw std::invalid_argument("difficult subset: fraction must be in (0,1], got " +
                                    std::to_string(fraction));
    std::vector<std::vector<std::string>> train_docs;
    train_docs.reserve(train.size());
    for (const Example& e : train.examples) train_docs.push_back(example_tokens(e));
    const TfIdfModel model = fit_tf_idf(train_docs);

    std::vector<SparseVector> train_vecs;
    train_vecs.reserve(train.size());
    for (const std::vector<std::string>& doc : train_docs)
        train_vecs.push_back(tf_idf_vector(model, doc));
    std::unordered_map<int32_t, std::vector<size_t>> by_label;
    for (size_t i = 0; i < train.size(); ++i)
        by_label[train.examples[i].label].push_back(i);

    const int64_t n = static_cast<int64_t>(test.size());
    std::vector<double> score(static_cast<size_t>(n), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        const Example& e = test.examples[static_cast<size_t>(i)];
        const auto group = by_label.find(e.label);
        if (group == by_label.end())
            throw DataError("difficult subset: test label " +
                                        std::to_string(e.label) +
                                        " has no training examples");
        const SparseVector vec = tf_idf_vector(model, example_tokens(e));
        double sum = 0.0;
        for (const size_t t : group->second) sum += sparse_cosine(vec, train_vecs[t]);
        score[static_cast<size_t>(i)] = sum / static_cast<double>(group->second.size());
    }

    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        const double sa = score[static_cast<size_t>(a)];
        const double sb = score[static_cast<size_t>(b)];
        if (sa != sb) return sa < sb;
        return a < b;
    });
    const int64_t keep =
        std::min<int64_t>(n, static_cast<int64_t>(std::ceil(fraction * static_cast<double>(n))));
    order.resize(static_cast<size_t>(keep));
    std::sort(order.begin(), order.end());

    DifficultSubset out;
    out.indices = std::move(order);
    out.scores.reserve(out.indices.size());
    for (const int64_t idx : out.indices) out.scores.push_back(score[static_cast<size_t>(idx)]);
    return out;
}

}  // namespace cat
