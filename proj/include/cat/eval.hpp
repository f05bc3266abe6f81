#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cat/text.hpp"

namespace cat {

struct PredictionRecord {
    int64_t id = 0;
    int32_t gold = 0;
    int32_t pred = 0;
    bool correct = false;
};

// Pairs gold and predicted labels into records with ids 0..n-1.
std::vector<PredictionRecord> make_records(std::span<const int32_t> gold,
                                           std::span<const int32_t> pred);

struct EvalReport {
    std::string metric;
    double value = 0.0;
    int64_t n = 0;
    std::optional<double> p_value;  // against a baseline record set
    std::string config_fingerprint;
    std::string tool_version;

    void validate() const;  // p_value in [0,1] when present
};

// Mean of the correct flags. Rejects empty input.
double accuracy(std::span<const PredictionRecord> records);

// Harmonic mean of precision and recall for positive_class; 0 by convention
// when precision + recall is 0.
double f1_binary(std::span<const PredictionRecord> records, int32_t positive_class);

// Matthews correlation with label 1 as the positive class; 0 by convention
// when any marginal factor is 0.
double mcc(std::span<const PredictionRecord> records);

// Exact two-sided binomial McNemar p-value over the discordant pairs:
// min(1, 2 * P(X >= max(b,c))) for X ~ Binomial(b+c, 1/2), and 1.0 when
// there is no discordance. Records must agree element-wise on id and gold.
double mcnemar_exact(std::span<const PredictionRecord> records_a,
                     std::span<const PredictionRecord> records_b);

enum class FisherMetric { F1, Mcc };

// Paired sign-flip randomization test on |metric(a) - metric(b)| with
// add-one smoothing: each iteration swaps the two systems' predictions per
// example with probability 1/2, and p = (1 + #{permuted >= observed}) /
// (1 + iterations). A permutation on which the metric is undefined counts
// as extreme; the observed statistic itself uses the 0-convention values.
// Deterministic for a given seed. positive_class feeds the F1 metric only.
double fisher_randomization(std::span<const PredictionRecord> records_a,
                            std::span<const PredictionRecord> records_b,
                            FisherMetric metric, int64_t iterations, uint64_t seed,
                            int32_t positive_class = 1);

struct SparseEntry {
    int32_t term = 0;
    double weight = 0.0;
};
using SparseVector = std::vector<SparseEntry>;  // ascending term ids

struct TfIdfModel {
    std::vector<std::string> terms;  // lexicographic; position = term id
    std::vector<double> idf;         // aligned with terms
    int64_t documents = 0;

    int32_t term_id(const std::string& term) const;  // -1 when absent
};

// idf(t) = ln((1 + D) / (1 + df(t))) + 1 over a non-empty corpus.
TfIdfModel fit_tf_idf(std::span<const std::vector<std::string>> corpus);

// tf(t) = count(t) / len(doc), weight = tf * idf. Terms outside the model
// are dropped from the vector but still count toward the document length.
SparseVector tf_idf_vector(const TfIdfModel& model, const std::vector<std::string>& doc);

// Fit on the corpus and transform every document of it.
std::vector<SparseVector> tf_idf(std::span<const std::vector<std::string>> corpus);

// Cosine similarity of sparse vectors; 0 when either norm is 0.
double sparse_cosine(const SparseVector& a, const SparseVector& b);

struct DifficultSubset {
    std::vector<int64_t> indices;  // into the test set, ascending
    std::vector<double> scores;    // aligned mean-similarity scores
};

// Scores each test example by its mean TF-IDF cosine similarity to the
// training examples sharing its label (the vectorizer is fitted on the
// training corpus alone) and keeps the ceil(fraction * |test|) lowest
// scorers, breaking score ties by example id. Every test label must
// appear in the training set.
DifficultSubset difficult_subset(const Dataset& train, const Dataset& test,
                                 double fraction);

}  // namespace cat
