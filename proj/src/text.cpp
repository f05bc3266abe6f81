#include "cat/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "cat/errors.hpp"
#include "cat/rng.hpp"

namespace cat {

int32_t Vocab::id_of(const std::string& token) const {
    auto it = ids.find(token);
    return it == ids.end() ? kUnk : it->second;
}

const std::string& Vocab::token_of(int32_t id) const {
    if (id < 0 || id >= size())
        throw std::invalid_argument("token_of: id " + std::to_string(id) +
                                    " outside vocabulary of " + std::to_string(size()));
    return tokens[static_cast<size_t>(id)];
}

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const unsigned char u = static_cast<unsigned char>(ch);
        if (std::isspace(u) || std::ispunct(u)) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(u)));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

Vocab build_vocab(std::span<const std::string> corpus, int64_t min_freq) {
    if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
    std::unordered_map<std::string, int64_t> freq;
    for (const std::string& text : corpus)
        for (std::string& tok : tokenize(text)) ++freq[std::move(tok)];

    std::vector<std::pair<std::string, int64_t>> kept;
    for (auto& [tok, count] : freq)
        if (count >= min_freq) kept.emplace_back(tok, count);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab v;
    v.tokens = {"[PAD]", "[CLS]", "[SEP]", "[UNK]"};
    for (auto& [tok, count] : kept) v.tokens.push_back(tok);
    for (int32_t i = 0; i < v.size(); ++i) v.ids[v.tokens[static_cast<size_t>(i)]] = i;
    return v;
}

TokenSequence encode(const std::string& text, const std::optional<std::string>& second,
                     const Vocab& vocab, int64_t max_len) {
    if (max_len < 3)
        throw std::invalid_argument("encode: max_len " + std::to_string(max_len) +
                                    " leaves no room for [CLS] content [SEP]");
    std::vector<int32_t> content;
    for (const std::string& tok : tokenize(text)) content.push_back(vocab.id_of(tok));
    if (second) {
        content.push_back(Vocab::kSep);
        for (const std::string& tok : tokenize(*second)) content.push_back(vocab.id_of(tok));
    }
    const size_t budget = static_cast<size_t>(max_len - 2);
    if (content.size() > budget) content.resize(budget);

    TokenSequence seq;
    seq.ids.reserve(content.size() + 2);
    seq.ids.push_back(Vocab::kCls);
    seq.ids.insert(seq.ids.end(), content.begin(), content.end());
    seq.ids.push_back(Vocab::kSep);
    seq.mask.assign(seq.ids.size(), 1);
    return seq;
}

std::vector<Batch> make_batches(const Dataset& dataset, const Vocab& vocab, int64_t max_len,
                                int64_t batch_size, uint64_t seed, bool shuffle) {
    if (dataset.examples.empty()) throw std::invalid_argument("make_batches: empty dataset");
    if (batch_size < 1) throw std::invalid_argument("make_batches: batch_size must be >= 1");

    std::vector<int64_t> order(dataset.examples.size());
    std::iota(order.begin(), order.end(), 0);
    if (shuffle) {
        Rng rng(seed);
        rng.shuffle(order);
    }

    std::vector<Batch> batches;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(order.size(), at + static_cast<size_t>(batch_size));
        std::vector<TokenSequence> seqs;
        Batch b;
        b.n = static_cast<int64_t>(end - at);
        for (size_t i = at; i < end; ++i) {
            const Example& ex = dataset.examples[static_cast<size_t>(order[i])];
            seqs.push_back(encode(ex.text, ex.text2, vocab, max_len));
            b.labels.push_back(ex.label);
            b.example_index.push_back(order[i]);
            b.t = std::max(b.t, static_cast<int64_t>(seqs.back().ids.size()));
        }
        b.ids.assign(static_cast<size_t>(b.n * b.t), Vocab::kPad);
        b.mask.assign(static_cast<size_t>(b.n * b.t), 0);
        for (int64_t row = 0; row < b.n; ++row) {
            const TokenSequence& s = seqs[static_cast<size_t>(row)];
            for (size_t j = 0; j < s.ids.size(); ++j) {
                b.ids[static_cast<size_t>(row * b.t) + j] = s.ids[j];
                b.mask[static_cast<size_t>(row * b.t) + j] = 1;
            }
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

std::pair<Dataset, Dataset> per_intent_split(const Dataset& dataset, double fraction,
                                             uint64_t seed) {
    if (!(fraction > 0.0) || fraction > 1.0)
        throw std::invalid_argument("per_intent_split: fraction must be in (0, 1], got " +
                                    std::to_string(fraction));

    std::unordered_map<int32_t, std::vector<int64_t>> by_label;
    for (size_t i = 0; i < dataset.examples.size(); ++i)
        by_label[dataset.examples[i].label].push_back(static_cast<int64_t>(i));

    std::vector<uint8_t> keep(dataset.examples.size(), 0);
    for (auto& [label, indices] : by_label) {
        Rng rng(derive_seed(seed, static_cast<uint64_t>(label)));
        rng.shuffle(indices);
        const size_t want = static_cast<size_t>(
            std::ceil(fraction * static_cast<double>(indices.size())));
        for (size_t i = 0; i < want && i < indices.size(); ++i)
            keep[static_cast<size_t>(indices[i])] = 1;
    }

    Dataset kept, held;
    kept.label_names = dataset.label_names;
    held.label_names = dataset.label_names;
    for (size_t i = 0; i < dataset.examples.size(); ++i)
        (keep[i] ? kept : held).examples.push_back(dataset.examples[i]);
    return {std::move(kept), std::move(held)};
}

namespace {

Dataset load_jsonl_impl(const std::string& path, const std::vector<std::string>* fixed) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);

    Dataset ds;
    std::unordered_map<std::string, int32_t> label_ids;
    if (fixed) {
        ds.label_names = *fixed;
        for (size_t i = 0; i < fixed->size(); ++i)
            label_ids[(*fixed)[i]] = static_cast<int32_t>(i);
    }

    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string where = path + ":" + std::to_string(lineno);
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw DataError(where + ": not a JSON object");
        if (!j.contains("text") || !j["text"].is_string())
            throw DataError(where + ": missing string field \"text\"");
        if (!j.contains("label") || !j["label"].is_string())
            throw DataError(where + ": missing string field \"label\"");

        Example ex;
        ex.text = j["text"].get<std::string>();
        if (j.contains("text2")) {
            if (!j["text2"].is_string())
                throw DataError(where + ": field \"text2\" must be a string");
            ex.text2 = j["text2"].get<std::string>();
        }

        const std::string label = j["label"].get<std::string>();
        auto it = label_ids.find(label);
        if (it == label_ids.end()) {
            if (fixed)
                throw DataError(where + ": label \"" + label +
                                "\" not in the fixed label mapping");
            const int32_t id = static_cast<int32_t>(ds.label_names.size());
            ds.label_names.push_back(label);
            it = label_ids.emplace(label, id).first;
        }
        ex.label = it->second;
        ds.examples.push_back(std::move(ex));
    }
    if (ds.examples.empty()) throw DataError(path + ": no examples");
    return ds;
}

}  // namespace

Dataset load_jsonl(const std::string& path) { return load_jsonl_impl(path, nullptr); }

Dataset load_jsonl(const std::string& path, std::span<const std::string> fixed_labels) {
    std::vector<std::string> fixed(fixed_labels.begin(), fixed_labels.end());
    return load_jsonl_impl(path, &fixed);
}

}  // namespace cat
