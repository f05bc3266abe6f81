#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace cat {

// Token ids are dense; the first four are reserved and never reassigned.
struct Vocab {
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kCls = 1;
    static constexpr int32_t kSep = 2;
    static constexpr int32_t kUnk = 3;

    std::vector<std::string> tokens;            // id -> token, reserved included
    std::unordered_map<std::string, int32_t> ids;

    int32_t size() const { return static_cast<int32_t>(tokens.size()); }
    int32_t id_of(const std::string& token) const;  // kUnk when absent
    const std::string& token_of(int32_t id) const;
};

struct Example {
    std::string text;
    std::optional<std::string> text2;  // second segment for sequence pairs
    int32_t label = 0;
};

struct Dataset {
    std::vector<Example> examples;
    std::vector<std::string> label_names;  // label id -> name, first-seen order

    size_t size() const { return examples.size(); }
    int32_t num_labels() const { return static_cast<int32_t>(label_names.size()); }
};

struct TokenSequence {
    std::vector<int32_t> ids;
    std::vector<uint8_t> mask;  // 1 exactly on non-pad positions
};

// N sequences padded to the batch's longest length T. Token ids and mask are
// stored row-major (N x T). example_index maps each row back to its position
// in the source dataset.
struct Batch {
    int64_t n = 0;
    int64_t t = 0;
    std::vector<int32_t> ids;
    std::vector<uint8_t> mask;
    std::vector<int32_t> labels;
    std::vector<int64_t> example_index;
};

// Lowercased tokens split on whitespace and punctuation.
std::vector<std::string> tokenize(const std::string& text);

// Content tokens with frequency >= min_freq receive ids after the reserved
// four, ordered by frequency descending then token ascending.
Vocab build_vocab(std::span<const std::string> corpus, int64_t min_freq);

// Frames token ids as [CLS] t1..tk [SEP], or [CLS] p [SEP] h [SEP] for pairs.
// Over-long content is truncated from the right so the framed length never
// exceeds max_len. Unknown tokens map to [UNK]. Requires max_len >= 3.
TokenSequence encode(const std::string& text, const std::optional<std::string>& second,
                     const Vocab& vocab, int64_t max_len);

// Encodes the whole dataset into fixed-size batches (the last may be short).
// With shuffle, the example order is a deterministic permutation of the seed.
std::vector<Batch> make_batches(const Dataset& dataset, const Vocab& vocab, int64_t max_len,
                                int64_t batch_size, uint64_t seed, bool shuffle);

// Keeps ceil(fraction * n_label) examples of each label, chosen by a seeded
// shuffle within the label; both halves preserve original dataset order.
// Rejects fraction outside (0, 1].
std::pair<Dataset, Dataset> per_intent_split(const Dataset& dataset, double fraction,
                                             uint64_t seed);

// Reads JSON-lines records {"text": ..., "text2"?: ..., "label": ...}.
// Labels get dense ids in first-seen order; malformed lines and empty files
// raise DataError naming the line.
Dataset load_jsonl(const std::string& path);

// Same, but labels must come from the fixed mapping; unknown labels raise
// DataError naming the line.
Dataset load_jsonl(const std::string& path, std::span<const std::string> fixed_labels);

}  // namespace cat
