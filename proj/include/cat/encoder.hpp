#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cat/tensor.hpp"
#include "cat/text.hpp"

namespace cat {

struct EncoderConfig {
    int64_t layers = 2;
    int64_t heads = 2;
    int64_t d_h = 32;
    int64_t d_v = 0;
    int64_t max_len = 32;
    int64_t ffn = 64;
    double dropout = 0.0;

    void validate() const;  // counts >= 1, d_h divisible by heads, dropout in [0,1)
};

// Model weights as named arrays in a fixed canonical order. The order is the
// contract shared by the optimizer, the checkpoint format, and flatten().
struct EncoderParams {
    EncoderConfig config;
    int64_t num_classes = 0;
    std::vector<std::string> names;
    std::vector<Array> arrays;

    static EncoderParams init(const EncoderConfig& config, int64_t num_classes,
                              uint64_t seed);

    size_t count() const { return arrays.size(); }
    int64_t index_of(const std::string& name) const;  // throws when absent
    const Array& at(const std::string& name) const;
    Array& at(const std::string& name);

    int64_t total_size() const;
    std::vector<double> flatten() const;
    void unflatten(std::span<const double> flat);
    bool all_finite() const;
};

// Graph leaves for every parameter, aligned with EncoderParams order.
struct BoundParams {
    std::vector<Tensor> tensors;
    Tensor at(const EncoderParams& params, const std::string& name) const;
};

BoundParams bind_params(Graph& g, const EncoderParams& params);

// Carves all parameters out of one flat leaf; gradient checking drives the
// whole model through a single coordinate vector this way.
BoundParams bind_params_flat(Graph& g, const EncoderParams& params, Tensor flat);

// Replaces what token lookups read during a forward pass: either a full
// replacement for the embedding matrix, or the already-looked-up per-token
// rows for the whole batch, flattened to (N*T) x d_h.
struct EmbeddingOverride {
    enum class Target { Matrix, Words };
    Target target = Target::Matrix;
    Tensor tensor;
};

// Inverted-dropout masks, one per site in forward order: the embedding sum,
// then per layer the attention branch and the FFN branch. A training step
// that runs two passes must hand both passes the same masks.
struct DropoutMasks {
    std::vector<Array> masks;
};

DropoutMasks make_dropout_masks(const EncoderConfig& config, int64_t n, int64_t t,
                                uint64_t seed);

struct EncodeResult {
    Tensor h_cls;     // (N, d_h) final hidden state at each row's [CLS]
    Tensor hidden;    // (N*T, d_h) final hidden states for every position
    Tensor embedded;  // (N*T, d_h) token embeddings before positions are added
};

EncodeResult encode_batch(Graph& g, const EncoderParams& params, const BoundParams& bound,
                          const Batch& batch,
                          const std::optional<EmbeddingOverride>& override_emb = {},
                          const DropoutMasks* dropout = nullptr);

// Row-wise class probabilities softmax(h_cls W^T).
Tensor classify(Graph& g, Tensor h_cls, Tensor classifier);

struct CeDiagnostics {
    bool clamped = false;    // some true-label probability hit the 1e-12 floor
    int64_t first_row = -1;  // first batch row where that happened
};

// Mean negative log probability of the true labels. Probabilities below
// 1e-12 are clamped and reported through diag.
Tensor cross_entropy(Graph& g, Tensor probs, std::span<const int32_t> labels,
                     CeDiagnostics* diag = nullptr);

// Per-row argmax; ties resolve to the smallest index.
std::vector<int32_t> argmax_predict(Tensor probs);

}  // namespace cat
