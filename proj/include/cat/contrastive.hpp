#pragma once

#include <cstdint>

#include "cat/tensor.hpp"

namespace cat {

// Two-layer projection head feeding the contrastive loss. Kept apart from the
// encoder parameters: classification never reads the projected space.
struct ProjectionParams {
    Array w1;  // (d_h, d_h)
    Array w2;  // (d_k, d_h)

    static ProjectionParams init(int64_t d_h, int64_t d_k, uint64_t seed);
    int64_t d_k() const { return w2.shape.empty() ? 0 : w2.shape[0]; }
    bool all_finite() const { return w1.all_finite() && w2.all_finite(); }
};

struct ContrastiveConfig {
    double tau = 0.1;     // temperature on cosine similarities
    double lambda = 0.1;  // objective mixing weight, consumed by the train loop
    int64_t d_k = 16;     // projection output size

    void validate() const;  // tau > 0, lambda in [0,1], d_k >= 1
};

// z = W2 relu(W1 h) applied rowwise.
Tensor project(Graph& g, Tensor h, Tensor w1, Tensor w2);

// Normalized-temperature cross entropy over the 2N views {clean, adversarial}.
// Row i of each input is one view; rows i and i+N are the positive pair. For
// each of the 2N anchors the numerator is exp(cos(anchor, partner)/tau) and
// the denominator sums exp(cos(anchor, k)/tau) over all views except the
// anchor itself (the positive stays in). Returns the mean over all anchors.
// Rejects zero-norm rows, naming the row.
Tensor nt_xent(Graph& g, Tensor z_clean, Tensor z_adv, double tau);

}  // namespace cat
