#include "cat/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cat/rng.hpp"

namespace cat {

ProjectionParams ProjectionParams::init(int64_t d_h, int64_t d_k, uint64_t seed) {
    if (d_h < 1 || d_k < 1)
        throw std::invalid_argument("projection params: sizes must be >= 1");
    Rng rng(seed);
    ProjectionParams p;
    p.w1 = Array::zeros({d_h, d_h});
    p.w2 = Array::zeros({d_k, d_h});
    const double s1 = std::sqrt(2.0 / static_cast<double>(d_h + d_h));
    const double s2 = std::sqrt(2.0 / static_cast<double>(d_k + d_h));
    for (double& v : p.w1.values) v = rng.normal(0.0, s1);
    for (double& v : p.w2.values) v = rng.normal(0.0, s2);
    return p;
}

void ContrastiveConfig::validate() const {
    if (!(tau > 0.0))
        throw std::invalid_argument("contrastive config: tau must be positive, got " +
                                    std::to_string(tau));
    if (lambda < 0.0 || lambda > 1.0)
        throw std::invalid_argument("contrastive config: lambda must be in [0,1], got " +
                                    std::to_string(lambda));
    if (d_k < 1)
        throw std::invalid_argument("contrastive config: d_k must be >= 1");
}

Tensor project(Graph& g, Tensor h, Tensor w1, Tensor w2) {
    return g.matmul_nt(g.relu(g.matmul_nt(h, w1)), w2);
}

Tensor nt_xent(Graph& g, Tensor z_clean, Tensor z_adv, double tau) {
    if (!(tau > 0.0))
        throw std::invalid_argument("nt_xent: tau must be positive, got " +
                                    std::to_string(tau));
    if (z_clean.shape() != z_adv.shape())
        throw std::invalid_argument("nt_xent: view shapes differ, " +
                                    shape_str(z_clean.shape()) + " vs " +
                                    shape_str(z_adv.shape()));
    if (z_clean.shape().size() != 2 || z_clean.rows() < 1)
        throw std::invalid_argument("nt_xent: views must be non-empty 2-D, got " +
                                    shape_str(z_clean.shape()));

    const int64_t n = z_clean.rows();
    const int64_t m = 2 * n;

    std::vector<Tensor> views = {z_clean, z_adv};
    Tensor z = g.concat_rows(views);
    Tensor logits = g.scale(g.cosine_matrix(z, z), 1.0 / tau);

    // Self-similarities leave the denominator; the same additive trick as
    // attention masking zeroes them after exp.
    std::vector<double> diag(static_cast<size_t>(m * m), 0.0);
    for (int64_t i = 0; i < m; ++i) diag[static_cast<size_t>(i * m + i)] = -1e30;
    Tensor masked = g.add(logits, g.leaf({m, m}, std::move(diag)));

    // Row maxima enter as constants: any shift leaves logsumexp unchanged,
    // so detaching them keeps the gradient exact while bounding exp.
    std::vector<double> row_max(static_cast<size_t>(m));
    {
        auto mv = masked.values();
        for (int64_t i = 0; i < m; ++i)
            row_max[static_cast<size_t>(i)] =
                *std::max_element(mv.begin() + i * m, mv.begin() + (i + 1) * m);
    }
    Tensor max_leaf = g.leaf({m}, std::move(row_max));
    Tensor log_denom =
        g.add(g.log(g.row_sum(g.exp(g.sub_rowwise(masked, max_leaf)))), max_leaf);

    std::vector<int32_t> partner(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i)
        partner[static_cast<size_t>(i)] = static_cast<int32_t>(i < n ? i + n : i - n);
    Tensor pos = g.pick(logits, partner);

    return g.reduce_mean(g.sub(log_denom, pos));
}

}  // namespace cat
