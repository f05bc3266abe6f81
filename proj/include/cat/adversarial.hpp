#pragma once

#include <cstdint>

#include "cat/encoder.hpp"
#include "cat/rng.hpp"
#include "cat/tensor.hpp"
#include "cat/text.hpp"

namespace cat {

struct PerturbationConfig {
    enum class NormForm { MaxNorm, L2, RandomPerBatch };
    enum class Target { EmbeddingMatrix, WordEmbeddings };
    enum class Sign { Ascent, Negated };

    double epsilon = 0.0;
    NormForm norm_form = NormForm::MaxNorm;
    Target target = Target::EmbeddingMatrix;
    Sign sign_convention = Sign::Ascent;
    uint64_t seed = 0;  // drives the per-batch norm-form draw
};

struct FgsmDiagnostics {
    bool degenerate_gradient = false;  // L2 norm below 1e-12, perturbation zeroed
};

// r = s * epsilon * sign(grad), s = +1 (Ascent) or -1 (Negated).
// Every entry lands in {-epsilon, 0, +epsilon}; zero exactly where grad is 0.
Array fgsm_max_norm(const Array& grad, double epsilon, PerturbationConfig::Sign sign);

// r = s * epsilon * grad / ||grad||_2 with one norm over all entries, so
// ||r||_2 == epsilon for nonzero gradients. A norm below 1e-12 yields a zero
// perturbation and sets the diagnostic instead of dividing.
Array fgsm_l2(const Array& grad, double epsilon, PerturbationConfig::Sign sign,
              FgsmDiagnostics* diag = nullptr);

struct AdversarialResult {
    EmbeddingOverride override_emb;  // perturbed lookup source, in the same graph
    Tensor clean_loss;
    Tensor clean_probs;
    Tensor clean_h_cls;
    Array r;            // the perturbation itself, constant w.r.t. the graph
    bool used_l2 = false;
    FgsmDiagnostics fgsm_diag;
    CeDiagnostics ce_diag;
};

// Runs the clean forward pass and one backward from its cross-entropy,
// builds r from the gradient at the configured target, and returns an
// embedding override for the adversarial pass. The gradient buffers are
// reset before returning, so the caller's later backward starts clean.
// r is a leaf: no gradient flows through its construction.
// RandomPerBatch requires norm_rng, whose draws supply the per-batch choice.
// Raises NumericError when the clean loss or gradient is not finite.
AdversarialResult generate_adversarial(Graph& g, const EncoderParams& params,
                                       const BoundParams& bound, const Batch& batch,
                                       const PerturbationConfig& config,
                                       Rng* norm_rng = nullptr,
                                       const DropoutMasks* dropout = nullptr);

}  // namespace cat
