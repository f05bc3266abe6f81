#include "cat/adversarial.hpp"

#include <cmath>
#include <stdexcept>

#include "cat/errors.hpp"

namespace cat {

namespace {

constexpr double kDegenerateNorm = 1e-12;

double sign_factor(PerturbationConfig::Sign sign) {
    return sign == PerturbationConfig::Sign::Ascent ? 1.0 : -1.0;
}

void require_finite(const Array& grad, const char* op) {
    if (!grad.all_finite())
        throw NumericError(std::string(op) + ": gradient contains non-finite values");
}

}  // namespace

Array fgsm_max_norm(const Array& grad, double epsilon, PerturbationConfig::Sign sign) {
    if (epsilon < 0.0)
        throw std::invalid_argument("fgsm_max_norm: epsilon must be non-negative");
    require_finite(grad, "fgsm_max_norm");
    const double s = sign_factor(sign) * epsilon;
    Array r = Array::zeros(grad.shape);
    for (size_t i = 0; i < grad.values.size(); ++i) {
        const double v = grad.values[i];
        if (v > 0.0)
            r.values[i] = s;
        else if (v < 0.0)
            r.values[i] = -s;
    }
    return r;
}

Array fgsm_l2(const Array& grad, double epsilon, PerturbationConfig::Sign sign,
              FgsmDiagnostics* diag) {
    if (epsilon < 0.0) throw std::invalid_argument("fgsm_l2: epsilon must be non-negative");
    require_finite(grad, "fgsm_l2");
    double sq = 0.0;
    for (double v : grad.values) sq += v * v;
    const double norm = std::sqrt(sq);
    Array r = Array::zeros(grad.shape);
    if (norm < kDegenerateNorm) {
        if (diag) diag->degenerate_gradient = true;
        return r;
    }
    const double s = sign_factor(sign) * epsilon / norm;
    for (size_t i = 0; i < grad.values.size(); ++i) r.values[i] = s * grad.values[i];
    return r;
}

AdversarialResult generate_adversarial(Graph& g, const EncoderParams& params,
                                       const BoundParams& bound, const Batch& batch,
                                       const PerturbationConfig& config,
                                       Rng* norm_rng, const DropoutMasks* dropout) {
    if (config.epsilon < 0.0)
        throw std::invalid_argument("generate_adversarial: epsilon must be non-negative");
    if (config.norm_form == PerturbationConfig::NormForm::RandomPerBatch && !norm_rng)
        throw std::invalid_argument(
            "generate_adversarial: RandomPerBatch needs the per-batch rng");

    AdversarialResult out;

    EncodeResult enc = encode_batch(g, params, bound, batch, {}, dropout);
    out.clean_h_cls = enc.h_cls;
    out.clean_probs = classify(g, enc.h_cls, bound.at(params, "classifier"));
    out.clean_loss = cross_entropy(g, out.clean_probs, batch.labels, &out.ce_diag);
    if (!std::isfinite(out.clean_loss.scalar()))
        throw NumericError("generate_adversarial: clean loss is not finite");

    g.backward(out.clean_loss);
    const Tensor base = config.target == PerturbationConfig::Target::EmbeddingMatrix
                            ? bound.at(params, "embedding")
                            : enc.embedded;
    auto gspan = base.grad();
    Array grad{base.shape(), std::vector<double>(gspan.begin(), gspan.end())};
    g.zero_grad();
    if (!grad.all_finite())
        throw NumericError("generate_adversarial: gradient at the perturbation target "
                           "is not finite");

    bool use_l2 = config.norm_form == PerturbationConfig::NormForm::L2;
    if (config.norm_form == PerturbationConfig::NormForm::RandomPerBatch)
        use_l2 = norm_rng->coin();
    out.used_l2 = use_l2;
    out.r = use_l2 ? fgsm_l2(grad, config.epsilon, config.sign_convention, &out.fgsm_diag)
                   : fgsm_max_norm(grad, config.epsilon, config.sign_convention);

    out.override_emb.target = config.target == PerturbationConfig::Target::EmbeddingMatrix
                                  ? EmbeddingOverride::Target::Matrix
                                  : EmbeddingOverride::Target::Words;
    // epsilon 0 keeps the lookup source itself, making the degenerate case
    // bit-identical to the clean pass by construction.
    out.override_emb.tensor =
        config.epsilon == 0.0 ? base : g.add(base, g.leaf(out.r));
    return out;
}

}  // namespace cat
