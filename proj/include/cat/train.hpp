#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cat/adversarial.hpp"
#include "cat/contrastive.hpp"
#include "cat/encoder.hpp"
#include "cat/rng.hpp"
#include "cat/text.hpp"

namespace cat {

enum class TrainMode { Baseline, AT, AT_CTR };

struct TrainConfig {
    double learning_rate = 1e-3;
    double weight_decay = 0.01;
    double warmup_fraction = 0.10;
    int64_t epochs = 5;
    int64_t batch_size = 32;
    uint64_t seed = 1;
    TrainMode mode = TrainMode::Baseline;
    EncoderConfig encoder;
    PerturbationConfig perturbation;
    ContrastiveConfig contrastive;  // lambda and tau live here

    void validate() const;
};

// Everything the optimizer moves: encoder weights plus, in AT_CTR mode, the
// projection head. flatten() keeps encoder parameters first so the two
// halves stay comparable across modes.
struct TrainState {
    EncoderParams encoder;
    std::optional<ProjectionParams> projection;

    int64_t total_size() const;
    std::vector<double> flatten() const;
    void unflatten(std::span<const double> flat);
};

struct OptimizerState {
    std::vector<double> m;
    std::vector<double> v;
    int64_t step = 0;
};

// ((1-lambda)/2) * (ce_clean + ce_adv) + lambda * ctr, built in the graph.
Tensor combined_loss(Graph& g, Tensor ce_clean, Tensor ce_adv, Tensor ctr,
                     double lambda);

// Linear warmup from 0 to base_lr over the first ceil(warmup_fraction *
// total_steps) steps, then linear decay to 0 at total_steps. Step is 0-based.
double lr_at(int64_t step, int64_t total_steps, double base_lr,
             double warmup_fraction);

// One AdamW update with bias-corrected moments and decoupled weight decay.
// The update is computed in full before anything is written back, so a
// non-finite gradient or result leaves params and state exactly as they were.
void adamw_step(std::span<double> params, std::span<const double> grads,
                OptimizerState& state, double lr, double weight_decay,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct StepDiagnostics {
    double ce_clean = 0.0;
    std::optional<double> ce_adv;  // engaged in AT and AT_CTR modes
    std::optional<double> ctr;     // engaged in AT_CTR mode with lambda > 0
    double loss = 0.0;
    bool used_l2 = false;
    bool degenerate_gradient = false;
    bool clamped_log = false;
};

// One optimizer step on one batch: clean pass, adversarial pass, contrastive
// term, combined objective, backward, AdamW, all per config.mode. Failure at
// any point leaves state and opt untouched. norm_rng feeds the per-batch
// norm draw; dropout_seed makes the step's masks (shared by both passes).
StepDiagnostics train_step(TrainState& state, OptimizerState& opt,
                           const Batch& batch, const TrainConfig& config,
                           double lr, Rng* norm_rng, uint64_t dropout_seed);

// Argmax predictions for every example, in dataset order. Evaluation path:
// no dropout, no shuffling.
std::vector<int32_t> predict(const EncoderParams& params, const Dataset& dataset,
                             const Vocab& vocab, int64_t batch_size);

struct EpochLog {
    int64_t epoch = 0;  // 1-based
    double mean_train_loss = 0.0;
    double dev_accuracy = 0.0;
};

struct TrainResult {
    TrainState state;
    OptimizerState optimizer;
    std::vector<EpochLog> log;  // one entry per epoch
    int64_t steps = 0;
};

// Full run: epochs * ceil(|train| / batch) steps under the lr_at schedule,
// batches reshuffled per epoch, dev accuracy logged per epoch, final-epoch
// parameters returned (no early stopping).
TrainResult train(const Dataset& train_set, const Dataset& dev_set,
                  const Vocab& vocab, const TrainConfig& config);

// One value per axis is a fixed hyperparameter; every axis must be non-empty.
struct GridAxes {
    std::vector<double> epsilons;
    std::vector<double> taus;
    std::vector<double> lambdas;
    std::vector<double> learning_rates;
    std::vector<int64_t> batch_sizes;
};

struct GridTrial {
    int64_t index = 0;  // enumeration order
    TrainConfig config;
    double dev_metric = 0.0;
    bool failed = false;
    std::string error;
};

struct GridOutcome {
    GridTrial best;
    std::vector<GridTrial> trials;
};

// Evaluates every combination of the axes (epsilon outermost, batch size
// innermost) through the caller's closure, which returns the dev metric for
// one config. Trial failures are recorded, not fatal, unless every trial
// fails. Ties on the metric keep the earliest enumeration. With threads > 1
// trials run concurrently; the closure must be safe to call from several
// threads at once.
GridOutcome grid_search(const TrainConfig& base, const GridAxes& axes,
                        const std::function<double(const TrainConfig&)>& evaluate,
                        int threads = 1);

}  // namespace cat
