#include "cat/train.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <thread>

#include "cat/errors.hpp"

namespace cat {

void TrainConfig::validate() const {
    if (!std::isfinite(learning_rate) || learning_rate <= 0.0)
        throw std::invalid_argument("train config: learning rate must be positive, got " +
                                    std::to_string(learning_rate));
    if (!std::isfinite(weight_decay) || weight_decay < 0.0)
        throw std::invalid_argument("train config: weight decay must be >= 0, got " +
                                    std::to_string(weight_decay));
    if (!std::isfinite(warmup_fraction) || warmup_fraction < 0.0 || warmup_fraction >= 1.0)
        throw std::invalid_argument("train config: warmup fraction must be in [0,1), got " +
                                    std::to_string(warmup_fraction));
    if (epochs < 1)
        throw std::invalid_argument("train config: epochs must be >= 1, got " +
                                    std::to_string(epochs));
    if (batch_size < 1)
        throw std::invalid_argument("train config: batch size must be >= 1, got " +
                                    std::to_string(batch_size));
    if (!std::isfinite(perturbation.epsilon) || perturbation.epsilon < 0.0)
        throw std::invalid_argument("train config: epsilon must be >= 0, got " +
                                    std::to_string(perturbation.epsilon));
    encoder.validate();
    contrastive.validate();
}

int64_t TrainState::total_size() const {
    int64_t n = encoder.total_size();
    if (projection) n += projection->w1.numel() + projection->w2.numel();
    return n;
}

std::vector<double> TrainState::flatten() const {
    std::vector<double> flat = encoder.flatten();
    if (projection) {
        flat.insert(flat.end(), projection->w1.values.begin(), projection->w1.values.end());
        flat.insert(flat.end(), projection->w2.values.begin(), projection->w2.values.end());
    }
    return flat;
}

void TrainState::unflatten(std::span<const double> flat) {
    if (static_cast<int64_t>(flat.size()) != total_size())
        throw std::invalid_argument("train state: unflatten with " +
                                    std::to_string(flat.size()) + " values for " +
                                    std::to_string(total_size()) + " parameters");
    encoder.unflatten(flat.subspan(0, static_cast<size_t>(encoder.total_size())));
    if (projection) {
        const double* p = flat.data() + encoder.total_size();
        std::memcpy(projection->w1.values.data(), p,
                    sizeof(double) * projection->w1.values.size());
        std::memcpy(projection->w2.values.data(), p + projection->w1.numel(),
                    sizeof(double) * projection->w2.values.size());
    }
}

Tensor combined_loss(Graph& g, Tensor ce_clean, Tensor ce_adv, Tensor ctr,
                     double lambda) {
    if (lambda < 0.0 || lambda > 1.0)
        throw std::invalid_argument("combined loss: lambda must be in [0,1], got " +
                                    std::to_string(lambda));
    if (ce_clean.numel() != 1 || ce_adv.numel() != 1 || ctr.numel() != 1)
        throw std::invalid_argument("combined loss: all terms must be scalars");
    Tensor classification = g.scale(g.add(ce_clean, ce_adv), (1.0 - lambda) / 2.0);
    return g.add(classification, g.scale(ctr, lambda));
}

double lr_at(int64_t step, int64_t total_steps, double base_lr,
             double warmup_fraction) {
    if (total_steps < 1)
        throw std::invalid_argument("lr schedule: total steps must be >= 1");
    if (step < 0 || step > total_steps)
        throw std::invalid_argument("lr schedule: step " + std::to_string(step) +
                                    " outside [0," + std::to_string(total_steps) + "]");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
        throw std::invalid_argument("lr schedule: warmup fraction must be in [0,1)");
    const int64_t warmup_steps =
        static_cast<int64_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
    if (step < warmup_steps)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const int64_t tail = total_steps - warmup_steps;
    if (tail == 0) return 0.0;
    return base_lr * static_cast<double>(total_steps - step) / static_cast<double>(tail);
}

void adamw_step(std::span<double> params, std::span<const double> grads,
                OptimizerState& state, double lr, double weight_decay,
                double beta1, double beta2, double eps) {
    const size_t n = params.size();
    if (grads.size() != n)
        throw std::invalid_argument("adamw: " + std::to_string(grads.size()) +
                                    " gradients for " + std::to_string(n) + " parameters");
    const bool fresh = state.m.empty() && state.v.empty();
    if (!fresh && (state.m.size() != n || state.v.size() != n))
        throw std::invalid_argument("adamw: optimizer state sized for " +
                                    std::to_string(state.m.size()) + " parameters, got " +
                                    std::to_string(n));
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0))
        throw std::invalid_argument("adamw: betas must be in [0,1) and eps positive");
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(grads[i]))
            throw NumericError("adamw: non-finite gradient at coordinate " +
                               std::to_string(i));
    // Stage the whole update, then commit: a failure below must not leave a
    // half-stepped state behind.
    const int64_t t = state.step + 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    const double decay = 1.0 - lr * weight_decay;
    std::vector<double> new_m(n), new_v(n), new_p(n);
    for (size_t i = 0; i < n; ++i) {
        const double m0 = fresh ? 0.0 : state.m[i];
        const double v0 = fresh ? 0.0 : state.v[i];
        new_m[i] = beta1 * m0 + (1.0 - beta1) * grads[i];
        new_v[i] = beta2 * v0 + (1.0 - beta2) * grads[i] * grads[i];
        const double mhat = new_m[i] / bc1;
        const double vhat = new_v[i] / bc2;
        new_p[i] = params[i] * decay - lr * (mhat / (std::sqrt(vhat) + eps));
    }
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(new_p[i]))
            throw NumericError("adamw: non-finite parameter at coordinate " +
                               std::to_string(i) + " after update");
    state.m = std::move(new_m);
    state.v = std::move(new_v);
    std::memcpy(params.data(), new_p.data(), sizeof(double) * n);
    state.step = t;
}

StepDiagnostics train_step(TrainState& state, OptimizerState& opt,
                           const Batch& batch, const TrainConfig& config,
                           double lr, Rng* norm_rng, uint64_t dropout_seed) {
    config.validate();
    if (batch.n < 1) throw std::invalid_argument("train step: empty batch");
    if (!std::isfinite(lr) || lr < 0.0)
        throw std::invalid_argument("train step: learning rate must be >= 0");
    const bool wants_ctr =
        config.mode == TrainMode::AT_CTR && config.contrastive.lambda > 0.0;
    if (wants_ctr && !state.projection)
        throw std::invalid_argument("train step: AT_CTR mode without a projection head");

    Graph g;
    BoundParams bound = bind_params(g, state.encoder);
    DropoutMasks masks;
    const DropoutMasks* masks_ptr = nullptr;
    if (state.encoder.config.dropout > 0.0) {
        masks = make_dropout_masks(state.encoder.config, batch.n, batch.t, dropout_seed);
        masks_ptr = &masks;
    }

    StepDiagnostics diag;
    Tensor loss;
    Tensor proj_w1, proj_w2;  // bound only when the contrastive term is live
    if (config.mode == TrainMode::Baseline) {
        EncodeResult enc = encode_batch(g, state.encoder, bound, batch, {}, masks_ptr);
        Tensor probs = classify(g, enc.h_cls, bound.at(state.encoder, "classifier"));
        CeDiagnostics ce_diag;
        loss = cross_entropy(g, probs, batch.labels, &ce_diag);
        diag.ce_clean = loss.scalar();
        diag.clamped_log = ce_diag.clamped;
    } else {
        AdversarialResult adv = generate_adversarial(g, state.encoder, bound, batch,
                                                     config.perturbation, norm_rng,
                                                     masks_ptr);
        EncodeResult enc_adv =
            encode_batch(g, state.encoder, bound, batch, adv.override_emb, masks_ptr);
        Tensor probs_adv =
            classify(g, enc_adv.h_cls, bound.at(state.encoder, "classifier"));
        CeDiagnostics ce_diag;
        Tensor ce_adv = cross_entropy(g, probs_adv, batch.labels, &ce_diag);
        diag.ce_clean = adv.clean_loss.scalar();
        diag.ce_adv = ce_adv.scalar();
        diag.used_l2 = adv.used_l2;
        diag.degenerate_gradient = adv.fgsm_diag.degenerate_gradient;
        diag.clamped_log = adv.ce_diag.clamped || ce_diag.clamped;
        if (wants_ctr) {
            proj_w1 = g.leaf(state.projection->w1);
            proj_w2 = g.leaf(state.projection->w2);
            Tensor z_clean = project(g, adv.clean_h_cls, proj_w1, proj_w2);
            Tensor z_adv = project(g, enc_adv.h_cls, proj_w1, proj_w2);
            Tensor ctr = nt_xent(g, z_clean, z_adv, config.contrastive.tau);
            diag.ctr = ctr.scalar();
            loss = combined_loss(g, adv.clean_loss, ce_adv, ctr,
                                 config.contrastive.lambda);
        } else {
            loss = g.scale(g.add(adv.clean_loss, ce_adv), 0.5);
        }
    }
    diag.loss = loss.scalar();
    if (!std::isfinite(diag.loss))
        throw NumericError("train step: non-finite loss");

    g.backward(loss);

    // Flat gradient vector in TrainState order. With the contrastive graph
    // off, the projection entries stay zero and only weight decay moves them.
    std::vector<double> flat_grads;
    flat_grads.reserve(static_cast<size_t>(state.total_size()));
    for (const Tensor& t : bound.tensors) {
        auto gspan = t.grad();
        flat_grads.insert(flat_grads.end(), gspan.begin(), gspan.end());
    }
    if (state.projection) {
        if (wants_ctr) {
            auto g1 = proj_w1.grad();
            auto g2 = proj_w2.grad();
            flat_grads.insert(flat_grads.end(), g1.begin(), g1.end());
            flat_grads.insert(flat_grads.end(), g2.begin(), g2.end());
        } else {
            flat_grads.resize(flat_grads.size() + state.projection->w1.values.size() +
                                  state.projection->w2.values.size(),
                              0.0);
        }
    }
    std::vector<double> flat_params = state.flatten();
    adamw_step(flat_params, flat_grads, opt, lr, config.weight_decay);
    state.unflatten(flat_params);
    return diag;
}

std::vector<int32_t> predict(const EncoderParams& params, const Dataset& dataset,
                             const Vocab& vocab, int64_t batch_size) {
    if (dataset.size() == 0) throw std::invalid_argument("predict: empty dataset");
    std::vector<Batch> batches = make_batches(dataset, vocab, params.config.max_len,
                                              batch_size, 0, false);
    std::vector<int32_t> out(dataset.size(), -1);
    for (const Batch& b : batches) {
        Graph g;
        BoundParams bound = bind_params(g, params);
        EncodeResult enc = encode_batch(g, params, bound, b);
        Tensor probs = classify(g, enc.h_cls, bound.at(params, "classifier"));
        std::vector<int32_t> preds = argmax_predict(probs);
        for (int64_t i = 0; i < b.n; ++i)
            out[static_cast<size_t>(b.example_index[static_cast<size_t>(i)])] =
                preds[static_cast<size_t>(i)];
    }
    return out;
}

TrainResult train(const Dataset& train_set, const Dataset& dev_set,
                  const Vocab& vocab, const TrainConfig& config) {
    config.validate();
    if (train_set.size() == 0) throw std::invalid_argument("train: empty dataset");
    if (dev_set.size() == 0) throw std::invalid_argument("train: empty dev set");
    if (train_set.label_names != dev_set.label_names)
        throw std::invalid_argument("train: dataset and dev set label spaces differ");

    TrainResult result;
    result.state.encoder = EncoderParams::init(config.encoder, train_set.num_labels(),
                                               derive_seed(config.seed, 11));
    if (config.mode == TrainMode::AT_CTR)
        result.state.projection = ProjectionParams::init(
            config.encoder.d_h, config.contrastive.d_k, derive_seed(config.seed, 12));

    Rng norm_rng(config.perturbation.seed);
    const int64_t n = static_cast<int64_t>(train_set.size());
    const int64_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const int64_t total_steps = config.epochs * steps_per_epoch;

    int64_t step = 0;
    for (int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::vector<Batch> batches =
            make_batches(train_set, vocab, config.encoder.max_len, config.batch_size,
                         derive_seed(config.seed, 0x100 + static_cast<uint64_t>(epoch)),
                         true);
        double loss_sum = 0.0;
        for (const Batch& b : batches) {
            const double lr =
                lr_at(step, total_steps, config.learning_rate, config.warmup_fraction);
            StepDiagnostics diag = train_step(
                result.state, result.optimizer, b, config, lr, &norm_rng,
                derive_seed(config.seed, 0x9000 + static_cast<uint64_t>(step)));
            loss_sum += diag.loss;
            ++step;
        }
        std::vector<int32_t> preds =
            predict(result.state.encoder, dev_set, vocab, config.batch_size);
        int64_t correct = 0;
        for (size_t i = 0; i < dev_set.size(); ++i)
            if (preds[i] == dev_set.examples[i].label) ++correct;
        EpochLog entry;
        entry.epoch = epoch;
        entry.mean_train_loss = loss_sum / static_cast<double>(batches.size());
        entry.dev_accuracy =
            static_cast<double>(correct) / static_cast<double>(dev_set.size());
        result.log.push_back(entry);
    }
    result.steps = step;
    return result;
}

GridOutcome grid_search(const TrainConfig& base, const GridAxes& axes,
                        const std::function<double(const TrainConfig&)>& evaluate,
                        int threads) {
    if (axes.epsilons.empty() || axes.taus.empty() || axes.lambdas.empty() ||
        axes.learning_rates.empty() || axes.batch_sizes.empty())
        throw std::invalid_argument("grid search: every axis needs at least one value");
    if (!evaluate) throw std::invalid_argument("grid search: no evaluation closure");

    GridOutcome out;
    for (double eps : axes.epsilons)
        for (double tau : axes.taus)
            for (double lambda : axes.lambdas)
                for (double lr : axes.learning_rates)
                    for (int64_t bs : axes.batch_sizes) {
                        GridTrial trial;
                        trial.index = static_cast<int64_t>(out.trials.size());
                        trial.config = base;
                        trial.config.perturbation.epsilon = eps;
                        trial.config.contrastive.tau = tau;
                        trial.config.contrastive.lambda = lambda;
                        trial.config.learning_rate = lr;
                        trial.config.batch_size = bs;
                        out.trials.push_back(std::move(trial));
                    }

    auto run_one = [&](GridTrial& trial) {
        try {
            trial.dev_metric = evaluate(trial.config);
        } catch (const std::exception& e) {
            trial.failed = true;
            trial.error = e.what();
        } catch (...) {
            trial.failed = true;
            trial.error = "unknown error";
        }
    };
    if (threads <= 1) {
        for (GridTrial& trial : out.trials) run_one(trial);
    } else {
        std::atomic<size_t> next{0};
        auto worker = [&]() {
            for (;;) {
                const size_t i = next.fetch_add(1);
                if (i >= out.trials.size()) return;
                run_one(out.trials[i]);
            }
        };
        std::vector<std::thread> pool;
        const size_t want = std::min<size_t>(static_cast<size_t>(threads),
                                             out.trials.size());
        for (size_t i = 0; i < want; ++i) pool.emplace_back(worker);
        for (std::thread& th : pool) th.join();
    }

    int64_t best = -1;
    for (const GridTrial& trial : out.trials) {
        if (trial.failed) continue;
        if (best < 0 || trial.dev_metric > out.trials[static_cast<size_t>(best)].dev_metric)
            best = trial.index;
    }
    if (best < 0)
        throw NumericError("grid search: every trial failed; first error: " +
                           out.trials.front().error);
    out.best = out.trials[static_cast<size_t>(best)];
    return out;
}

}  // namespace cat
