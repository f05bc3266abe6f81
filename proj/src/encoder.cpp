#include "cat/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cat/rng.hpp"

namespace cat {

namespace {

constexpr double kAttentionMask = -1e30;
constexpr double kProbFloor = 1e-12;

}  // namespace

void EncoderConfig::validate() const {
    auto need = [](int64_t v, const char* what) {
        if (v < 1)
            throw std::invalid_argument(std::string("encoder config: ") + what +
                                        " must be >= 1, got " + std::to_string(v));
    };
    need(layers, "layers");
    need(heads, "heads");
    need(d_h, "hidden size");
    need(d_v, "vocab size");
    need(max_len, "max_len");
    need(ffn, "ffn size");
    if (d_h % heads != 0)
        throw std::invalid_argument("encoder config: hidden size " + std::to_string(d_h) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    if (dropout < 0.0 || dropout >= 1.0)
        throw std::invalid_argument("encoder config: dropout must be in [0,1), got " +
                                    std::to_string(dropout));
}

EncoderParams EncoderParams::init(const EncoderConfig& config, int64_t num_classes,
                                  uint64_t seed) {
    config.validate();
    if (num_classes < 2)
        throw std::invalid_argument("encoder params: need at least 2 classes, got " +
                                    std::to_string(num_classes));

    EncoderParams p;
    p.config = config;
    p.num_classes = num_classes;
    Rng rng(seed);

    auto add = [&p](const std::string& name, Array a) {
        p.names.push_back(name);
        p.arrays.push_back(std::move(a));
    };
    auto normal_init = [&rng](Shape shape, double stddev) {
        Array a = Array::zeros(std::move(shape));
        for (double& v : a.values) v = rng.normal(0.0, stddev);
        return a;
    };
    auto xavier = [&normal_init](int64_t out, int64_t in) {
        return normal_init({out, in}, std::sqrt(2.0 / static_cast<double>(out + in)));
    };

    add("embedding", normal_init({config.d_v, config.d_h}, 0.1));
    add("positional", normal_init({config.max_len, config.d_h}, 0.1));
    for (int64_t l = 0; l < config.layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        add(pre + "ln1.gain", Array::filled({config.d_h}, 1.0));
        add(pre + "ln1.bias", Array::zeros({config.d_h}));
        add(pre + "wq", xavier(config.d_h, config.d_h));
        add(pre + "wk", xavier(config.d_h, config.d_h));
        add(pre + "wv", xavier(config.d_h, config.d_h));
        add(pre + "wo", xavier(config.d_h, config.d_h));
        add(pre + "ln2.gain", Array::filled({config.d_h}, 1.0));
        add(pre + "ln2.bias", Array::zeros({config.d_h}));
        add(pre + "ffn.w1", xavier(config.ffn, config.d_h));
        add(pre + "ffn.w2", xavier(config.d_h, config.ffn));
    }
    add("final_ln.gain", Array::filled({config.d_h}, 1.0));
    add("final_ln.bias", Array::zeros({config.d_h}));
    add("classifier", xavier(num_classes, config.d_h));
    return p;
}

int64_t EncoderParams::index_of(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int64_t>(i);
    throw std::invalid_argument("encoder params: no parameter named \"" + name + "\"");
}

const Array& EncoderParams::at(const std::string& name) const {
    return arrays[static_cast<size_t>(index_of(name))];
}

Array& EncoderParams::at(const std::string& name) {
    return arrays[static_cast<size_t>(index_of(name))];
}

int64_t EncoderParams::total_size() const {
    int64_t n = 0;
    for (const Array& a : arrays) n += a.numel();
    return n;
}

std::vector<double> EncoderParams::flatten() const {
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(total_size()));
    for (const Array& a : arrays) flat.insert(flat.end(), a.values.begin(), a.values.end());
    return flat;
}

void EncoderParams::unflatten(std::span<const double> flat) {
    if (static_cast<int64_t>(flat.size()) != total_size())
        throw std::invalid_argument("encoder params: flat vector of " +
                                    std::to_string(flat.size()) + " values for " +
                                    std::to_string(total_size()) + " parameters");
    size_t at = 0;
    for (Array& a : arrays) {
        std::copy(flat.begin() + static_cast<ptrdiff_t>(at),
                  flat.begin() + static_cast<ptrdiff_t>(at + a.values.size()),
                  a.values.begin());
        at += a.values.size();
    }
}

bool EncoderParams::all_finite() const {
    for (const Array& a : arrays)
        if (!a.all_finite()) return false;
    return true;
}

BoundParams bind_params(Graph& g, const EncoderParams& params) {
    BoundParams bound;
    for (const Array& a : params.arrays) bound.tensors.push_back(g.leaf(a));
    return bound;
}

BoundParams bind_params_flat(Graph& g, const EncoderParams& params, Tensor flat) {
    if (flat.numel() != params.total_size())
        throw std::invalid_argument("bind_params_flat: flat tensor of " +
                                    std::to_string(flat.numel()) + " values for " +
                                    std::to_string(params.total_size()) + " parameters");
    Tensor row = g.reshape(flat, {1, flat.numel()});
    BoundParams bound;
    int64_t at = 0;
    for (const Array& a : params.arrays) {
        const int64_t n = a.numel();
        bound.tensors.push_back(g.reshape(g.slice_cols(row, at, n), a.shape));
        at += n;
    }
    return bound;
}

Tensor BoundParams::at(const EncoderParams& params, const std::string& name) const {
    return tensors[static_cast<size_t>(params.index_of(name))];
}

DropoutMasks make_dropout_masks(const EncoderConfig& config, int64_t n, int64_t t,
                                uint64_t seed) {
    DropoutMasks out;
    if (config.dropout == 0.0) return out;
    Rng rng(seed);
    const double keep = 1.0 - config.dropout;
    const int64_t sites = 1 + 2 * config.layers;
    for (int64_t s = 0; s < sites; ++s) {
        Array m = Array::zeros({n * t, config.d_h});
        for (double& v : m.values) v = rng.uniform() < keep ? 1.0 / keep : 0.0;
        out.masks.push_back(std::move(m));
    }
    return out;
}

namespace {

Tensor apply_dropout(Graph& g, Tensor x, const DropoutMasks* dropout, size_t site) {
    if (!dropout || dropout->masks.empty()) return x;
    const Array& m = dropout->masks.at(site);
    if (m.shape != x.shape())
        throw std::invalid_argument("dropout mask shape " + shape_str(m.shape) +
                                    " does not match activations " + shape_str(x.shape()));
    return g.mul(x, g.leaf(m));
}

}  // namespace

EncodeResult encode_batch(Graph& g, const EncoderParams& params, const BoundParams& bound,
                          const Batch& batch,
                          const std::optional<EmbeddingOverride>& override_emb,
                          const DropoutMasks* dropout) {
    const EncoderConfig& cfg = params.config;
    const int64_t n = batch.n, t = batch.t;
    if (n < 1 || t < 1) throw std::invalid_argument("encode_batch: empty batch");
    if (t > cfg.max_len)
        throw std::invalid_argument("encode_batch: batch length " + std::to_string(t) +
                                    " exceeds max_len " + std::to_string(cfg.max_len));

    // Token embeddings, possibly redirected through an override.
    if (override_emb && override_emb->tensor.graph() != &g)
        throw std::invalid_argument("encode_batch: override tensor belongs to a different graph");
    Tensor embedded;
    if (override_emb && override_emb->target == EmbeddingOverride::Target::Words) {
        if (override_emb->tensor.shape() != Shape{n * t, cfg.d_h})
            throw std::invalid_argument(
                "encode_batch: word override shape " + shape_str(override_emb->tensor.shape()) +
                ", batch needs (" + std::to_string(n * t) + "," + std::to_string(cfg.d_h) + ")");
        embedded = override_emb->tensor;
    } else {
        Tensor table = bound.at(params, "embedding");
        if (override_emb) {
            if (override_emb->tensor.shape() != table.shape())
                throw std::invalid_argument("encode_batch: matrix override shape " +
                                            shape_str(override_emb->tensor.shape()) +
                                            " does not match the embedding matrix " +
                                            shape_str(table.shape()));
            table = override_emb->tensor;
        }
        embedded = g.embedding_lookup(table, batch.ids);
    }

    Tensor pos = g.tile_rows(g.slice_rows(bound.at(params, "positional"), 0, t), n);
    Tensor x = g.add(embedded, pos);
    size_t dropout_site = 0;
    x = apply_dropout(g, x, dropout, dropout_site++);

    // Additive attention masks, one (t,t) constant per example: a key at a
    // padded position gets kAttentionMask, which underflows to exactly zero
    // weight after softmax.
    std::vector<Tensor> attn_masks;
    attn_masks.reserve(static_cast<size_t>(n));
    for (int64_t ex = 0; ex < n; ++ex) {
        std::vector<double> m(static_cast<size_t>(t * t), 0.0);
        for (int64_t j = 0; j < t; ++j)
            if (!batch.mask[static_cast<size_t>(ex * t + j)])
                for (int64_t i = 0; i < t; ++i) m[static_cast<size_t>(i * t + j)] = kAttentionMask;
        attn_masks.push_back(g.leaf({t, t}, std::move(m)));
    }

    const int64_t hd = cfg.d_h / cfg.heads;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    for (int64_t l = 0; l < cfg.layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";

        Tensor xn = g.layer_norm_rows(x, bound.at(params, pre + "ln1.gain"),
                                      bound.at(params, pre + "ln1.bias"));
        Tensor q = g.matmul_nt(xn, bound.at(params, pre + "wq"));
        Tensor k = g.matmul_nt(xn, bound.at(params, pre + "wk"));
        Tensor v = g.matmul_nt(xn, bound.at(params, pre + "wv"));

        std::vector<Tensor> ex_outputs;
        ex_outputs.reserve(static_cast<size_t>(n));
        for (int64_t ex = 0; ex < n; ++ex) {
            Tensor qe = g.slice_rows(q, ex * t, t);
            Tensor ke = g.slice_rows(k, ex * t, t);
            Tensor ve = g.slice_rows(v, ex * t, t);
            std::vector<Tensor> head_outputs;
            head_outputs.reserve(static_cast<size_t>(cfg.heads));
            for (int64_t h = 0; h < cfg.heads; ++h) {
                Tensor qh = g.slice_cols(qe, h * hd, hd);
                Tensor kh = g.slice_cols(ke, h * hd, hd);
                Tensor vh = g.slice_cols(ve, h * hd, hd);
                Tensor scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_hd);
                Tensor weights = g.softmax_rows(g.add(scores, attn_masks[static_cast<size_t>(ex)]));
                head_outputs.push_back(g.matmul(weights, vh));
            }
            ex_outputs.push_back(g.concat_cols(head_outputs));
        }
        Tensor attn = g.matmul_nt(g.concat_rows(ex_outputs), bound.at(params, pre + "wo"));
        attn = apply_dropout(g, attn, dropout, dropout_site++);
        x = g.add(x, attn);

        Tensor xn2 = g.layer_norm_rows(x, bound.at(params, pre + "ln2.gain"),
                                       bound.at(params, pre + "ln2.bias"));
        Tensor f = g.matmul_nt(g.relu(g.matmul_nt(xn2, bound.at(params, pre + "ffn.w1"))),
                               bound.at(params, pre + "ffn.w2"));
        f = apply_dropout(g, f, dropout, dropout_site++);
        x = g.add(x, f);
    }

    Tensor hidden = g.layer_norm_rows(x, bound.at(params, "final_ln.gain"),
                                      bound.at(params, "final_ln.bias"));
    std::vector<int64_t> cls_rows(static_cast<size_t>(n));
    for (int64_t ex = 0; ex < n; ++ex) cls_rows[static_cast<size_t>(ex)] = ex * t;
    Tensor h_cls = g.gather_rows(hidden, cls_rows);
    return {h_cls, hidden, embedded};
}

Tensor classify(Graph& g, Tensor h_cls, Tensor classifier) {
    return g.softmax_rows(g.matmul_nt(h_cls, classifier));
}

Tensor cross_entropy(Graph& g, Tensor probs, std::span<const int32_t> labels,
                     CeDiagnostics* diag) {
    if (probs.rows() != static_cast<int64_t>(labels.size()))
        throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for " + std::to_string(probs.rows()) + " rows");
    Tensor picked = g.pick(probs, labels);
    if (diag) {
        auto pv = picked.values();
        for (size_t i = 0; i < pv.size(); ++i) {
            if (pv[i] < kProbFloor) {
                diag->clamped = true;
                diag->first_row = static_cast<int64_t>(i);
                break;
            }
        }
    }
    Tensor clamped = g.clamp_min(picked, kProbFloor);
    const double inv_n = 1.0 / static_cast<double>(labels.size());
    return g.scale(g.reduce_sum(g.log(clamped)), -inv_n);
}

std::vector<int32_t> argmax_predict(Tensor probs) {
    const int64_t n = probs.rows(), c = probs.cols();
    auto pv = probs.values();
    std::vector<int32_t> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int32_t best = 0;
        double best_v = pv[static_cast<size_t>(i * c)];
        for (int64_t j = 1; j < c; ++j) {
            const double v = pv[static_cast<size_t>(i * c + j)];
            if (v > best_v) {
                best_v = v;
                best = static_cast<int32_t>(j);
            }
        }
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

}  // namespace cat
