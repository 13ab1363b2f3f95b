// SPDX-License-Identifier: Apache-2.0
//
// T5-style transformer building blocks: layout-aware input embedding (token
// lookup plus bucketized box-corner lookups summed together), relative
// position bias, multi-head attention, pre-norm encoder/decoder layers.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hivt5/errors.hpp"
#include "hivt5/geometry.hpp"
#include "hivt5/tensor.hpp"

namespace hivt5 {

constexpr double kMaskHidden = -1e9;

using ParamList = std::vector<std::pair<std::string, Tensor>>;

// ---------------------------------------------------------------------------
// layout-aware embedding
// ---------------------------------------------------------------------------

// Token embedding summed with four bucketized coordinate lookups. x0 and x1
// share one table, y0 and y1 the other. Each coordinate table carries one
// extra trailing row: the reserved bucket for tokens without a box (question
// and decoder-side tokens).
struct SpatialEmbedder {
    Tensor tok_table;  // [vocab, d]
    Tensor x_table;    // [buckets_x + 1, d]
    Tensor y_table;    // [buckets_y + 1, d]
    std::size_t buckets_x = 0;
    std::size_t buckets_y = 0;

    SpatialEmbedder() = default;
    SpatialEmbedder(std::size_t vocab, std::size_t d, std::size_t bx, std::size_t by, Rng& rng)
        : tok_table(Tensor::param({vocab, d}, rng, 0.02)),
          x_table(Tensor::param({bx + 1, d}, rng, 0.02)),
          y_table(Tensor::param({by + 1, d}, rng, 0.02)),
          buckets_x(bx),
          buckets_y(by) {}

    // floor(c * buckets) clamped to [0, buckets-1].
    static std::size_t bucket(double c, std::size_t buckets) {
        auto b = static_cast<long long>(std::floor(c * static_cast<double>(buckets)));
        if (b < 0) b = 0;
        if (b >= static_cast<long long>(buckets)) b = static_cast<long long>(buckets) - 1;
        return static_cast<std::size_t>(b);
    }

    std::size_t no_box_x() const { return buckets_x; }
    std::size_t no_box_y() const { return buckets_y; }

    // Sequence embedding: tokens without a box hit the reserved bucket pair.
    Tensor embed(const std::vector<std::size_t>& ids, const std::vector<std::optional<Box>>& boxes) const {
        if (ids.size() != boxes.size()) throw ShapeError("embed: ids and boxes length mismatch");
        std::vector<std::size_t> bx0(ids.size()), by0(ids.size()), bx1(ids.size()), by1(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (boxes[i]) {
                validate_box(*boxes[i], "embed");
                bx0[i] = bucket((*boxes[i])[0], buckets_x);
                by0[i] = bucket((*boxes[i])[1], buckets_y);
                bx1[i] = bucket((*boxes[i])[2], buckets_x);
                by1[i] = bucket((*boxes[i])[3], buckets_y);
            } else {
                bx0[i] = bx1[i] = no_box_x();
                by0[i] = by1[i] = no_box_y();
            }
        }
        Tensor e = gather_rows(tok_table, ids);
        e = add(e, gather_rows(x_table, bx0));
        e = add(e, gather_rows(y_table, by0));
        e = add(e, gather_rows(x_table, bx1));
        e = add(e, gather_rows(y_table, by1));
        return e;
    }

    // Single-token convenience: E_O(t) + E_x(x0) + E_y(y0) + E_x(x1) + E_y(y1).
    Tensor embed_one(std::size_t token_id, const Box& box) const {
        if (token_id >= tok_table.shape()[0])
            throw ValidationError("embed_one: token id " + std::to_string(token_id) + " outside vocab");
        return reshape(embed({token_id}, {box}), {tok_table.shape()[1]});
    }

    void collect(ParamList& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".tok_table", tok_table);
        out.emplace_back(prefix + ".x_table", x_table);
        out.emplace_back(prefix + ".y_table", y_table);
    }
};

// ---------------------------------------------------------------------------
// relative position bias
// ---------------------------------------------------------------------------

// T5 bucketing: half the buckets split by sign (bidirectional), half of each
// side exact small distances, the rest log-spaced up to max_distance, beyond
// which everything lands in the terminal bucket of its sign.
inline std::size_t relative_bucket(long long relative_distance, std::size_t n_buckets, std::size_t max_distance,
                                   bool bidirectional = true) {
    if (n_buckets % 2 != 0) throw ConfigError("relative_bucket: n_buckets must be even");
    std::size_t bucket = 0;
    std::size_t half = n_buckets;
    if (bidirectional) {
        half = n_buckets / 2;
        if (relative_distance > 0) bucket += half;
        relative_distance = std::llabs(relative_distance);
    } else {
        relative_distance = relative_distance < 0 ? -relative_distance : 0;
    }
    std::size_t max_exact = half / 2;
    auto dist = static_cast<std::size_t>(relative_distance);
    if (dist < max_exact) return bucket + dist;
    double v = static_cast<double>(max_exact) +
               std::log(static_cast<double>(dist) / static_cast<double>(max_exact)) /
                   std::log(static_cast<double>(max_distance) / static_cast<double>(max_exact)) *
                   static_cast<double>(half - max_exact);
    auto large = static_cast<std::size_t>(v);
    return bucket + std::min(large, half - 1);
}

struct AttentionSpec {
    std::size_t d_model;
    std::size_t n_heads;
    std::size_t rel_buckets;
    std::size_t rel_max_distance;

    AttentionSpec(std::size_t d, std::size_t h, std::size_t buckets = 32, std::size_t max_dist = 128)
        : d_model(d), n_heads(h), rel_buckets(buckets), rel_max_distance(max_dist) {
        if (h == 0 || d % h != 0)
            throw ConfigError("attention: d_model " + std::to_string(d) + " not divisible by heads " +
                              std::to_string(h));
    }
    std::size_t d_head() const { return d_model / n_heads; }
};

// Bias tensor [heads, q_len, k_len] from a learnable [rel_buckets, heads]
// table; distance = key position - query position.
inline Tensor position_bias(const Tensor& bias_table, const AttentionSpec& spec, std::size_t q_len,
                            std::size_t k_len, bool bidirectional) {
    std::vector<std::size_t> idx(q_len * k_len);
    for (std::size_t i = 0; i < q_len; ++i)
        for (std::size_t j = 0; j < k_len; ++j)
            idx[i * k_len + j] =
                relative_bucket(static_cast<long long>(j) - static_cast<long long>(i), spec.rel_buckets,
                                spec.rel_max_distance, bidirectional);
    Tensor g = gather_rows(bias_table, idx);            // [q*k, H]
    g = reshape(g, {q_len, k_len, spec.n_heads});
    return transpose(g, {2, 0, 1});                     // [H, q, k]
}

// Additive causal mask: position t sees keys <= t.
inline Tensor causal_mask(std::size_t len) {
    std::vector<double> m(len * len, 0.0);
    for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = i + 1; j < len; ++j) m[i * len + j] = kMaskHidden;
    return Tensor::from_values({len, len}, std::move(m));
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

// Softmax attention weights per layer, recorded when a trace is requested.
struct AttentionTrace {
    // weights[layer] has shape [heads, q_len, k_len], row-major.
    std::vector<std::vector<double>> weights;
    std::size_t n_heads = 0;
    std::size_t q_len = 0;
    std::size_t k_len = 0;
};

struct AttentionParams {
    Tensor wq, wk, wv, wo;  // all [d, d], bias-free

    AttentionParams() = default;
    AttentionParams(std::size_t d, Rng& rng) {
        double s = 1.0 / std::sqrt(static_cast<double>(d));
        wq = Tensor::param({d, d}, rng, s);
        wk = Tensor::param({d, d}, rng, s);
        wv = Tensor::param({d, d}, rng, s);
        wo = Tensor::param({d, d}, rng, s);
    }

    void collect(ParamList& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".wq", wq);
        out.emplace_back(prefix + ".wk", wk);
        out.emplace_back(prefix + ".wv", wv);
        out.emplace_back(prefix + ".wo", wo);
    }
};

// Scaled dot-product attention over n_heads heads with optional additive mask
// ([q,k]; 0 visible, large negative hidden) and position bias ([H,q,k]).
inline Tensor multi_head_attention(const AttentionParams& p, const AttentionSpec& spec, const Tensor& queries,
                                   const Tensor& keys, const Tensor& values, const Tensor* additive_mask = nullptr,
                                   const Tensor* bias = nullptr, std::vector<double>* trace_weights = nullptr) {
    if (queries.ndim() != 2 || keys.ndim() != 2 || values.ndim() != 2)
        throw ShapeError("attention: inputs must be [len, d_model]");
    if (keys.shape()[0] != values.shape()[0]) throw ShapeError("attention: key/value lengths differ");
    std::size_t tq = queries.shape()[0], tk = keys.shape()[0];
    std::size_t d = spec.d_model, h = spec.n_heads, dh = spec.d_head();
    if (queries.shape()[1] != d || keys.shape()[1] != d || values.shape()[1] != d)
        throw ShapeError("attention: model width mismatch");

    auto split_heads = [&](const Tensor& x, std::size_t t) {
        return transpose(reshape(x, {t, h, dh}), {1, 0, 2});  // [H, t, dh]
    };
    Tensor q = split_heads(matmul(queries, p.wq), tq);
    Tensor k = split_heads(matmul(keys, p.wk), tk);
    Tensor v = split_heads(matmul(values, p.wv), tk);

    Tensor scores = scale(matmul(q, transpose(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (bias) {
        if (bias->shape() != Shape{h, tq, tk}) throw ShapeError("attention: bias shape mismatch");
        scores = add(scores, *bias);
    }
    if (additive_mask) {
        if (additive_mask->shape() != Shape{tq, tk}) throw ShapeError("attention: mask shape mismatch");
        std::vector<double> tiled(h * tq * tk);
        for (std::size_t hi = 0; hi < h; ++hi)
            std::copy(additive_mask->values().begin(), additive_mask->values().end(),
                      tiled.begin() + static_cast<std::ptrdiff_t>(hi * tq * tk));
        scores = add(scores, Tensor::from_values({h, tq, tk}, std::move(tiled)));
    }
    Tensor weights = softmax(scores);
    if (trace_weights) *trace_weights = weights.values();

    Tensor ctx = matmul(weights, v);                       // [H, tq, dh]
    ctx = reshape(transpose(ctx, {1, 0, 2}), {tq, d});     // [tq, d]
    return matmul(ctx, p.wo);
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

constexpr double kNormEps = 1e-6;

struct FeedForward {
    Tensor w1, w2;  // [d, ff], [ff, d]

    FeedForward() = default;
    FeedForward(std::size_t d, std::size_t ff, Rng& rng) {
        w1 = Tensor::param({d, ff}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
        w2 = Tensor::param({ff, d}, rng, 1.0 / std::sqrt(static_cast<double>(ff)));
    }

    Tensor forward(const Tensor& x) const { return matmul(relu(matmul(x, w1)), w2); }

    void collect(ParamList& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w1", w1);
        out.emplace_back(prefix + ".w2", w2);
    }
};

struct EncoderLayer {
    AttentionParams attn;
    FeedForward ff;
    Tensor norm_attn, norm_ff;

    EncoderLayer() = default;
    EncoderLayer(std::size_t d, std::size_t dff, Rng& rng)
        : attn(d, rng), ff(d, dff, rng), norm_attn(Tensor::param_zeros({d})), norm_ff(Tensor::param_zeros({d})) {
        norm_attn.values().assign(d, 1.0);
        norm_ff.values().assign(d, 1.0);
    }

    void collect(ParamList& out, const std::string& prefix) const {
        attn.collect(out, prefix + ".attn");
        ff.collect(out, prefix + ".ff");
        out.emplace_back(prefix + ".norm_attn", norm_attn);
        out.emplace_back(prefix + ".norm_ff", norm_ff);
    }
};

struct DecoderLayer {
    AttentionParams self_attn, cross_attn;
    FeedForward ff;
    Tensor norm_self, norm_cross, norm_ff;

    DecoderLayer() = default;
    DecoderLayer(std::size_t d, std::size_t dff, Rng& rng)
        : self_attn(d, rng),
          cross_attn(d, rng),
          ff(d, dff, rng),
          norm_self(Tensor::param_zeros({d})),
          norm_cross(Tensor::param_zeros({d})),
          norm_ff(Tensor::param_zeros({d})) {
        norm_self.values().assign(d, 1.0);
        norm_cross.values().assign(d, 1.0);
        norm_ff.values().assign(d, 1.0);
    }

    void collect(ParamList& out, const std::string& prefix) const {
        self_attn.collect(out, prefix + ".self");
        cross_attn.collect(out, prefix + ".cross");
        ff.collect(out, prefix + ".ff");
        out.emplace_back(prefix + ".norm_self", norm_self);
        out.emplace_back(prefix + ".norm_cross", norm_cross);
        out.emplace_back(prefix + ".norm_ff", norm_ff);
    }
};

// Pre-norm residual stack with a final normalization. The position bias is
// computed once and shared by every layer; masked keys receive exactly zero
// weight after the softmax of the additive mask.
inline Tensor encoder_forward(const std::vector<EncoderLayer>& layers, const Tensor& final_norm,
                              const AttentionSpec& spec, const Tensor& bias_table, const Tensor& input,
                              const Tensor* mask = nullptr, AttentionTrace* trace = nullptr) {
    if (input.ndim() != 2 || input.shape()[0] == 0) throw ValidationError("encoder: empty input sequence");
    std::size_t t = input.shape()[0];
    Tensor bias = position_bias(bias_table, spec, t, t, /*bidirectional=*/true);
    if (trace) {
        trace->weights.assign(layers.size(), {});
        trace->n_heads = spec.n_heads;
        trace->q_len = t;
        trace->k_len = t;
    }
    Tensor x = input;
    for (std::size_t li = 0; li < layers.size(); ++li) {
        const auto& layer = layers[li];
        Tensor h = rms_norm(x, layer.norm_attn, kNormEps);
        Tensor a = multi_head_attention(layer.attn, spec, h, h, h, mask, &bias,
                                        trace ? &trace->weights[li] : nullptr);
        x = add(x, a);
        Tensor f = layer.ff.forward(rms_norm(x, layer.norm_ff, kNormEps));
        x = add(x, f);
    }
    return rms_norm(x, final_norm, kNormEps);
}

// Decoder stack: causally masked self-attention, cross-attention over the
// memory, feed-forward. Output at position t is independent of target
// positions beyond t.
inline Tensor decoder_forward(const std::vector<DecoderLayer>& layers, const Tensor& final_norm,
                              const AttentionSpec& spec, const Tensor& bias_table, const Tensor& target_emb,
                              const Tensor& memory) {
    if (target_emb.ndim() != 2 || target_emb.shape()[0] == 0)
        throw ValidationError("decoder: empty target sequence");
    if (memory.ndim() != 2 || memory.shape()[0] == 0) throw ValidationError("decoder: empty memory");
    std::size_t t = target_emb.shape()[0];
    Tensor mask = causal_mask(t);
    Tensor bias = position_bias(bias_table, spec, t, t, /*bidirectional=*/false);
    Tensor x = target_emb;
    for (const auto& layer : layers) {
        Tensor h = rms_norm(x, layer.norm_self, kNormEps);
        x = add(x, multi_head_attention(layer.self_attn, spec, h, h, h, &mask, &bias));
        Tensor c = rms_norm(x, layer.norm_cross, kNormEps);
        x = add(x, multi_head_attention(layer.cross_attn, spec, c, memory, memory));
        Tensor f = layer.ff.forward(rms_norm(x, layer.norm_ff, kNormEps));
        x = add(x, f);
    }
    return rms_norm(x, final_norm, kNormEps);
}

}  // namespace hivt5
