// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "vaflow/nn/graph.hpp"
#include "vaflow/nn/params.hpp"

namespace vaflow::nn {

struct BlockCfg {
    int dim = 128;
    int heads = 4;
    double mlp_ratio = 4.0;

    int mlp_hidden() const { return std::max(1, static_cast<int>(std::lround(dim * mlp_ratio))); }
};

// Fetches parameters either as trainable tape nodes or as frozen constants,
// so the same builder serves training, evaluation and frozen towers.
template <typename S>
struct Params {
    Tape<S>* tape;
    bool trainable = true;
    NodeP<S> operator()(const std::string& name) const {
        return trainable ? tape->param(name) : tape->frozen(name);
    }
};

template <typename S>
void add_layernorm_params(ParamStore<S>& store, int dim, const std::string& prefix) {
    store.add_ones(prefix + "_g", 1, dim);
    store.add_zeros(prefix + "_b", 1, dim);
}

template <typename S>
void add_attention_params(ParamStore<S>& store, Rng& rng, int dim, const std::string& prefix) {
    for (const char* w : {"_wq", "_wk", "_wv", "_wo"}) store.add_glorot(prefix + w, dim, dim, rng);
    for (const char* b : {"_bq", "_bk", "_bv", "_bo"}) store.add_zeros(prefix + b, 1, dim);
}

template <typename S>
void add_mlp_params(ParamStore<S>& store, Rng& rng, const BlockCfg& cfg, const std::string& prefix) {
    store.add_glorot(prefix + "_w1", cfg.dim, cfg.mlp_hidden(), rng);
    store.add_zeros(prefix + "_b1", 1, cfg.mlp_hidden());
    store.add_glorot(prefix + "_w2", cfg.mlp_hidden(), cfg.dim, rng);
    store.add_zeros(prefix + "_b2", 1, cfg.dim);
}

template <typename S>
void add_encoder_block_params(ParamStore<S>& store, Rng& rng, const BlockCfg& cfg,
                              const std::string& prefix) {
    add_layernorm_params(store, cfg.dim, prefix + "/ln1");
    add_attention_params(store, rng, cfg.dim, prefix + "/attn");
    add_layernorm_params(store, cfg.dim, prefix + "/ln2");
    add_mlp_params(store, rng, cfg, prefix + "/mlp");
}

template <typename S>
void add_cross_block_params(ParamStore<S>& store, Rng& rng, const BlockCfg& cfg,
                            const std::string& prefix) {
    add_encoder_block_params(store, rng, cfg, prefix);
    add_layernorm_params(store, cfg.dim, prefix + "/lnx");
    add_layernorm_params(store, cfg.dim, prefix + "/lnkv");
    add_attention_params(store, rng, cfg.dim, prefix + "/cross");
}

// One attention sublayer: project, attend, project back.
template <typename S>
NodeP<S> attention_sublayer(const Params<S>& P, NodeP<S> q_in, NodeP<S> kv_in, int batch,
                            const BlockCfg& cfg, const std::string& prefix,
                            const Mat<S>* bias = nullptr) {
    auto q = affine(q_in, P(prefix + "_wq"), P(prefix + "_bq"));
    auto k = affine(kv_in, P(prefix + "_wk"), P(prefix + "_bk"));
    auto v = affine(kv_in, P(prefix + "_wv"), P(prefix + "_bv"));
    auto att = attention(q, k, v, batch, cfg.heads, bias);
    return affine(att, P(prefix + "_wo"), P(prefix + "_bo"));
}

template <typename S>
NodeP<S> mlp_sublayer(const Params<S>& P, NodeP<S> x, const std::string& prefix) {
    return affine(gelu(affine(x, P(prefix + "_w1"), P(prefix + "_b1"))), P(prefix + "_w2"),
                  P(prefix + "_b2"));
}

// Pre-norm residual block: x += attn(LN(x)); x += mlp(LN(x)).
template <typename S>
NodeP<S> encoder_block(const Params<S>& P, NodeP<S> x, int batch, const BlockCfg& cfg,
                       const std::string& prefix, const Mat<S>* self_bias = nullptr) {
    auto h = layernorm(x, P(prefix + "/ln1_g"), P(prefix + "/ln1_b"));
    x = add(x, attention_sublayer(P, h, h, batch, cfg, prefix + "/attn", self_bias));
    auto h2 = layernorm(x, P(prefix + "/ln2_g"), P(prefix + "/ln2_b"));
    return add(x, mlp_sublayer(P, h2, prefix + "/mlp"));
}

// Pre-norm block with an extra cross-attention sublayer between
// self-attention and the MLP. Queries come from x, keys and values from kv.
template <typename S>
NodeP<S> cross_block(const Params<S>& P, NodeP<S> x, NodeP<S> kv, int batch, const BlockCfg& cfg,
                     const std::string& prefix, const Mat<S>* self_bias = nullptr,
                     const Mat<S>* cross_bias = nullptr) {
    auto h = layernorm(x, P(prefix + "/ln1_g"), P(prefix + "/ln1_b"));
    x = add(x, attention_sublayer(P, h, h, batch, cfg, prefix + "/attn", self_bias));
    auto q = layernorm(x, P(prefix + "/lnx_g"), P(prefix + "/lnx_b"));
    auto k = layernorm(kv, P(prefix + "/lnkv_g"), P(prefix + "/lnkv_b"));
    x = add(x, attention_sublayer(P, q, k, batch, cfg, prefix + "/cross", cross_bias));
    auto h2 = layernorm(x, P(prefix + "/ln2_g"), P(prefix + "/ln2_b"));
    return add(x, mlp_sublayer(P, h2, prefix + "/mlp"));
}

template <typename S>
void add_encoder_stack_params(ParamStore<S>& store, Rng& rng, const BlockCfg& cfg, int depth,
                              const std::string& prefix) {
    for (int d = 0; d < depth; ++d)
        add_encoder_block_params(store, rng, cfg, prefix + "/blk" + std::to_string(d));
}

// Plain pre-norm transformer stack; depth 0 passes tokens through untouched.
template <typename S>
NodeP<S> encoder_stack(const Params<S>& P, NodeP<S> x, int batch, const BlockCfg& cfg, int depth,
                       const std::string& prefix, const Mat<S>* self_bias = nullptr) {
    for (int d = 0; d < depth; ++d)
        x = encoder_block(P, x, batch, cfg, prefix + "/blk" + std::to_string(d), self_bias);
    return x;
}

}  // namespace vaflow::nn
