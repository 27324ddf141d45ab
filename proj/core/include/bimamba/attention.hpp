#pragma once

#include "bimamba/tensor.hpp"

namespace bimamba::attn {

struct AttnConfig {
    i64 embed_dim = 64;
    i64 heads = 4;
    i64 mlp_hidden = 0;  // 0 selects the conventional 4x width

    i64 head_dim() const { return embed_dim / heads; }
    i64 mlp_width() const { return mlp_hidden > 0 ? mlp_hidden : 4 * embed_dim; }
    void validate() const {
        if (embed_dim < 1 || heads < 1)
            throw ContractError("attn config: dimensions must be positive");
        if (embed_dim % heads != 0)
            throw ContractError("attn config: embed_dim must be divisible by heads");
    }
};

struct AttnWeights {
    Tensor wq, wk, wv, wo;          // [D, D]
    Tensor norm1_gain, norm2_gain;  // [D]
    Tensor mlp_w1, mlp_b1;          // [D, H], [H]
    Tensor mlp_w2, mlp_b2;          // [H, D], [D]

    static AttnWeights init(const AttnConfig& cfg, u64 seed, Dtype dt = Dtype::Float32);
};

// Scaled dot-product attention over all heads; forward only. The [heads*L, L]
// score tensor is materialized in a single buffer (softmax runs in place), so
// the activation accountant sees the quadratic cost directly.
Tensor mhsa_forward(const Tensor& tokens, const AttnConfig& cfg, const AttnWeights& w);

// Pre-norm block: tokens + mhsa(norm(tokens)), then + mlp(norm(.)).
Tensor attn_block_forward(const Tensor& tokens, const AttnConfig& cfg, const AttnWeights& w);

}  // namespace bimamba::attn
