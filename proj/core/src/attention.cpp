#include "bimamba/attention.hpp"

#include <cmath>
#include <vector>

namespace bimamba::attn {

AttnWeights AttnWeights::init(const AttnConfig& cfg, u64 seed, Dtype dt) {
    cfg.validate();
    i64 d = cfg.embed_dim, h = cfg.mlp_width();
    double sd = 1.0 / std::sqrt(static_cast<double>(d));
    double sh = 1.0 / std::sqrt(static_cast<double>(h));
    AttnWeights w;
    w.wq = Tensor::uniform({d, d}, mix_seed(seed, 1), -sd, sd, dt);
    w.wk = Tensor::uniform({d, d}, mix_seed(seed, 2), -sd, sd, dt);
    w.wv = Tensor::uniform({d, d}, mix_seed(seed, 3), -sd, sd, dt);
    w.wo = Tensor::uniform({d, d}, mix_seed(seed, 4), -sd, sd, dt);
    w.norm1_gain = Tensor::ones({d}, dt);
    w.norm2_gain = Tensor::ones({d}, dt);
    w.mlp_w1 = Tensor::uniform({d, h}, mix_seed(seed, 5), -sd, sd, dt);
    w.mlp_b1 = Tensor::uniform({h}, mix_seed(seed, 6), -sd, sd, dt);
    w.mlp_w2 = Tensor::uniform({h, d}, mix_seed(seed, 7), -sh, sh, dt);
    w.mlp_b2 = Tensor::uniform({d}, mix_seed(seed, 8), -sh, sh, dt);
    return w;
}

namespace {

template <typename T>
void fill_scores(const T* q, const T* k, T* scores, i64 L, i64 d, i64 heads, i64 dh) {
    double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    bool par = L * L * d >= (1 << 20) && thread_count() > 1;
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (par)
#endif
    for (i64 i = 0; i < L; ++i) {
        for (i64 h = 0; h < heads; ++h) {
            const T* qrow = q + i * d + h * dh;
            T* srow = scores + (h * L + i) * L;
            for (i64 j = 0; j < L; ++j) {
                const T* krow = k + j * d + h * dh;
                T acc = 0;
                for (i64 c = 0; c < dh; ++c) acc += qrow[c] * krow[c];
                srow[j] = static_cast<T>(acc * inv);
            }
        }
    }
    (void)par;
}

template <typename T>
void softmax_rows_inplace(T* scores, i64 rows, i64 len) {
    for (i64 r = 0; r < rows; ++r) {
        T* row = scores + r * len;
        double mx = -1e300;
        for (i64 j = 0; j < len; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double sum = 0;
        for (i64 j = 0; j < len; ++j) {
            double e = std::exp(static_cast<double>(row[j]) - mx);
            row[j] = static_cast<T>(e);
            sum += e;
        }
        for (i64 j = 0; j < len; ++j)
            row[j] = static_cast<T>(static_cast<double>(row[j]) / sum);
    }
}

template <typename T>
void weighted_values(const T* scores, const T* v, T* ctx, i64 L, i64 d, i64 heads, i64 dh) {
    bool par = L * L * d >= (1 << 20) && thread_count() > 1;
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (par)
#endif
    for (i64 i = 0; i < L; ++i) {
        T* crow = ctx + i * d;
        for (i64 h = 0; h < heads; ++h) {
            const T* srow = scores + (h * L + i) * L;
            T* chead = crow + h * dh;
            for (i64 j = 0; j < L; ++j) {
                T p = srow[j];
                const T* vhead = v + j * d + h * dh;
                for (i64 c = 0; c < dh; ++c) chead[c] += p * vhead[c];
            }
        }
    }
    (void)par;
}

}  // namespace

Tensor mhsa_forward(const Tensor& tokens, const AttnConfig& cfg, const AttnWeights& w) {
    cfg.validate();
    NoGradGuard ng;  // comparison path carries no training graph
    if (tokens.rank() != 2 || tokens.dim(1) != cfg.embed_dim)
        throw ShapeError("mhsa_forward: expects tokens [L, embed_dim]");
    i64 L = tokens.dim(0), d = cfg.embed_dim, heads = cfg.heads, dh = cfg.head_dim();

    Tensor ctx;
    {
        Tensor scores = Tensor::uninitialized({heads * L, L}, tokens.dtype());
        {
            Tensor q = matmul(tokens, w.wq);
            Tensor k = matmul(tokens, w.wk);
            if (tokens.dtype() == Dtype::Float32)
                fill_scores(q.data<float>().data(), k.data<float>().data(),
                            scores.mutable_data<float>().data(), L, d, heads, dh);
            else
                fill_scores(q.data<double>().data(), k.data<double>().data(),
                            scores.mutable_data<double>().data(), L, d, heads, dh);
        }
        if (tokens.dtype() == Dtype::Float32)
            softmax_rows_inplace(scores.mutable_data<float>().data(), heads * L, L);
        else
            softmax_rows_inplace(scores.mutable_data<double>().data(), heads * L, L);

        Tensor v = matmul(tokens, w.wv);
        ctx = Tensor::zeros({L, d}, tokens.dtype());
        if (tokens.dtype() == Dtype::Float32)
            weighted_values(scores.data<float>().data(), v.data<float>().data(),
                            ctx.mutable_data<float>().data(), L, d, heads, dh);
        else
            weighted_values(scores.data<double>().data(), v.data<double>().data(),
                            ctx.mutable_data<double>().data(), L, d, heads, dh);
    }
    return matmul(ctx, w.wo);
}

Tensor attn_block_forward(const Tensor& tokens, const AttnConfig& cfg, const AttnWeights& w) {
    NoGradGuard ng;
    Tensor y;
    {
        Tensor normed = rms_norm(tokens, w.norm1_gain);
        Tensor m = mhsa_forward(normed, cfg, w);
        normed.release();
        y = add(tokens, m);
    }
    Tensor h1 = silu(add(matmul(rms_norm(y, w.norm2_gain), w.mlp_w1), w.mlp_b1));
    Tensor h2 = add(matmul(h1, w.mlp_w2), w.mlp_b2);
    h1.release();
    return add(y, h2);
}

}  // namespace bimamba::attn
