#include "bimamba/ssm.hpp"

#include <cmath>
#include <vector>

namespace bimamba::ssm {

SsmDirectionParams SsmDirectionParams::init(i64 expand_dim, i64 state_dim, i64 conv_width,
                                            i64 delta_rank, Direction dir, u64 seed,
                                            Dtype dt) {
    if (expand_dim < 1 || state_dim < 1 || conv_width < 1 || delta_rank < 1)
        throw ShapeError("ssm params: all dimensions must be positive");
    SsmDirectionParams p;
    p.direction = dir;

    // A[e,n] = -(n+1) at start, i.e. a_log[e,n] = log(n+1).
    {
        std::vector<double> v(static_cast<std::size_t>(expand_dim * state_dim));
        for (i64 e = 0; e < expand_dim; ++e)
            for (i64 n = 0; n < state_dim; ++n)
                v[static_cast<std::size_t>(e * state_dim + n)] =
                    std::log(static_cast<double>(n + 1));
        p.a_log = Tensor::from_values({expand_dim, state_dim}, v, dt, true);
    }

    double se = 1.0 / std::sqrt(static_cast<double>(expand_dim));
    double sr = 1.0 / std::sqrt(static_cast<double>(delta_rank));
    double sk = 1.0 / std::sqrt(static_cast<double>(conv_width));
    p.delta_low = Tensor::uniform({expand_dim, delta_rank}, mix_seed(seed, 1), -se, se, dt, true);
    p.delta_up = Tensor::uniform({delta_rank, expand_dim}, mix_seed(seed, 2), -sr, sr, dt, true);

    // delta_bias = softplus^-1 of timescales spread log-uniformly in [1e-3, 1e-1],
    // so softplus(delta_bias) recovers them at zero input.
    {
        Rng rng(mix_seed(seed, 3));
        std::vector<double> v(static_cast<std::size_t>(expand_dim));
        for (auto& x : v) {
            double dt0 = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            x = inverse_softplus(dt0);
        }
        p.delta_bias = Tensor::from_values({expand_dim}, v, dt, true);
    }

    p.b_weight = Tensor::uniform({expand_dim, state_dim}, mix_seed(seed, 4), -se, se, dt, true);
    p.c_weight = Tensor::uniform({expand_dim, state_dim}, mix_seed(seed, 5), -se, se, dt, true);
    p.conv_kernel = Tensor::uniform({expand_dim, conv_width}, mix_seed(seed, 6), -sk, sk, dt, true);
    p.conv_bias = Tensor::uniform({expand_dim}, mix_seed(seed, 7), -sk, sk, dt, true);
    return p;
}

Tensor SsmDirectionParams::state_matrix() const { return neg(bimamba::exp(a_log)); }

SsmInputs generate_ssm_inputs(const Tensor& x_prime, const SsmDirectionParams& params) {
    SsmInputs out;
    Tensor pre = add(matmul(matmul(x_prime, params.delta_low), params.delta_up),
                     params.delta_bias);
    out.delta = softplus(pre);
    out.b = matmul(x_prime, params.b_weight);
    out.c = matmul(x_prime, params.c_weight);
    return out;
}

std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& a, const Tensor& b,
                                     Discretization rule) {
    if (delta.rank() != 2 || a.rank() != 2 || b.rank() != 2)
        throw ShapeError("discretize: expects delta [L,E], a [E,N], b [L,N]");
    i64 L = delta.dim(0), E = delta.dim(1), N = a.dim(1);
    if (a.dim(0) != E || b.dim(0) != L || b.dim(1) != N)
        throw ShapeError("discretize: inconsistent operand shapes");
    Tensor dcol = reshape(delta, {L, E, 1});
    Tensor a_bar = mul(dcol, a);  // [L,E,1] x [E,N] -> [L,E,N]
    if (rule == Discretization::Exponential) a_bar = bimamba::exp(a_bar);
    Tensor b_bar = mul(dcol, reshape(b, {L, 1, N}));
    return {a_bar, b_bar};
}

ScanCoefficients make_scan_coefficients(const Tensor& x_prime,
                                        const SsmDirectionParams& params,
                                        Discretization rule) {
    SsmInputs in = generate_ssm_inputs(x_prime, params);
    ScanCoefficients coef;
    coef.a_bar = scale_expand(in.delta, params.state_matrix());
    if (rule == Discretization::Exponential) coef.a_bar = bimamba::exp(coef.a_bar);
    // b_bar[t,e,:] * x'[t,e] with the scalar product (delta*x') folded first
    coef.b_bar_x = per_row_outer(mul(in.delta, x_prime), in.b);
    coef.c = in.c;
    return coef;
}

static void check_coef(const ScanCoefficients& coef) {
    if (coef.a_bar.rank() != 3 || coef.b_bar_x.rank() != 3 || coef.c.rank() != 2)
        throw ShapeError("scan: expects a_bar [L,E,N], b_bar_x [L,E,N], c [L,N]");
    i64 L = coef.a_bar.dim(0), E = coef.a_bar.dim(1), N = coef.a_bar.dim(2);
    if (coef.b_bar_x.dim(0) != L || coef.b_bar_x.dim(1) != E || coef.b_bar_x.dim(2) != N ||
        coef.c.dim(0) != L || coef.c.dim(1) != N)
        throw ShapeError("scan: coefficient shapes disagree");
}

namespace {

template <typename T>
void scan_seq_kernel(const T* a, const T* bx, const T* c, T* y, i64 L, i64 E, i64 N) {
    std::vector<T> h(static_cast<std::size_t>(E * N), static_cast<T>(0));
    for (i64 t = 0; t < L; ++t) {
        const T* at = a + t * E * N;
        const T* bxt = bx + t * E * N;
        const T* ct = c + t * N;
        T* yrow = y + t * E;
        for (i64 e = 0; e < E; ++e) {
            const T* ae = at + e * N;
            const T* be = bxt + e * N;
            T* he = h.data() + e * N;
            T acc = 0;
            for (i64 n = 0; n < N; ++n) {
                he[n] = ae[n] * he[n] + be[n];
                acc += ct[n] * he[n];
            }
            yrow[e] = acc;
        }
    }
}

// Streaming form used when no gradient is being recorded: coefficients are
// produced on the fly, state lives in an [E, N] buffer, memory stays O(L*E).
template <typename T>
void scan_seq_fused(const T* delta, const T* a, const T* b, const T* c, const T* xp,
                    T* y, i64 L, i64 E, i64 N, bool exponential) {
    std::vector<T> h(static_cast<std::size_t>(E * N), static_cast<T>(0));
    for (i64 t = 0; t < L; ++t) {
        const T* drow = delta + t * E;
        const T* brow = b + t * N;
        const T* crow = c + t * N;
        const T* xrow = xp + t * E;
        T* yrow = y + t * E;
        for (i64 e = 0; e < E; ++e) {
            T d = drow[e];
            T x = xrow[e];
            const T* arow = a + e * N;
            T* he = h.data() + e * N;
            T acc = 0;
            T dx = d * x;
            for (i64 n = 0; n < N; ++n) {
                T abar = d * arow[n];
                if (exponential) abar = static_cast<T>(std::exp(static_cast<double>(abar)));
                he[n] = abar * he[n] + dx * brow[n];
                acc += crow[n] * he[n];
            }
            yrow[e] = acc;
        }
    }
}

// Tape-friendly sequential scan: one small op chain per step.
Tensor scan_seq_recorded(const ScanCoefficients& coef) {
    i64 L = coef.a_bar.dim(0), E = coef.a_bar.dim(1), N = coef.a_bar.dim(2);
    Tensor h = Tensor::zeros({1, E, N}, coef.a_bar.dtype());
    (void)E;
    std::vector<Tensor> ys;
    ys.reserve(static_cast<std::size_t>(L));
    for (i64 t = 0; t < L; ++t) {
        Tensor at = slice_rows(coef.a_bar, t, 1);
        Tensor bt = slice_rows(coef.b_bar_x, t, 1);
        h = mul_add(at, h, bt);
        ys.push_back(state_contract(h, slice_rows(coef.c, t, 1)));  // [1, E]
    }
    return concat_rows(ys);
}

// Inclusive prefix scan over rows of (a, b) under the combine operator.
// Two-pass structure: pair adjacent elements, recurse, then fill the evens.
// The additive prefix never reads the multiplicative prefix (the combine
// uses the element value a2, not its prefix), so callers that start from a
// zero state can skip the multiplicative chain entirely.
std::pair<Tensor, Tensor> scan_prefixes(const Tensor& a, const Tensor& b,
                                        bool need_mul_prefix) {
    i64 L = a.dim(0);
    if (L == 1) return {a, b};
    if (L % 2 == 1) {
        auto [pa, pb] = scan_prefixes(slice_rows(a, 0, L - 1), slice_rows(b, 0, L - 1),
                                      need_mul_prefix);
        Tensor at = slice_rows(a, L - 1, 1);
        Tensor bt = slice_rows(b, L - 1, 1);
        Tensor lb = select_row(pb, L - 2);
        Tensor tb = mul_add(lb, at, bt);
        Tensor pa_full;
        if (need_mul_prefix)
            pa_full = concat_rows({pa, mul(select_row(pa, L - 2), at)});
        return {pa_full, concat_rows({pb, tb})};
    }
    i64 half = L / 2;
    Tensor ae = stride2_rows(a, 0), ao = stride2_rows(a, 1);
    Tensor be = stride2_rows(b, 0), bo = stride2_rows(b, 1);
    Tensor ca = mul(ae, ao);
    Tensor cb = mul_add(be, ao, bo);
    auto [sa, sb] = scan_prefixes(ca, cb, need_mul_prefix);

    Shape row_shape = a.shape();
    row_shape[0] = 1;
    Tensor sb_shift;
    if (half == 1) {
        sb_shift = Tensor::zeros(row_shape, a.dtype());
    } else {
        sb_shift = concat_rows({Tensor::zeros(row_shape, a.dtype()),
                                slice_rows(sb, 0, half - 1)});
    }
    Tensor pe_b = mul_add(sb_shift, ae, be);
    Tensor pb = interleave_rows(pe_b, sb);

    Tensor pa;
    if (need_mul_prefix) {
        Tensor sa_shift;
        if (half == 1) {
            sa_shift = Tensor::ones(row_shape, a.dtype());
        } else {
            sa_shift = concat_rows({Tensor::ones(row_shape, a.dtype()),
                                    slice_rows(sa, 0, half - 1)});
        }
        pa = interleave_rows(mul(sa_shift, ae), sa);
    }
    return {pa, pb};
}

}  // namespace

Tensor selective_scan_sequential(const ScanCoefficients& coef) {
    check_coef(coef);
    bool record = grad_enabled() &&
                  (coef.a_bar.requires_grad() || coef.b_bar_x.requires_grad() ||
                   coef.c.requires_grad());
    if (record) return scan_seq_recorded(coef);
    i64 L = coef.a_bar.dim(0), E = coef.a_bar.dim(1), N = coef.a_bar.dim(2);
    Tensor y = Tensor::zeros({L, E}, coef.a_bar.dtype());
    if (coef.a_bar.dtype() == Dtype::Float32)
        scan_seq_kernel(coef.a_bar.data<float>().data(), coef.b_bar_x.data<float>().data(),
                        coef.c.data<float>().data(), y.mutable_data<float>().data(), L, E, N);
    else
        scan_seq_kernel(coef.a_bar.data<double>().data(), coef.b_bar_x.data<double>().data(),
                        coef.c.data<double>().data(), y.mutable_data<double>().data(), L, E, N);
    return y;
}

Tensor selective_scan_parallel(const ScanCoefficients& coef) {
    check_coef(coef);
    // h_0 = 0, so only the additive prefix feeds the output
    auto [pa, pb] = scan_prefixes(coef.a_bar, coef.b_bar_x, false);
    (void)pa;
    return state_contract(pb, coef.c);
}

std::pair<Tensor, Tensor> scan_combine(const Tensor& a1, const Tensor& b1,
                                       const Tensor& a2, const Tensor& b2) {
    return {mul(a1, a2), add(mul(b1, a2), b2)};
}

Tensor scan_pipeline(const Tensor& x_prime, const SsmDirectionParams& params,
                     ScanMode mode, Discretization rule) {
    if (x_prime.rank() != 2) throw ShapeError("scan_pipeline: expects x' [L,E]");
    bool record = grad_enabled() && (x_prime.requires_grad() || params.a_log.requires_grad());
    if (!record && mode == ScanMode::Sequential) {
        NoGradGuard ng;
        SsmInputs in = generate_ssm_inputs(x_prime, params);
        Tensor a = params.state_matrix();
        i64 L = x_prime.dim(0), E = x_prime.dim(1), N = a.dim(1);
        Tensor y = Tensor::zeros({L, E}, x_prime.dtype());
        bool expo = rule == Discretization::Exponential;
        if (x_prime.dtype() == Dtype::Float32)
            scan_seq_fused(in.delta.data<float>().data(), a.data<float>().data(),
                           in.b.data<float>().data(), in.c.data<float>().data(),
                           x_prime.data<float>().data(), y.mutable_data<float>().data(),
                           L, E, N, expo);
        else
            scan_seq_fused(in.delta.data<double>().data(), a.data<double>().data(),
                           in.b.data<double>().data(), in.c.data<double>().data(),
                           x_prime.data<double>().data(), y.mutable_data<double>().data(),
                           L, E, N, expo);
        return y;
    }
    ScanCoefficients coef = make_scan_coefficients(x_prime, params, rule);
    return mode == ScanMode::Sequential ? selective_scan_sequential(coef)
                                        : selective_scan_parallel(coef);
}

Tensor directional_scan(const Tensor& x_prime, const SsmDirectionParams& params,
                        ScanMode mode, Discretization rule) {
    if (params.direction == Direction::Forward)
        return scan_pipeline(x_prime, params, mode, rule);
    return reverse_rows(scan_pipeline(reverse_rows(x_prime), params, mode, rule));
}

}  // namespace bimamba::ssm
