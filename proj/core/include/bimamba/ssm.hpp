#pragma once

#include <utility>

#include "bimamba/tensor.hpp"

namespace bimamba::ssm {

enum class Direction { Forward, Backward };
enum class ScanMode { Sequential, Parallel };
enum class Discretization { Multiplication, Exponential };

// Per-direction weights. The state matrix is stored as a_log with
// A = -exp(a_log), which keeps every entry of A strictly negative.
struct SsmDirectionParams {
    Tensor a_log;        // [E, N]
    Tensor delta_low;    // [E, R], step-size generator, low-rank factor
    Tensor delta_up;     // [R, E]
    Tensor delta_bias;   // [E]
    Tensor b_weight;     // [E, N]
    Tensor c_weight;     // [E, N]
    Tensor conv_kernel;  // [E, K]
    Tensor conv_bias;    // [E]
    Direction direction = Direction::Forward;

    static SsmDirectionParams init(i64 expand_dim, i64 state_dim, i64 conv_width,
                                   i64 delta_rank, Direction dir, u64 seed,
                                   Dtype dt = Dtype::Float32);

    Tensor state_matrix() const;  // A = -exp(a_log), differentiable
};

// Position-dependent scan inputs derived from the projected sequence.
struct SsmInputs {
    Tensor delta;  // [L, E], strictly positive
    Tensor b;      // [L, N]
    Tensor c;      // [L, N]
};

SsmInputs generate_ssm_inputs(const Tensor& x_prime, const SsmDirectionParams& params);

// Discrete-step coefficients. b_bar_x holds the discrete input matrix already
// multiplied by the input value, i.e. b_bar[t,e,:] * x'[t,e].
struct ScanCoefficients {
    Tensor a_bar;    // [L, E, N]
    Tensor b_bar_x;  // [L, E, N]
    Tensor c;        // [L, N]
};

// (a_bar, b_bar) from the step sizes. Multiplication rule:
// a_bar[t,e,n] = delta[t,e]*A[e,n], b_bar[t,e,n] = delta[t,e]*B[t,n].
// The exponential rule replaces a_bar with exp(delta*A).
std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& a,
                                     const Tensor& b,
                                     Discretization rule = Discretization::Multiplication);

ScanCoefficients make_scan_coefficients(const Tensor& x_prime,
                                        const SsmDirectionParams& params,
                                        Discretization rule);

// h_t = a_bar[t] (*) h_{t-1} + b_bar_x[t], y[t,e] = sum_n c[t,n] h_t[e,n],
// with h_0 = 0. The state update is elementwise over [E, N].
Tensor selective_scan_sequential(const ScanCoefficients& coef);

// Same recurrence evaluated as an associative prefix scan with combine
// (a1,b1)(a2,b2) = (a1*a2, a2*b1 + b2); O(L*E*N) work, fixed reduction tree.
Tensor selective_scan_parallel(const ScanCoefficients& coef);

// One application of the combine operator; exposed for property tests.
std::pair<Tensor, Tensor> scan_combine(const Tensor& a1, const Tensor& b1,
                                       const Tensor& a2, const Tensor& b2);

// Full pipeline on a projected sequence in source order. The backward
// direction reverses the sequence, scans, and reverses the output, so
// position t conditions on positions >= t.
Tensor directional_scan(const Tensor& x_prime, const SsmDirectionParams& params,
                        ScanMode mode,
                        Discretization rule = Discretization::Multiplication);

// Pipeline without the direction handling (always scans rows top down).
// With recording off and sequential mode this streams the state and never
// materializes the [L, E, N] coefficient tensors.
Tensor scan_pipeline(const Tensor& x_prime, const SsmDirectionParams& params,
                     ScanMode mode, Discretization rule);

}  // namespace bimamba::ssm
